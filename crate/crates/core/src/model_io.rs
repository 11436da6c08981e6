//! Single-file tensor container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes        | content                                          |
//! |--------------|--------------------------------------------------|
//! | `0..8`       | magic `LPROBE01`                                 |
//! | `8..12`      | `u32` header length `H`                          |
//! | `12..12+H`   | UTF-8 JSON header: format version, metadata, manifest |
//! | remainder    | raw `f32` blob, tensors densely packed in manifest order |
//!
//! Tensors are packed in lexicographic name order, so writing the same map
//! twice produces identical bytes. Names under `golden.` are reserved for
//! conformance vectors and names under `feat.` for cached layer features.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::LayerFeatureStack;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"LPROBE01";
pub const FORMAT_VERSION: u32 = 1;

pub const GOLDEN_INPUT: &str = "golden.input";
pub const GOLDEN_LAYER_PREFIX: &str = "golden.layer.";

/// Well-known metadata keys.
pub mod keys {
    pub const FAMILY: &str = "family";
    pub const NUM_LAYERS: &str = "num_layers";
    pub const HIDDEN_DIM: &str = "hidden_dim";
    pub const NUM_HEADS: &str = "num_heads";
    pub const FFN_DIM: &str = "ffn_dim";
    pub const CONV_STACK: &str = "conv_stack";
    pub const CONV_NORM: &str = "conv_norm";
    pub const LAYER_NORM_EPS: &str = "layer_norm_eps";
    pub const POS_CONV_KERNEL: &str = "pos_conv_kernel";
    pub const POS_CONV_GROUPS: &str = "pos_conv_groups";
    pub const WIRING: &str = "wiring";
}

/// Tensor with a shape and `f32` payload.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorData {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_matrix(m: &Matrix<f32>) -> Self {
        Self {
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix<f32>> {
        match self.shape.as_slice() {
            [r, c] => Matrix::from_vec(*r, *c, self.data.clone()),
            other => Err(Error::Shape(format!(
                "expected 2-d tensor, got shape {other:?}"
            ))),
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bitwise_eq(&self, other: &TensorData) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorManifestEntry>,
}

/// A loaded container. Immutable after [`read_container`]; share it freely.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelContainer {
    pub manifest: Vec<TensorManifestEntry>,
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, TensorData>,
}

impl ModelContainer {
    pub fn tensor(&self, name: &str) -> Result<&TensorData> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Validation(format!("missing tensor {name:?}")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Validation(format!("missing metadata key {key:?}")))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        let raw = self.meta(key)?;
        raw.trim()
            .parse()
            .map_err(|_| Error::Validation(format!("metadata {key}={raw:?} is not an integer")))
    }

    /// SHA-256 over names, shapes and raw bits of every tensor, in name order.
    pub fn checksum(&self) -> String {
        tensors_checksum(self.tensors.iter())
    }
}

pub(crate) fn tensors_checksum<'a>(
    tensors: impl Iterator<Item = (&'a String, &'a TensorData)>,
) -> String {
    let mut hasher = Sha256::new();
    for (name, t) in tensors {
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        hasher.update((t.shape.len() as u64).to_le_bytes());
        for &d in &t.shape {
            hasher.update((d as u64).to_le_bytes());
        }
        for v in &t.data {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Serializes a tensor map into container bytes.
pub fn encode_container(
    tensors: &BTreeMap<String, TensorData>,
    metadata: &BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    if tensors.is_empty() {
        return Err(Error::Validation("empty container".into()));
    }
    let mut manifest = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        if name.is_empty() {
            return Err(Error::Validation("empty tensor name".into()));
        }
        if t.shape.contains(&0) {
            return Err(Error::Validation(format!(
                "tensor {name:?} has a zero dimension in shape {:?}",
                t.shape
            )));
        }
        let numel: usize = t.shape.iter().product();
        if numel != t.data.len() {
            return Err(Error::Shape(format!(
                "tensor {name:?}: shape {:?} vs {} values",
                t.shape,
                t.data.len()
            )));
        }
        if let Some(i) = t.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "tensor {name:?} has non-finite value {} at index {i}",
                t.data[i]
            )));
        }
        let byte_length = 4 * numel as u64;
        manifest.push(TensorManifestEntry {
            name: name.clone(),
            dtype: "f32".into(),
            shape: t.shape.clone(),
            byte_offset: offset,
            byte_length,
        });
        offset += byte_length;
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        metadata: metadata.clone(),
        tensors: manifest,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Validation(format!("header serialization: {e}")))?;
    let header_len = u32::try_from(header_bytes.len())
        .map_err(|_| Error::Validation("header exceeds 4 GiB".into()))?;

    let mut out = Vec::with_capacity(12 + header_bytes.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for t in tensors.values() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_container(
    tensors: &BTreeMap<String, TensorData>,
    metadata: &BTreeMap<String, String>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_container(tensors, metadata)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn decode_container(bytes: &[u8]) -> Result<ModelContainer> {
    if bytes.len() < 12 {
        return Err(Error::Container(format!(
            "file is only {} bytes",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Container("bad magic".into()));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Container(format!("header length {header_len} exceeds file")))?;
    let header_text = std::str::from_utf8(&bytes[12..header_end])
        .map_err(|e| Error::Container(format!("header is not UTF-8: {e}")))?;
    let header: Header = serde_json::from_str(header_text)
        .map_err(|e| Error::Container(format!("header parse: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(header.format_version));
    }

    let blob = &bytes[header_end..];
    let blob_len = blob.len() as u64;
    let mut tensors = BTreeMap::new();
    let mut expected_offset = 0u64;
    let mut by_offset: Vec<&TensorManifestEntry> = header.tensors.iter().collect();
    by_offset.sort_by_key(|e| e.byte_offset);
    for entry in by_offset {
        if entry.dtype != "f32" {
            return Err(Error::UnsupportedDtype(entry.dtype.clone()));
        }
        let numel = entry
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| Error::Container(format!("{}: shape overflows", entry.name)))?;
        if numel == 0 {
            return Err(Error::Container(format!(
                "{}: zero-sized tensor",
                entry.name
            )));
        }
        if numel.checked_mul(4) != Some(entry.byte_length) {
            return Err(Error::Container(format!(
                "{}: byte_length {} does not match shape {:?}",
                entry.name, entry.byte_length, entry.shape
            )));
        }
        if entry.byte_offset != expected_offset {
            return Err(Error::Container(format!(
                "{}: offset {} leaves a gap or overlap (expected {expected_offset})",
                entry.name, entry.byte_offset
            )));
        }
        let end = entry
            .byte_offset
            .checked_add(entry.byte_length)
            .ok_or_else(|| Error::Container(format!("{}: offset overflow", entry.name)))?;
        if end > blob_len {
            return Err(Error::BlobOverrun {
                name: entry.name.clone(),
                end,
                blob_len,
            });
        }
        let raw = &blob[entry.byte_offset as usize..end as usize];
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors
            .insert(
                entry.name.clone(),
                TensorData {
                    shape: entry.shape.clone(),
                    data,
                },
            )
            .is_some()
        {
            return Err(Error::Container(format!(
                "duplicate tensor name {:?}",
                entry.name
            )));
        }
        expected_offset = end;
    }
    if expected_offset != blob_len {
        return Err(Error::Container(format!(
            "{} trailing blob bytes not covered by the manifest",
            blob_len - expected_offset
        )));
    }
    Ok(ModelContainer {
        manifest: header.tensors,
        metadata: header.metadata,
        tensors,
    })
}

pub fn read_container(path: impl AsRef<Path>) -> Result<ModelContainer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes)
}

/// Golden conformance vectors: an input waveform and the reference hidden
/// state of every exported layer.
#[derive(Clone, Debug)]
pub struct GoldenVectors {
    pub input: Vec<f32>,
    pub expected: LayerFeatureStack<f32>,
}

pub fn golden_from_container(container: &ModelContainer) -> Result<GoldenVectors> {
    let input = container
        .tensors
        .get(GOLDEN_INPUT)
        .ok_or_else(|| Error::NoGoldenVectors(format!("{GOLDEN_INPUT} is missing")))?;
    if input.shape.len() != 1 {
        return Err(Error::Shape(format!(
            "{GOLDEN_INPUT} must be 1-d, got {:?}",
            input.shape
        )));
    }
    let hidden_dim = container.meta_usize(keys::HIDDEN_DIM)?;

    let mut layers = Vec::new();
    for l in 1.. {
        let Some(t) = container.tensors.get(&format!("{GOLDEN_LAYER_PREFIX}{l}")) else {
            break;
        };
        let m = t.to_matrix()?;
        if m.cols() != hidden_dim {
            return Err(Error::Shape(format!(
                "golden.layer.{l} has width {} but metadata hidden_dim is {hidden_dim}",
                m.cols()
            )));
        }
        layers.push(m);
    }
    if layers.is_empty() {
        return Err(Error::NoGoldenVectors("no golden.layer.<l> tensors".into()));
    }
    if let Ok(num_layers) = container.meta_usize(keys::NUM_LAYERS) {
        if layers.len() > num_layers {
            return Err(Error::Shape(format!(
                "{} golden layers but metadata num_layers is {num_layers}",
                layers.len()
            )));
        }
    }
    let expected = LayerFeatureStack::new("golden", layers)?;
    Ok(GoldenVectors {
        input: input.data.clone(),
        expected,
    })
}

pub fn load_golden_vectors(path: impl AsRef<Path>) -> Result<GoldenVectors> {
    golden_from_container(&read_container(path)?)
}
