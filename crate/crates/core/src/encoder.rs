//! Frozen speech encoder: convolutional front-end, convolutional positional
//! embedding and a stack of pre-norm transformer blocks.
//!
//! Wiring, fixed so that exported checkpoints can be checked against golden
//! vectors:
//!
//! 1. conv stack over the raw waveform, each layer `conv -> [layer norm] -> GELU`,
//!    no padding, no conv bias;
//! 2. feature projection `layer norm(C) -> linear(C -> d)`;
//! 3. `x + GELU(grouped_conv(x))` positional embedding, kernel `K`, padding `K/2`,
//!    the trailing frame dropped when `K` is even;
//! 4. transformer blocks
//!    `x += attn(LN1(x)); x += fc2(GELU(fc1(LN2(x))))`.
//!
//! Hidden state `l` (1-based) is the output of block `l`. The projected conv
//! output is not a hidden state. Weight matrices use the `[out, in]` layout.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::audio::AudioSegment;
use crate::error::{Error, Result};
use crate::model_io::{keys, tensors_checksum, ModelContainer, TensorData};
use crate::scalar::{softmax_in_place, Scalar};
use crate::tensor::{dot, Matrix};

/// Wiring tag stored in container metadata. Containers declaring anything
/// else are refused.
pub const WIRING: &str = "prenorm-gelu-posconv-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvLayerSpec {
    pub const fn new(channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            channels,
            kernel,
            stride,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub conv_stack: Vec<ConvLayerSpec>,
    /// Layer norm after every conv layer (the "layer" feature-extractor norm).
    pub conv_layer_norm: bool,
    pub layer_norm_eps: f32,
    pub pos_conv_kernel: usize,
    pub pos_conv_groups: usize,
}

/// 512 channels, 25 ms receptive field, 20 ms hop at 16 kHz.
pub fn default_conv_stack(channels: usize) -> Vec<ConvLayerSpec> {
    let kernels = [10, 3, 3, 3, 3, 2, 2];
    let strides = [5, 2, 2, 2, 2, 2, 2];
    kernels
        .iter()
        .zip(strides)
        .map(|(&k, s)| ConvLayerSpec::new(channels, k, s))
        .collect()
}

impl EncoderConfig {
    /// 12 layers, d = 768.
    pub fn base() -> Self {
        Self {
            num_layers: 12,
            hidden_dim: 768,
            num_heads: 12,
            ffn_dim: 3072,
            conv_stack: default_conv_stack(512),
            conv_layer_norm: false,
            layer_norm_eps: 1e-5,
            pos_conv_kernel: 128,
            pos_conv_groups: 16,
        }
    }

    /// 24 layers, d = 1024.
    pub fn large() -> Self {
        Self {
            num_layers: 24,
            hidden_dim: 1024,
            num_heads: 16,
            ffn_dim: 4096,
            conv_layer_norm: true,
            ..Self::base()
        }
    }

    /// Desk-scale encoder with the default conv geometry (201 frames for a
    /// 64,600-sample window) but few channels.
    pub fn toy(num_layers: usize, hidden_dim: usize) -> Self {
        Self {
            num_layers,
            hidden_dim,
            num_heads: 2,
            ffn_dim: 2 * hidden_dim,
            conv_stack: default_conv_stack(8),
            conv_layer_norm: false,
            layer_norm_eps: 1e-5,
            pos_conv_kernel: 4,
            pos_conv_groups: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if self.num_layers == 0 {
            errors.push("num_layers must be >= 1".to_string());
        }
        if self.hidden_dim < 2 {
            errors.push("hidden_dim must be >= 2".to_string());
        }
        if self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            errors.push(format!(
                "num_heads {} must divide hidden_dim {}",
                self.num_heads, self.hidden_dim
            ));
        }
        if self.ffn_dim == 0 {
            errors.push("ffn_dim must be >= 1".to_string());
        }
        if self.conv_stack.is_empty() {
            errors.push("conv_stack must be nonempty".to_string());
        }
        for (i, c) in self.conv_stack.iter().enumerate() {
            if c.channels == 0 || c.kernel == 0 || c.stride == 0 {
                errors.push(format!(
                    "conv layer {i}: channels, kernel, stride must be >= 1"
                ));
            }
        }
        if self.pos_conv_kernel == 0
            || self.pos_conv_groups == 0
            || !self.hidden_dim.is_multiple_of(self.pos_conv_groups)
        {
            errors.push(format!(
                "pos_conv_groups {} must divide hidden_dim {} and pos_conv_kernel must be >= 1",
                self.pos_conv_groups, self.hidden_dim
            ));
        }
        if !(self.layer_norm_eps.is_finite() && self.layer_norm_eps > 0.0) {
            errors.push("layer_norm_eps must be positive".to_string());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Samples needed for one output frame.
    pub fn receptive_field(&self) -> usize {
        self.conv_stack
            .iter()
            .rev()
            .fold(1, |r, c| (r - 1) * c.stride + c.kernel)
    }

    /// Frame count after the conv stack: `floor((len - k) / s) + 1` per layer.
    pub fn output_frames(&self, num_samples: usize) -> Result<usize> {
        let mut len = num_samples;
        for c in &self.conv_stack {
            if len < c.kernel {
                return Err(Error::InputTooShort {
                    len: num_samples,
                    needed: self.receptive_field(),
                });
            }
            len = (len - c.kernel) / c.stride + 1;
        }
        Ok(len)
    }

    fn conv_in_channels(&self, i: usize) -> usize {
        if i == 0 {
            1
        } else {
            self.conv_stack[i - 1].channels
        }
    }

    fn conv_out_channels(&self) -> usize {
        self.conv_stack.last().map_or(0, |c| c.channels)
    }

    /// Every tensor the architecture requires, with its shape.
    pub fn parameter_inventory(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.hidden_dim;
        let mut out = Vec::new();
        for (i, c) in self.conv_stack.iter().enumerate() {
            out.push((
                format!("encoder.conv.{i}.weight"),
                vec![c.channels, self.conv_in_channels(i), c.kernel],
            ));
            if self.conv_layer_norm {
                out.push((format!("encoder.conv.{i}.ln.weight"), vec![c.channels]));
                out.push((format!("encoder.conv.{i}.ln.bias"), vec![c.channels]));
            }
        }
        let c = self.conv_out_channels();
        out.push(("encoder.proj.ln.weight".into(), vec![c]));
        out.push(("encoder.proj.ln.bias".into(), vec![c]));
        out.push(("encoder.proj.weight".into(), vec![d, c]));
        out.push(("encoder.proj.bias".into(), vec![d]));
        out.push((
            "encoder.pos_conv.weight".into(),
            vec![d, d / self.pos_conv_groups.max(1), self.pos_conv_kernel],
        ));
        out.push(("encoder.pos_conv.bias".into(), vec![d]));
        for l in 1..=self.num_layers {
            let p = format!("encoder.layer.{l}");
            for (name, shape) in [
                ("ln1.weight", vec![d]),
                ("ln1.bias", vec![d]),
                ("attn.q.weight", vec![d, d]),
                ("attn.q.bias", vec![d]),
                ("attn.k.weight", vec![d, d]),
                ("attn.k.bias", vec![d]),
                ("attn.v.weight", vec![d, d]),
                ("attn.v.bias", vec![d]),
                ("attn.out.weight", vec![d, d]),
                ("attn.out.bias", vec![d]),
                ("ln2.weight", vec![d]),
                ("ln2.bias", vec![d]),
                ("ffn.fc1.weight", vec![self.ffn_dim, d]),
                ("ffn.fc1.bias", vec![self.ffn_dim]),
                ("ffn.fc2.weight", vec![d, self.ffn_dim]),
                ("ffn.fc2.bias", vec![d]),
            ] {
                out.push((format!("{p}.{name}"), shape));
            }
        }
        out
    }

    pub fn to_metadata(&self) -> BTreeMap<String, String> {
        let conv = self
            .conv_stack
            .iter()
            .map(|c| format!("{}:{}:{}", c.channels, c.kernel, c.stride))
            .collect::<Vec<_>>()
            .join(",");
        BTreeMap::from([
            (keys::NUM_LAYERS.to_string(), self.num_layers.to_string()),
            (keys::HIDDEN_DIM.to_string(), self.hidden_dim.to_string()),
            (keys::NUM_HEADS.to_string(), self.num_heads.to_string()),
            (keys::FFN_DIM.to_string(), self.ffn_dim.to_string()),
            (keys::CONV_STACK.to_string(), conv),
            (
                keys::CONV_NORM.to_string(),
                if self.conv_layer_norm {
                    "layer"
                } else {
                    "none"
                }
                .to_string(),
            ),
            (
                keys::LAYER_NORM_EPS.to_string(),
                format!("{:e}", self.layer_norm_eps),
            ),
            (
                keys::POS_CONV_KERNEL.to_string(),
                self.pos_conv_kernel.to_string(),
            ),
            (
                keys::POS_CONV_GROUPS.to_string(),
                self.pos_conv_groups.to_string(),
            ),
            (keys::WIRING.to_string(), WIRING.to_string()),
        ])
    }

    pub fn from_container(container: &ModelContainer) -> Result<Self> {
        let wiring = container.meta(keys::WIRING)?;
        if wiring != WIRING {
            return Err(Error::Validation(format!(
                "container wiring {wiring:?} is not supported (expected {WIRING:?})"
            )));
        }
        let conv_stack = container
            .meta(keys::CONV_STACK)?
            .split(',')
            .map(|spec| {
                let parts: Vec<usize> = spec
                    .split(':')
                    .map(|p| p.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Validation(format!("bad conv_stack entry {spec:?}")))?;
                match parts.as_slice() {
                    &[channels, kernel, stride] => Ok(ConvLayerSpec::new(channels, kernel, stride)),
                    _ => Err(Error::Validation(format!("bad conv_stack entry {spec:?}"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let conv_layer_norm = match container.metadata.get(keys::CONV_NORM).map(String::as_str) {
            None | Some("none") => false,
            Some("layer") => true,
            Some(other) => {
                return Err(Error::Validation(format!(
                    "unsupported conv_norm {other:?}"
                )))
            }
        };
        let eps_raw = container.meta(keys::LAYER_NORM_EPS)?;
        let layer_norm_eps = eps_raw
            .parse()
            .map_err(|_| Error::Validation(format!("bad layer_norm_eps {eps_raw:?}")))?;
        let config = Self {
            num_layers: container.meta_usize(keys::NUM_LAYERS)?,
            hidden_dim: container.meta_usize(keys::HIDDEN_DIM)?,
            num_heads: container.meta_usize(keys::NUM_HEADS)?,
            ffn_dim: container.meta_usize(keys::FFN_DIM)?,
            conv_stack,
            conv_layer_norm,
            layer_norm_eps,
            pos_conv_kernel: container.meta_usize(keys::POS_CONV_KERNEL)?,
            pos_conv_groups: container.meta_usize(keys::POS_CONV_GROUPS)?,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Hidden states `h_1 ..= h_X` for one utterance, each `T x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerFeatureStack<S> {
    pub utt_id: String,
    features: Vec<Matrix<S>>,
}

impl<S: Scalar> LayerFeatureStack<S> {
    pub fn new(utt_id: impl Into<String>, features: Vec<Matrix<S>>) -> Result<Self> {
        let Some(first) = features.first() else {
            return Err(Error::Shape(
                "feature stack needs at least one layer".into(),
            ));
        };
        let shape = first.shape();
        if let Some(l) = features.iter().position(|m| m.shape() != shape) {
            return Err(Error::Shape(format!(
                "layer {} has shape {:?}, layer 1 has {shape:?}",
                l + 1,
                features[l].shape()
            )));
        }
        Ok(Self {
            utt_id: utt_id.into(),
            features,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.features.len()
    }

    pub fn frame_count(&self) -> usize {
        self.features[0].rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.features[0].cols()
    }

    /// Hidden state of layer `l`, 1-based.
    pub fn layer(&self, l: usize) -> &Matrix<S> {
        &self.features[l - 1]
    }

    pub fn layers(&self) -> &[Matrix<S>] {
        &self.features
    }

    /// The first `x` layers.
    pub fn truncated(&self, x: usize) -> Result<Self> {
        if x == 0 || x > self.features.len() {
            return Err(Error::LayerRange {
                requested: x,
                available: self.features.len(),
            });
        }
        Ok(Self {
            utt_id: self.utt_id.clone(),
            features: self.features[..x].to_vec(),
        })
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.features.len() == other.features.len()
            && self.features.iter().zip(&other.features).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| {
                        x.to_f64().unwrap().to_bits() == y.to_f64().unwrap().to_bits()
                    })
            })
    }
}

/// Parameters of one transformer block.
#[derive(Clone, Debug)]
pub struct LayerParams<S> {
    pub ln1_weight: Vec<S>,
    pub ln1_bias: Vec<S>,
    pub q_weight: Matrix<S>,
    pub q_bias: Vec<S>,
    pub k_weight: Matrix<S>,
    pub k_bias: Vec<S>,
    pub v_weight: Matrix<S>,
    pub v_bias: Vec<S>,
    pub out_weight: Matrix<S>,
    pub out_bias: Vec<S>,
    pub ln2_weight: Vec<S>,
    pub ln2_bias: Vec<S>,
    pub fc1_weight: Matrix<S>,
    pub fc1_bias: Vec<S>,
    pub fc2_weight: Matrix<S>,
    pub fc2_bias: Vec<S>,
}

impl<S: Scalar> LayerParams<S> {
    /// All-zero projections with identity layer norms: the block is the identity.
    pub fn zeros(d: usize, ffn_dim: usize) -> Self {
        Self {
            ln1_weight: vec![S::one(); d],
            ln1_bias: vec![S::zero(); d],
            q_weight: Matrix::zeros(d, d),
            q_bias: vec![S::zero(); d],
            k_weight: Matrix::zeros(d, d),
            k_bias: vec![S::zero(); d],
            v_weight: Matrix::zeros(d, d),
            v_bias: vec![S::zero(); d],
            out_weight: Matrix::zeros(d, d),
            out_bias: vec![S::zero(); d],
            ln2_weight: vec![S::one(); d],
            ln2_bias: vec![S::zero(); d],
            fc1_weight: Matrix::zeros(ffn_dim, d),
            fc1_bias: vec![S::zero(); ffn_dim],
            fc2_weight: Matrix::zeros(d, ffn_dim),
            fc2_bias: vec![S::zero(); d],
        }
    }
}

pub fn gelu<S: Scalar>(x: S) -> S {
    let v = x.to_f64().unwrap();
    S::lit(0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)))
}

/// Layer norm over each row.
pub fn layer_norm<S: Scalar>(x: &Matrix<S>, weight: &[S], bias: &[S], eps: S) -> Matrix<S> {
    let d = x.cols();
    let n = S::of_usize(d);
    let mut out = Matrix::zeros(x.rows(), d);
    for t in 0..x.rows() {
        let row = x.row(t);
        let mean = row.iter().copied().sum::<S>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
        let inv = S::one() / (var + eps).sqrt();
        for (j, o) in out.row_mut(t).iter_mut().enumerate() {
            *o = (row[j] - mean) * inv * weight[j] + bias[j];
        }
    }
    out
}

fn linear<S: Scalar>(x: &Matrix<S>, weight: &Matrix<S>, bias: &[S]) -> Matrix<S> {
    let mut y = x.matmul_t(weight);
    y.add_row_vector(bias);
    y
}

/// One pre-norm transformer block. Fails on any non-finite output.
pub fn transformer_layer<S: Scalar>(
    input: &Matrix<S>,
    params: &LayerParams<S>,
    config: &EncoderConfig,
) -> Result<Matrix<S>> {
    let (t_len, d) = input.shape();
    if d != config.hidden_dim {
        return Err(Error::Shape(format!(
            "layer input width {d}, config hidden_dim {}",
            config.hidden_dim
        )));
    }
    let eps = S::lit(config.layer_norm_eps as f64);
    let heads = config.num_heads;
    let head_dim = d / heads;
    let scale = S::one() / S::of_usize(head_dim).sqrt();

    let a = layer_norm(input, &params.ln1_weight, &params.ln1_bias, eps);
    let q = linear(&a, &params.q_weight, &params.q_bias);
    let k = linear(&a, &params.k_weight, &params.k_bias);
    let v = linear(&a, &params.v_weight, &params.v_bias);

    let mut context = Matrix::zeros(t_len, d);
    let mut scores = vec![S::zero(); t_len];
    for h in 0..heads {
        let cols = h * head_dim..(h + 1) * head_dim;
        for t in 0..t_len {
            let q_row = &q.row(t)[cols.clone()];
            for (s, score) in scores.iter_mut().enumerate() {
                *score = dot(q_row, &k.row(s)[cols.clone()]) * scale;
            }
            softmax_in_place(&mut scores);
            let ctx = &mut context.row_mut(t)[cols.clone()];
            for (s, &p) in scores.iter().enumerate() {
                for (c, &vv) in ctx.iter_mut().zip(&v.row(s)[cols.clone()]) {
                    *c += p * vv;
                }
            }
        }
    }
    let mut x = input.clone();
    x.add_assign(&linear(&context, &params.out_weight, &params.out_bias));

    let b = layer_norm(&x, &params.ln2_weight, &params.ln2_bias, eps);
    let hidden = linear(&b, &params.fc1_weight, &params.fc1_bias).map(gelu);
    x.add_assign(&linear(&hidden, &params.fc2_weight, &params.fc2_bias));

    if !x.is_finite() {
        return Err(Error::NonFinite(
            "transformer layer produced NaN/Inf (corrupt weights?)".into(),
        ));
    }
    Ok(x)
}

struct ConvLayer<S> {
    spec: ConvLayerSpec,
    in_channels: usize,
    /// `[out, kernel * in]`, window-major so a strided window of the
    /// time-major input is one contiguous slice.
    weight: Matrix<S>,
    norm: Option<(Vec<S>, Vec<S>)>,
}

/// Frozen encoder weights plus forward-pass instrumentation.
pub struct EncoderModel<S> {
    config: EncoderConfig,
    conv: Vec<ConvLayer<S>>,
    proj_ln_weight: Vec<S>,
    proj_ln_bias: Vec<S>,
    proj_weight: Matrix<S>,
    proj_bias: Vec<S>,
    /// `[d, d / groups, K]` flattened.
    pos_weight: Vec<S>,
    pos_bias: Vec<S>,
    layers: Vec<LayerParams<S>>,
    checksum: String,
    layer_invocations: AtomicU64,
    encode_calls: AtomicU64,
}

impl<S: Scalar> std::fmt::Debug for EncoderModel<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EncoderModel")
            .field("config", &self.config)
            .field("checksum", &self.checksum)
            .finish_non_exhaustive()
    }
}

fn take_vec<S: Scalar>(
    tensors: &BTreeMap<String, TensorData>,
    name: &str,
    shape: &[usize],
) -> Result<Vec<S>> {
    let t = tensors
        .get(name)
        .ok_or_else(|| Error::Validation(format!("encoder tensor {name:?} is missing")))?;
    if t.shape != shape {
        return Err(Error::Shape(format!(
            "{name}: stored shape {:?}, architecture expects {shape:?}",
            t.shape
        )));
    }
    Ok(t.data.iter().map(|&v| S::of_f32(v)).collect())
}

fn take_matrix<S: Scalar>(
    tensors: &BTreeMap<String, TensorData>,
    name: &str,
    rows: usize,
    cols: usize,
) -> Result<Matrix<S>> {
    Matrix::from_vec(rows, cols, take_vec(tensors, name, &[rows, cols])?)
}

impl<S: Scalar> EncoderModel<S> {
    pub fn from_container(container: &ModelContainer) -> Result<Self> {
        let config = EncoderConfig::from_container(container)?;
        Self::from_tensors(config, &container.tensors)
    }

    /// Builds the model from `encoder.*` tensors. Other names are ignored.
    pub fn from_tensors(
        config: EncoderConfig,
        tensors: &BTreeMap<String, TensorData>,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;

        let mut conv = Vec::with_capacity(config.conv_stack.len());
        for (i, spec) in config.conv_stack.iter().enumerate() {
            let cin = config.conv_in_channels(i);
            let raw: Vec<S> = take_vec(
                tensors,
                &format!("encoder.conv.{i}.weight"),
                &[spec.channels, cin, spec.kernel],
            )?;
            let mut weight = Matrix::zeros(spec.channels, spec.kernel * cin);
            for o in 0..spec.channels {
                for ci in 0..cin {
                    for k in 0..spec.kernel {
                        weight[(o, k * cin + ci)] = raw[(o * cin + ci) * spec.kernel + k];
                    }
                }
            }
            let norm = if config.conv_layer_norm {
                Some((
                    take_vec(
                        tensors,
                        &format!("encoder.conv.{i}.ln.weight"),
                        &[spec.channels],
                    )?,
                    take_vec(
                        tensors,
                        &format!("encoder.conv.{i}.ln.bias"),
                        &[spec.channels],
                    )?,
                ))
            } else {
                None
            };
            conv.push(ConvLayer {
                spec: *spec,
                in_channels: cin,
                weight,
                norm,
            });
        }
        let c = config.conv_out_channels();
        let groups = config.pos_conv_groups;
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 1..=config.num_layers {
            let p = |n: &str| format!("encoder.layer.{l}.{n}");
            let f = config.ffn_dim;
            layers.push(LayerParams {
                ln1_weight: take_vec(tensors, &p("ln1.weight"), &[d])?,
                ln1_bias: take_vec(tensors, &p("ln1.bias"), &[d])?,
                q_weight: take_matrix(tensors, &p("attn.q.weight"), d, d)?,
                q_bias: take_vec(tensors, &p("attn.q.bias"), &[d])?,
                k_weight: take_matrix(tensors, &p("attn.k.weight"), d, d)?,
                k_bias: take_vec(tensors, &p("attn.k.bias"), &[d])?,
                v_weight: take_matrix(tensors, &p("attn.v.weight"), d, d)?,
                v_bias: take_vec(tensors, &p("attn.v.bias"), &[d])?,
                out_weight: take_matrix(tensors, &p("attn.out.weight"), d, d)?,
                out_bias: take_vec(tensors, &p("attn.out.bias"), &[d])?,
                ln2_weight: take_vec(tensors, &p("ln2.weight"), &[d])?,
                ln2_bias: take_vec(tensors, &p("ln2.bias"), &[d])?,
                fc1_weight: take_matrix(tensors, &p("ffn.fc1.weight"), f, d)?,
                fc1_bias: take_vec(tensors, &p("ffn.fc1.bias"), &[f])?,
                fc2_weight: take_matrix(tensors, &p("ffn.fc2.weight"), d, f)?,
                fc2_bias: take_vec(tensors, &p("ffn.fc2.bias"), &[d])?,
            });
        }
        let checksum = tensors_checksum(tensors.iter().filter(|(k, _)| k.starts_with("encoder.")));
        Ok(Self {
            proj_ln_weight: take_vec(tensors, "encoder.proj.ln.weight", &[c])?,
            proj_ln_bias: take_vec(tensors, "encoder.proj.ln.bias", &[c])?,
            proj_weight: take_matrix(tensors, "encoder.proj.weight", d, c)?,
            proj_bias: take_vec(tensors, "encoder.proj.bias", &[d])?,
            pos_weight: take_vec(
                tensors,
                "encoder.pos_conv.weight",
                &[d, d / groups, config.pos_conv_kernel],
            )?,
            pos_bias: take_vec(tensors, "encoder.pos_conv.bias", &[d])?,
            config,
            conv,
            layers,
            checksum,
            layer_invocations: AtomicU64::new(0),
            encode_calls: AtomicU64::new(0),
        })
    }

    /// Seeded random encoder, mainly for desk-scale experiments.
    pub fn random(config: EncoderConfig, seed: u64) -> Result<Self> {
        let tensors = random_encoder_tensors(&config, seed)?;
        Self::from_tensors(config, &tensors)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    /// SHA-256 of the `encoder.*` tensors this model was built from.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// Transformer-block forwards executed since construction or the last reset.
    pub fn layer_invocations(&self) -> u64 {
        self.layer_invocations.load(Ordering::Relaxed)
    }

    /// Calls to [`EncoderModel::encode`] since construction or the last reset.
    pub fn encode_calls(&self) -> u64 {
        self.encode_calls.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.layer_invocations.store(0, Ordering::Relaxed);
        self.encode_calls.store(0, Ordering::Relaxed);
    }

    /// SHA-256 over the parameter values currently held in memory. Stays
    /// equal to itself for the model's lifetime; the trainer checks it around
    /// every run.
    pub fn parameter_checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut put = |values: &[S]| {
            for v in values {
                h.update(v.to_f64().unwrap().to_bits().to_le_bytes());
            }
        };
        for c in &self.conv {
            put(c.weight.as_slice());
            if let Some((w, b)) = &c.norm {
                put(w);
                put(b);
            }
        }
        put(&self.proj_ln_weight);
        put(&self.proj_ln_bias);
        put(self.proj_weight.as_slice());
        put(&self.proj_bias);
        put(&self.pos_weight);
        put(&self.pos_bias);
        for p in &self.layers {
            for block in [&p.ln1_weight, &p.ln1_bias, &p.q_bias, &p.k_bias, &p.v_bias] {
                put(block);
            }
            for m in [
                &p.q_weight,
                &p.k_weight,
                &p.v_weight,
                &p.out_weight,
                &p.fc1_weight,
                &p.fc2_weight,
            ] {
                put(m.as_slice());
            }
            for block in [
                &p.out_bias,
                &p.ln2_weight,
                &p.ln2_bias,
                &p.fc1_bias,
                &p.fc2_bias,
            ] {
                put(block);
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn layer_params(&self, l: usize) -> &LayerParams<S> {
        &self.layers[l - 1]
    }

    /// Conv stack plus feature projection: a `T x d` matrix.
    pub fn conv_features(&self, samples: &[S]) -> Result<Matrix<S>> {
        let frames = self.config.output_frames(samples.len())?;
        let eps = S::lit(self.config.layer_norm_eps as f64);
        let mut x = Matrix::from_vec(samples.len(), 1, samples.to_vec())?;
        for layer in &self.conv {
            let ConvLayerSpec {
                channels,
                kernel,
                stride,
            } = layer.spec;
            let cin = layer.in_channels;
            let t_out = (x.rows() - kernel) / stride + 1;
            let mut y = Matrix::zeros(t_out, channels);
            let input = x.as_slice();
            for t in 0..t_out {
                let window = &input[t * stride * cin..(t * stride + kernel) * cin];
                for (o, out) in y.row_mut(t).iter_mut().enumerate() {
                    *out = dot(window, layer.weight.row(o));
                }
            }
            if let Some((w, b)) = &layer.norm {
                y = layer_norm(&y, w, b, eps);
            }
            x = y.map(gelu);
        }
        debug_assert_eq!(x.rows(), frames);
        let normed = layer_norm(&x, &self.proj_ln_weight, &self.proj_ln_bias, eps);
        Ok(linear(&normed, &self.proj_weight, &self.proj_bias))
    }

    fn add_positional(&self, x: &Matrix<S>) -> Matrix<S> {
        let (t_len, d) = x.shape();
        let k_len = self.config.pos_conv_kernel;
        let group_width = d / self.config.pos_conv_groups;
        let pad = k_len / 2;
        let mut out = x.clone();
        for t in 0..t_len {
            for o in 0..d {
                let g0 = (o / group_width) * group_width;
                let w = &self.pos_weight[o * group_width * k_len..(o + 1) * group_width * k_len];
                let mut acc = self.pos_bias[o];
                for k in 0..k_len {
                    let src = t + k;
                    if src < pad || src - pad >= t_len {
                        continue;
                    }
                    let row = &x.row(src - pad)[g0..g0 + group_width];
                    for (ci, &v) in row.iter().enumerate() {
                        acc += w[ci * k_len + k] * v;
                    }
                }
                out[(t, o)] += gelu(acc);
            }
        }
        out
    }

    /// Hidden states of the first `max_layers` blocks. Deeper blocks are never run.
    pub fn encode_samples(
        &self,
        utt_id: &str,
        samples: &[S],
        max_layers: usize,
    ) -> Result<LayerFeatureStack<S>> {
        if max_layers == 0 || max_layers > self.config.num_layers {
            return Err(Error::LayerRange {
                requested: max_layers,
                available: self.config.num_layers,
            });
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{utt_id}: input sample {i}")));
        }
        self.encode_calls.fetch_add(1, Ordering::Relaxed);
        let mut x = self.add_positional(&self.conv_features(samples)?);
        let mut features = Vec::with_capacity(max_layers);
        for params in &self.layers[..max_layers] {
            self.layer_invocations.fetch_add(1, Ordering::Relaxed);
            x = transformer_layer(&x, params, &self.config)?;
            features.push(x.clone());
        }
        LayerFeatureStack::new(utt_id, features)
    }

    pub fn encode(
        &self,
        segment: &AudioSegment,
        max_layers: usize,
    ) -> Result<LayerFeatureStack<S>> {
        let samples: Vec<S> = segment.samples.iter().map(|&v| S::of_f32(v)).collect();
        self.encode_samples(&segment.utt_id, &samples, max_layers)
    }
}

/// Seeded weights for every tensor of the architecture: matrices uniform in
/// `±1/sqrt(fan_in)`, layer-norm scales one, biases zero.
pub fn random_encoder_tensors(
    config: &EncoderConfig,
    seed: u64,
) -> Result<BTreeMap<String, TensorData>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for (name, shape) in config.parameter_inventory() {
        let numel: usize = shape.iter().product();
        let data = if name.ends_with(".bias") {
            vec![0.0; numel]
        } else if name.contains(".ln") {
            vec![1.0; numel]
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..numel)
                .map(|_| rng.gen_range(-bound..bound) as f32)
                .collect()
        };
        out.insert(name, TensorData::new(shape, data)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_stack_yields_201_frames_for_paper_window() {
        // floor((len - k) / s) + 1 applied by hand per layer.
        let mut len = 64_600usize;
        for (k, s) in [(10, 5), (3, 2), (3, 2), (3, 2), (3, 2), (2, 2), (2, 2)] {
            len = (len - k) / s + 1;
        }
        assert_eq!(len, 201);
        assert_eq!(EncoderConfig::base().output_frames(64_600).unwrap(), 201);
        assert_eq!(EncoderConfig::base().receptive_field(), 400);
    }

    #[test]
    fn toy_stack_frame_count() {
        let cfg = EncoderConfig {
            conv_stack: vec![ConvLayerSpec::new(4, 2, 2)],
            ..EncoderConfig::toy(1, 4)
        };
        assert_eq!(cfg.output_frames(8).unwrap(), 4);
    }

    #[test]
    fn short_input_is_rejected() {
        let err = EncoderConfig::base().output_frames(3).unwrap_err();
        assert!(matches!(err, Error::InputTooShort { len: 3, .. }), "{err}");
    }

    #[test]
    fn validate_catches_heads_and_strides() {
        let mut cfg = EncoderConfig::toy(2, 6);
        cfg.num_heads = 4;
        cfg.conv_stack[0].stride = 0;
        match cfg.validate().unwrap_err() {
            Error::Config(errs) => assert_eq!(errs.len(), 2, "{errs:?}"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn zero_block_is_identity() {
        let cfg = EncoderConfig::toy(1, 4);
        let x = Matrix::<f64>::from_rows(&[vec![0.3, -1.0, 2.0, 0.5], vec![1.0, 1.0, -2.0, 0.0]])
            .unwrap();
        let y = transformer_layer(&x, &LayerParams::zeros(4, 8), &cfg).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn single_token_attention_matches_hand_trace() {
        // T=1, d=2, one head: softmax over a single key is 1, so the context
        // is exactly the value vector.
        let cfg = EncoderConfig {
            num_heads: 1,
            ..EncoderConfig::toy(1, 2)
        };
        let mut p = LayerParams::<f64>::zeros(2, 4);
        p.q_weight = Matrix::from_rows(&[vec![5.0, -3.0], vec![2.0, 7.0]]).unwrap();
        p.k_weight = Matrix::from_rows(&[vec![-1.0, 4.0], vec![0.5, 0.5]]).unwrap();
        p.v_weight = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
        p.v_bias = vec![0.1, -0.2];
        p.out_weight = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let x = Matrix::from_rows(&[vec![3.0, 1.0]]).unwrap();
        // LN of (3, 1): mean 2, var 1 -> (1, -1) / sqrt(1 + 1e-5).
        let inv = 1.0 / (1.0f64 + 1e-5).sqrt();
        let a = [inv, -inv];
        let v = [2.0 * a[0] + 0.1, 3.0 * a[1] - 0.2];
        let expected = [3.0 + v[0], 1.0 + v[1]];
        let y = transformer_layer(&x, &p, &cfg).unwrap();
        assert!((y[(0, 0)] - expected[0]).abs() < 1e-12);
        assert!((y[(0, 1)] - expected[1]).abs() < 1e-12);
    }

    #[test]
    fn block_is_time_permutation_equivariant() {
        let cfg = EncoderConfig::toy(1, 4);
        let tensors = random_encoder_tensors(&cfg, 3).unwrap();
        let model = EncoderModel::<f64>::from_tensors(cfg.clone(), &tensors).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let perm = [3, 0, 4, 1, 2];
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let xp = Matrix::from_rows(&permuted).unwrap();
        let y = transformer_layer(&x, model.layer_params(1), &cfg).unwrap();
        let yp = transformer_layer(&xp, model.layer_params(1), &cfg).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            for j in 0..4 {
                assert!((yp[(new, j)] - y[(old, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nan_weights_are_a_hard_error() {
        let cfg = EncoderConfig::toy(1, 2);
        let mut p = LayerParams::<f32>::zeros(2, 4);
        p.fc2_bias[0] = f32::NAN;
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(
            transformer_layer(&x, &p, &cfg),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn base_inventory_has_205_tensors() {
        // 7 conv + 4 projection + 2 positional + 16 per block.
        let inv = EncoderConfig::base().parameter_inventory();
        assert_eq!(inv.len(), 7 + 4 + 2 + 16 * 12);
        let large = EncoderConfig::large().parameter_inventory();
        assert_eq!(large.len(), 7 * 3 + 4 + 2 + 16 * 24);
    }

    #[test]
    fn truncation_range_is_checked() {
        let model = EncoderModel::<f32>::random(EncoderConfig::toy(2, 4), 1).unwrap();
        let samples = vec![0.1f32; 1000];
        for bad in [0, 3] {
            assert!(matches!(
                model.encode_samples("u", &samples, bad),
                Err(Error::LayerRange { .. })
            ));
        }
    }

    #[test]
    fn weight_shape_mismatch_is_rejected() {
        let cfg = EncoderConfig::toy(1, 4);
        let mut tensors = random_encoder_tensors(&cfg, 1).unwrap();
        tensors.insert(
            "encoder.layer.1.attn.q.weight".into(),
            TensorData::new(vec![4, 3], vec![0.0; 12]).unwrap(),
        );
        assert!(matches!(
            EncoderModel::<f32>::from_tensors(cfg, &tensors),
            Err(Error::Shape(_))
        ));
    }
}
