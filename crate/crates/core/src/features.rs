//! Layer-feature extraction with reuse.
//!
//! The encoder is frozen, so the features of a fixed window never change.
//! [`FeatureExtractor`] memoizes them in memory, and [`FeatureCache`]
//! persists them as containers holding `feat.<utt_id>.layer.<l>` tensors.
//! Windows drawn from the random stream are always recomputed.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::audio::{apply_window, choose_window, decode_wav, AudioSegment, CropMode, CropWindow};
use crate::dataset::ProtocolEntry;
use crate::encoder::{EncoderModel, LayerFeatureStack};
use crate::error::{Error, Result};
use crate::model_io::{read_container, write_container, TensorData};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// A protocol entry with its decoded audio.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub entry: ProtocolEntry,
    pub audio: AudioSegment,
}

/// Decodes every entry's WAV file, in parallel, keeping protocol order.
pub fn load_utterances(entries: &[ProtocolEntry]) -> Result<Vec<Utterance>> {
    entries
        .par_iter()
        .map(|entry| {
            Ok(Utterance {
                audio: decode_wav(&entry.audio_path, &entry.utt_id)?,
                entry: entry.clone(),
            })
        })
        .collect()
}

const META_CHECKSUM: &str = "encoder_checksum";
const META_LAYERS: &str = "layers";
const META_UTT: &str = "utt_id";
const META_CROP: &str = "crop";

fn feature_tensor_name(utt_id: &str, l: usize) -> String {
    format!("feat.{utt_id}.layer.{l}")
}

/// On-disk feature cache for one encoder. Stored values are `f32`.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    dir: PathBuf,
    encoder_checksum: String,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>, encoder_checksum: impl Into<String>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            encoder_checksum: encoder_checksum.into(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// File holding one utterance window. The id is sanitized for the file
    /// system and disambiguated by a hash of the original.
    pub fn entry_path(&self, utt_id: &str, window: CropWindow) -> PathBuf {
        let safe: String = utt_id
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || "._-".contains(c) {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        let digest = Sha256::digest(utt_id.as_bytes());
        let tag: String = digest[..4].iter().map(|b| format!("{b:02x}")).collect();
        self.dir
            .join(format!("{safe}-{tag}.{}.lpc", window.descriptor()))
    }

    /// The first `layers` hidden states, if a valid entry with at least that
    /// many is stored. Entries written by another encoder, or unreadable
    /// ones, are deleted and reported as misses.
    pub fn load<S: Scalar>(
        &self,
        utt_id: &str,
        window: CropWindow,
        layers: usize,
    ) -> Result<Option<LayerFeatureStack<S>>> {
        let path = self.entry_path(utt_id, window);
        if !path.exists() {
            return Ok(None);
        }
        let container = match read_container(&path) {
            Ok(c) => c,
            Err(e) => {
                warn!("discarding unreadable cache entry {}: {e}", path.display());
                self.discard(&path);
                return Ok(None);
            }
        };
        let fresh = container.meta(META_CHECKSUM).ok() == Some(self.encoder_checksum.as_str())
            && container.meta(META_UTT).ok() == Some(utt_id)
            && container.meta(META_CROP).ok() == Some(window.descriptor().as_str());
        if !fresh {
            debug!("stale cache entry {}", path.display());
            self.discard(&path);
            return Ok(None);
        }
        if container.meta_usize(META_LAYERS)? < layers {
            return Ok(None);
        }
        let features = (1..=layers)
            .map(|l| {
                let m = container
                    .tensor(&feature_tensor_name(utt_id, l))?
                    .to_matrix()?;
                Ok(m.cast::<S>())
            })
            .collect::<Result<Vec<Matrix<S>>>>()?;
        LayerFeatureStack::new(utt_id, features).map(Some)
    }

    /// Stores `stack` unless an entry with at least as many layers exists.
    pub fn store<S: Scalar>(&self, stack: &LayerFeatureStack<S>, window: CropWindow) -> Result<()> {
        let path = self.entry_path(&stack.utt_id, window);
        if let Ok(existing) = read_container(&path) {
            let covers = existing.meta(META_CHECKSUM).ok() == Some(self.encoder_checksum.as_str())
                && existing.meta_usize(META_LAYERS).unwrap_or(0) >= stack.num_layers();
            if covers {
                return Ok(());
            }
        }
        let tensors: BTreeMap<String, TensorData> = stack
            .layers()
            .iter()
            .enumerate()
            .map(|(i, m)| {
                (
                    feature_tensor_name(&stack.utt_id, i + 1),
                    TensorData::from_matrix(&m.cast::<f32>()),
                )
            })
            .collect();
        let metadata = BTreeMap::from([
            (META_CHECKSUM.to_string(), self.encoder_checksum.clone()),
            (META_LAYERS.to_string(), stack.num_layers().to_string()),
            (META_UTT.to_string(), stack.utt_id.clone()),
            (META_CROP.to_string(), window.descriptor()),
        ]);
        // Write then rename, so concurrent readers never see a partial file.
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        write_container(&tensors, &metadata, &tmp)?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    fn discard(&self, path: &Path) {
        if let Err(e) = fs::remove_file(path) {
            warn!("could not remove {}: {e}", path.display());
        }
    }
}

type MemoKey = (String, CropWindow);

/// Produces the first `layers` hidden states for utterance windows.
pub struct FeatureExtractor<'m, S> {
    model: &'m EncoderModel<S>,
    layers: usize,
    memo: Option<Mutex<HashMap<MemoKey, Arc<LayerFeatureStack<S>>>>>,
    disk: Option<FeatureCache>,
}

impl<'m, S: Scalar> FeatureExtractor<'m, S> {
    /// Extractor with the in-memory memo enabled and no disk cache.
    pub fn new(model: &'m EncoderModel<S>, layers: usize) -> Result<Self> {
        if layers == 0 || layers > model.num_layers() {
            return Err(Error::LayerRange {
                requested: layers,
                available: model.num_layers(),
            });
        }
        Ok(Self {
            model,
            layers,
            memo: Some(Mutex::new(HashMap::new())),
            disk: None,
        })
    }

    /// Every call runs the encoder; used for timing.
    pub fn without_memo(mut self) -> Self {
        self.memo = None;
        self
    }

    pub fn with_disk_cache(mut self, cache: FeatureCache) -> Self {
        self.disk = Some(cache);
        self
    }

    pub fn model(&self) -> &EncoderModel<S> {
        self.model
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    /// Features of `audio` under `window`. `reusable` says whether the
    /// window is fixed (see [`crate::audio::window_is_fixed`]); only then are the memo and
    /// disk cache consulted.
    pub fn features(
        &self,
        audio: &AudioSegment,
        window: CropWindow,
        reusable: bool,
    ) -> Result<Arc<LayerFeatureStack<S>>> {
        if !reusable {
            return self.compute(audio, window).map(Arc::new);
        }
        let key = (audio.utt_id.clone(), window);
        if let Some(memo) = &self.memo {
            if let Some(hit) = memo.lock().unwrap().get(&key) {
                return Ok(Arc::clone(hit));
            }
        }
        let stack = match self.disk.as_ref() {
            Some(disk) => match disk.load(&audio.utt_id, window, self.layers)? {
                Some(stack) => stack,
                None => {
                    let stack = self.compute(audio, window)?;
                    disk.store(&stack, window)?;
                    stack
                }
            },
            None => self.compute(audio, window)?,
        };
        let stack = Arc::new(stack);
        if let Some(memo) = &self.memo {
            memo.lock().unwrap().insert(key, Arc::clone(&stack));
        }
        Ok(stack)
    }

    /// Parallel [`FeatureExtractor::features`] over a batch, in input order.
    pub fn features_batch(
        &self,
        items: &[(&AudioSegment, CropWindow, bool)],
    ) -> Result<Vec<Arc<LayerFeatureStack<S>>>> {
        items
            .par_iter()
            .map(|&(audio, window, reusable)| self.features(audio, window, reusable))
            .collect()
    }

    fn compute(&self, audio: &AudioSegment, window: CropWindow) -> Result<LayerFeatureStack<S>> {
        self.model.encode(&apply_window(audio, window), self.layers)
    }
}

/// Persists eval-start features of every utterance under `cache_dir` and
/// returns the cache handle. Existing fresh entries are left alone.
pub fn cache_layer_features<S: Scalar>(
    utterances: &[Utterance],
    model: &EncoderModel<S>,
    layers: usize,
    crop_len: usize,
    cache_dir: impl Into<PathBuf>,
) -> Result<FeatureCache> {
    let cache = FeatureCache::new(cache_dir, model.checksum())?;
    let extractor = FeatureExtractor::new(model, layers)?
        .without_memo()
        .with_disk_cache(cache.clone());
    utterances.par_iter().try_for_each(|u| -> Result<()> {
        // Eval-start windows never touch the random stream.
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let window = choose_window(u.audio.len(), crop_len, CropMode::EvalStart, &mut unused)?;
        extractor.features(&u.audio, window, true).map(|_| ())
    })?;
    Ok(cache)
}
