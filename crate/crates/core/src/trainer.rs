//! Training of the layer weights and back-end with the encoder frozen.
//!
//! Each seed owns one ChaCha8 stream that drives, in order: back-end
//! initialization, then per epoch the batch-order seed, and per batch the
//! crop windows followed by the dropout masks. Eval loss on the dev split,
//! in eval mode, drives early stopping and best-epoch selection.

use std::fmt::Write as _;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, grad_aggregate, LayerWeightVector};
use crate::audio::{choose_window, window_is_fixed, CropMode, DEFAULT_WINDOW};
use crate::backend::{
    cross_entropy, Backend, BackendParams, Mode, DEFAULT_DROPOUT, DEFAULT_HIDDEN,
};
use crate::dataset::make_batches;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, Utterance};
use crate::metrics::ScoreSet;
use crate::optim::{AdamConfig, AdamState};
use crate::scalar::Scalar;

pub const DEFAULT_SEEDS: [u64; 3] = [17, 42, 1337];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub dropout_p: f64,
    pub seeds: Vec<u64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// `X`: number of encoder layers used. `None` means all of them.
    pub truncate_layers: Option<usize>,
    pub cache_features: bool,
    /// Samples per training and evaluation window.
    pub crop_len: usize,
    /// Back-end hidden width.
    pub hidden_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 32,
            max_epochs: 50,
            patience: 10,
            dropout_p: DEFAULT_DROPOUT,
            seeds: DEFAULT_SEEDS.to_vec(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            truncate_layers: None,
            cache_features: false,
            crop_len: DEFAULT_WINDOW,
            hidden_dim: DEFAULT_HIDDEN,
        }
    }
}

impl TrainConfig {
    /// Checks every field and reports all problems together. `num_layers`
    /// is the encoder depth `L`, when known.
    pub fn validate(&self, num_layers: Option<usize>) -> Result<()> {
        let mut errors = Vec::new();
        if !(self.lr.is_finite() && self.lr > 0.0) {
            errors.push(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            errors.push("batch_size must be at least 1".into());
        }
        if self.max_epochs == 0 {
            errors.push("max_epochs must be at least 1".into());
        }
        if self.patience == 0 {
            errors.push("patience must be at least 1".into());
        }
        if self.patience > self.max_epochs {
            errors.push(format!(
                "patience ({}) must not exceed max_epochs ({})",
                self.patience, self.max_epochs
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            errors.push(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            ));
        }
        if self.seeds.is_empty() {
            errors.push("seeds must not be empty".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.seeds {
            if !seen.insert(s) {
                errors.push(format!("seed {s} is listed twice"));
            }
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                errors.push(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            errors.push(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if let Some(x) = self.truncate_layers {
            let upper = num_layers.unwrap_or(usize::MAX);
            if x == 0 || x > upper {
                errors.push(match num_layers {
                    Some(l) => format!("truncate_layers must be in 1..={l}, got {x}"),
                    None => "truncate_layers must be at least 1".into(),
                });
            }
        }
        if self.crop_len == 0 {
            errors.push("crop_len must be positive".into());
        }
        if self.hidden_dim == 0 {
            errors.push("hidden_dim must be positive".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// `X` resolved against an encoder of depth `num_layers`.
    pub fn layers_for(&self, num_layers: usize) -> usize {
        self.truncate_layers.unwrap_or(num_layers)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RunStatus {
    Completed,
    /// The seed was aborted; parameters are those of the best epoch before it.
    Diverged {
        epoch: usize,
        reason: String,
    },
}

#[derive(Clone, Debug)]
pub struct TrainRun<S, B> {
    pub seed: u64,
    /// `(train_loss, eval_loss)` per completed epoch.
    pub epoch_losses: Vec<(f64, f64)>,
    /// 1-based; 0 when no epoch completed.
    pub best_epoch: usize,
    pub backend: B,
    pub layer_weights: LayerWeightVector<S>,
    pub stopped_early: bool,
    pub status: RunStatus,
    /// Checksum of the encoder container tensors the run used.
    pub encoder_checksum: String,
}

impl<S, B> TrainRun<S, B> {
    /// `epoch <n> train_loss <x> eval_loss <y>` lines.
    pub fn log_text(&self) -> String {
        let mut out = String::new();
        for (i, (train, eval)) in self.epoch_losses.iter().enumerate() {
            writeln!(
                out,
                "epoch {} train_loss {train:.6} eval_loss {eval:.6}",
                i + 1
            )
            .unwrap();
        }
        if let RunStatus::Diverged { epoch, reason } = &self.status {
            writeln!(out, "diverged at epoch {epoch}: {reason}").unwrap();
        }
        out
    }
}

/// The FFN back-end factory matching `config`.
pub fn ffn_factory<S: Scalar>(
    config: &TrainConfig,
) -> impl Fn(usize, &mut ChaCha8Rng) -> BackendParams<S> {
    let hidden = config.hidden_dim;
    let dropout = S::lit(config.dropout_p);
    move |input_dim, rng| BackendParams::init(input_dim, hidden, dropout, rng)
}

/// Scores and mean cross-entropy of `utterances` in eval mode.
pub fn evaluate<S: Scalar, B: Backend<S>>(
    extractor: &FeatureExtractor<'_, S>,
    backend: &B,
    weights: &LayerWeightVector<S>,
    utterances: &[Utterance],
    crop_len: usize,
    batch_size: usize,
) -> Result<(ScoreSet<S>, S)> {
    let mut scores = ScoreSet::new();
    let mut loss_sum = S::zero();
    // Eval mode draws nothing from the stream.
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    for chunk in utterances.chunks(batch_size.max(1)) {
        let mut items = Vec::with_capacity(chunk.len());
        for u in chunk {
            let window = choose_window(u.audio.len(), crop_len, CropMode::EvalStart, &mut unused)?;
            items.push((&u.audio, window, true));
        }
        let stacks = extractor.features_batch(&items)?;
        let aggs = stacks
            .iter()
            .map(|s| aggregate(s, weights))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = aggs.iter().collect();
        let (out, _) = backend.forward_batch(&refs, Mode::Eval, &mut unused)?;
        for (u, s) in chunk.iter().zip(&out) {
            loss_sum += cross_entropy(s.logits, u.entry.label).0;
            scores.push(u.entry.utt_id.clone(), u.entry.label, s.score);
        }
    }
    Ok((scores, loss_sum / S::of_usize(utterances.len().max(1))))
}

/// Trains one run per configured seed.
pub fn train<S, B, F>(
    config: &TrainConfig,
    model: &EncoderModel<S>,
    train_split: &[Utterance],
    dev_split: &[Utterance],
    factory: F,
) -> Result<Vec<TrainRun<S, B>>>
where
    S: Scalar,
    B: Backend<S>,
    F: Fn(usize, &mut ChaCha8Rng) -> B,
{
    config.validate(Some(model.num_layers()))?;
    let extractor = FeatureExtractor::new(model, config.layers_for(model.num_layers()))?;
    train_with_extractor(config, &extractor, train_split, dev_split, factory)
}

/// [`train`] with a caller-supplied extractor, so features can be shared
/// with a later evaluation.
pub fn train_with_extractor<S, B, F>(
    config: &TrainConfig,
    extractor: &FeatureExtractor<'_, S>,
    train_split: &[Utterance],
    dev_split: &[Utterance],
    factory: F,
) -> Result<Vec<TrainRun<S, B>>>
where
    S: Scalar,
    B: Backend<S>,
    F: Fn(usize, &mut ChaCha8Rng) -> B,
{
    config.validate(Some(extractor.model().num_layers()))?;
    if train_split.is_empty() || dev_split.is_empty() {
        return Err(Error::Validation(
            "train and dev splits must be non-empty".into(),
        ));
    }
    config
        .seeds
        .iter()
        .map(|&seed| train_seed(config, extractor, train_split, dev_split, &factory, seed))
        .collect()
}

fn train_seed<S, B, F>(
    config: &TrainConfig,
    extractor: &FeatureExtractor<'_, S>,
    train_split: &[Utterance],
    dev_split: &[Utterance],
    factory: &F,
    seed: u64,
) -> Result<TrainRun<S, B>>
where
    S: Scalar,
    B: Backend<S>,
    F: Fn(usize, &mut ChaCha8Rng) -> B,
{
    let model = extractor.model();
    let checksum_before = model.parameter_checksum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut backend = factory(model.config().hidden_dim, &mut rng);
    let mut weights = LayerWeightVector::<S>::ones(extractor.layers())?;
    let mut adam = AdamState::<S>::new(
        std::iter::once(weights.len()).chain(backend.trainable().iter().map(|b| b.len())),
    );
    let adam_config = config.adam();

    let mut run = TrainRun {
        seed,
        epoch_losses: Vec::new(),
        best_epoch: 0,
        backend: backend.clone(),
        layer_weights: weights.clone(),
        stopped_early: false,
        status: RunStatus::Completed,
        encoder_checksum: model.checksum().to_string(),
    };
    let mut best_eval = f64::INFINITY;
    let indices: Vec<usize> = (0..train_split.len()).collect();

    for epoch in 1..=config.max_epochs {
        let step = run_epoch(
            config,
            extractor,
            train_split,
            &indices,
            &mut rng,
            &mut backend,
            &mut weights,
            &mut adam,
            &adam_config,
        )
        .and_then(|train_loss| {
            let (_, eval_loss) = evaluate(
                extractor,
                &backend,
                &weights,
                dev_split,
                config.crop_len,
                config.batch_size,
            )?;
            let eval_loss = eval_loss.to_f64().unwrap();
            if !eval_loss.is_finite() {
                return Err(Error::NonFinite(format!("eval loss {eval_loss}")));
            }
            Ok((train_loss, eval_loss))
        });
        let (train_loss, eval_loss) = match step {
            Ok(losses) => losses,
            Err(Error::NonFinite(reason)) => {
                log::warn!("seed {seed} diverged at epoch {epoch}: {reason}");
                run.status = RunStatus::Diverged { epoch, reason };
                break;
            }
            Err(e) => return Err(e),
        };
        log::info!("seed {seed} epoch {epoch} train_loss {train_loss:.6} eval_loss {eval_loss:.6}");
        run.epoch_losses.push((train_loss, eval_loss));
        if eval_loss < best_eval {
            best_eval = eval_loss;
            run.best_epoch = epoch;
            run.backend = backend.clone();
            run.layer_weights = weights.clone();
        } else if epoch - run.best_epoch >= config.patience {
            run.stopped_early = epoch < config.max_epochs;
            break;
        }
    }

    if model.parameter_checksum() != checksum_before {
        return Err(Error::Validation(format!(
            "encoder parameters changed during training of seed {seed}"
        )));
    }
    Ok(run)
}

/// One pass over the training split; returns the mean training loss.
#[allow(clippy::too_many_arguments)]
fn run_epoch<S: Scalar, B: Backend<S>>(
    config: &TrainConfig,
    extractor: &FeatureExtractor<'_, S>,
    train_split: &[Utterance],
    indices: &[usize],
    rng: &mut ChaCha8Rng,
    backend: &mut B,
    weights: &mut LayerWeightVector<S>,
    adam: &mut AdamState<S>,
    adam_config: &AdamConfig,
) -> Result<f64> {
    let batches = make_batches(indices, config.batch_size, rng.next_u64())?;
    let mut loss_sum = 0.0f64;
    for batch in batches {
        let mut items = Vec::with_capacity(batch.len());
        for &i in &batch {
            let audio = &train_split[i].audio;
            let window = choose_window(audio.len(), config.crop_len, CropMode::TrainRandom, rng)?;
            let reusable = window_is_fixed(audio.len(), config.crop_len, CropMode::TrainRandom);
            items.push((audio, window, reusable));
        }
        let stacks = extractor.features_batch(&items)?;
        let aggs = stacks
            .iter()
            .map(|s| aggregate(s, weights))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = aggs.iter().collect();
        let (scores, cache) = backend.forward_batch(&refs, Mode::Train, rng)?;

        let n = S::of_usize(batch.len());
        let mut loss_grads = Vec::with_capacity(batch.len());
        for (&i, s) in batch.iter().zip(&scores) {
            let (loss, grad) = cross_entropy(s.logits, train_split[i].entry.label);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss of {}",
                    train_split[i].entry.utt_id
                )));
            }
            loss_sum += loss.to_f64().unwrap();
            loss_grads.push([grad[0] / n, grad[1] / n]);
        }

        let (backend_grads, input_grads) = backend.backward_batch(&cache, &loss_grads)?;
        let mut raw_grad = vec![S::zero(); weights.len()];
        for (stack, upstream) in stacks.iter().zip(&input_grads) {
            for (acc, g) in raw_grad
                .iter_mut()
                .zip(grad_aggregate(stack, weights, upstream)?)
            {
                *acc += g;
            }
        }
        {
            let mut grads: Vec<&[S]> = vec![&raw_grad];
            grads.extend(backend_grads.trainable());
            let mut params: Vec<&mut [S]> = vec![weights.raw_mut()];
            params.extend(backend.trainable_mut());
            adam.step(&mut params, &grads, adam_config)?;
        }
        weights.renormalize()?;
        backend.commit_batch_statistics(&cache);
    }
    Ok(loss_sum / indices.len() as f64)
}
