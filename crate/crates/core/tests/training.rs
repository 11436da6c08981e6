mod common;

use std::collections::BTreeMap;

use common::{synthetic_split, toy_encoder};
use layerprobe_core::aggregation::AggregatedFeatures;
use layerprobe_core::backend::{Backend, ClassScores, Mode};
use layerprobe_core::features::FeatureExtractor;
use layerprobe_core::metrics::compute_eer;
use layerprobe_core::model_io::TensorData;
use layerprobe_core::trainer::{
    evaluate, ffn_factory, train, train_with_extractor, RunStatus, TrainConfig,
};
use layerprobe_core::{Matrix, Result, SynthSpec, Utterance};
use rand::RngCore;

/// Back-end whose only parameter climbs by about `lr` per step whatever the
/// data, so the balanced dev loss rises after the first epoch.
#[derive(Clone)]
struct Drifting {
    theta: Vec<f32>,
}

impl Backend<f32> for Drifting {
    type Cache = Vec<(usize, usize)>;

    fn name(&self) -> &'static str {
        "drifting"
    }

    fn forward_batch(
        &self,
        batch: &[&AggregatedFeatures<f32>],
        _mode: Mode,
        _rng: &mut dyn RngCore,
    ) -> Result<(Vec<ClassScores<f32>>, Self::Cache)> {
        let scores = batch
            .iter()
            .map(|_| ClassScores::from_logits([self.theta[0], 0.0]))
            .collect();
        Ok((scores, batch.iter().map(|a| a.matrix.shape()).collect()))
    }

    fn backward_batch(
        &self,
        cache: &Self::Cache,
        _: &[[f32; 2]],
    ) -> Result<(Self, Vec<Matrix<f32>>)> {
        let inputs = cache.iter().map(|&(t, d)| Matrix::zeros(t, d)).collect();
        Ok((Drifting { theta: vec![-1.0] }, inputs))
    }

    fn trainable(&self) -> Vec<&[f32]> {
        vec![&self.theta]
    }

    fn trainable_mut(&mut self) -> Vec<&mut [f32]> {
        vec![&mut self.theta]
    }

    fn commit_batch_statistics(&mut self, _: &Self::Cache) {}

    fn to_tensors(&self) -> BTreeMap<String, TensorData> {
        BTreeMap::new()
    }
}

fn small_corpus(n: usize, seed: u64, dir: &std::path::Path) -> Vec<Utterance> {
    let mut spec = SynthSpec::new(n, seed);
    spec.duration_samples = 8000;
    synthetic_split(dir, &spec)
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch_size: 8,
        max_epochs: 4,
        patience: 4,
        seeds: vec![17],
        crop_len: 8000,
        hidden_dim: 16,
        ..TrainConfig::default()
    }
}

#[test]
fn patience_one_stops_after_the_first_worse_epoch() {
    let tmp = tempfile::tempdir().unwrap();
    let utts = small_corpus(4, 3, tmp.path());
    let model = toy_encoder(2, 8, 0);
    let config = TrainConfig {
        lr: 0.05,
        max_epochs: 10,
        patience: 1,
        ..quick_config()
    };
    let runs = train(&config, &model, &utts, &utts, |_, _| Drifting {
        theta: vec![0.0],
    })
    .unwrap();
    let run = &runs[0];
    assert_eq!(run.epoch_losses.len(), 2);
    assert_eq!(run.best_epoch, 1);
    assert!(run.stopped_early);
    assert_eq!(run.status, RunStatus::Completed);
    assert!(run.epoch_losses[1].1 > run.epoch_losses[0].1);
    // The retained parameters are those after epoch 1: one batch, one step.
    assert!(
        (run.backend.theta[0] - 0.05).abs() < 1e-6,
        "{}",
        run.backend.theta[0]
    );
}

#[test]
fn runs_out_of_epochs_without_early_stop() {
    let tmp = tempfile::tempdir().unwrap();
    let utts = small_corpus(4, 3, tmp.path());
    let model = toy_encoder(2, 8, 0);
    let config = TrainConfig {
        lr: 0.05,
        max_epochs: 3,
        patience: 3,
        ..quick_config()
    };
    let run = &train(&config, &model, &utts, &utts, |_, _| Drifting {
        theta: vec![0.0],
    })
    .unwrap()[0];
    assert_eq!(run.epoch_losses.len(), 3);
    assert_eq!(run.best_epoch, 1);
    assert!(!run.stopped_early);
}

#[test]
fn same_seed_same_losses() {
    let tmp = tempfile::tempdir().unwrap();
    let utts = small_corpus(6, 5, tmp.path());
    let model = toy_encoder(2, 16, 1);
    let config = TrainConfig {
        seeds: vec![17, 42],
        ..quick_config()
    };
    let a = train(&config, &model, &utts, &utts, ffn_factory::<f32>(&config)).unwrap();
    let b = train(&config, &model, &utts, &utts, ffn_factory::<f32>(&config)).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.epoch_losses, y.epoch_losses);
        assert_eq!(x.backend, y.backend);
        assert_eq!(x.layer_weights, y.layer_weights);
        assert_eq!(x.log_text(), y.log_text());
    }
    assert_ne!(a[0].epoch_losses, a[1].epoch_losses);
}

/// The acceptance corpus and encoder with default hyperparameters: the
/// training loss of the last of 50 epochs is below 0.1.
#[test]
fn fits_the_training_split() {
    let tmp = tempfile::tempdir().unwrap();
    let utts = synthetic_split(tmp.path(), &SynthSpec::new(100, 1));
    let model = toy_encoder(4, 16, 0);
    let params_before = model.parameter_checksum();
    let config = TrainConfig {
        max_epochs: 50,
        patience: 50,
        seeds: vec![17],
        ..TrainConfig::default()
    };
    let extractor = FeatureExtractor::new(&model, 4).unwrap();
    let run = &train_with_extractor(
        &config,
        &extractor,
        &utts,
        &utts,
        ffn_factory::<f32>(&config),
    )
    .unwrap()[0];
    assert_eq!(run.epoch_losses.len(), 50);
    let last = run.epoch_losses.last().unwrap().0;
    assert!(last < 0.1, "final train loss {last}");

    let (scores, _) = evaluate(
        &extractor,
        &run.backend,
        &run.layer_weights,
        &utts,
        config.crop_len,
        32,
    )
    .unwrap();
    let eer = compute_eer(&scores).unwrap().eer;
    assert!(eer <= 0.01, "train-split EER {eer}");
    assert_eq!(model.parameter_checksum(), params_before);
    assert_eq!(run.encoder_checksum, model.checksum());
}

#[test]
fn layer_weights_start_uniform_and_stay_normalized() {
    let tmp = tempfile::tempdir().unwrap();
    let utts = small_corpus(4, 3, tmp.path());
    let model = toy_encoder(3, 8, 0);
    let config = TrainConfig {
        max_epochs: 2,
        patience: 2,
        ..quick_config()
    };
    let run = &train(&config, &model, &utts, &utts, ffn_factory::<f32>(&config)).unwrap()[0];
    let p = run.layer_weights.normalized();
    assert_eq!(p.len(), 3);
    assert!((p.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
}

#[test]
fn invalid_config_lists_every_problem() {
    let model = toy_encoder(2, 8, 0);
    let config = TrainConfig {
        patience: 10,
        max_epochs: 3,
        batch_size: 0,
        truncate_layers: Some(5),
        ..quick_config()
    };
    let msg = train(&config, &model, &[], &[], ffn_factory::<f32>(&config))
        .unwrap_err()
        .to_string();
    for needle in ["patience", "batch_size", "truncate_layers"] {
        assert!(msg.contains(needle), "{needle} missing from {msg}");
    }
}
