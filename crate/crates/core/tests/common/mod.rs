//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::path::Path;

use layerprobe_core::aggregation::{aggregate, grad_aggregate, LayerWeightVector};
use layerprobe_core::backend::{cross_entropy, Backend, BackendParams, Mode};
use layerprobe_core::dataset::{parse_protocol, Label};
use layerprobe_core::encoder::{EncoderConfig, EncoderModel, LayerFeatureStack};
use layerprobe_core::metrics::ScoreSet;
use layerprobe_core::tensor::Matrix;
use layerprobe_core::{generate_corpus, load_utterances, SynthSpec, Utterance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// EER by trying every candidate threshold: all distinct scores plus both
/// infinities. A score below the threshold is a rejection.
pub fn brute_force_eer(bona: &[f64], spoof: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = bona.iter().chain(spoof).copied().collect();
    thresholds.push(f64::NEG_INFINITY);
    thresholds.push(f64::INFINITY);
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    let mut best = (f64::INFINITY, f64::INFINITY, 0.0);
    for &t in &thresholds {
        let frr = bona.iter().filter(|&&s| s < t).count() as f64 / bona.len() as f64;
        let far = spoof.iter().filter(|&&s| s >= t).count() as f64 / spoof.len() as f64;
        let gap = (far - frr).abs();
        let total = far + frr;
        if gap < best.0 || (gap == best.0 && total < best.1) {
            best = (gap, total, total / 2.0);
        }
    }
    best.2
}

/// Random score set with deliberate ties: values are drawn from a small grid
/// half of the time.
pub fn random_score_set(rng: &mut ChaCha8Rng, size: usize) -> (Vec<f64>, Vec<f64>) {
    let nb = rng.gen_range(1..size);
    let draw = |rng: &mut ChaCha8Rng| {
        if rng.gen_bool(0.5) {
            rng.gen_range(0..8) as f64 * 0.25
        } else {
            rng.gen_range(-1.0..3.0)
        }
    };
    let bona = (0..nb).map(|_| draw(rng)).collect();
    let spoof = (0..size - nb).map(|_| draw(rng)).collect();
    (bona, spoof)
}

pub fn score_set(bona: &[f64], spoof: &[f64]) -> ScoreSet<f64> {
    ScoreSet::from_parts(bona, spoof)
}

pub fn random_stack(rng: &mut ChaCha8Rng, x: usize, t: usize, d: usize) -> LayerFeatureStack<f64> {
    let layers = (0..x)
        .map(|_| {
            let data = (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Matrix::from_vec(t, d, data).unwrap()
        })
        .collect();
    LayerFeatureStack::new("u", layers).unwrap()
}

/// One toy configuration of the whole trainable chain.
pub struct ChainCase {
    pub stacks: Vec<LayerFeatureStack<f64>>,
    pub labels: Vec<Label>,
    pub raw: Vec<f64>,
    pub backend: BackendParams<f64>,
    pub mask_seed: u64,
}

impl ChainCase {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.gen_range(2..=8);
        let x = rng.gen_range(1..=4);
        let batch = rng.gen_range(2..=3);
        let hidden = rng.gen_range(2..=6);
        let stacks = (0..batch)
            .map(|_| {
                let t = rng.gen_range(2..=6);
                random_stack(&mut rng, x, t, d)
            })
            .collect();
        let labels = (0..batch)
            .map(|i| {
                if i % 2 == 0 {
                    Label::Bonafide
                } else {
                    Label::Spoof
                }
            })
            .collect();
        let raw = (0..x).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut backend = BackendParams::init(d, hidden, 0.3, &mut rng);
        // Move every parameter off its initial value so no term is trivially zero.
        for block in backend.trainable_mut() {
            for v in block.iter_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        Self {
            stacks,
            labels,
            raw,
            backend,
            mask_seed: rng.gen(),
        }
    }

    /// Smallest distance of any SeLU input from the kink at zero. Finite
    /// differences are meaningless when a stencil straddles it.
    pub fn kink_margin(&self) -> f64 {
        let weights = LayerWeightVector::from_raw(self.raw.clone()).unwrap();
        let aggs: Vec<_> = self
            .stacks
            .iter()
            .map(|s| aggregate(s, &weights).unwrap())
            .collect();
        let refs: Vec<_> = aggs.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.mask_seed);
        let (_, cache) = self
            .backend
            .forward_batch(&refs, Mode::Train, &mut rng)
            .unwrap();
        cache
            .pre_activations()
            .iter()
            .flat_map(|z| z.as_slice().iter())
            .map(|v| v.abs())
            .fold(f64::INFINITY, f64::min)
    }

    /// Mean cross-entropy of the batch in train mode, with the same dropout
    /// masks on every call.
    pub fn loss(&self, raw: &[f64], backend: &BackendParams<f64>) -> f64 {
        let weights = LayerWeightVector::from_raw(raw.to_vec()).unwrap();
        let aggs: Vec<_> = self
            .stacks
            .iter()
            .map(|s| aggregate(s, &weights).unwrap())
            .collect();
        let refs: Vec<_> = aggs.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.mask_seed);
        let (scores, _) = backend.forward_batch(&refs, Mode::Train, &mut rng).unwrap();
        let n = scores.len() as f64;
        scores
            .iter()
            .zip(&self.labels)
            .map(|(s, &l)| cross_entropy(s.logits, l).0)
            .sum::<f64>()
            / n
    }

    /// Analytic gradients: raw weights first, then every trainable block.
    pub fn analytic(&self) -> Vec<f64> {
        let weights = LayerWeightVector::from_raw(self.raw.clone()).unwrap();
        let aggs: Vec<_> = self
            .stacks
            .iter()
            .map(|s| aggregate(s, &weights).unwrap())
            .collect();
        let refs: Vec<_> = aggs.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.mask_seed);
        let (scores, cache) = self
            .backend
            .forward_batch(&refs, Mode::Train, &mut rng)
            .unwrap();
        let n = scores.len() as f64;
        let loss_grads: Vec<[f64; 2]> = scores
            .iter()
            .zip(&self.labels)
            .map(|(s, &l)| {
                let g = cross_entropy(s.logits, l).1;
                [g[0] / n, g[1] / n]
            })
            .collect();
        let (grads, inputs) = self.backend.backward_batch(&cache, &loss_grads).unwrap();
        let mut raw_grad = vec![0.0; self.raw.len()];
        for (stack, upstream) in self.stacks.iter().zip(&inputs) {
            for (a, g) in raw_grad
                .iter_mut()
                .zip(grad_aggregate(stack, &weights, upstream).unwrap())
            {
                *a += g;
            }
        }
        let mut out = raw_grad;
        for block in grads.trainable() {
            out.extend_from_slice(block);
        }
        out
    }

    /// Central differences in the same order as [`ChainCase::analytic`].
    pub fn numeric(&self, h: f64) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..self.raw.len() {
            let mut plus = self.raw.clone();
            let mut minus = self.raw.clone();
            plus[i] += h;
            minus[i] -= h;
            out.push(
                (self.loss(&plus, &self.backend) - self.loss(&minus, &self.backend)) / (2.0 * h),
            );
        }
        let sizes: Vec<usize> = self.backend.trainable().iter().map(|b| b.len()).collect();
        for (b, &len) in sizes.iter().enumerate() {
            for i in 0..len {
                let mut plus = self.backend.clone();
                let mut minus = self.backend.clone();
                plus.trainable_mut()[b][i] += h;
                minus.trainable_mut()[b][i] -= h;
                out.push((self.loss(&self.raw, &plus) - self.loss(&self.raw, &minus)) / (2.0 * h));
            }
        }
        out
    }
}

/// Seeds from `start` whose configurations keep every SeLU input at least
/// `margin` away from zero.
pub fn smooth_cases(start: u64, count: usize, margin: f64) -> Vec<(u64, ChainCase)> {
    (start..)
        .map(|seed| (seed, ChainCase::random(seed)))
        .filter(|(_, case)| case.kink_margin() >= margin)
        .take(count)
        .collect()
}

/// `|a - n| / max(|a|, |n|, 1e-6)`, maximized over all entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    max_relative_error_with_floor(analytic, numeric, 1e-6)
}

pub fn max_relative_error_with_floor(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn toy_encoder(num_layers: usize, hidden_dim: usize, seed: u64) -> EncoderModel<f32> {
    EncoderModel::random(EncoderConfig::toy(num_layers, hidden_dim), seed).unwrap()
}

/// Writes a synthetic split under `dir` and loads it back.
pub fn synthetic_split(dir: &Path, spec: &SynthSpec) -> Vec<Utterance> {
    let protocol = generate_corpus(spec, dir).unwrap();
    load_utterances(&parse_protocol(&protocol, dir).unwrap()).unwrap()
}
