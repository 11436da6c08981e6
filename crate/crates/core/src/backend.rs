//! Trainable back-ends mapping aggregated features to two class logits.
//!
//! The FFN back-end runs per frame
//! `batch norm -> FF(d→h) -> SeLU -> dropout -> FF(h→h) -> SeLU -> dropout`,
//! then attentive statistical pooling to a `2h` vector and a linear head to
//! `[bonafide, spoof]` logits. Backward passes are written by hand.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};

use crate::aggregation::AggregatedFeatures;
use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::model_io::TensorData;
use crate::scalar::{softmax_in_place, Scalar};
use crate::tensor::{dot, Matrix};

pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
pub const SELU_SCALE: f64 = 1.050_700_987_355_480_5;
/// Variance floor inside the pooling standard deviation.
pub const POOL_EPS: f64 = 1e-9;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_HIDDEN: usize = 128;
pub const DEFAULT_DROPOUT: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Logits in class order `[bonafide, spoof]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassScores<S> {
    pub logits: [S; 2],
    /// `logit(bonafide) - logit(spoof)`; higher means more bonafide.
    pub score: S,
}

impl<S: Scalar> ClassScores<S> {
    pub fn from_logits(logits: [S; 2]) -> Self {
        Self {
            logits,
            score: logits[0] - logits[1],
        }
    }
}

/// Log-sum-exp stabilized cross-entropy and its gradient `softmax - onehot`.
pub fn cross_entropy<S: Scalar>(logits: [S; 2], label: Label) -> (S, [S; 2]) {
    let max = logits[0].max(logits[1]);
    let e0 = (logits[0] - max).exp();
    let e1 = (logits[1] - max).exp();
    let total = e0 + e1;
    let lse = max + total.ln();
    let target = label.class_index();
    let loss = lse - logits[target];
    let mut grad = [e0 / total, e1 / total];
    grad[target] -= S::one();
    (loss, grad)
}

#[inline]
pub fn selu<S: Scalar>(x: S) -> S {
    let scale = S::lit(SELU_SCALE);
    if x > S::zero() {
        scale * x
    } else {
        scale * S::lit(SELU_ALPHA) * (x.exp() - S::one())
    }
}

#[inline]
fn selu_grad<S: Scalar>(x: S) -> S {
    let scale = S::lit(SELU_SCALE);
    if x > S::zero() {
        scale
    } else {
        scale * S::lit(SELU_ALPHA) * x.exp()
    }
}

/// Interface every back-end implements. Gradients come back in the shape of
/// the back-end itself.
pub trait Backend<S: Scalar>: Clone + Send + Sync + Sized {
    type Cache;

    fn name(&self) -> &'static str;

    /// Whole-batch forward. Train mode may use batch statistics and dropout.
    fn forward_batch(
        &self,
        batch: &[&AggregatedFeatures<S>],
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<(Vec<ClassScores<S>>, Self::Cache)>;

    /// Parameter gradients and one input gradient per utterance.
    fn backward_batch(
        &self,
        cache: &Self::Cache,
        loss_grads: &[[S; 2]],
    ) -> Result<(Self, Vec<Matrix<S>>)>;

    /// Trainable parameter blocks, in a fixed order.
    fn trainable(&self) -> Vec<&[S]>;

    fn trainable_mut(&mut self) -> Vec<&mut [S]>;

    /// Applies non-gradient state updates from a train-mode forward.
    fn commit_batch_statistics(&mut self, cache: &Self::Cache);

    fn to_tensors(&self) -> BTreeMap<String, TensorData>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackendParams<S> {
    pub bn_gamma: Vec<S>,
    pub bn_beta: Vec<S>,
    pub bn_running_mean: Vec<S>,
    pub bn_running_var: Vec<S>,
    /// `d x h`, applied as `x · W + b`.
    pub ff1_weight: Matrix<S>,
    pub ff1_bias: Vec<S>,
    /// `h x h`.
    pub ff2_weight: Matrix<S>,
    pub ff2_bias: Vec<S>,
    /// Frame scoring vector of length `h`.
    pub attn_weight: Vec<S>,
    /// Length one.
    pub attn_bias: Vec<S>,
    /// `2h x 2`.
    pub head_weight: Matrix<S>,
    pub head_bias: Vec<S>,
    pub dropout_p: S,
}

impl<S: Scalar> BackendParams<S> {
    /// Batch norm at identity, every other parameter zero.
    pub fn zeros(input_dim: usize, hidden: usize, dropout_p: S) -> Self {
        Self {
            bn_gamma: vec![S::one(); input_dim],
            bn_beta: vec![S::zero(); input_dim],
            bn_running_mean: vec![S::zero(); input_dim],
            bn_running_var: vec![S::one(); input_dim],
            ff1_weight: Matrix::zeros(input_dim, hidden),
            ff1_bias: vec![S::zero(); hidden],
            ff2_weight: Matrix::zeros(hidden, hidden),
            ff2_bias: vec![S::zero(); hidden],
            attn_weight: vec![S::zero(); hidden],
            attn_bias: vec![S::zero()],
            head_weight: Matrix::zeros(2 * hidden, 2),
            head_bias: vec![S::zero(); 2],
            dropout_p,
        }
    }

    /// Weights uniform in `±sqrt(1/fan_in)`, biases zero, batch norm at identity.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: usize,
        dropout_p: S,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(input_dim, hidden, dropout_p);
        let mut fill = |values: &mut [S], fan_in: usize| {
            let bound = (1.0 / fan_in as f64).sqrt();
            for v in values {
                *v = S::lit(rng.gen_range(-bound..bound));
            }
        };
        fill(p.ff1_weight.as_mut_slice(), input_dim);
        fill(p.ff2_weight.as_mut_slice(), hidden);
        fill(&mut p.attn_weight, hidden);
        fill(p.head_weight.as_mut_slice(), 2 * hidden);
        p
    }

    pub fn input_dim(&self) -> usize {
        self.bn_gamma.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.ff1_bias.len()
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.hidden_dim(), self.dropout_p)
    }

    pub fn is_finite(&self) -> bool {
        self.trainable()
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
            && self.bn_running_mean.iter().all(|v| v.is_finite())
            && self
                .bn_running_var
                .iter()
                .all(|v| v.is_finite() && *v >= S::zero())
    }

    pub fn from_tensors(tensors: &BTreeMap<String, TensorData>) -> Result<Self> {
        let get = |name: &str| -> Result<&TensorData> {
            tensors
                .get(name)
                .ok_or_else(|| Error::Validation(format!("back-end tensor {name:?} is missing")))
        };
        let vec = |name: &str| -> Result<Vec<S>> {
            Ok(get(name)?.data.iter().map(|&v| S::of_f32(v)).collect())
        };
        let mat = |name: &str| -> Result<Matrix<S>> { Ok(get(name)?.to_matrix()?.cast()) };
        let gamma = vec("backend.bn.gamma")?;
        let d = gamma.len();
        let ff1 = mat("backend.ff1.weight")?;
        let h = ff1.cols();
        let p = Self {
            bn_gamma: gamma,
            bn_beta: vec("backend.bn.beta")?,
            bn_running_mean: vec("backend.bn.running_mean")?,
            bn_running_var: vec("backend.bn.running_var")?,
            ff1_weight: ff1,
            ff1_bias: vec("backend.ff1.bias")?,
            ff2_weight: mat("backend.ff2.weight")?,
            ff2_bias: vec("backend.ff2.bias")?,
            attn_weight: vec("backend.attn.weight")?,
            attn_bias: vec("backend.attn.bias")?,
            head_weight: mat("backend.head.weight")?,
            head_bias: vec("backend.head.bias")?,
            dropout_p: vec("backend.dropout_p")?
                .first()
                .copied()
                .ok_or_else(|| Error::Validation("backend.dropout_p is empty".into()))?,
        };
        let shapes_ok = p.bn_beta.len() == d
            && p.bn_running_mean.len() == d
            && p.bn_running_var.len() == d
            && p.ff1_weight.rows() == d
            && p.ff1_bias.len() == h
            && p.ff2_weight.shape() == (h, h)
            && p.ff2_bias.len() == h
            && p.attn_weight.len() == h
            && p.attn_bias.len() == 1
            && p.head_weight.shape() == (2 * h, 2)
            && p.head_bias.len() == 2;
        if !shapes_ok {
            return Err(Error::Shape(
                "back-end tensors have inconsistent shapes".into(),
            ));
        }
        if !p.is_finite() {
            return Err(Error::Validation(
                "back-end parameters are not finite".into(),
            ));
        }
        Ok(p)
    }

    /// Single-utterance forward.
    pub fn forward(
        &self,
        agg: &AggregatedFeatures<S>,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<(ClassScores<S>, FfnCache<S>)> {
        let (mut scores, cache) = self.forward_batch(&[agg], mode, rng)?;
        Ok((scores.remove(0), cache))
    }

    /// Single-utterance backward.
    pub fn backward(&self, cache: &FfnCache<S>, loss_grad: [S; 2]) -> Result<(Self, Matrix<S>)> {
        let (grads, mut inputs) = self.backward_batch(cache, &[loss_grad])?;
        Ok((grads, inputs.remove(0)))
    }
}

/// Output of attentive statistical pooling with what backward needs.
#[derive(Clone, Debug)]
pub struct PoolCache<S> {
    /// Frame attention weights, summing to one.
    pub alpha: Vec<S>,
    pub mean: Vec<S>,
    pub std: Vec<S>,
    /// Whether the variance hit the `POOL_EPS` floor, per feature.
    floored: Vec<bool>,
}

impl<S: Scalar> PoolCache<S> {
    /// `concat(mean, std)`.
    pub fn pooled(&self) -> Vec<S> {
        self.mean.iter().chain(&self.std).copied().collect()
    }
}

/// Attention-weighted mean and standard deviation over frames.
///
/// `α = softmax_t(seq·w + b)`, `μ = Σ α_t x_t`,
/// `σ = sqrt(max(Σ α_t x_t² − μ², POOL_EPS))`.
pub fn attentive_stat_pool<S: Scalar>(
    seq: &Matrix<S>,
    attn_weight: &[S],
    attn_bias: S,
) -> Result<PoolCache<S>> {
    let (t_len, h) = seq.shape();
    if t_len == 0 {
        return Err(Error::Shape("pooling needs at least one frame".into()));
    }
    if attn_weight.len() != h {
        return Err(Error::Shape(format!(
            "attention vector length {} for width {h}",
            attn_weight.len()
        )));
    }
    let mut alpha: Vec<S> = (0..t_len)
        .map(|t| dot(seq.row(t), attn_weight) + attn_bias)
        .collect();
    softmax_in_place(&mut alpha);
    let mut mean = vec![S::zero(); h];
    let mut second = vec![S::zero(); h];
    for (t, &a) in alpha.iter().enumerate() {
        for (j, &x) in seq.row(t).iter().enumerate() {
            mean[j] += a * x;
            second[j] += a * x * x;
        }
    }
    let eps = S::lit(POOL_EPS);
    let mut std = Vec::with_capacity(h);
    let mut floored = Vec::with_capacity(h);
    for j in 0..h {
        let var = second[j] - mean[j] * mean[j];
        floored.push(var <= eps);
        std.push(var.max(eps).sqrt());
    }
    Ok(PoolCache {
        alpha,
        mean,
        std,
        floored,
    })
}

/// Returns `(∂/∂seq, ∂/∂attn_weight, ∂/∂attn_bias)` for upstream `d_pooled` of length `2h`.
fn attentive_stat_pool_backward<S: Scalar>(
    seq: &Matrix<S>,
    attn_weight: &[S],
    cache: &PoolCache<S>,
    d_pooled: &[S],
) -> (Matrix<S>, Vec<S>, S) {
    let (t_len, h) = seq.shape();
    let two = S::lit(2.0);
    let (d_mean, d_std) = d_pooled.split_at(h);
    // Route σ's gradient into μ and the second moment s2 = Σ α x².
    let mut g_mean = d_mean.to_vec();
    let mut g_second = vec![S::zero(); h];
    for j in 0..h {
        if !cache.floored[j] {
            g_mean[j] -= d_std[j] * cache.mean[j] / cache.std[j];
            g_second[j] = d_std[j] / (two * cache.std[j]);
        }
    }
    let mut d_seq = Matrix::zeros(t_len, h);
    let mut d_alpha = vec![S::zero(); t_len];
    for t in 0..t_len {
        let a = cache.alpha[t];
        let row = seq.row(t);
        let mut da = S::zero();
        for (j, d) in d_seq.row_mut(t).iter_mut().enumerate() {
            let x = row[j];
            *d = a * (g_mean[j] + two * g_second[j] * x);
            da += g_mean[j] * x + g_second[j] * x * x;
        }
        d_alpha[t] = da;
    }
    let weighted: S = cache.alpha.iter().zip(&d_alpha).map(|(&a, &d)| a * d).sum();
    let mut d_w = vec![S::zero(); h];
    let mut d_b = S::zero();
    for t in 0..t_len {
        let d_score = cache.alpha[t] * (d_alpha[t] - weighted);
        d_b += d_score;
        let row = seq.row(t);
        for j in 0..h {
            d_w[j] += d_score * row[j];
        }
        for (d, &w) in d_seq.row_mut(t).iter_mut().zip(attn_weight) {
            *d += d_score * w;
        }
    }
    (d_seq, d_w, d_b)
}

/// Intermediates of an FFN forward over a batch, frames of all utterances stacked.
#[derive(Clone, Debug)]
pub struct FfnCache<S> {
    mode: Mode,
    frames: Vec<usize>,
    x_hat: Matrix<S>,
    bn_out: Matrix<S>,
    bn_inv_std: Vec<S>,
    batch_mean: Vec<S>,
    batch_var: Vec<S>,
    z1: Matrix<S>,
    mask1: Option<Vec<S>>,
    h1: Matrix<S>,
    z2: Matrix<S>,
    mask2: Option<Vec<S>>,
    h2: Matrix<S>,
    pools: Vec<PoolCache<S>>,
}

impl<S> FfnCache<S> {
    /// SeLU inputs of the two feed-forward layers, frames stacked.
    pub fn pre_activations(&self) -> [&Matrix<S>; 2] {
        [&self.z1, &self.z2]
    }
}

fn dropout_mask<S: Scalar>(len: usize, p: S, rng: &mut dyn RngCore) -> Vec<S> {
    let keep = S::one() / (S::one() - p);
    let p = p.to_f64().unwrap();
    (0..len)
        .map(|_| {
            if rng.gen::<f64>() < p {
                S::zero()
            } else {
                keep
            }
        })
        .collect()
}

fn apply_mask<S: Scalar>(m: &mut Matrix<S>, mask: &[S]) {
    for (v, &k) in m.as_mut_slice().iter_mut().zip(mask) {
        *v *= k;
    }
}

impl<S: Scalar> Backend<S> for BackendParams<S> {
    type Cache = FfnCache<S>;

    fn name(&self) -> &'static str {
        "ffn"
    }

    fn forward_batch(
        &self,
        batch: &[&AggregatedFeatures<S>],
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<(Vec<ClassScores<S>>, FfnCache<S>)> {
        let d = self.input_dim();
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let mut frames = Vec::with_capacity(batch.len());
        let mut stacked = Vec::new();
        for agg in batch {
            let (t, w) = agg.matrix.shape();
            if t == 0 {
                return Err(Error::Shape("aggregated features have zero frames".into()));
            }
            if w != d {
                return Err(Error::Shape(format!(
                    "feature width {w}, back-end expects {d}"
                )));
            }
            frames.push(t);
            stacked.extend_from_slice(agg.matrix.as_slice());
        }
        let n = frames.iter().sum::<usize>();
        let x = Matrix::from_vec(n, d, stacked)?;

        // Batch norm, per feature over all frames in the batch.
        let (mean, var) = match mode {
            Mode::Train => {
                let count = S::of_usize(n);
                let mean: Vec<S> = x.column_sums().into_iter().map(|s| s / count).collect();
                let mut var = vec![S::zero(); d];
                for r in 0..n {
                    for (j, &v) in x.row(r).iter().enumerate() {
                        let c = v - mean[j];
                        var[j] += c * c;
                    }
                }
                for v in &mut var {
                    *v /= count;
                }
                (mean, var)
            }
            Mode::Eval => (self.bn_running_mean.clone(), self.bn_running_var.clone()),
        };
        let bn_eps = S::lit(BN_EPS);
        let inv_std: Vec<S> = var
            .iter()
            .map(|&v| S::one() / (v + bn_eps).sqrt())
            .collect();
        let mut x_hat = Matrix::zeros(n, d);
        let mut bn_out = Matrix::zeros(n, d);
        for r in 0..n {
            for j in 0..d {
                let xh = (x[(r, j)] - mean[j]) * inv_std[j];
                x_hat[(r, j)] = xh;
                bn_out[(r, j)] = self.bn_gamma[j] * xh + self.bn_beta[j];
            }
        }

        let train = mode == Mode::Train && self.dropout_p > S::zero();
        let mut z1 = bn_out.matmul(&self.ff1_weight);
        z1.add_row_vector(&self.ff1_bias);
        let mut h1 = z1.map(selu);
        let mask1 = train.then(|| dropout_mask(h1.as_slice().len(), self.dropout_p, rng));
        if let Some(m) = &mask1 {
            apply_mask(&mut h1, m);
        }
        let mut z2 = h1.matmul(&self.ff2_weight);
        z2.add_row_vector(&self.ff2_bias);
        let mut h2 = z2.map(selu);
        let mask2 = train.then(|| dropout_mask(h2.as_slice().len(), self.dropout_p, rng));
        if let Some(m) = &mask2 {
            apply_mask(&mut h2, m);
        }

        let hidden = self.hidden_dim();
        let mut pools = Vec::with_capacity(batch.len());
        let mut scores = Vec::with_capacity(batch.len());
        let mut offset = 0;
        for &t in &frames {
            let seq = Matrix::from_vec(
                t,
                hidden,
                h2.as_slice()[offset * hidden..(offset + t) * hidden].to_vec(),
            )?;
            offset += t;
            let pool = attentive_stat_pool(&seq, &self.attn_weight, self.attn_bias[0])?;
            let pooled = pool.pooled();
            let mut logits = [self.head_bias[0], self.head_bias[1]];
            for (i, &v) in pooled.iter().enumerate() {
                logits[0] += v * self.head_weight[(i, 0)];
                logits[1] += v * self.head_weight[(i, 1)];
            }
            if !(logits[0].is_finite() && logits[1].is_finite()) {
                return Err(Error::NonFinite("back-end logits".into()));
            }
            scores.push(ClassScores::from_logits(logits));
            pools.push(pool);
        }
        let cache = FfnCache {
            mode,
            frames,
            x_hat,
            bn_out,
            bn_inv_std: inv_std,
            batch_mean: mean,
            batch_var: var,
            z1,
            mask1,
            h1,
            z2,
            mask2,
            h2,
            pools,
        };
        Ok((scores, cache))
    }

    fn backward_batch(
        &self,
        cache: &FfnCache<S>,
        loss_grads: &[[S; 2]],
    ) -> Result<(Self, Vec<Matrix<S>>)> {
        if loss_grads.len() != cache.frames.len() {
            return Err(Error::Shape(format!(
                "{} loss gradients for a batch of {}",
                loss_grads.len(),
                cache.frames.len()
            )));
        }
        let d = self.input_dim();
        let hidden = self.hidden_dim();
        if cache.x_hat.cols() != d || cache.h2.cols() != hidden {
            return Err(Error::Shape(
                "forward cache does not match these parameters".into(),
            ));
        }
        let mut grads = self.zeros_like();
        let n = cache.h2.rows();

        // Head and pooling, per utterance.
        let mut d_h2 = Matrix::zeros(n, hidden);
        let mut offset = 0;
        for ((pool, &t), lg) in cache.pools.iter().zip(&cache.frames).zip(loss_grads) {
            let pooled = pool.pooled();
            grads.head_bias[0] += lg[0];
            grads.head_bias[1] += lg[1];
            let mut d_pooled = vec![S::zero(); 2 * hidden];
            for (i, &v) in pooled.iter().enumerate() {
                grads.head_weight[(i, 0)] += v * lg[0];
                grads.head_weight[(i, 1)] += v * lg[1];
                d_pooled[i] = self.head_weight[(i, 0)] * lg[0] + self.head_weight[(i, 1)] * lg[1];
            }
            let seq = Matrix::from_vec(
                t,
                hidden,
                cache.h2.as_slice()[offset * hidden..(offset + t) * hidden].to_vec(),
            )?;
            let (d_seq, d_w, d_b) =
                attentive_stat_pool_backward(&seq, &self.attn_weight, pool, &d_pooled);
            for (g, v) in grads.attn_weight.iter_mut().zip(d_w) {
                *g += v;
            }
            grads.attn_bias[0] += d_b;
            d_h2.as_mut_slice()[offset * hidden..(offset + t) * hidden]
                .copy_from_slice(d_seq.as_slice());
            offset += t;
        }

        // Second FF layer.
        if let Some(m) = &cache.mask2 {
            apply_mask(&mut d_h2, m);
        }
        let mut d_z2 = d_h2;
        for (g, &z) in d_z2.as_mut_slice().iter_mut().zip(cache.z2.as_slice()) {
            *g *= selu_grad(z);
        }
        grads.ff2_weight = cache.h1.t_matmul(&d_z2);
        grads.ff2_bias = d_z2.column_sums();
        let mut d_h1 = d_z2.matmul_t(&self.ff2_weight);

        // First FF layer.
        if let Some(m) = &cache.mask1 {
            apply_mask(&mut d_h1, m);
        }
        let mut d_z1 = d_h1;
        for (g, &z) in d_z1.as_mut_slice().iter_mut().zip(cache.z1.as_slice()) {
            *g *= selu_grad(z);
        }
        grads.ff1_weight = cache.bn_out.t_matmul(&d_z1);
        grads.ff1_bias = d_z1.column_sums();
        let d_bn = d_z1.matmul_t(&self.ff1_weight);

        // Batch norm.
        let mut d_x = Matrix::zeros(n, d);
        for j in 0..d {
            let mut sum_dy = S::zero();
            let mut sum_dy_xh = S::zero();
            for r in 0..n {
                sum_dy += d_bn[(r, j)];
                sum_dy_xh += d_bn[(r, j)] * cache.x_hat[(r, j)];
            }
            grads.bn_beta[j] = sum_dy;
            grads.bn_gamma[j] = sum_dy_xh;
            let gamma = self.bn_gamma[j];
            let inv = cache.bn_inv_std[j];
            match cache.mode {
                Mode::Eval => {
                    for r in 0..n {
                        d_x[(r, j)] = d_bn[(r, j)] * gamma * inv;
                    }
                }
                Mode::Train => {
                    let count = S::of_usize(n);
                    let sum_dxh = sum_dy * gamma;
                    let sum_dxh_xh = sum_dy_xh * gamma;
                    for r in 0..n {
                        let dxh = d_bn[(r, j)] * gamma;
                        d_x[(r, j)] = inv / count
                            * (count * dxh - sum_dxh - cache.x_hat[(r, j)] * sum_dxh_xh);
                    }
                }
            }
        }
        grads.bn_running_mean = vec![S::zero(); d];
        grads.bn_running_var = vec![S::zero(); d];

        let mut inputs = Vec::with_capacity(cache.frames.len());
        let mut offset = 0;
        for &t in &cache.frames {
            inputs.push(Matrix::from_vec(
                t,
                d,
                d_x.as_slice()[offset * d..(offset + t) * d].to_vec(),
            )?);
            offset += t;
        }
        Ok((grads, inputs))
    }

    fn trainable(&self) -> Vec<&[S]> {
        vec![
            &self.bn_gamma,
            &self.bn_beta,
            self.ff1_weight.as_slice(),
            &self.ff1_bias,
            self.ff2_weight.as_slice(),
            &self.ff2_bias,
            &self.attn_weight,
            &self.attn_bias,
            self.head_weight.as_slice(),
            &self.head_bias,
        ]
    }

    fn trainable_mut(&mut self) -> Vec<&mut [S]> {
        vec![
            &mut self.bn_gamma,
            &mut self.bn_beta,
            self.ff1_weight.as_mut_slice(),
            &mut self.ff1_bias,
            self.ff2_weight.as_mut_slice(),
            &mut self.ff2_bias,
            &mut self.attn_weight,
            &mut self.attn_bias,
            self.head_weight.as_mut_slice(),
            &mut self.head_bias,
        ]
    }

    /// Running statistics with momentum 0.1; the variance is unbiased.
    fn commit_batch_statistics(&mut self, cache: &FfnCache<S>) {
        if cache.mode != Mode::Train {
            return;
        }
        let n = cache.x_hat.rows();
        let momentum = S::lit(BN_MOMENTUM);
        let unbias = if n > 1 {
            S::of_usize(n) / S::of_usize(n - 1)
        } else {
            S::one()
        };
        for j in 0..self.input_dim() {
            self.bn_running_mean[j] =
                (S::one() - momentum) * self.bn_running_mean[j] + momentum * cache.batch_mean[j];
            self.bn_running_var[j] = (S::one() - momentum) * self.bn_running_var[j]
                + momentum * cache.batch_var[j] * unbias;
        }
    }

    fn to_tensors(&self) -> BTreeMap<String, TensorData> {
        let v = |x: &[S]| TensorData::vector(x.iter().map(|v| v.as_f32()).collect());
        let m = |x: &Matrix<S>| TensorData::from_matrix(&x.cast::<f32>());
        let h = self.hidden_dim();
        BTreeMap::from([
            ("backend.bn.gamma".to_string(), v(&self.bn_gamma)),
            ("backend.bn.beta".to_string(), v(&self.bn_beta)),
            (
                "backend.bn.running_mean".to_string(),
                v(&self.bn_running_mean),
            ),
            (
                "backend.bn.running_var".to_string(),
                v(&self.bn_running_var),
            ),
            ("backend.ff1.weight".to_string(), m(&self.ff1_weight)),
            ("backend.ff1.bias".to_string(), v(&self.ff1_bias)),
            ("backend.ff2.weight".to_string(), m(&self.ff2_weight)),
            ("backend.ff2.bias".to_string(), v(&self.ff2_bias)),
            (
                "backend.attn.weight".to_string(),
                TensorData {
                    shape: vec![h, 1],
                    data: self.attn_weight.iter().map(|v| v.as_f32()).collect(),
                },
            ),
            ("backend.attn.bias".to_string(), v(&self.attn_bias)),
            ("backend.head.weight".to_string(), m(&self.head_weight)),
            ("backend.head.bias".to_string(), v(&self.head_bias)),
            ("backend.dropout_p".to_string(), v(&[self.dropout_p])),
        ])
    }
}
