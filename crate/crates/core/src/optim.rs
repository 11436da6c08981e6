//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for a list of parameter blocks.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(block_sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = block_sizes.into_iter().collect();
        Self {
            m: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over all blocks. Gradients are checked before anything
    /// is modified, so a non-finite gradient leaves the state untouched.
    pub fn step(
        &mut self,
        params: &mut [&mut [S]],
        grads: &[&[S]],
        config: &AdamConfig,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "Adam state has {} blocks, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (b, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[b].len() || g.len() != self.m[b].len() {
                return Err(Error::Shape(format!("Adam block {b}: size mismatch")));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient block {b} element {i} is {} at step {}",
                    g[i],
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        for (b, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            adam_update(p, g, &mut self.m[b], &mut self.v[b], self.step, config);
        }
        Ok(())
    }
}

/// `m ← β1 m + (1−β1) g`, `v ← β2 v + (1−β2) g²`,
/// `θ ← θ − lr · m̂ / (sqrt(v̂) + eps)` with bias-corrected `m̂`, `v̂` at step `t ≥ 1`.
pub fn adam_update<S: Scalar>(
    param: &mut [S],
    grad: &[S],
    m: &mut [S],
    v: &mut [S],
    t: u64,
    config: &AdamConfig,
) {
    let b1 = S::lit(config.beta1);
    let b2 = S::lit(config.beta2);
    let lr = S::lit(config.lr);
    let eps = S::lit(config.eps);
    let c1 = S::one() - S::lit(config.beta1.powf(t as f64));
    let c2 = S::one() - S::lit(config.beta2.powf(t as f64));
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (S::one() - b1) * g;
        v[i] = b2 * v[i] + (S::one() - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        let step = lr * m_hat / (v_hat.sqrt() + eps);
        // Subtracting a signed zero could flip `-0.0` to `0.0`.
        if step != S::zero() {
            param[i] -= step;
        }
    }
}
