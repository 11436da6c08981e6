//! Learnable layer weighting: `h_final = Σ_l softmax(w)_l · h_l`.
//!
//! The stored parameters are pre-softmax logits. Initialized to ones they
//! give the uniform mixture `1 / X`.

use crate::encoder::LayerFeatureStack;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Max-subtracted softmax.
pub fn softmax_normalize<S: Scalar>(raw: &[S]) -> Result<Vec<S>> {
    if raw.is_empty() {
        return Err(Error::Validation("layer weight vector is empty".into()));
    }
    if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("layer weight {i}")));
    }
    let mut out = raw.to_vec();
    crate::scalar::softmax_in_place(&mut out);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeightVector<S> {
    raw: Vec<S>,
    normalized: Vec<S>,
}

impl<S: Scalar> LayerWeightVector<S> {
    pub fn from_raw(raw: Vec<S>) -> Result<Self> {
        let normalized = softmax_normalize(&raw)?;
        Ok(Self { raw, normalized })
    }

    /// `X` logits equal to one.
    pub fn ones(num_layers: usize) -> Result<Self> {
        Self::from_raw(vec![S::one(); num_layers])
    }

    /// Sets the normalized weights directly, bypassing the softmax. Lets
    /// analysis and tests inject exact mixtures such as one-hot vectors.
    pub fn from_normalized_unchecked(normalized: Vec<S>) -> Self {
        Self {
            raw: normalized.iter().map(|&p| p.ln()).collect(),
            normalized,
        }
    }

    pub fn raw(&self) -> &[S] {
        &self.raw
    }

    pub fn normalized(&self) -> &[S] {
        &self.normalized
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    /// Mutable logits; call [`LayerWeightVector::renormalize`] afterwards.
    pub fn raw_mut(&mut self) -> &mut [S] {
        &mut self.raw
    }

    pub fn renormalize(&mut self) -> Result<()> {
        self.normalized = softmax_normalize(&self.raw)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedFeatures<S> {
    pub matrix: Matrix<S>,
    pub source_layers: usize,
}

/// Weighted sum of layer features. Layers with weight exactly zero are
/// skipped, so a one-hot mixture reproduces the selected layer bitwise.
pub fn aggregate<S: Scalar>(
    stack: &LayerFeatureStack<S>,
    weights: &LayerWeightVector<S>,
) -> Result<AggregatedFeatures<S>> {
    let p = weights.normalized();
    if p.len() != stack.num_layers() {
        return Err(Error::Shape(format!(
            "{} layer weights for {} layers",
            p.len(),
            stack.num_layers()
        )));
    }
    let (t, d) = (stack.frame_count(), stack.hidden_dim());
    let mut acc: Option<Matrix<S>> = None;
    for (layer, &w) in stack.layers().iter().zip(p) {
        if w == S::zero() {
            continue;
        }
        match acc.as_mut() {
            None => acc = Some(layer.map(|v| w * v)),
            Some(m) => {
                for (a, &v) in m.as_mut_slice().iter_mut().zip(layer.as_slice()) {
                    *a += w * v;
                }
            }
        }
    }
    let matrix = acc.unwrap_or_else(|| Matrix::zeros(t, d));
    if !matrix.is_finite() {
        return Err(Error::NonFinite("aggregated features".into()));
    }
    Ok(AggregatedFeatures {
        matrix,
        source_layers: p.len(),
    })
}

/// Gradient of a scalar loss with respect to the raw logits, given
/// `upstream = ∂loss/∂h_final`. Encoder features receive no gradient.
///
/// `g_l = ⟨upstream, h_l⟩`, then `∂/∂raw_k = p_k (g_k − Σ_l p_l g_l)`.
pub fn grad_aggregate<S: Scalar>(
    stack: &LayerFeatureStack<S>,
    weights: &LayerWeightVector<S>,
    upstream: &Matrix<S>,
) -> Result<Vec<S>> {
    let p = weights.normalized();
    if p.len() != stack.num_layers() {
        return Err(Error::Shape(format!(
            "{} layer weights for {} layers",
            p.len(),
            stack.num_layers()
        )));
    }
    if upstream.shape() != (stack.frame_count(), stack.hidden_dim()) {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} vs features {:?}",
            upstream.shape(),
            (stack.frame_count(), stack.hidden_dim())
        )));
    }
    let g: Vec<S> = stack
        .layers()
        .iter()
        .map(|h| upstream.frobenius_dot(h))
        .collect();
    let mean: S = p.iter().zip(&g).map(|(&pl, &gl)| pl * gl).sum();
    Ok(p.iter()
        .zip(&g)
        .map(|(&pk, &gk)| pk * (gk - mean))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(layers: Vec<Vec<Vec<f64>>>) -> LayerFeatureStack<f64> {
        LayerFeatureStack::new(
            "u",
            layers
                .iter()
                .map(|l| Matrix::from_rows(l).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn ones_give_uniform_weights() {
        let w = LayerWeightVector::<f32>::ones(12).unwrap();
        for &p in w.normalized() {
            assert!((p - 1.0 / 12.0).abs() < 1e-7);
        }
    }

    #[test]
    fn singleton_is_one() {
        assert_eq!(softmax_normalize(&[0.0f32]).unwrap(), vec![1.0]);
    }

    #[test]
    fn ln2_gives_two_thirds() {
        let p = softmax_normalize(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-7);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(softmax_normalize::<f32>(&[]).is_err());
        assert!(softmax_normalize(&[1.0f32, f32::NAN]).is_err());
        assert!(softmax_normalize(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn hand_computed_mixture() {
        let s = stack(vec![vec![vec![1.0, 2.0]], vec![vec![3.0, 4.0]]]);
        let w = LayerWeightVector::from_normalized_unchecked(vec![0.25, 0.75]);
        let out = aggregate(&s, &w).unwrap();
        assert_eq!(out.matrix.as_slice(), &[2.5, 3.5]);
        assert_eq!(out.source_layers, 2);
    }

    #[test]
    fn one_hot_selects_layer_bitwise() {
        let s = stack(vec![
            vec![vec![0.1, -0.0]],
            vec![vec![-0.0, 7.3]],
            vec![vec![2.0, 1e-30]],
        ]);
        for k in 0..3 {
            let mut p = vec![0.0; 3];
            p[k] = 1.0;
            let out = aggregate(&s, &LayerWeightVector::from_normalized_unchecked(p)).unwrap();
            let expected = s.layer(k + 1);
            assert!(out
                .matrix
                .as_slice()
                .iter()
                .zip(expected.as_slice())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn identical_layers_are_a_fixed_point() {
        let layer = vec![vec![0.5, -1.5], vec![2.0, 0.25]];
        let s = stack(vec![layer.clone(), layer.clone()]);
        let w = LayerWeightVector::from_raw(vec![0.3, -2.0]).unwrap();
        let out = aggregate(&s, &w).unwrap();
        assert!(out.matrix.max_abs_diff(s.layer(1)) < 1e-12);
    }

    #[test]
    fn length_mismatch() {
        let s = stack(vec![vec![vec![1.0]]]);
        let w = LayerWeightVector::<f64>::ones(2).unwrap();
        assert!(matches!(aggregate(&s, &w), Err(Error::Shape(_))));
        assert!(grad_aggregate(&s, &w, &Matrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn singleton_gradient_is_zero() {
        let s = stack(vec![vec![vec![3.0, -2.0]]]);
        let w = LayerWeightVector::from_raw(vec![0.7]).unwrap();
        let up = Matrix::from_rows(&[vec![5.0, 1.0]]).unwrap();
        assert_eq!(grad_aggregate(&s, &w, &up).unwrap(), vec![0.0]);
    }

    #[test]
    fn symmetric_gradient_is_zero() {
        // Equal inner products with uniform weights.
        let s = stack(vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]]);
        let w = LayerWeightVector::<f64>::ones(2).unwrap();
        let up = Matrix::from_rows(&[vec![2.0, 2.0]]).unwrap();
        assert_eq!(grad_aggregate(&s, &w, &up).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let s = stack(vec![
            vec![vec![0.3, -1.2], vec![0.8, 0.1]],
            vec![vec![-0.5, 0.4], vec![1.1, -0.7]],
            vec![vec![0.9, 0.2], vec![-0.3, 0.6]],
        ]);
        let up = Matrix::from_rows(&[vec![0.7, -0.4], vec![0.2, 1.3]]).unwrap();
        let raw = vec![0.4, -0.9, 1.7];
        let objective = |r: &[f64]| {
            let w = LayerWeightVector::from_raw(r.to_vec()).unwrap();
            aggregate(&s, &w).unwrap().matrix.frobenius_dot(&up)
        };
        let analytic =
            grad_aggregate(&s, &LayerWeightVector::from_raw(raw.clone()).unwrap(), &up).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut plus = raw.clone();
            plus[k] += h;
            let mut minus = raw.clone();
            minus[k] -= h;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let rel =
                (numeric - analytic[k]).abs() / numeric.abs().max(analytic[k].abs()).max(1e-8);
            assert!(
                rel < 1e-4,
                "layer {k}: numeric {numeric} analytic {}",
                analytic[k]
            );
        }
    }
}
