//! Tape-free numeric primitives.

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Probability floor applied before taking logs in cross-entropy.
pub const CE_FLOOR: f64 = 1e-12;

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn softmax_into(xs: &[f64], out: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn softmax(xs: &[f64]) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("softmax input contains non-finite values"));
    }
    let mut out = vec![0.0; xs.len()];
    softmax_into(xs, &mut out);
    Ok(out)
}

/// Cross-entropy value in nats together with whether the floor was applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossEntropy {
    pub value: f64,
    pub clamped: bool,
}

/// `-ln probs[target]`, flooring the probability at [`CE_FLOOR`].
pub fn cross_entropy(target: usize, probs: &[f64]) -> Result<CrossEntropy> {
    let p = *probs.get(target).ok_or_else(|| {
        Error::invalid(format!(
            "target {target} out of range for {} classes",
            probs.len()
        ))
    })?;
    Ok(CrossEntropy {
        value: -p.max(CE_FLOOR).ln(),
        clamped: p < CE_FLOOR,
    })
}

/// Cross-entropy against a soft (e.g. one-hot) target distribution.
pub fn cross_entropy_soft(target: &[f64], probs: &[f64]) -> Result<CrossEntropy> {
    if target.len() != probs.len() {
        return Err(Error::Shape(format!(
            "target has {} classes, probs {}",
            target.len(),
            probs.len()
        )));
    }
    let mut value = 0.0;
    let mut clamped = false;
    for (&t, &p) in target.iter().zip(probs) {
        if t != 0.0 {
            clamped |= p < CE_FLOOR;
            value -= t * p.max(CE_FLOOR).ln();
        }
    }
    Ok(CrossEntropy { value, clamped })
}

/// Inverted dropout on a plain tensor.
pub fn dropout<R: Rng + ?Sized>(x: &Tensor, rate: f64, rng: &mut R, training: bool) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 / (1.0 - rate);
    let data = x
        .data()
        .iter()
        .map(|v| if rng.random::<f64>() < rate { 0.0 } else { v * keep })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[2.0, 0.0]).unwrap();
        assert!((p[0] - 0.8808).abs() < 1e-4 && (p[1] - 0.1192).abs() < 1e-4);
        let shifted = softmax(&[2.0 + 37.5, 0.0 + 37.5]).unwrap();
        for (a, b) in p.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn softmax_is_stable_at_extremes() {
        let p = softmax(&[1000.0, -1000.0, 999.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(0, &[1.0, 0.0]).unwrap().value, 0.0);
        let u = cross_entropy(2, &[0.25; 4]).unwrap().value;
        assert!((u - 4f64.ln()).abs() < 1e-12);
        assert!((u - 1.3863).abs() < 1e-4);
        let h = cross_entropy(1, &[0.5, 0.5]).unwrap().value;
        assert!((h - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let ce = cross_entropy(1, &[1.0, 0.0]).unwrap();
        assert!(ce.clamped);
        assert!((ce.value - (-CE_FLOOR.ln())).abs() < 1e-9);
        assert!(ce.value.is_finite());
        assert!(cross_entropy(2, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn soft_cross_entropy_matches_index_form() {
        let p = [0.2, 0.5, 0.3];
        let a = cross_entropy(1, &p).unwrap().value;
        let b = cross_entropy_soft(&[0.0, 1.0, 0.0], &p).unwrap().value;
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_identity_cases() {
        let x = Tensor::new(vec![3, 4], (0..12).map(f64::from).collect()).unwrap();
        let mut rng = Streams::new(1).rng();
        assert_eq!(dropout(&x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(dropout(&x, 0.5, &mut rng, false).unwrap(), x);
        assert!(dropout(&x, 1.0, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_preserves_mean() {
        let x = Tensor::filled(vec![1_000_000], 1.0);
        let mut rng = Streams::new(11).child("dropout").rng();
        let y = dropout(&x, 0.1, &mut rng, true).unwrap();
        let mean = y.data().iter().sum::<f64>() / y.len() as f64;
        assert!((0.99..=1.01).contains(&mean), "mean {mean}");
    }

    #[test]
    fn dropout_same_seed_same_mask() {
        let x = Tensor::filled(vec![256], 1.0);
        let a = dropout(&x, 0.3, &mut Streams::new(5).rng(), true).unwrap();
        let b = dropout(&x, 0.3, &mut Streams::new(5).rng(), true).unwrap();
        assert_eq!(a, b);
    }
}
