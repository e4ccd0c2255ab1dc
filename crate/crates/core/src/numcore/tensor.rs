use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Logit assigned to classes that have not been introduced yet.
pub const UNSEEN_LOGIT: f64 = -1e10;

/// Row-major dense array of `f64` with shape metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} holds {numel} elements but {} values were given",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite value at flat index {i}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view used by parameter updates. Callers keep values finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        let cols = self.shape.get(1).copied().unwrap_or(1).max(1);
        self.data.chunks(cols)
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("softmax of non-finite logits"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    Ok(out)
}

/// Softmax with every unseen class pinned to [`UNSEEN_LOGIT`].
pub fn masked_softmax(logits: &[f64], seen: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != seen.len() {
        return Err(Error::invalid(format!(
            "{} logits but mask of length {}",
            logits.len(),
            seen.len()
        )));
    }
    if !seen.iter().any(|&s| s) {
        return Err(Error::invalid("mask marks no class as seen"));
    }
    let masked: Vec<f64> = logits
        .iter()
        .zip(seen)
        .map(|(&z, &s)| if s { z } else { UNSEEN_LOGIT })
        .collect();
    softmax(&masked)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn tensor_shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let third = 1.0 / 3.0;
        assert!(close(&softmax(&[0.0, 0.0, 0.0]).unwrap(), &[third; 3], 1e-15));
        assert!(close(&softmax(&[1000.0, 1000.0]).unwrap(), &[0.5, 0.5], 1e-15));
        // e^{-2}, e^{-1}, 1 over their sum
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        assert!(close(&p, &[0.09003, 0.24473, 0.66524], 5e-6));
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn masked_softmax_examples() {
        let p = masked_softmax(&[2.0, 2.0], &[true, false]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1] < 1e-12);

        let raw = softmax(&[5.0, 1.0, 1.0]).unwrap();
        let p = masked_softmax(&[5.0, 1.0, 1.0], &[true; 3]).unwrap();
        assert_eq!(p, raw);

        let p = masked_softmax(&[0.0, 0.0, 0.0], &[true, true, false]).unwrap();
        assert!(close(&p[..2], &[0.5, 0.5], 1e-15) && p[2] < 1e-12);

        assert!(masked_softmax(&[1.0, 2.0], &[false, false]).is_err());
    }

    #[test]
    fn log_sum_exp_matches_direct_sum() {
        let v = [0.3, -1.2, 2.5];
        let direct = v.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&v) - direct).abs() < 1e-14);
    }

    fn argmax(v: &[f64]) -> usize {
        v.iter().enumerate().fold(0, |best, (i, x)| if *x > v[best] { i } else { best })
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(logits in prop::collection::vec(-1e4f64..1e4, 1..20)) {
            let p = softmax(&logits).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn masking_hides_unseen_and_keeps_seen_argmax(
            logits in prop::collection::vec(-50.0f64..50.0, 2..12),
            mask_bits in prop::collection::vec(any::<bool>(), 12),
        ) {
            let mut seen = mask_bits[..logits.len()].to_vec();
            seen[0] = true;
            let p = masked_softmax(&logits, &seen).unwrap();
            for (pi, s) in p.iter().zip(&seen) {
                if !s {
                    prop_assert!(*pi < 1e-12);
                }
            }
            let seen_idx: Vec<usize> = (0..logits.len()).filter(|&i| seen[i]).collect();
            let raw: Vec<f64> = seen_idx.iter().map(|&i| logits[i]).collect();
            let probs: Vec<f64> = seen_idx.iter().map(|&i| p[i]).collect();
            prop_assert_eq!(argmax(&probs), argmax(&raw));
        }
    }
}
