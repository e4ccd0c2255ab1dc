//! Seed-level summaries and the paired sign test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

/// `None` when `values` is empty.
pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(Summary { mean, std, n })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// One-sided `P(X >= wins)` for `X ~ Binomial(wins + losses, 1/2)`.
    pub p_value: f64,
}

/// Tests whether `treatment` beats `control` pairwise. Ties are dropped.
pub fn sign_test(treatment: &[f64], control: &[f64]) -> SignTest {
    let mut wins = 0;
    let mut losses = 0;
    let mut ties = 0;
    for (t, c) in treatment.iter().zip(control) {
        match t.partial_cmp(c) {
            Some(std::cmp::Ordering::Greater) => wins += 1,
            Some(std::cmp::Ordering::Less) => losses += 1,
            _ => ties += 1,
        }
    }
    let n = wins + losses;
    let p_value = if n == 0 || wins == 0 {
        1.0
    } else {
        let b = Binomial::new(0.5, n as u64).expect("valid binomial");
        1.0 - b.cdf(wins as u64 - 1)
    };
    SignTest {
        wins,
        losses,
        ties,
        p_value,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_test_matches_hand_counts() {
        let t = sign_test(&[1.0; 5], &[0.0; 5]);
        assert_eq!((t.wins, t.losses), (5, 0));
        assert!((t.p_value - 1.0 / 32.0).abs() < 1e-12);
        // 8 of 10: (45 + 10 + 1) / 1024
        let mut a = vec![1.0; 8];
        a.extend([0.0, 0.0]);
        let t = sign_test(&a, &[0.5; 10]);
        assert!((t.p_value - 56.0 / 1024.0).abs() < 1e-12);
        let t = sign_test(&[1.0, 2.0], &[1.0, 2.0]);
        assert_eq!((t.ties, t.p_value), (2, 1.0));
    }

    #[test]
    fn summary_uses_sample_std() {
        let s = summarize(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.std, s.n), (2.0, 1.0, 3));
        assert_eq!(summarize(&[4.0]).unwrap().std, 0.0);
        assert!(summarize(&[]).is_none());
    }
}
