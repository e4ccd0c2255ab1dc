//! Classification and regression losses with analytic gradients.
//!
//! Probability-space losses (`ce_*`, `focal_*`, `balanced_loss`) take
//! probabilities; the `*_logit_grad` helpers give the gradient of the same
//! loss with respect to the logits that produced those probabilities through
//! a (masked) softmax. Probabilities are clamped to `[PROB_EPS, 1]` before any
//! logarithm.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROB_EPS: f64 = 1e-12;

/// Per-class instance counts `n_c` and their total `n`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    total: u64,
    per_class: BTreeMap<usize, u64>,
}

impl ClassCounts {
    pub fn new(per_class: BTreeMap<usize, u64>) -> Self {
        let total = per_class.values().sum();
        Self { total, per_class }
    }

    pub fn from_labels<I: IntoIterator<Item = usize>>(labels: I) -> Self {
        let mut counts = Self::default();
        for c in labels {
            counts.add(c, 1);
        }
        counts
    }

    pub fn add(&mut self, class: usize, count: u64) {
        *self.per_class.entry(class).or_insert(0) += count;
        self.total += count;
    }

    pub fn merge(&mut self, other: &ClassCounts) {
        for (&c, &n) in &other.per_class {
            self.add(c, n);
        }
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Count for `class`; classes never recorded count as zero.
    pub fn count(&self, class: usize) -> u64 {
        self.per_class.get(&class).copied().unwrap_or(0)
    }

    pub fn per_class(&self) -> &BTreeMap<usize, u64> {
        &self.per_class
    }
}

/// How the class-balance factor is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BalancedFactorMode {
    /// `(n - n_c) / n`, bounded in `[0, 1]`.
    PaperCorrected,
    /// `n - n_c / n`, kept only for comparison runs.
    Literal,
    /// Factor fixed at 1, turning the balanced loss into plain focal loss.
    Off,
}

impl std::str::FromStr for BalancedFactorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-corrected" => Ok(Self::PaperCorrected),
            "literal" => Ok(Self::Literal),
            "off" => Ok(Self::Off),
            other => Err(Error::Config(format!("unknown balanced factor mode '{other}'"))),
        }
    }
}

impl BalancedFactorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::PaperCorrected => "paper-corrected",
            Self::Literal => "literal",
            Self::Off => "off",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Focusing exponent.
    pub gamma: f64,
    /// Per-class weights; classes absent from the map weigh 1.
    pub alpha: BTreeMap<usize, f64>,
    pub balanced_factor_mode: BalancedFactorMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: BTreeMap::new(),
            balanced_factor_mode: BalancedFactorMode::PaperCorrected,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if let Some((c, a)) = self.alpha.iter().find(|(_, &a)| !(a > 0.0 && a.is_finite())) {
            return Err(Error::invalid(format!("alpha for class {c} must be > 0, got {a}")));
        }
        Ok(())
    }

    pub fn alpha_for(&self, class: usize) -> f64 {
        self.alpha.get(&class).copied().unwrap_or(1.0)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0)
}

fn check_probability(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
    }
    Ok(())
}

fn check_binary_label(y: u8) -> Result<()> {
    if y > 1 {
        return Err(Error::invalid(format!("binary label must be 0 or 1, got {y}")));
    }
    Ok(())
}

fn check_distribution(probs: &[f64], target: usize) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::invalid("empty probability vector"));
    }
    if target >= probs.len() {
        return Err(Error::invalid(format!(
            "target class {target} out of range for {} classes",
            probs.len()
        )));
    }
    if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
        return Err(Error::invalid(format!("invalid probability {p}")));
    }
    Ok(())
}

/// Binary cross-entropy `-y log p - (1 - y) log(1 - p)`.
pub fn ce_binary(p: f64, y: u8) -> Result<f64> {
    check_probability(p)?;
    check_binary_label(y)?;
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let y = f64::from(y);
    Ok(-y * p.ln() - (1.0 - y) * (1.0 - p).ln())
}

/// `d ce_binary / dp`.
pub fn ce_binary_grad(p: f64, y: u8) -> Result<f64> {
    check_probability(p)?;
    check_binary_label(y)?;
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let y = f64::from(y);
    Ok(-y / p + (1.0 - y) / (1.0 - p))
}

/// Binary focal loss `-alpha_t (1 - p_t)^gamma log p_t`, with `p_t = p` for
/// `y = 1` and `1 - p` otherwise.
pub fn focal_binary(p: f64, y: u8, alpha_t: f64, gamma: f64) -> Result<f64> {
    check_probability(p)?;
    check_binary_label(y)?;
    let pt = if y == 1 { p } else { 1.0 - p }.clamp(PROB_EPS, 1.0);
    Ok(-alpha_t * (1.0 - pt).powf(gamma) * pt.ln())
}

/// `d focal_binary / dp`.
pub fn focal_binary_grad(p: f64, y: u8, alpha_t: f64, gamma: f64) -> Result<f64> {
    check_probability(p)?;
    check_binary_label(y)?;
    let pt = if y == 1 { p } else { 1.0 - p }.clamp(PROB_EPS, 1.0);
    let q = 1.0 - pt;
    let modulating_slope = if gamma == 0.0 || q <= 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0) * pt.ln()
    };
    let d_dpt = -alpha_t * (q.powf(gamma) / pt - modulating_slope);
    Ok(if y == 1 { d_dpt } else { -d_dpt })
}

/// Softmax cross-entropy against a class index: `-log p_target`.
pub fn ce_multiclass(probs: &[f64], target: usize) -> Result<f64> {
    check_distribution(probs, target)?;
    Ok(-clamp_prob(probs[target]).ln())
}

/// Softmax focal loss `-alpha_c (1 - p_c)^gamma log p_c`.
pub fn focal_softmax(probs: &[f64], target: usize, cfg: &LossConfig) -> Result<f64> {
    check_distribution(probs, target)?;
    Ok(focal_value(probs[target], cfg.alpha_for(target), cfg.gamma))
}

fn focal_value(p_target: f64, alpha: f64, gamma: f64) -> f64 {
    let p = p_target.min(1.0);
    -alpha * (1.0 - p).powf(gamma) * clamp_prob(p).ln()
}

/// The class-balance factor for `class` under `mode`.
pub fn balanced_factor(counts: &ClassCounts, class: usize, mode: BalancedFactorMode) -> Result<f64> {
    if mode == BalancedFactorMode::Off {
        return Ok(1.0);
    }
    let n = counts.total();
    if n == 0 {
        return Err(Error::invalid("class counts are empty (n = 0)"));
    }
    let n = n as f64;
    let nc = counts.count(class) as f64;
    Ok(match mode {
        BalancedFactorMode::PaperCorrected => (n - nc) / n,
        BalancedFactorMode::Literal => n - nc / n,
        BalancedFactorMode::Off => unreachable!(),
    })
}

/// Focal loss scaled by the class-balance factor of the target class.
pub fn balanced_loss(
    probs: &[f64],
    target: usize,
    cfg: &LossConfig,
    counts: &ClassCounts,
) -> Result<f64> {
    let factor = balanced_factor(counts, target, cfg.balanced_factor_mode)?;
    Ok(focal_softmax(probs, target, cfg)? * factor)
}

/// Gradient of the softmax focal loss with respect to the logits, given the
/// softmax output `probs`. Masked classes (probability 0) get zero gradient.
pub fn focal_softmax_logit_grad(probs: &[f64], target: usize, alpha: f64, gamma: f64) -> Vec<f64> {
    let pc = probs[target].min(1.0);
    let q = 1.0 - pc;
    if q <= 0.0 {
        return vec![0.0; probs.len()];
    }
    // dL/dz_j = alpha (delta_cj - p_j) [gamma p_c q^(gamma-1) ln p_c - q^gamma]
    let slope = if gamma == 0.0 {
        0.0
    } else {
        gamma * pc * q.powf(gamma - 1.0) * clamp_prob(pc).ln()
    };
    let common = alpha * (slope - q.powf(gamma));
    probs
        .iter()
        .enumerate()
        .map(|(j, &pj)| {
            let delta = if j == target { 1.0 } else { 0.0 };
            common * (delta - pj)
        })
        .collect()
}

pub fn ce_multiclass_logit_grad(probs: &[f64], target: usize) -> Vec<f64> {
    focal_softmax_logit_grad(probs, target, 1.0, 0.0)
}

/// Value and logit gradient of [`balanced_loss`].
pub fn balanced_loss_with_logit_grad(
    probs: &[f64],
    target: usize,
    cfg: &LossConfig,
    counts: &ClassCounts,
) -> Result<(f64, Vec<f64>)> {
    let factor = balanced_factor(counts, target, cfg.balanced_factor_mode)?;
    let value = focal_softmax(probs, target, cfg)? * factor;
    let mut grad = focal_softmax_logit_grad(probs, target, cfg.alpha_for(target), cfg.gamma);
    grad.iter_mut().for_each(|g| *g *= factor);
    Ok((value, grad))
}

/// `d balanced_loss / d p_target` (the loss depends on no other entry).
pub fn balanced_loss_prob_grad(
    probs: &[f64],
    target: usize,
    cfg: &LossConfig,
    counts: &ClassCounts,
) -> Result<f64> {
    check_distribution(probs, target)?;
    let factor = balanced_factor(counts, target, cfg.balanced_factor_mode)?;
    let p = probs[target].min(1.0);
    if p < PROB_EPS {
        return Ok(0.0);
    }
    let q = 1.0 - p;
    let gamma = cfg.gamma;
    let slope = if gamma == 0.0 || q <= 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0) * p.ln()
    };
    Ok(-cfg.alpha_for(target) * factor * (q.powf(gamma) / p - slope))
}

fn check_pair(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} vs {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.iter().chain(target).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite regression input"));
    }
    Ok(())
}

/// Smooth L1 with threshold 1, summed over coordinates.
pub fn smooth_l1(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(a, b)| {
            let d = (a - b).abs();
            if d < 1.0 {
                0.5 * d * d
            } else {
                d - 0.5
            }
        })
        .sum())
}

/// `d smooth_l1 / d pred`.
pub fn smooth_l1_grad(pred: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    check_pair(pred, target)?;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(a, b)| {
            let d = a - b;
            if d.abs() < 1.0 {
                d
            } else {
                d.signum()
            }
        })
        .collect())
}

/// Mean squared error over coordinates.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok(pred.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// `d mse / d pred`.
pub fn mse_grad(pred: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    check_pair(pred, target)?;
    let n = pred.len().max(1) as f64;
    Ok(pred.iter().zip(target).map(|(a, b)| 2.0 * (a - b) / n).collect())
}

fn restrict(probs: &[f64], classes: &[usize]) -> Vec<f64> {
    let sum: f64 = classes.iter().map(|&c| probs[c]).sum();
    let sum = sum.max(PROB_EPS);
    classes.iter().map(|&c| probs[c] / sum).collect()
}

fn check_old_classes(student: &[f64], teacher: &[f64], old: &[usize]) -> Result<()> {
    if old.is_empty() {
        return Err(Error::invalid("old class set is empty"));
    }
    if student.len() != teacher.len() {
        return Err(Error::invalid("student and teacher distributions differ in length"));
    }
    if let Some(c) = old.iter().find(|&&c| c >= student.len()) {
        return Err(Error::invalid(format!("old class {c} out of range")));
    }
    Ok(())
}

/// `KL(teacher || student)` after restricting both distributions to the old
/// classes and renormalizing.
pub fn kl_old_classes(student: &[f64], teacher: &[f64], old: &[usize]) -> Result<f64> {
    check_old_classes(student, teacher, old)?;
    let s = restrict(student, old);
    let t = restrict(teacher, old);
    Ok(t.iter()
        .zip(&s)
        .map(|(&ti, &si)| if ti > 0.0 { ti * (clamp_prob(ti).ln() - clamp_prob(si).ln()) } else { 0.0 })
        .sum::<f64>()
        .max(0.0))
}

/// Gradient of [`kl_old_classes`] with respect to the student's logits:
/// `s~_j - t~_j` on old classes and zero elsewhere.
pub fn kl_old_classes_logit_grad(student: &[f64], teacher: &[f64], old: &[usize]) -> Result<Vec<f64>> {
    check_old_classes(student, teacher, old)?;
    let s = restrict(student, old);
    let t = restrict(teacher, old);
    let mut grad = vec![0.0; student.len()];
    for (k, &c) in old.iter().enumerate() {
        grad[c] = s[k] - t[k];
    }
    Ok(grad)
}
