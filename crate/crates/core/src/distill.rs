//! Normalized feature distillation and the composite loss stack.
//!
//! `L_new_task = L_cls + lambda_loc * L_loc + lambda_cont * L_cont`,
//! `L_inherit = L_nfd + L_kl + L_reg`, and the task loss combines the two
//! either as `inherit + lambda * new_task` or, for the sensitivity grid, as
//! the convex mix `alpha * inherit + (1 - alpha) * new_task`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{balanced_loss, kl_old_classes, mse, smooth_l1, ClassCounts, LossConfig};
use crate::numcore::Tensor;

/// Floor on the per-channel standard deviation when normalizing.
pub const NORM_EPS: f64 = 1e-5;
pub const DEFAULT_MARGIN: f64 = 1.0;
pub const DEFAULT_EMA_RATE: f64 = 0.1;

/// A `(C, H, W)` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    tensor: Tensor,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("feature map dimensions must be >= 1"));
        }
        Ok(Self {
            tensor: Tensor::new(vec![channels, height, width], data)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn spatial(&self) -> usize {
        self.tensor.shape()[1] * self.tensor.shape()[2]
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let s = self.spatial();
        &self.tensor.data()[c * s..(c + 1) * s]
    }
}

fn channel_stats(x: &[f64]) -> (f64, f64) {
    let m = x.len() as f64;
    let mean = x.iter().sum::<f64>() / m;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
    (mean, var.sqrt())
}

/// Per channel: subtract the spatial mean and divide by the spatial
/// (population) standard deviation, floored at `eps` so constant channels
/// map to zero. Channels with std above `eps` are normalized exactly, which
/// keeps the map invariant to per-channel positive-affine transforms.
pub fn normalize_feature(f: &FeatureMap, eps: f64) -> FeatureMap {
    let mut out = Vec::with_capacity(f.data().len());
    for c in 0..f.channels() {
        let x = f.channel(c);
        let (mean, std) = channel_stats(x);
        let denom = std.max(eps);
        out.extend(x.iter().map(|v| (v - mean) / denom));
    }
    FeatureMap::new(f.shape()[0], f.shape()[1], f.shape()[2], out).expect("same shape")
}

/// Back-propagates `grad_out` (w.r.t. the normalized map) to the raw map.
pub fn normalize_feature_backward(f: &FeatureMap, eps: f64, grad_out: &[f64]) -> Vec<f64> {
    let s = f.spatial();
    let m = s as f64;
    let mut grad = Vec::with_capacity(grad_out.len());
    for c in 0..f.channels() {
        let x = f.channel(c);
        let g = &grad_out[c * s..(c + 1) * s];
        let (mean, std) = channel_stats(x);
        let denom = std.max(eps);
        let g_mean = g.iter().sum::<f64>() / m;
        let g_dot_centered: f64 = g.iter().zip(x).map(|(gi, xi)| gi * (xi - mean)).sum();
        let std_term = if std > eps {
            g_dot_centered / (std * std * m * std)
        } else {
            0.0
        };
        grad.extend(
            g.iter()
                .zip(x)
                .map(|(gi, xi)| (gi - g_mean) / denom - std_term * (xi - mean)),
        );
    }
    grad
}

fn check_same_shape(a: &FeatureMap, b: &FeatureMap) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "feature shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean squared difference between the normalized maps.
pub fn nfd_loss(student: &FeatureMap, teacher: &FeatureMap) -> Result<f64> {
    check_same_shape(student, teacher)?;
    let a = normalize_feature(student, NORM_EPS);
    let b = normalize_feature(teacher, NORM_EPS);
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n)
}

/// Value of [`nfd_loss`] and its gradient with respect to the student map.
pub fn nfd_loss_with_grad(student: &FeatureMap, teacher: &FeatureMap) -> Result<(f64, Vec<f64>)> {
    check_same_shape(student, teacher)?;
    let a = normalize_feature(student, NORM_EPS);
    let b = normalize_feature(teacher, NORM_EPS);
    let n = a.data().len() as f64;
    let diff: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let value = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let grad_norm: Vec<f64> = diff.iter().map(|d| 2.0 * d / n).collect();
    Ok((value, normalize_feature_backward(student, NORM_EPS, &grad_norm)))
}

/// Class prototypes in embedding space, tracked as moving averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototypes {
    dim: usize,
    centers: BTreeMap<usize, Vec<f64>>,
}

impl Prototypes {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            centers: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn insert(&mut self, class: usize, center: Vec<f64>) -> Result<()> {
        if center.len() != self.dim {
            return Err(Error::invalid(format!(
                "prototype of width {} for embedding width {}",
                center.len(),
                self.dim
            )));
        }
        self.centers.insert(class, center);
        Ok(())
    }

    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.centers.get(&class).map(Vec::as_slice)
    }

    pub fn contains(&self, class: usize) -> bool {
        self.centers.contains_key(&class)
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.centers.iter().map(|(&c, v)| (c, v.as_slice()))
    }

    /// Moves each batch class's prototype toward the batch mean of that
    /// class (`p <- (1 - rate) p + rate * mean`); new classes start at the mean.
    pub fn update(&mut self, embeddings: &[Vec<f64>], labels: &[usize], rate: f64) {
        let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        for (e, &y) in embeddings.iter().zip(labels) {
            let entry = sums.entry(y).or_insert_with(|| (vec![0.0; e.len()], 0));
            entry.0.iter_mut().zip(e).for_each(|(s, v)| *s += v);
            entry.1 += 1;
        }
        for (class, (sum, n)) in sums {
            let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
            match self.centers.get_mut(&class) {
                Some(p) => p
                    .iter_mut()
                    .zip(&mean)
                    .for_each(|(pv, mv)| *pv = (1.0 - rate) * *pv + rate * mv),
                None => {
                    self.centers.insert(class, mean);
                }
            }
        }
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Prototype clustering term: distance to the own-class prototype plus a
/// hinge `max(0, margin - d)` on the nearest other prototype, batch mean.
pub fn cluster_loss(
    embeddings: &Tensor,
    labels: &[usize],
    prototypes: &Prototypes,
    margin: f64,
) -> Result<f64> {
    cluster_loss_with_grad(embeddings, labels, prototypes, margin).map(|(v, _)| v)
}

/// Value of [`cluster_loss`] and its gradient with respect to the embeddings
/// (prototypes are not trained by gradient).
pub fn cluster_loss_with_grad(
    embeddings: &Tensor,
    labels: &[usize],
    prototypes: &Prototypes,
    margin: f64,
) -> Result<(f64, Tensor)> {
    let shape = embeddings.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::invalid(format!(
            "embeddings of shape {shape:?} for {} labels",
            labels.len()
        )));
    }
    if shape[1] != prototypes.dim() {
        return Err(Error::invalid(format!(
            "embedding width {} but prototype width {}",
            shape[1],
            prototypes.dim()
        )));
    }
    let batch = labels.len();
    if batch == 0 {
        return Ok((0.0, Tensor::zeros(shape.to_vec())));
    }
    let mut total = 0.0;
    let mut grad = vec![0.0; embeddings.len()];
    for (b, (e, &y)) in embeddings.rows().zip(labels).enumerate() {
        let own = prototypes
            .get(y)
            .ok_or_else(|| Error::invalid(format!("class {y} has no prototype")))?;
        let g = &mut grad[b * shape[1]..(b + 1) * shape[1]];
        let d_own = euclidean(e, own);
        total += d_own;
        if d_own > 0.0 {
            for ((gi, ei), pi) in g.iter_mut().zip(e).zip(own) {
                *gi += (ei - pi) / d_own;
            }
        }
        let nearest_other = prototypes
            .iter()
            .filter(|&(c, _)| c != y)
            .map(|(_, p)| (euclidean(e, p), p))
            .min_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((d, p)) = nearest_other {
            if margin - d > 0.0 {
                total += margin - d;
                if d > 0.0 {
                    for ((gi, ei), pi) in g.iter_mut().zip(e).zip(p) {
                        *gi -= (ei - pi) / d;
                    }
                }
            }
        }
    }
    let scale = 1.0 / batch as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((total * scale, Tensor::new(shape.to_vec(), grad)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CombineMode {
    /// `inherit + lambda * new_task`
    Eq11Literal,
    /// `alpha * inherit + (1 - alpha) * new_task`
    AlphaConvex,
}

impl std::str::FromStr for CombineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eq11-literal" => Ok(Self::Eq11Literal),
            "alpha-convex" => Ok(Self::AlphaConvex),
            other => Err(Error::Config(format!("unknown combine mode '{other}'"))),
        }
    }
}

impl CombineMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Eq11Literal => "eq11-literal",
            Self::AlphaConvex => "alpha-convex",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeWeights {
    pub lambda_loc: f64,
    pub lambda_cont: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub combine_mode: CombineMode,
}

impl Default for CompositeWeights {
    fn default() -> Self {
        Self {
            lambda_loc: 1.0,
            lambda_cont: 1.0,
            lambda: 1.0,
            alpha: 0.3,
            combine_mode: CombineMode::Eq11Literal,
        }
    }
}

impl CompositeWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_loc", self.lambda_loc),
            ("lambda_cont", self.lambda_cont),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }

    /// Multipliers `(inherit, new_task)` applied by [`task_loss`].
    pub fn task_multipliers(&self) -> (f64, f64) {
        match self.combine_mode {
            CombineMode::Eq11Literal => (1.0, self.lambda),
            CombineMode::AlphaConvex => (self.alpha, 1.0 - self.alpha),
        }
    }
}

pub fn task_loss(inherit: f64, new_task: f64, w: &CompositeWeights) -> f64 {
    let (a, b) = w.task_multipliers();
    a * inherit + b * new_task
}

/// Per-instance detector outputs and targets for a minibatch.
#[derive(Debug, Clone)]
pub struct NewTaskBatch<'a> {
    pub probs: &'a [Vec<f64>],
    pub targets: &'a [usize],
    pub boxes: &'a [[f64; 4]],
    pub box_targets: &'a [[f64; 4]],
    pub embeddings: &'a Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewTaskTerms {
    pub cls: f64,
    pub loc: f64,
    pub cont: f64,
    pub total: f64,
}

/// Batch-mean classification and localization terms plus the clustering
/// term. The clustering term is skipped when `lambda_cont` is zero.
pub fn new_task_loss(
    batch: &NewTaskBatch<'_>,
    prototypes: &Prototypes,
    counts: &ClassCounts,
    loss_cfg: &LossConfig,
    w: &CompositeWeights,
    margin: f64,
) -> Result<NewTaskTerms> {
    let n = batch.targets.len();
    if n == 0 || batch.probs.len() != n || batch.boxes.len() != n || batch.box_targets.len() != n {
        return Err(Error::invalid("new-task batch is empty or inconsistent"));
    }
    let mut cls = 0.0;
    let mut loc = 0.0;
    for i in 0..n {
        cls += balanced_loss(&batch.probs[i], batch.targets[i], loss_cfg, counts)?;
        loc += smooth_l1(&batch.boxes[i], &batch.box_targets[i])?;
    }
    cls /= n as f64;
    loc /= n as f64;
    let cont = if w.lambda_cont > 0.0 {
        cluster_loss(batch.embeddings, batch.targets, prototypes, margin)?
    } else {
        0.0
    };
    Ok(NewTaskTerms {
        cls,
        loc,
        cont,
        total: cls + w.lambda_loc * loc + w.lambda_cont * cont,
    })
}

/// Student and teacher outputs on the same minibatch.
#[derive(Debug, Clone)]
pub struct InheritBatch<'a> {
    pub student_features: &'a [FeatureMap],
    pub teacher_features: &'a [FeatureMap],
    pub student_probs: &'a [Vec<f64>],
    pub teacher_probs: &'a [Vec<f64>],
    pub student_boxes: &'a [[f64; 4]],
    pub teacher_boxes: &'a [[f64; 4]],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InheritTerms {
    pub nfd: f64,
    pub kl: f64,
    pub reg: f64,
    pub total: f64,
}

/// Batch-mean `L_nfd + L_kl + L_reg`.
pub fn inherit_loss(batch: &InheritBatch<'_>, old_classes: &[usize]) -> Result<InheritTerms> {
    let n = batch.student_features.len();
    let consistent = [
        batch.teacher_features.len(),
        batch.student_probs.len(),
        batch.teacher_probs.len(),
        batch.student_boxes.len(),
        batch.teacher_boxes.len(),
    ]
    .iter()
    .all(|&len| len == n);
    if n == 0 || !consistent {
        return Err(Error::invalid("inherit batch is empty or inconsistent"));
    }
    let (mut nfd, mut kl, mut reg) = (0.0, 0.0, 0.0);
    for i in 0..n {
        nfd += nfd_loss(&batch.student_features[i], &batch.teacher_features[i])?;
        kl += kl_old_classes(&batch.student_probs[i], &batch.teacher_probs[i], old_classes)?;
        reg += mse(&batch.student_boxes[i], &batch.teacher_boxes[i])?;
    }
    let scale = 1.0 / n as f64;
    let (nfd, kl, reg) = (nfd * scale, kl * scale, reg * scale);
    Ok(InheritTerms {
        nfd,
        kl,
        reg,
        total: nfd + kl + reg,
    })
}

/// Frozen copy of a model taken at the end of a task.
#[derive(Debug, Clone)]
pub struct TeacherSnapshot<M> {
    model: M,
}

impl<M: Clone> TeacherSnapshot<M> {
    pub fn new(model: &M) -> Self {
        Self {
            model: model.clone(),
        }
    }

    pub fn model(&self) -> &M {
        &self.model
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use proptest::prelude::*;
    use super::*;
    use crate::numcore::{finite_diff_grad, max_relative_error};

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        let data = (0..c * h * w).map(|_| rng.random_range(-2.0..2.0)).collect();
        FeatureMap::new(c, h, w, data).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let f = FeatureMap::new(1, 1, 3, vec![4.0, 4.0, 4.0]).unwrap();
        assert!(normalize_feature(&f, NORM_EPS).data().iter().all(|&v| v == 0.0));

        let f = FeatureMap::new(1, 1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let n = normalize_feature(&f, NORM_EPS);
        // population std sqrt(2/3)
        assert!((n.data()[0] + 1.5f64.sqrt()).abs() < 1e-12);
        assert!((n.data()[0] + 1.224745).abs() < 1e-6);
        assert_eq!(n.data()[1], 0.0);

        let twice = normalize_feature(&n, NORM_EPS);
        assert!(twice.data().iter().zip(n.data()).all(|(a, b)| (a - b).abs() < 1e-6));

        // a channel with spread below eps is scaled by 1/eps, not blown up
        let tiny = FeatureMap::new(1, 1, 2, vec![0.0, 1e-7]).unwrap();
        let t = normalize_feature(&tiny, NORM_EPS);
        assert!((t.data()[1] - 0.5e-7 / NORM_EPS).abs() < 1e-12);
    }

    #[test]
    fn nfd_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_map(&mut rng, 3, 2, 4);
        assert_eq!(nfd_loss(&a, &a).unwrap(), 0.0);
        let b = random_map(&mut rng, 3, 4, 2);
        assert!(nfd_loss(&a, &b).is_err());
    }

    #[test]
    fn nfd_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let s = random_map(&mut rng, 2, 3, 3);
            let t = random_map(&mut rng, 2, 3, 3);
            let (_, analytic) = nfd_loss_with_grad(&s, &t).unwrap();
            let numeric = finite_diff_grad(
                |x| nfd_loss(&FeatureMap::new(2, 3, 3, x.to_vec()).unwrap(), &t).unwrap(),
                s.data(),
                1e-5,
            )
            .unwrap();
            assert!(max_relative_error(&analytic, &numeric) < 1e-5);
        }
    }

    #[test]
    fn cluster_examples() {
        let mut protos = Prototypes::new(2);
        protos.insert(0, vec![0.0, 0.0]).unwrap();
        protos.insert(1, vec![3.0, 4.0]).unwrap();
        let at_protos = Tensor::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(cluster_loss(&at_protos, &[0, 1], &protos, 0.0).unwrap(), 0.0);

        let mut single = Prototypes::new(2);
        single.insert(0, vec![0.0, 0.0]).unwrap();
        let e = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(cluster_loss(&e, &[0], &single, 10.0).unwrap(), 5.0);

        assert!(cluster_loss(&e, &[5], &protos, 1.0).is_err());
    }

    #[test]
    fn task_loss_examples() {
        let w = CompositeWeights::default();
        assert_eq!(task_loss(2.0, 1.0, &w), 3.0);
        let convex = CompositeWeights {
            combine_mode: CombineMode::AlphaConvex,
            alpha: 0.0,
            ..CompositeWeights::default()
        };
        assert_eq!(task_loss(2.0, 1.0, &convex), 1.0);
        let convex = CompositeWeights {
            alpha: 0.3,
            ..convex
        };
        assert!((task_loss(2.0, 1.0, &convex) - 1.3).abs() < 1e-15);
    }

    #[test]
    fn prototype_update_is_an_ema() {
        let mut p = Prototypes::new(1);
        p.update(&[vec![2.0], vec![4.0]], &[0, 0], 0.1);
        assert_eq!(p.get(0).unwrap(), &[3.0]);
        p.update(&[vec![13.0]], &[0], 0.1);
        assert!((p.get(0).unwrap()[0] - 4.0).abs() < 1e-12);
    }

    fn channel_moments(x: &[f64]) -> (f64, f64) {
        let m = x.len() as f64;
        let mean = x.iter().sum::<f64>() / m;
        (mean, (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m).sqrt())
    }

    fn feature_map() -> impl Strategy<Value = FeatureMap> {
        (1usize..4, 1usize..4, 2usize..5).prop_flat_map(|(c, h, w)| {
            prop::collection::vec(-3.0f64..3.0, c * h * w).prop_map(move |d| FeatureMap::new(c, h, w, d).unwrap())
        })
    }

    fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, len).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn normalized_channels_have_zero_mean_unit_std(f in feature_map(), scale in 1.0f64..1e3) {
            let scaled = FeatureMap::new(f.shape()[0], f.shape()[1], f.shape()[2], f.data().iter().map(|v| v * scale).collect()).unwrap();
            let n = normalize_feature(&scaled, NORM_EPS);
            for c in 0..n.channels() {
                let (mean, std) = channel_moments(n.channel(c));
                prop_assert!(mean.abs() < 1e-9);
                if channel_moments(scaled.channel(c)).1 > 1e3 * NORM_EPS {
                    prop_assert!((std - 1.0).abs() < 1e-6, "std {}", std);
                }
            }
        }

        #[test]
        fn nfd_ignores_per_channel_affine_maps(
            s in feature_map(),
            seed in any::<u64>(),
            which in any::<bool>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = FeatureMap::new(s.shape()[0], s.shape()[1], s.shape()[2], s.data().iter().map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
            let (a, b): (Vec<f64>, Vec<f64>) = (0..s.channels()).map(|_| (rng.random_range(0.1..10.0), rng.random_range(-10.0..10.0))).unzip();
            let affine = |f: &FeatureMap| {
                let sp = f.spatial();
                let d = f.data().iter().enumerate().map(|(i, v)| a[i / sp] * v + b[i / sp]).collect();
                FeatureMap::new(f.shape()[0], f.shape()[1], f.shape()[2], d).unwrap()
            };
            let base = nfd_loss(&s, &t).unwrap();
            let moved = if which { nfd_loss(&affine(&s), &t) } else { nfd_loss(&s, &affine(&t)) }.unwrap();
            prop_assert!((base - moved).abs() < 1e-9, "{} vs {}", base, moved);
        }

        #[test]
        fn self_distillation_is_zero(seed in any::<u64>(), n in 1usize..5, k in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let feats: Vec<FeatureMap> = (0..n).map(|_| random_map(&mut rng, 2, 2, 3)).collect();
            let probs: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let v: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
                    let s: f64 = v.iter().sum();
                    v.into_iter().map(|x| x / s).collect()
                })
                .collect();
            let boxes: Vec<[f64; 4]> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
            let batch = InheritBatch {
                student_features: &feats,
                teacher_features: &feats,
                student_probs: &probs,
                teacher_probs: &probs,
                student_boxes: &boxes,
                teacher_boxes: &boxes,
            };
            let old: Vec<usize> = (0..k - 1).collect();
            let terms = inherit_loss(&batch, &old).unwrap();
            prop_assert!(terms.total.abs() < 1e-9);
        }

        #[test]
        fn composite_losses_are_nonnegative(s in feature_map(), p in distribution(4), q in distribution(4)) {
            let t = normalize_feature(&s, NORM_EPS);
            prop_assert!(nfd_loss(&s, &t).unwrap() >= 0.0);
            prop_assert!(kl_old_classes(&p, &q, &[0, 2, 3]).unwrap() >= -1e-15);
        }

        #[test]
        fn task_loss_is_monotone(
            inherit in 0.0f64..10.0,
            new_task in 0.0f64..10.0,
            bump in 0.0f64..5.0,
            lambda in 0.0f64..5.0,
            alpha in 0.0f64..=1.0,
            convex in any::<bool>(),
        ) {
            let w = CompositeWeights {
                lambda,
                alpha,
                combine_mode: if convex { CombineMode::AlphaConvex } else { CombineMode::Eq11Literal },
                ..CompositeWeights::default()
            };
            let base = task_loss(inherit, new_task, &w);
            prop_assert!(task_loss(inherit + bump, new_task, &w) >= base);
            prop_assert!(task_loss(inherit, new_task + bump, &w) >= base);
        }
    }
}
