//! Synthetic imbalanced task stream.
//!
//! Each region is a class-conditional Gaussian feature vector attached to a
//! random anchor box; its ground-truth box is the anchor shifted by a fixed
//! per-class offset. Training scenes of later tasks also contain instances
//! of earlier classes, the way street scenes keep showing cars after the
//! detector moves on to rarer categories.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::openworld::BBox;

/// Train instance counts per task at full scale.
pub const TABLE1_TRAIN: [u64; 5] = [42377, 268, 2290, 164, 12];
/// Test instance counts per task at full scale.
pub const TABLE1_TEST: [u64; 5] = [135, 341, 3478, 413, 16];

const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    /// 4, or 5 to include the optional fifth column.
    pub tasks: usize,
    pub classes_per_task: usize,
    pub train_scale: f64,
    pub test_scale: f64,
    /// Pairwise distance between class means, in units of `noise`.
    pub separation: f64,
    pub noise: f64,
    /// Length of each class's box offset, in anchor-size units.
    pub offset_radius: f64,
    /// Earlier-class instances added to a later task's scene per new instance.
    pub context_per_instance: usize,
    pub regions_per_scene: usize,
    /// Zipf exponent of the within-task class distribution.
    pub zipf_exponent: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            tasks: 4,
            classes_per_task: 6,
            train_scale: 0.01,
            test_scale: 1.0,
            separation: 4.0,
            noise: 1.0,
            offset_radius: 0.3,
            context_per_instance: 2,
            regions_per_scene: 4,
            zipf_exponent: 1.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.tasks) {
            return Err(Error::Config(format!("tasks must be in 1..=5, got {}", self.tasks)));
        }
        if self.classes_per_task == 0 || self.regions_per_scene == 0 {
            return Err(Error::Config("classes_per_task and regions_per_scene must be >= 1".into()));
        }
        for (name, v) in [
            ("train_scale", self.train_scale),
            ("test_scale", self.test_scale),
            ("separation", self.separation),
            ("noise", self.noise),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.offset_radius.is_finite() && (0.0..0.5).contains(&self.offset_radius)) {
            return Err(Error::Config("offset_radius must be in [0, 0.5)".into()));
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return Err(Error::Config("zipf_exponent must be >= 0".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.tasks * self.classes_per_task
    }

    /// One feature dimension per class.
    pub fn feature_dim(&self) -> usize {
        self.num_classes()
    }

    pub fn task_classes(&self, task_index: usize) -> Vec<usize> {
        let k = self.classes_per_task;
        (task_index * k..(task_index + 1) * k).collect()
    }

    /// `(train, test)` instance counts per task after scaling.
    pub fn scaled_counts(&self) -> Result<Vec<(u64, u64)>> {
        self.validate()?;
        (0..self.tasks)
            .map(|t| {
                let train = (TABLE1_TRAIN[t] as f64 * self.train_scale).round() as u64;
                let test = (TABLE1_TEST[t] as f64 * self.test_scale).round() as u64;
                if train == 0 || test == 0 {
                    return Err(Error::invalid(format!(
                        "scaling leaves task {} with {train} train / {test} test instances",
                        t + 1
                    )));
                }
                Ok((train, test))
            })
            .collect()
    }

    fn class_mean(&self, class: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.feature_dim()];
        m[class] = self.separation * self.noise / std::f64::consts::SQRT_2;
        m
    }

    /// Box offset `(tx, ty)` of `class` in anchor units.
    pub fn class_offset(&self, class: usize) -> (f64, f64) {
        let theta = class as f64 * GOLDEN_ANGLE;
        (self.offset_radius * theta.cos(), self.offset_radius * theta.sin())
    }
}

/// Regression target for `class`: `(tx, ty, tx, ty)`.
pub fn box_target(cfg: &WorldConfig, class: usize) -> [f64; 4] {
    let (tx, ty) = cfg.class_offset(class);
    [tx, ty, tx, ty]
}

/// Applies anchor-relative deltas; the result is forced to be non-degenerate.
pub fn decode_box(anchor: &BBox, deltas: &[f64; 4]) -> BBox {
    let [x1, y1, x2, y2] = anchor.coords();
    let (w, h) = (anchor.width(), anchor.height());
    let ax = [x1 + deltas[0] * w, x2 + deltas[2] * w];
    let ay = [y1 + deltas[1] * h, y2 + deltas[3] * h];
    let (lx, hx) = (ax[0].min(ax[1]), ax[0].max(ax[1]).max(ax[0].min(ax[1]) + 1e-6 * w));
    let (ly, hy) = (ay[0].min(ay[1]), ay[0].max(ay[1]).max(ay[0].min(ay[1]) + 1e-6 * h));
    BBox::new(lx, ly, hx, hy).expect("decoded box is ordered and finite")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub anchor: BBox,
    pub feature: Vec<f64>,
    pub gt_class: usize,
    pub gt_box: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub image_id: u64,
    pub regions: Vec<Region>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// 1-based.
    pub task_id: usize,
    pub class_ids: Vec<usize>,
    pub train_count: u64,
    pub test_count: u64,
    /// Instances per class in the train split, in `class_ids` order.
    pub train_per_class: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Vec<SyntheticScene>,
    /// Held-out scenes of this task's classes for energy calibration.
    pub val: Vec<SyntheticScene>,
    pub test: Vec<SyntheticScene>,
}

/// Splits `total` over `k` classes by Zipf weights with largest-remainder
/// rounding. Ties go to the more frequent class.
pub fn zipf_allocation(total: u64, k: usize, exponent: f64) -> Vec<u64> {
    let weights: Vec<f64> = (1..=k).map(|r| (r as f64).powf(-exponent)).collect();
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut alloc: Vec<u64> = exact.iter().map(|e| e.floor() as u64).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = total - alloc.iter().sum::<u64>();
    for &i in order.iter().take(short as usize) {
        alloc[i] += 1;
    }
    alloc
}

fn image_id(task_index: usize, split: u64, index: usize) -> u64 {
    ((task_index as u64 + 1) << 40) | (split << 32) | index as u64
}

struct Sampler<'a> {
    cfg: &'a WorldConfig,
    rng: ChaCha8Rng,
}

impl Sampler<'_> {
    fn region(&mut self, class: usize) -> Region {
        let mut feature = self.cfg.class_mean(class);
        for v in &mut feature {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            *v += self.cfg.noise * z;
        }
        let x1 = self.rng.random_range(0.0..100.0);
        let y1 = self.rng.random_range(0.0..100.0);
        let w = self.rng.random_range(10.0..30.0);
        let h = self.rng.random_range(10.0..30.0);
        let anchor = BBox::new(x1, y1, x1 + w, y1 + h).expect("positive size");
        let (tx, ty) = self.cfg.class_offset(class);
        let gt_box = BBox::new(x1 + tx * w, y1 + ty * h, x1 + w + tx * w, y1 + h + ty * h).expect("positive size");
        Region {
            anchor,
            feature,
            gt_class: class,
            gt_box,
        }
    }

    fn scenes(&mut self, regions: Vec<Region>, task_index: usize, split: u64, group: usize) -> Vec<SyntheticScene> {
        regions
            .chunks(group.max(1))
            .enumerate()
            .map(|(i, chunk)| SyntheticScene {
                image_id: image_id(task_index, split, i),
                regions: chunk.to_vec(),
            })
            .collect()
    }

    fn labels(&mut self, classes: &[usize], per_class: &[u64]) -> Vec<usize> {
        let mut labels: Vec<usize> = classes
            .iter()
            .zip(per_class)
            .flat_map(|(&c, &n)| std::iter::repeat_n(c, n as usize))
            .collect();
        labels.shuffle(&mut self.rng);
        labels
    }
}

/// Generates every task's train, validation and test scenes.
pub fn gen_task_stream(cfg: &WorldConfig, seed: u64) -> Result<Vec<TaskData>> {
    let counts = cfg.scaled_counts()?;
    let mut sampler = Sampler {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let k = cfg.classes_per_task;
    let mut earlier: Vec<(usize, u64)> = Vec::new();
    let mut out = Vec::with_capacity(cfg.tasks);
    for (t, &(train_n, test_n)) in counts.iter().enumerate() {
        let classes = cfg.task_classes(t);
        let train_alloc = zipf_allocation(train_n, k, cfg.zipf_exponent);
        let test_alloc = zipf_allocation(test_n, k, cfg.zipf_exponent);

        let own = sampler.labels(&classes, &train_alloc);
        let per_scene_new = cfg.regions_per_scene;
        let mut train_regions = Vec::new();
        for chunk in own.chunks(per_scene_new) {
            let mut scene: Vec<Region> = chunk.iter().map(|&c| sampler.region(c)).collect();
            if !earlier.is_empty() {
                for _ in 0..chunk.len() * cfg.context_per_instance {
                    let c = sample_by_count(&earlier, &mut sampler.rng);
                    scene.push(sampler.region(c));
                }
            }
            train_regions.push(scene);
        }
        let train = train_regions
            .into_iter()
            .enumerate()
            .map(|(i, regions)| SyntheticScene {
                image_id: image_id(t, 0, i),
                regions,
            })
            .collect();

        let val_labels = sampler.labels(&classes, &test_alloc);
        let val_regions = val_labels.iter().map(|&c| sampler.region(c)).collect();
        let val = sampler.scenes(val_regions, t, 1, cfg.regions_per_scene);
        let test_labels = sampler.labels(&classes, &test_alloc);
        let test_regions = test_labels.iter().map(|&c| sampler.region(c)).collect();
        let test = sampler.scenes(test_regions, t, 2, cfg.regions_per_scene);

        earlier.extend(classes.iter().copied().zip(train_alloc.iter().copied()));
        out.push(TaskData {
            spec: TaskSpec {
                task_id: t + 1,
                class_ids: classes,
                train_count: train_n,
                test_count: test_n,
                train_per_class: train_alloc,
            },
            train,
            val,
            test,
        });
    }
    Ok(out)
}

fn sample_by_count<R: Rng + ?Sized>(classes: &[(usize, u64)], rng: &mut R) -> usize {
    let total: u64 = classes.iter().map(|&(_, n)| n).sum();
    let mut pick = rng.random_range(0..total);
    for &(c, n) in classes {
        if pick < n {
            return c;
        }
        pick -= n;
    }
    unreachable!("pick < total")
}

/// Instances of `classes` in `scenes`.
pub fn count_instances(scenes: &[SyntheticScene], classes: &[usize]) -> u64 {
    scenes
        .iter()
        .flat_map(|s| &s.regions)
        .filter(|r| classes.contains(&r.gt_class))
        .count() as u64
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn full_scale_counts_match_the_table() {
        let cfg = WorldConfig {
            train_scale: 1.0,
            test_scale: 1.0,
            ..WorldConfig::default()
        };
        let counts = cfg.scaled_counts().unwrap();
        assert_eq!(counts, vec![(42377, 135), (268, 341), (2290, 3478), (164, 413)]);
    }

    #[test]
    fn default_scale_counts() {
        let counts = WorldConfig::default().scaled_counts().unwrap();
        let train: Vec<u64> = counts.iter().map(|c| c.0).collect();
        assert_eq!(train, vec![424, 3, 23, 2]);
        let five = WorldConfig {
            tasks: 5,
            ..WorldConfig::default()
        };
        assert!(five.scaled_counts().is_err());
    }

    #[test]
    fn generated_counts_and_determinism() {
        let cfg = WorldConfig::default();
        let a = gen_task_stream(&cfg, 3).unwrap();
        let b = gen_task_stream(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_task_stream(&cfg, 4).unwrap());
        for task in &a {
            assert_eq!(count_instances(&task.train, &task.spec.class_ids), task.spec.train_count);
            assert_eq!(count_instances(&task.test, &task.spec.class_ids), task.spec.test_count);
        }
        // context instances come only from earlier tasks
        let t2 = &a[1];
        let context = t2.train.iter().flat_map(|s| &s.regions).filter(|r| r.gt_class < 6).count();
        assert_eq!(context, 3 * cfg.context_per_instance);
    }

    #[test]
    fn zipf_allocation_sums_and_orders() {
        assert_eq!(zipf_allocation(424, 6, 1.0).iter().sum::<u64>(), 424);
        assert_eq!(zipf_allocation(3, 6, 1.0), vec![1, 1, 1, 0, 0, 0]);
        let a = zipf_allocation(1000, 6, 1.0);
        assert!(a.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn boxes_follow_class_offsets() {
        let cfg = WorldConfig::default();
        let tasks = gen_task_stream(&cfg, 1).unwrap();
        for r in tasks[0].test.iter().flat_map(|s| &s.regions) {
            let decoded = decode_box(&r.anchor, &box_target(&cfg, r.gt_class));
            for (a, b) in decoded.coords().iter().zip(r.gt_box.coords()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn streams_have_valid_boxes_and_fixed_width(seed in any::<u64>()) {
            let cfg = WorldConfig::default();
            let dim = cfg.feature_dim();
            for task in gen_task_stream(&cfg, seed).unwrap() {
                for r in task.train.iter().chain(&task.val).chain(&task.test).flat_map(|s| &s.regions) {
                    prop_assert_eq!(r.feature.len(), dim);
                    prop_assert!(r.feature.iter().all(|v| v.is_finite()));
                    for bx in [&r.gt_box, &r.anchor] {
                        let [x1, y1, x2, y2] = bx.coords();
                        prop_assert!(x2 > x1 && y2 > y1);
                    }
                }
            }
        }
    }
}
