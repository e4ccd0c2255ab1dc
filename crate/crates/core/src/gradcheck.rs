//! Finite-difference verification of every hand-written gradient.
//!
//! Each check draws random inputs away from the non-differentiable points of
//! its loss, compares the analytic gradient with central differences and
//! records the worst elementwise relative error `|a - n| / max(|a|, |n|, 1e-8)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::distill::{cluster_loss, cluster_loss_with_grad, nfd_loss, nfd_loss_with_grad, FeatureMap, Prototypes};
use crate::error::{Error, Result};
use crate::harness::model::{Detector, DetectorGrads, ModelConfig, Upstream};
use crate::inductive::{
    ifc_forward, inductive_loss, inductive_loss_with_grad, BaseEntry, BaseQueue, IfcBlock, IfcGrads,
};
use crate::losses::{
    balanced_loss, balanced_loss_with_logit_grad, ce_binary, ce_binary_grad, ce_multiclass, ce_multiclass_logit_grad,
    focal_softmax, focal_softmax_logit_grad, kl_old_classes, kl_old_classes_logit_grad, smooth_l1, smooth_l1_grad,
    BalancedFactorMode, ClassCounts, LossConfig,
};
use crate::numcore::{masked_softmax, max_relative_error, richardson_grad, Tensor};

pub const DEFAULT_SAMPLES: usize = 100;
pub const TOLERANCE: f64 = 1e-4;
/// Finite-difference step of the extrapolated stencil; sampled inputs keep
/// every kink at least `KINK_MARGIN` away.
const STEP: f64 = 1e-2;
const KINK_MARGIN: f64 = 2.0 * STEP;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub name: String,
    pub samples: usize,
    pub max_rel_err: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub checks: Vec<GradCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(GradCheck::passed)
    }

    pub fn get(&self, name: &str) -> Option<&GradCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Names of the checks, in the order [`run_gradcheck`] reports them.
pub const CHECKS: [&str; 11] = [
    "ce_binary",
    "ce_multiclass",
    "focal_softmax",
    "balanced_loss",
    "smooth_l1",
    "kl_old_classes",
    "nfd_loss",
    "cluster_loss",
    "inductive_loss",
    "ifc_forward",
    "detector",
];

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    max_relative_error(analytic, numeric)
}

fn gauss(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    scale * z
}

fn gauss_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| gauss(rng, scale)).collect()
}

fn numeric<F: FnMut(&[f64]) -> Result<f64>>(f: F, x: &[f64]) -> Result<Vec<f64>> {
    numeric_step(f, x, STEP)
}

fn numeric_step<F: FnMut(&[f64]) -> Result<f64>>(mut f: F, x: &[f64], step: f64) -> Result<Vec<f64>> {
    let mut err = None;
    let g = richardson_grad(
        |p| match f(p) {
            Ok(v) => v,
            Err(e) => {
                err.get_or_insert(e);
                f64::NAN
            }
        },
        x,
        step,
    );
    match err {
        Some(e) => Err(e),
        None => g,
    }
}

/// Random seen mask with at least two seen classes and the target seen.
fn seen_mask(rng: &mut ChaCha8Rng, k: usize, target: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..k).map(|_| rng.random_bool(0.8)).collect();
    m[target] = true;
    m[(target + 1) % k] = true;
    m
}

fn check_ce_binary(rng: &mut ChaCha8Rng) -> Result<f64> {
    let p = rng.random_range(0.05..0.95);
    let y = rng.random_range(0..2u8);
    let a = [ce_binary_grad(p, y)?];
    let n = numeric(|x| ce_binary(x[0], y), &[p])?;
    Ok(rel_err(&a, &n))
}

/// Shared harness for losses taking softmax probabilities: checks the logit
/// gradient through a masked softmax.
fn check_logit_loss<L, G>(rng: &mut ChaCha8Rng, loss: L, grad: G) -> Result<f64>
where
    L: Fn(&[f64], usize) -> Result<f64>,
    G: Fn(&[f64], usize) -> Result<Vec<f64>>,
{
    let k = rng.random_range(2..9);
    let target = rng.random_range(0..k);
    let mask = seen_mask(rng, k, target);
    let z = gauss_vec(rng, k, 1.5);
    let probs = masked_softmax(&z, &mask)?;
    let a = grad(&probs, target)?;
    let n = numeric(|x| loss(&masked_softmax(x, &mask)?, target), &z)?;
    Ok(rel_err(&a, &n))
}

fn check_ce_multiclass(rng: &mut ChaCha8Rng) -> Result<f64> {
    check_logit_loss(rng, ce_multiclass, |p, t| Ok(ce_multiclass_logit_grad(p, t)))
}

fn check_focal(rng: &mut ChaCha8Rng) -> Result<f64> {
    let gamma = rng.random_range(0.0..5.0);
    let alpha = rng.random_range(0.1..2.0);
    let k = 9;
    let cfg = LossConfig {
        gamma,
        alpha: (0..k).map(|c| (c, alpha)).collect(),
        balanced_factor_mode: BalancedFactorMode::Off,
    };
    check_logit_loss(
        rng,
        |p, t| focal_softmax(p, t, &cfg),
        |p, t| Ok(focal_softmax_logit_grad(p, t, alpha, gamma)),
    )
}

fn check_balanced(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = LossConfig {
        gamma: rng.random_range(0.0..5.0),
        alpha: (0..9).map(|c| (c, rng.random_range(0.1..2.0))).collect(),
        balanced_factor_mode: if rng.random_bool(0.8) {
            BalancedFactorMode::PaperCorrected
        } else {
            BalancedFactorMode::Literal
        },
    };
    let counts = ClassCounts::new((0..9).map(|c| (c, rng.random_range(1..500))).collect());
    check_logit_loss(
        rng,
        |p, t| balanced_loss(p, t, &cfg, &counts),
        |p, t| Ok(balanced_loss_with_logit_grad(p, t, &cfg, &counts)?.1),
    )
}

fn check_smooth_l1(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.random_range(1..9);
    let target = gauss_vec(rng, n, 1.0);
    // keep every residual clear of the kink at |d| = 1
    let pred: Vec<f64> = target
        .iter()
        .map(|t| {
            let mut d: f64 = gauss(rng, 1.5);
            while (d.abs() - 1.0).abs() < KINK_MARGIN {
                d = gauss(rng, 1.5);
            }
            t + d
        })
        .collect();
    let a = smooth_l1_grad(&pred, &target)?;
    let n = numeric(|x| smooth_l1(x, &target), &pred)?;
    Ok(rel_err(&a, &n))
}

fn check_kl(rng: &mut ChaCha8Rng) -> Result<f64> {
    let k = rng.random_range(3..10);
    let n_old = rng.random_range(2..k);
    let mut classes: Vec<usize> = (0..k).collect();
    for i in (1..k).rev() {
        classes.swap(i, rng.random_range(0..=i));
    }
    let mut old = classes[..n_old].to_vec();
    old.sort_unstable();
    let teacher = masked_softmax(&gauss_vec(rng, k, 1.5), &vec![true; k])?;
    let z = gauss_vec(rng, k, 1.5);
    let mask = vec![true; k];
    let a = kl_old_classes_logit_grad(&masked_softmax(&z, &mask)?, &teacher, &old)?;
    // non-old logits have exactly zero gradient but leave round-off in the
    // renormalized student; the loss is smooth, so a wider step damps it
    let n = numeric_step(|x| kl_old_classes(&masked_softmax(x, &mask)?, &teacher, &old), &z, 5.0 * STEP)?;
    Ok(rel_err(&a, &n))
}

fn check_nfd(rng: &mut ChaCha8Rng) -> Result<f64> {
    // two spatial positions normalize to exactly +-1, leaving a near-zero
    // gradient that finite differences cannot resolve; use at least four
    let (c, h, w) = (rng.random_range(1..5), rng.random_range(2..4), rng.random_range(2..4));
    let len = c * h * w;
    let student = gauss_vec(rng, len, 1.0);
    let teacher = FeatureMap::new(c, h, w, gauss_vec(rng, len, 2.0))?;
    let (_, a) = nfd_loss_with_grad(&FeatureMap::new(c, h, w, student.clone())?, &teacher)?;
    let n = numeric(|x| nfd_loss(&FeatureMap::new(c, h, w, x.to_vec())?, &teacher), &student)?;
    Ok(rel_err(&a, &n))
}

fn check_cluster(rng: &mut ChaCha8Rng) -> Result<f64> {
    let dim = rng.random_range(2..7);
    let classes = rng.random_range(2..5);
    let margin = rng.random_range(0.5..3.0);
    let batch = rng.random_range(1..5);
    // resample instances with an embedding near a prototype, on the hinge, or
    // where the nearest other prototype is ambiguous
    let (protos, labels, emb) = loop {
        let mut protos = Prototypes::new(dim);
        for c in 0..classes {
            protos.insert(c, gauss_vec(rng, dim, 1.0))?;
        }
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
        let e = gauss_vec(rng, batch * dim, 1.0);
        let clear = e.chunks(dim).zip(&labels).all(|(row, &y)| {
            let dist = |p: &[f64]| row.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let mut others: Vec<f64> = protos.iter().filter(|&(c, _)| c != y).map(|(_, p)| dist(p)).collect();
            others.sort_by(f64::total_cmp);
            let tied = others.len() > 1 && others[1] - others[0] < 2.0 * KINK_MARGIN;
            !tied && protos.iter().all(|(_, p)| dist(p) > 10.0 * KINK_MARGIN) && (others[0] - margin).abs() > KINK_MARGIN
        });
        if clear {
            break (protos, labels, e);
        }
    };
    let t = Tensor::new(vec![batch, dim], emb.clone())?;
    let (_, a) = cluster_loss_with_grad(&t, &labels, &protos, margin)?;
    let n = numeric(|x| cluster_loss(&Tensor::new(vec![batch, dim], x.to_vec())?, &labels, &protos, margin), &emb)?;
    Ok(rel_err(a.data(), &n))
}

fn check_inductive(rng: &mut ChaCha8Rng) -> Result<f64> {
    let k = rng.random_range(2..6);
    let cfg = LossConfig {
        gamma: rng.random_range(0.0..3.0),
        ..LossConfig::default()
    };
    let counts = ClassCounts::new((0..k).map(|c| (c, rng.random_range(1..100))).collect());
    let mut queue = BaseQueue::new(rng.random_range(1..5))?;
    for _ in 0..rng.random_range(1..12) {
        let class = rng.random_range(0..k);
        let probs: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..0.95)).collect();
        let target_box: [f64; 4] = std::array::from_fn(|_| gauss(rng, 0.3));
        let boxes: [f64; 4] = std::array::from_fn(|i| {
            let mut d: f64 = gauss(rng, 1.0);
            while (d.abs() - 1.0).abs() < KINK_MARGIN {
                d = gauss(rng, 1.0);
            }
            target_box[i] + d
        });
        queue.push(
            class,
            BaseEntry {
                probs,
                boxes,
                target_class: class,
                target_box,
                input: Vec::new(),
            },
        );
    }
    // flatten (probs, boxes) of every live entry in entry_weights order
    let slots: Vec<(usize, usize)> = queue.entry_weights().into_iter().map(|(c, i, _)| (c, i)).collect();
    let mut flat = Vec::new();
    for &(c, i) in &slots {
        let e = queue.entry(c, i).expect("live entry");
        flat.extend(&e.probs);
        flat.extend(e.boxes);
    }
    let (_, grads) = inductive_loss_with_grad(&queue, &counts, &cfg)?;
    let mut a = Vec::new();
    for &(c, i) in &slots {
        let g = grads
            .iter()
            .find(|g| g.class == c && g.index == i)
            .ok_or_else(|| Error::invalid("missing entry gradient"))?;
        a.extend(&g.probs);
        a.extend(g.boxes);
    }
    let rebuild = |x: &[f64]| -> Result<f64> {
        let mut q = BaseQueue::new(queue.capacity())?;
        let mut off = 0;
        // entries are replayed per class in FIFO order, so positions match
        for &(c, i) in &slots {
            let e = queue.entry(c, i).expect("live entry");
            let probs = x[off..off + k].to_vec();
            let boxes: [f64; 4] = x[off + k..off + k + 4].try_into().expect("four box deltas");
            off += k + 4;
            q.push(c, BaseEntry { probs, boxes, ..e.clone() });
        }
        inductive_loss(&q, &counts, &cfg)
    };
    let n = numeric(rebuild, &flat)?;
    Ok(rel_err(&a, &n))
}

fn flat_params(tensors: &[&Tensor]) -> Vec<f64> {
    tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn load_params(tensors: Vec<&mut Tensor>, theta: &[f64]) {
    let mut off = 0;
    for t in tensors {
        let n = t.len();
        t.data_mut().copy_from_slice(&theta[off..off + n]);
        off += n;
    }
}

fn check_ifc(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (d, w, b) = (rng.random_range(1..6), rng.random_range(1..7), rng.random_range(1..4));
    let block = IfcBlock::new(d, w, 0.3, rng);
    let x = gauss_vec(rng, b * d, 1.0);
    let weights = gauss_vec(rng, b * w, 1.0);
    let objective = |blk: &IfcBlock, x: &[f64]| -> Result<f64> {
        let out = ifc_forward(blk, &Tensor::new(vec![b, d], x.to_vec())?)?;
        Ok(out.data().iter().zip(&weights).map(|(o, c)| o * c).sum())
    };
    let mut grads = IfcGrads::zeros_like(&block);
    let mut dx = Vec::with_capacity(b * d);
    for (row, wrow) in x.chunks(d).zip(weights.chunks(w)) {
        let (_, trace) = block.forward_one(row);
        dx.extend(block.backward_one(&trace, wrow, &mut grads));
    }
    let mut a = grads.into_tensors().concat();
    a.extend(dx);
    let theta = flat_params(&block.tensors());
    let np = theta.len();
    let mut point = theta;
    point.extend(&x);
    let n = numeric(
        |p| {
            let mut blk = block.clone();
            load_params(blk.tensors_mut(), &p[..np]);
            objective(&blk, &p[np..])
        },
        &point,
    )?;
    Ok(rel_err(&a, &n))
}

fn check_detector(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = ModelConfig {
        hidden: rng.random_range(2..6),
        feature_shape: [2, rng.random_range(1..3), 1],
        embed_width: rng.random_range(2..5),
        inductive_noise: 0.2,
    };
    let (dim, k) = (rng.random_range(2..5), rng.random_range(2..5));
    let model = Detector::new(&cfg, dim, k, true, rng)?;
    let x = gauss_vec(rng, dim, 1.0);
    let gl = gauss_vec(rng, k, 1.0);
    let gb: [f64; 4] = std::array::from_fn(|_| gauss(rng, 1.0));
    let ge = gauss_vec(rng, cfg.embed_width, 1.0);
    let gf = gauss_vec(rng, cfg.feature_len(), 1.0);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let fwd = model.forward(&x)?;
    let mut grads = DetectorGrads::zeros_like(&model);
    let up = Upstream {
        logits: Some(&gl),
        boxes: Some(&gb),
        embedding: Some(&ge),
        feature: Some(&gf),
    };
    model.backward(&fwd, &up, &mut grads)?;
    let a = grads.into_tensors().concat();
    let n = numeric(
        |theta| {
            let mut m = model.clone();
            load_params(m.tensors_mut(), theta);
            let f = m.forward(&x)?;
            Ok(dot(&f.logits, &gl) + dot(&f.boxes, &gb) + dot(&f.embedding, &ge) + dot(f.feature.data(), &gf))
        },
        &flat_params(&model.tensors()),
    )?;
    Ok(rel_err(&a, &n))
}

type Check = fn(&mut ChaCha8Rng) -> Result<f64>;

const RUNNERS: [Check; 11] = [
    check_ce_binary,
    check_ce_multiclass,
    check_focal,
    check_balanced,
    check_smooth_l1,
    check_kl,
    check_nfd,
    check_cluster,
    check_inductive,
    check_ifc,
    check_detector,
];

/// Runs every check on `samples` random inputs. Each check has its own
/// random stream derived from `seed`.
pub fn run_gradcheck(samples: usize, seed: u64) -> Result<GradCheckReport> {
    if samples == 0 {
        return Err(Error::invalid("gradcheck needs at least one sample"));
    }
    let checks = CHECKS
        .iter()
        .zip(RUNNERS)
        .enumerate()
        .map(|(i, (&name, run))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut worst: f64 = 0.0;
            for _ in 0..samples {
                worst = worst.max(run(&mut rng)?);
            }
            Ok(GradCheck {
                name: name.to_string(),
                samples,
                max_rel_err: worst,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport {
        seed,
        tolerance: TOLERANCE,
        checks,
    })
}
