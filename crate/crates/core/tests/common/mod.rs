#![allow(dead_code)]

//! Brute-force reference implementations of the detection metrics.
//!
//! Boxes use small integer coordinates so every IoU is an exact fraction;
//! the oracle compares overlaps by cross-multiplication and accumulates AP as
//! an exact rational. Detections are walked in one global score order rather
//! than per image.

use std::collections::{BTreeMap, BTreeSet};

use owlab::openworld::{BBox, DetectionRecord, GroundTruth};
use rand::Rng;

pub const CLASSES: usize = 6;

#[derive(Debug, Clone)]
pub struct Scene {
    pub dets: Vec<DetectionRecord>,
    pub gts: Vec<GroundTruth>,
    pub known: BTreeSet<usize>,
}

fn int_box<R: Rng>(rng: &mut R) -> [i64; 4] {
    let x = rng.random_range(0..16);
    let y = rng.random_range(0..16);
    [x, y, x + rng.random_range(1..10), y + rng.random_range(1..10)]
}

fn to_box(c: [i64; 4]) -> BBox {
    BBox::new(c[0] as f64, c[1] as f64, c[2] as f64, c[3] as f64).unwrap()
}

/// Up to 10 ground truths and 10 detections over three images. About half
/// the detections are jittered copies of a ground truth so that matches,
/// duplicates and score ties all occur.
pub fn random_scene<R: Rng>(rng: &mut R) -> Scene {
    let gts: Vec<GroundTruth> = (0..rng.random_range(0..=10))
        .map(|_| GroundTruth {
            image_id: rng.random_range(0..3),
            bbox: to_box(int_box(rng)),
            class_id: rng.random_range(0..CLASSES),
        })
        .collect();
    let dets = (0..rng.random_range(0..=10))
        .map(|_| {
            let (image, coords) = if !gts.is_empty() && rng.random_bool(0.6) {
                let g = &gts[rng.random_range(0..gts.len())];
                let mut c = g.bbox.coords().map(|v| v as i64);
                for v in &mut c {
                    if rng.random_bool(0.3) {
                        *v += rng.random_range(-1..=1);
                    }
                }
                if c[2] <= c[0] {
                    c[2] = c[0] + 1;
                }
                if c[3] <= c[1] {
                    c[3] = c[1] + 1;
                }
                (g.image_id, c)
            } else {
                (rng.random_range(0..3), int_box(rng))
            };
            let class = rng.random_bool(0.85).then(|| rng.random_range(0..CLASSES));
            let score = rng.random_range(1..10) as f64 / 10.0;
            DetectionRecord::new(image, to_box(coords), class, score).unwrap()
        })
        .collect();
    let known = (0..CLASSES).filter(|_| rng.random_bool(0.6)).collect();
    Scene { dets, gts, known }
}

/// Exact non-negative fraction.
#[derive(Debug, Clone, Copy)]
pub struct Frac {
    pub num: i128,
    pub den: i128,
}

impl Frac {
    pub fn new(num: i128, den: i128) -> Self {
        let g = gcd(num.abs(), den.abs()).max(1);
        Frac { num: num / g, den: den / g }
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn gt(self, o: Frac) -> bool {
        self.num * o.den > o.num * self.den
    }

    pub fn add(self, o: Frac) -> Frac {
        Frac::new(self.num * o.den + o.num * self.den, self.den * o.den)
    }
}

fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn coords(b: &BBox) -> [i128; 4] {
    b.coords().map(|v| v as i128)
}

pub fn iou_frac(a: &BBox, b: &BBox) -> Frac {
    let (a, b) = (coords(a), coords(b));
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0);
    let inter = w * h;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    Frac::new(inter, union)
}

fn at_least_half(f: Frac) -> bool {
    2 * f.num >= f.den
}

/// Detection indices sorted by descending score, ties by index.
fn global_order(dets: &[DetectionRecord], keep: impl Fn(&DetectionRecord) -> bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).filter(|&i| keep(&dets[i])).collect();
    idx.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    idx
}

/// Greedy matching for one class: each detection in score order takes the
/// free same-image ground truth of its class with the highest IoU ≥ 0.5.
/// Returns the TP flag per detection in rank order.
pub fn match_class(dets: &[DetectionRecord], gts: &[GroundTruth], class: usize) -> Vec<(usize, bool)> {
    let mut taken = vec![false; gts.len()];
    global_order(dets, |d| d.class_id == Some(class))
        .into_iter()
        .map(|d| {
            let mut best: Option<(usize, Frac)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] || gt.class_id != class || gt.image_id != dets[d].image_id {
                    continue;
                }
                let v = iou_frac(&dets[d].bbox, &gt.bbox);
                if at_least_half(v) && best.is_none_or(|(_, b)| v.gt(b)) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            (d, best.is_some())
        })
        .collect()
}

/// AP as `(1 / n_gt) Σ_{hits at rank k} max_{j ≥ k} precision_j`, exactly.
pub fn ap_oracle(dets: &[DetectionRecord], gts: &[GroundTruth], class: usize) -> Option<Frac> {
    let n_gt = gts.iter().filter(|g| g.class_id == class).count() as i128;
    if n_gt == 0 {
        return None;
    }
    let flags: Vec<bool> = match_class(dets, gts, class).into_iter().map(|(_, h)| h).collect();
    let mut tp = 0;
    let precision: Vec<Frac> = flags
        .iter()
        .enumerate()
        .map(|(k, &h)| {
            tp += i128::from(h);
            Frac::new(tp, k as i128 + 1)
        })
        .collect();
    let mut sum = Frac::new(0, 1);
    for (k, &h) in flags.iter().enumerate() {
        if h {
            let best = precision[k..].iter().copied().fold(precision[k], |m, p| if p.gt(m) { p } else { m });
            sum = sum.add(best);
        }
    }
    Some(Frac::new(sum.num, sum.den * n_gt))
}

pub fn map_oracle(dets: &[DetectionRecord], gts: &[GroundTruth], classes: &BTreeSet<usize>) -> BTreeMap<usize, Frac> {
    classes.iter().filter_map(|&c| ap_oracle(dets, gts, c).map(|ap| (c, ap))).collect()
}

/// Best-IoU ground truth of a detection over every class in its image, if it
/// is an unknown instance at IoU ≥ 0.5. First index wins ties.
fn unknown_target(d: &DetectionRecord, gts: &[GroundTruth], known: &BTreeSet<usize>) -> Option<usize> {
    let mut best: Option<(usize, Frac)> = None;
    for (g, gt) in gts.iter().enumerate() {
        if gt.image_id != d.image_id {
            continue;
        }
        let v = iou_frac(&d.bbox, &gt.bbox);
        if best.is_none_or(|(_, b)| v.gt(b)) {
            best = Some((g, v));
        }
    }
    best.filter(|&(g, v)| at_least_half(v) && !known.contains(&gts[g].class_id))
        .map(|(g, _)| g)
}

fn known_label(d: &DetectionRecord, known: &BTreeSet<usize>) -> bool {
    d.class_id.is_some_and(|c| known.contains(&c))
}

pub fn a_ose_oracle(s: &Scene) -> usize {
    s.dets
        .iter()
        .filter(|d| known_label(d, &s.known))
        .filter_map(|d| unknown_target(d, &s.gts, &s.known))
        .collect::<BTreeSet<_>>()
        .len()
}

/// `P_K / P_{K∪U} - 1 = u / (n - u)` where `n` counts known-labeled
/// detections and `u` the unmatched ones landing on an unknown object.
/// `None` where the metric is undefined.
pub fn wi_oracle(s: &Scene) -> Option<Frac> {
    let n = s.dets.iter().filter(|d| known_label(d, &s.known)).count() as i128;
    if n == 0 {
        return None;
    }
    if s.gts.iter().all(|g| s.known.contains(&g.class_id)) {
        return Some(Frac::new(0, 1));
    }
    let (mut tp, mut u) = (0, 0);
    for &c in &s.known {
        for (d, hit) in match_class(&s.dets, &s.gts, c) {
            if hit {
                tp += 1;
            } else if unknown_target(&s.dets[d], &s.gts, &s.known).is_some() {
                u += 1;
            }
        }
    }
    (tp > 0).then(|| Frac::new(u, n - u))
}

/// Real-valued results may differ from the exact rational only by float
/// rounding; counts, defined/undefined status and class sets must be equal.
pub const ROUNDING: f64 = 1e-12;

/// Compares the library metrics with the oracles on one scene.
pub fn check_scene(s: &Scene) -> Result<(), String> {
    use owlab::openworld::{a_ose, map50, wilderness_impact};

    let all: BTreeSet<usize> = (0..CLASSES).collect();
    for classes in [&all, &s.known] {
        if classes.is_empty() {
            continue;
        }
        let got = map50(&s.dets, &s.gts, classes).map_err(|e| e.to_string())?;
        let want = map_oracle(&s.dets, &s.gts, classes);
        if got.ap_per_class.keys().ne(want.keys()) {
            return Err(format!("AP classes {:?} vs {:?}", got.ap_per_class.keys(), want.keys()));
        }
        for (c, ap) in &want {
            let g = got.ap_per_class[c];
            if (g - ap.value()).abs() > ROUNDING {
                return Err(format!("class {c}: AP {g} vs {}/{}", ap.num, ap.den));
            }
        }
        let mean = (!want.is_empty()).then(|| {
            let total = want.values().fold(Frac::new(0, 1), |a, b| a.add(*b));
            Frac::new(total.num, total.den * want.len() as i128).value()
        });
        match (got.mean, mean) {
            (Some(a), Some(b)) if (a - b).abs() <= ROUNDING => {}
            (None, None) => {}
            other => return Err(format!("mAP {other:?}")),
        }
    }
    let got = a_ose(&s.dets, &s.gts, &s.known);
    let want = a_ose_oracle(s);
    if got != want {
        return Err(format!("A-OSE {got} vs {want}"));
    }
    match (wilderness_impact(&s.dets, &s.gts, &s.known).ok(), wi_oracle(s)) {
        (Some(a), Some(b)) if (a - b.value()).abs() <= ROUNDING => {}
        (None, None) => {}
        other => return Err(format!("WI {other:?}")),
    }
    Ok(())
}
