//! Open-world detection metrics: IoU, mAP@50, Wilderness Impact, A-OSE and
//! energy-based unknown flagging.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::log_sum_exp;

pub const IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_ENERGY_QUANTILE: f64 = 0.95;

/// Axis-aligned box with `x2 > x1` and `y2 > y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("box coordinates must be finite"));
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::invalid(format!("degenerate box [{x1}, {y1}, {x2}, {y2}]")));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;
    fn try_from(c: [f64; 4]) -> Result<Self> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.coords()
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    (inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0)
}

/// A scored detection. `class_id == None` is the UNKNOWN label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub bbox: BBox,
    pub class_id: Option<usize>,
    pub score: f64,
}

impl DetectionRecord {
    pub fn new(image_id: u64, bbox: BBox, class_id: Option<usize>, score: f64) -> Result<Self> {
        let d = Self {
            image_id,
            bbox,
            class_id,
            score,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::invalid(format!("score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: u64,
    pub bbox: BBox,
    pub class_id: usize,
}

/// Per-class AP over classes that have ground truth, and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub ap_per_class: BTreeMap<usize, f64>,
    pub mean: Option<f64>,
}

fn by_image<T, F: Fn(&T) -> u64>(items: &[T], key: F) -> BTreeMap<u64, Vec<usize>> {
    let mut out: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        out.entry(key(item)).or_default().push(i);
    }
    out
}

/// Descending score, ties broken by input order.
fn score_order(dets: &[DetectionRecord], idx: &mut [usize]) {
    idx.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
}

/// Greedy score-ordered matching of one class within one image. Returns the
/// TP flag of each detection index.
fn match_image(dets: &[DetectionRecord], det_idx: &[usize], gts: &[GroundTruth], gt_idx: &[usize]) -> Vec<(usize, bool)> {
    let mut order = det_idx.to_vec();
    score_order(dets, &mut order);
    let mut taken = vec![false; gt_idx.len()];
    order
        .into_iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (slot, &g) in gt_idx.iter().enumerate() {
                if taken[slot] {
                    continue;
                }
                let v = iou(&dets[d].bbox, &gts[g].bbox);
                if v >= IOU_THRESHOLD && best.is_none_or(|(_, b)| v > b) {
                    best = Some((slot, v));
                }
            }
            if let Some((slot, _)) = best {
                taken[slot] = true;
            }
            (d, best.is_some())
        })
        .collect()
}

/// All-point interpolated AP from score-ordered TP flags.
fn average_precision(tp_flags: &[bool], num_gt: usize) -> f64 {
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &hit) in tp_flags.iter().enumerate() {
        tp += usize::from(hit);
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

fn class_ap(dets: &[DetectionRecord], gts: &[GroundTruth], class: usize) -> Option<f64> {
    let class_gts: Vec<usize> = (0..gts.len()).filter(|&i| gts[i].class_id == class).collect();
    if class_gts.is_empty() {
        return None;
    }
    let class_dets: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class_id == Some(class)).collect();
    let mut det_images: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for &d in &class_dets {
        det_images.entry(dets[d].image_id).or_default().push(d);
    }
    let mut gt_images: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for &g in &class_gts {
        gt_images.entry(gts[g].image_id).or_default().push(g);
    }
    let empty = Vec::new();
    // Images are independent under greedy matching; merge counts afterwards.
    let mut flags: Vec<(usize, bool)> = det_images
        .par_iter()
        .flat_map_iter(|(img, d)| match_image(dets, d, gts, gt_images.get(img).unwrap_or(&empty)))
        .collect();
    let mut order: Vec<usize> = flags.iter().map(|&(d, _)| d).collect();
    score_order(dets, &mut order);
    let hit: BTreeMap<usize, bool> = flags.drain(..).collect();
    let ordered: Vec<bool> = order.iter().map(|d| hit[d]).collect();
    Some(average_precision(&ordered, class_gts.len()))
}

pub fn map50(dets: &[DetectionRecord], gts: &[GroundTruth], class_set: &BTreeSet<usize>) -> Result<MapResult> {
    if class_set.is_empty() {
        return Err(Error::invalid("empty class set"));
    }
    let ap_per_class: BTreeMap<usize, f64> = class_set
        .iter()
        .filter_map(|&c| class_ap(dets, gts, c).map(|ap| (c, ap)))
        .collect();
    let mean = (!ap_per_class.is_empty()).then(|| ap_per_class.values().sum::<f64>() / ap_per_class.len() as f64);
    Ok(MapResult { ap_per_class, mean })
}

fn is_known_label(d: &DetectionRecord, known: &BTreeSet<usize>) -> bool {
    d.class_id.is_some_and(|c| known.contains(&c))
}

/// The unknown ground truth that is the highest-IoU match (over all
/// classes, IoU ≥ 0.5) of `det`, if any. The first ground truth wins ties.
fn unknown_hit(det: &DetectionRecord, gts: &[GroundTruth], gt_idx: &[usize], known: &BTreeSet<usize>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &g in gt_idx {
        let v = iou(&det.bbox, &gts[g].bbox);
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((g, v));
        }
    }
    best.filter(|&(g, v)| v >= IOU_THRESHOLD && !known.contains(&gts[g].class_id))
        .map(|(g, _)| g)
}

fn hits_unknown(det: &DetectionRecord, gts: &[GroundTruth], gt_idx: &[usize], known: &BTreeSet<usize>) -> bool {
    unknown_hit(det, gts, gt_idx, known).is_some()
}

/// Unknown ground-truth instances claimed by a known-labeled detection. Each
/// instance matches at most one detection, so duplicates on the same object
/// count once and the result never exceeds the unknown instance count.
pub fn a_ose(dets: &[DetectionRecord], gts: &[GroundTruth], known: &BTreeSet<usize>) -> usize {
    let gt_images = by_image(gts, |g| g.image_id);
    let empty = Vec::new();
    dets.iter()
        .filter(|d| is_known_label(d, known))
        .filter_map(|d| unknown_hit(d, gts, gt_images.get(&d.image_id).unwrap_or(&empty), known))
        .collect::<BTreeSet<usize>>()
        .len()
}

/// Precision counts behind Wilderness Impact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WiCounts {
    /// Known-labeled detections.
    pub detections: usize,
    /// Detections matched to a known ground truth of their class.
    pub true_positives: usize,
    /// Unmatched detections that land on an unknown object.
    pub on_unknown: usize,
}

impl WiCounts {
    /// Precision on the known-only world, where unknown objects are absent
    /// and so are the detections they would trigger.
    pub fn precision_known(&self) -> Option<f64> {
        let denom = self.detections - self.on_unknown;
        (denom > 0).then(|| self.true_positives as f64 / denom as f64)
    }

    /// Precision on the mixed world; hits on unknowns count as errors.
    pub fn precision_mixed(&self) -> Option<f64> {
        (self.detections > 0).then(|| self.true_positives as f64 / self.detections as f64)
    }
}

pub fn wi_counts(dets: &[DetectionRecord], gts: &[GroundTruth], known: &BTreeSet<usize>) -> WiCounts {
    let det_images = by_image(dets, |d| d.image_id);
    let gt_images = by_image(gts, |g| g.image_id);
    let empty = Vec::new();
    let mut counts = WiCounts {
        detections: 0,
        true_positives: 0,
        on_unknown: 0,
    };
    for (img, det_idx) in &det_images {
        let img_gts = gt_images.get(img).unwrap_or(&empty);
        let known_dets: Vec<usize> = det_idx.iter().copied().filter(|&d| is_known_label(&dets[d], known)).collect();
        counts.detections += known_dets.len();
        let classes: BTreeSet<usize> = known_dets.iter().filter_map(|&d| dets[d].class_id).collect();
        for c in classes {
            let cd: Vec<usize> = known_dets.iter().copied().filter(|&d| dets[d].class_id == Some(c)).collect();
            let cg: Vec<usize> = img_gts.iter().copied().filter(|&g| gts[g].class_id == c).collect();
            for (d, hit) in match_image(dets, &cd, gts, &cg) {
                if hit {
                    counts.true_positives += 1;
                } else if hits_unknown(&dets[d], gts, img_gts, known) {
                    counts.on_unknown += 1;
                }
            }
        }
    }
    counts
}

/// `P_K / P_{K∪U} - 1` from two precisions.
pub fn wi_from_precisions(p_known: f64, p_mixed: f64) -> Result<f64> {
    if p_mixed.is_nan() || p_mixed <= 0.0 || !p_known.is_finite() {
        return Err(Error::UndefinedMetric(format!(
            "wilderness impact with P_K = {p_known}, P_K∪U = {p_mixed}"
        )));
    }
    Ok(p_known / p_mixed - 1.0)
}

pub fn wilderness_impact(dets: &[DetectionRecord], gts: &[GroundTruth], known: &BTreeSet<usize>) -> Result<f64> {
    let counts = wi_counts(dets, gts, known);
    if counts.detections == 0 {
        return Err(Error::UndefinedMetric("no known-class detections".into()));
    }
    if gts.iter().all(|g| known.contains(&g.class_id)) {
        return Ok(0.0);
    }
    match (counts.precision_known(), counts.precision_mixed()) {
        (Some(pk), Some(pm)) => wi_from_precisions(pk, pm),
        _ => Err(Error::UndefinedMetric("every known-class detection landed on an unknown object".into())),
    }
}

/// `-logsumexp` over seen-class logits.
pub fn energy(seen_logits: &[f64]) -> Result<f64> {
    if seen_logits.is_empty() {
        return Err(Error::invalid("energy needs at least one seen class"));
    }
    Ok(-log_sum_exp(seen_logits))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Known,
    Unknown,
}

pub fn energy_unknown(seen_logits: &[f64], threshold: f64) -> Result<(Verdict, f64)> {
    let e = energy(seen_logits)?;
    let verdict = if e > threshold { Verdict::Unknown } else { Verdict::Known };
    Ok((verdict, e))
}

/// Linear-interpolated `quantile` of validation energies.
pub fn calibrate_threshold(energies: &[f64], quantile: f64) -> Result<f64> {
    if energies.is_empty() {
        return Err(Error::invalid("no validation energies"));
    }
    if !(0.0..=1.0).contains(&quantile) {
        return Err(Error::invalid(format!("quantile {quantile} outside [0, 1]")));
    }
    let mut sorted = energies.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = quantile * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Absent when undefined.
    pub wi: Option<f64>,
    pub a_ose: usize,
    pub unknown_ground_truth: usize,
    pub ap_per_class: BTreeMap<usize, f64>,
    pub map50_previously_known: Option<f64>,
    pub map50_current_known: Option<f64>,
    pub map50_both: Option<f64>,
}

fn mean_over(ap: &BTreeMap<usize, f64>, classes: &BTreeSet<usize>) -> Option<f64> {
    let vals: Vec<f64> = classes.iter().filter_map(|c| ap.get(c).copied()).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// All metrics for one evaluation point. Known classes are the union of the
/// two sets; every other ground-truth class counts as unknown.
pub fn evaluate_detections(
    dets: &[DetectionRecord],
    gts: &[GroundTruth],
    previously_known: &BTreeSet<usize>,
    current_known: &BTreeSet<usize>,
) -> Result<EvalResult> {
    let known: BTreeSet<usize> = previously_known.union(current_known).copied().collect();
    let MapResult { ap_per_class, .. } = map50(dets, gts, &known)?;
    let wi = match wilderness_impact(dets, gts, &known) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalResult {
        wi,
        a_ose: a_ose(dets, gts, &known),
        unknown_ground_truth: gts.iter().filter(|g| !known.contains(&g.class_id)).count(),
        map50_previously_known: mean_over(&ap_per_class, previously_known),
        map50_current_known: mean_over(&ap_per_class, current_known),
        map50_both: mean_over(&ap_per_class, &known),
        ap_per_class,
    })
}
