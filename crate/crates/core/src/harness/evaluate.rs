//! Running a model over test scenes and scoring it with the open-world metrics.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::model::Detector;
use crate::harness::world::{decode_box, Region, SyntheticScene};
use crate::numcore::masked_softmax;
use crate::openworld::{
    calibrate_threshold, energy, energy_unknown, evaluate_detections, DetectionRecord, EvalResult, GroundTruth,
    Verdict,
};

/// Seen classes below this probability get no detection of their own.
pub const SCORE_THRESHOLD: f64 = 0.05;

/// Anything that maps a region to full-width class logits and box deltas.
pub trait RegionPredictor {
    fn predict(&self, region: &Region) -> Result<(Vec<f64>, [f64; 4])>;
}

impl RegionPredictor for Detector {
    fn predict(&self, region: &Region) -> Result<(Vec<f64>, [f64; 4])> {
        let f = self.forward(&region.feature)?;
        Ok((f.logits, f.boxes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub result: EvalResult,
    pub energy_threshold: f64,
    /// Largest probability any unseen class received; the mask keeps it
    /// below 1e-12.
    pub max_unseen_prob: f64,
    pub detections: Vec<DetectionRecord>,
    pub ground_truth: Vec<GroundTruth>,
}

pub fn ground_truth(scenes: &[SyntheticScene]) -> Vec<GroundTruth> {
    scenes
        .iter()
        .flat_map(|s| {
            s.regions.iter().map(|r| GroundTruth {
                image_id: s.image_id,
                bbox: r.gt_box,
                class_id: r.gt_class,
            })
        })
        .collect()
}

fn seen_mask(classes: &BTreeSet<usize>, width: usize) -> Result<Vec<bool>> {
    let mut m = vec![false; width];
    for &c in classes {
        *m.get_mut(c).ok_or_else(|| Error::invalid(format!("class {c} outside {width} logits")))? = true;
    }
    Ok(m)
}

fn seen_logits(logits: &[f64], seen: &[bool]) -> Vec<f64> {
    logits.iter().zip(seen).filter(|(_, &s)| s).map(|(&l, _)| l).collect()
}

/// Per region: when the energy is within `threshold`, one detection for the
/// argmax class and for every other seen class scoring at least
/// [`SCORE_THRESHOLD`]; otherwise a single UNKNOWN detection. Also returns
/// the largest unseen-class probability encountered.
pub fn detect<P: RegionPredictor + ?Sized>(
    model: &P,
    scenes: &[SyntheticScene],
    seen: &BTreeSet<usize>,
    threshold: f64,
) -> Result<(Vec<DetectionRecord>, f64)> {
    if seen.is_empty() {
        return Err(Error::invalid("no seen classes"));
    }
    let mut dets = Vec::new();
    let mut max_unseen: f64 = 0.0;
    let mut mask: Option<Vec<bool>> = None;
    for scene in scenes {
        for region in &scene.regions {
            let (logits, deltas) = model.predict(region)?;
            let mask = match &mask {
                Some(m) => m,
                None => mask.insert(seen_mask(seen, logits.len())?),
            };
            let probs = masked_softmax(&logits, mask)?;
            for (p, &s) in probs.iter().zip(mask.iter()) {
                if !s {
                    max_unseen = max_unseen.max(*p);
                }
            }
            let (class, score) = seen
                .iter()
                .map(|&c| (c, probs[c]))
                .fold((usize::MAX, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
            let (verdict, _) = energy_unknown(&seen_logits(&logits, mask), threshold)?;
            let bbox = decode_box(&region.anchor, &deltas);
            if verdict == Verdict::Known {
                for &c in seen {
                    if c == class || probs[c] >= SCORE_THRESHOLD {
                        dets.push(DetectionRecord::new(scene.image_id, bbox, Some(c), probs[c].clamp(0.0, 1.0))?);
                    }
                }
            } else {
                dets.push(DetectionRecord::new(scene.image_id, bbox, None, score.clamp(0.0, 1.0))?);
            }
        }
    }
    Ok((dets, max_unseen))
}

/// The given quantile of energies on known-class validation regions.
pub fn calibrate_energy<P: RegionPredictor + ?Sized>(
    model: &P,
    val: &[SyntheticScene],
    seen: &BTreeSet<usize>,
    quantile: f64,
) -> Result<f64> {
    let mut energies = Vec::new();
    for region in val.iter().flat_map(|s| &s.regions).filter(|r| seen.contains(&r.gt_class)) {
        let (logits, _) = model.predict(region)?;
        let mask = seen_mask(seen, logits.len())?;
        energies.push(energy(&seen_logits(&logits, &mask))?);
    }
    calibrate_threshold(&energies, quantile)
}

/// Scores `model` on `scenes`. Classes outside both known sets are unknown.
pub fn evaluate_model<P: RegionPredictor + ?Sized>(
    model: &P,
    scenes: &[SyntheticScene],
    previously_known: &BTreeSet<usize>,
    current_known: &BTreeSet<usize>,
    energy_threshold: f64,
) -> Result<EvalOutput> {
    if scenes.iter().all(|s| s.regions.is_empty()) {
        return Err(Error::invalid("empty test set"));
    }
    let seen: BTreeSet<usize> = previously_known.union(current_known).copied().collect();
    let (detections, max_unseen_prob) = detect(model, scenes, &seen, energy_threshold)?;
    let ground_truth = ground_truth(scenes);
    let result = evaluate_detections(&detections, &ground_truth, previously_known, current_known)?;
    Ok(EvalOutput {
        result,
        energy_threshold,
        max_unseen_prob,
        detections,
        ground_truth,
    })
}
