//! Incremental training of one task: SGD on the composite task loss with
//! alternating inductive updates.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{
    cluster_loss_with_grad, nfd_loss_with_grad, CompositeWeights, InheritTerms, NewTaskTerms, Prototypes,
    TeacherSnapshot, DEFAULT_EMA_RATE, DEFAULT_MARGIN,
};
use crate::error::{Error, Result};
use crate::harness::model::{Detector, DetectorGrads, Forward, Upstream};
use crate::harness::world::SyntheticScene;
use crate::inductive::{BaseEntry, BaseQueue, ParamSet, Phase, UpdateScheduler, DEFAULT_ITER, DEFAULT_QUEUE_CAPACITY};
use crate::losses::{
    balanced_loss_with_logit_grad, kl_old_classes, kl_old_classes_logit_grad, mse, mse_grad, smooth_l1,
    smooth_l1_grad, BalancedFactorMode, ClassCounts, LossConfig,
};
use crate::numcore::{masked_softmax, Sgd, SgdConfig, Tensor};
use crate::openworld::BBox;

/// Classification loss family used for the new-task and inductive terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    Ce,
    WeightedCe,
    Focal,
    Balanced,
}

impl LossMode {
    pub const ALL: [LossMode; 4] = [LossMode::Ce, LossMode::WeightedCe, LossMode::Focal, LossMode::Balanced];

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Ce => "ce",
            LossMode::WeightedCe => "weighted-ce",
            LossMode::Focal => "focal",
            LossMode::Balanced => "balanced",
        }
    }

    /// Concrete loss settings. The modes form a 2x2 grid: weighted-CE and
    /// balanced apply `base`'s count-derived factor and class weights, focal
    /// and balanced apply `base.gamma`.
    pub fn resolve(self, base: &LossConfig) -> LossConfig {
        let mut cfg = LossConfig {
            gamma: 0.0,
            alpha: Default::default(),
            balanced_factor_mode: BalancedFactorMode::Off,
        };
        if matches!(self, LossMode::Focal | LossMode::Balanced) {
            cfg.gamma = base.gamma;
        }
        if matches!(self, LossMode::WeightedCe | LossMode::Balanced) {
            cfg.alpha = base.alpha.clone();
            cfg.balanced_factor_mode = base.balanced_factor_mode;
        }
        cfg
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown loss mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub epochs: usize,
    pub min_steps: usize,
    pub iter: usize,
    pub queue_capacity: usize,
    pub margin: f64,
    pub ema_rate: f64,
    pub weights: CompositeWeights,
    pub loss: LossConfig,
    pub loss_mode: LossMode,
    pub distill_on: bool,
    pub ifc_on: bool,
    /// Also supervise earlier-class instances that appear in later scenes.
    pub replay_old_labels: bool,
    /// Repeat the learning-rate warmup at every task instead of only the first.
    pub warmup_every_task: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sgd: SgdConfig::default(),
            epochs: 20,
            min_steps: 0,
            iter: DEFAULT_ITER,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            margin: DEFAULT_MARGIN,
            ema_rate: DEFAULT_EMA_RATE,
            weights: CompositeWeights::default(),
            loss: LossConfig::default(),
            loss_mode: LossMode::Balanced,
            distill_on: true,
            ifc_on: true,
            replay_old_labels: true,
            warmup_every_task: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        self.weights.validate()?;
        self.loss.validate()?;
        if self.iter == 0 || self.queue_capacity == 0 {
            return Err(Error::Config("iter and queue_capacity must be >= 1".into()));
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(Error::Config("margin must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_rate) {
            return Err(Error::Config("ema_rate must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn steps_for(&self, pool: usize) -> usize {
        let per_epoch = pool.div_ceil(self.sgd.batch_size);
        (self.epochs * per_epoch).max(self.min_steps)
    }
}

/// Anchor-relative regression target of a ground-truth box.
pub fn box_deltas(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    let a = anchor.coords();
    let g = gt.coords();
    let (w, h) = (anchor.width(), anchor.height());
    [(g[0] - a[0]) / w, (g[1] - a[1]) / h, (g[2] - a[2]) / w, (g[3] - a[3]) / h]
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRegion {
    pub feature: Vec<f64>,
    pub class: usize,
    pub target_box: [f64; 4],
    /// Whether the region contributes to the new-task loss.
    pub annotated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub task_classes: Vec<usize>,
    pub regions: Vec<TrainRegion>,
}

impl TrainData {
    /// Regions of `task_classes` are annotated; others only when `replay`.
    pub fn from_scenes(scenes: &[SyntheticScene], task_classes: &[usize], replay: bool) -> Self {
        let regions = scenes
            .iter()
            .flat_map(|s| &s.regions)
            .map(|r| TrainRegion {
                feature: r.feature.clone(),
                class: r.gt_class,
                target_box: box_deltas(&r.anchor, &r.gt_box),
                annotated: replay || task_classes.contains(&r.gt_class),
            })
            .collect();
        Self {
            task_classes: task_classes.to_vec(),
            regions,
        }
    }
}

/// State carried from task to task.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerState {
    pub seen: Vec<bool>,
    pub counts: ClassCounts,
    pub prototypes: Prototypes,
    pub queue: BaseQueue,
}

impl LearnerState {
    pub fn new(num_classes: usize, embed_width: usize, queue_capacity: usize) -> Result<Self> {
        Ok(Self {
            seen: vec![false; num_classes],
            counts: ClassCounts::default(),
            prototypes: Prototypes::new(embed_width),
            queue: BaseQueue::new(queue_capacity)?,
        })
    }

    pub fn seen_classes(&self) -> Vec<usize> {
        (0..self.seen.len()).filter(|&c| self.seen[c]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub phase: Phase,
    pub lr: f64,
    pub new_task: Option<NewTaskTerms>,
    pub inherit: Option<InheritTerms>,
    pub inductive: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub steps: Vec<StepLog>,
}

impl TrainingLog {
    pub fn inductive_updates(&self) -> usize {
        self.steps.iter().filter(|s| s.phase == Phase::InductiveUpdate).count()
    }
}

fn mask(seen: &[usize], n: usize) -> Vec<bool> {
    let mut m = vec![false; n];
    for &c in seen {
        m[c] = true;
    }
    m
}

fn divergence(step: usize, what: &str, v: f64) -> Error {
    Error::Divergence {
        step,
        detail: format!("{what} = {v}"),
    }
}

fn scaled(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| x * s).collect()
}

fn trainable(model: &Detector, set: ParamSet) -> Vec<bool> {
    model.param_sets().into_iter().map(|p| p == set).collect()
}

/// Trains `model` on one task. The teacher, when present, is the frozen
/// model of the previous task and supplies the inherit loss.
pub fn train_task<R: Rng + ?Sized>(
    model: &mut Detector,
    teacher: Option<&TeacherSnapshot<Detector>>,
    data: &TrainData,
    state: &mut LearnerState,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainingLog> {
    train_task_observed(model, teacher, data, state, cfg, rng, |_, _| {})
}

/// [`train_task`] with a callback invoked after every parameter update.
pub fn train_task_observed<R: Rng + ?Sized, F: FnMut(&StepLog, &Detector)>(
    model: &mut Detector,
    teacher: Option<&TeacherSnapshot<Detector>>,
    data: &TrainData,
    state: &mut LearnerState,
    cfg: &TrainConfig,
    rng: &mut R,
    mut observe: F,
) -> Result<TrainingLog> {
    cfg.validate()?;
    if data.regions.is_empty() || !data.regions.iter().any(|r| r.annotated) {
        return Err(Error::invalid("task has no annotated training regions"));
    }
    let k = model.num_classes();
    if state.seen.len() != k {
        return Err(Error::invalid("learner state and model disagree on class count"));
    }
    if let Some(r) = data.regions.iter().find(|r| r.class >= k) {
        return Err(Error::invalid(format!("class {} outside the model's {k} outputs", r.class)));
    }
    let old = state.seen_classes();
    for &c in &data.task_classes {
        state.seen[c] = true;
    }
    for r in data.regions.iter().filter(|r| r.annotated) {
        state.counts.add(r.class, 1);
    }
    let seen = state.seen.clone();
    let teacher_seen = mask(&old, k);
    let loss_cfg = cfg.loss_mode.resolve(&cfg.loss);
    let distill = teacher.filter(|_| cfg.distill_on && !old.is_empty());

    let total_steps = cfg.steps_for(data.regions.len());
    let mut schedule = cfg.sgd.clone();
    if !old.is_empty() && !cfg.warmup_every_task {
        schedule.warmup_iters = 0;
    }
    let mut scheduler = UpdateScheduler::new(cfg.iter)?;
    let mut sgd = Sgd::new();
    let task_mask = trainable(model, ParamSet::Task);
    let ind_mask = trainable(model, ParamSet::Inductive);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut log = TrainingLog::default();

    for step in 1..=total_steps {
        let lr = schedule.rate_at(step, total_steps);
        let phase = if cfg.ifc_on {
            scheduler.alternating_step()
        } else {
            Phase::TaskUpdate
        };
        let mut batch = Vec::with_capacity(cfg.sgd.batch_size);
        while batch.len() < cfg.sgd.batch_size.min(data.regions.len()) {
            if cursor == order.len() {
                order = (0..data.regions.len()).collect();
                order.shuffle(rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let mut fwds: Vec<Forward> = Vec::with_capacity(batch.len());
        let mut probs: Vec<Vec<f64>> = Vec::with_capacity(batch.len());
        for &i in &batch {
            let f = model.forward(&data.regions[i].feature).map_err(|e| divergence_from(step, e))?;
            probs.push(masked_softmax(&f.logits, &seen)?);
            fwds.push(f);
        }
        let annotated: Vec<usize> = (0..batch.len()).filter(|&b| data.regions[batch[b]].annotated).collect();
        if cfg.weights.lambda_cont > 0.0 && !annotated.is_empty() {
            let emb: Vec<Vec<f64>> = annotated.iter().map(|&b| fwds[b].embedding.clone()).collect();
            let labels: Vec<usize> = annotated.iter().map(|&b| data.regions[batch[b]].class).collect();
            state.prototypes.update(&emb, &labels, cfg.ema_rate);
        }
        for &b in &annotated {
            let r = &data.regions[batch[b]];
            state.queue.push(
                r.class,
                BaseEntry {
                    probs: probs[b].clone(),
                    boxes: fwds[b].boxes,
                    target_class: r.class,
                    target_box: r.target_box,
                    input: r.feature.clone(),
                },
            );
        }

        let mut grads = DetectorGrads::zeros_like(model);
        let entry = match phase {
            Phase::TaskUpdate => {
                let (inh_mult, new_mult) = if distill.is_some() {
                    cfg.weights.task_multipliers()
                } else {
                    (0.0, 1.0)
                };
                let mut ups: Vec<UpstreamBuf> = vec![UpstreamBuf::zero(k, fwds[0].embedding.len(), fwds[0].feature.data().len()); batch.len()];

                let new_terms = if annotated.is_empty() {
                    None
                } else {
                    let na = annotated.len() as f64;
                    let (mut cls, mut loc) = (0.0, 0.0);
                    for &b in &annotated {
                        let r = &data.regions[batch[b]];
                        let (v, g) = balanced_loss_with_logit_grad(&probs[b], r.class, &loss_cfg, &state.counts)?;
                        cls += v / na;
                        add(&mut ups[b].logits, &scaled(&g, new_mult / na));
                        loc += smooth_l1(&fwds[b].boxes, &r.target_box)? / na;
                        let gb = smooth_l1_grad(&fwds[b].boxes, &r.target_box)?;
                        add(&mut ups[b].boxes, &scaled(&gb, new_mult * cfg.weights.lambda_loc / na));
                    }
                    let cont = if cfg.weights.lambda_cont > 0.0 {
                        let emb = Tensor::from_rows(&annotated.iter().map(|&b| fwds[b].embedding.clone()).collect::<Vec<_>>())?;
                        let labels: Vec<usize> = annotated.iter().map(|&b| data.regions[batch[b]].class).collect();
                        let (v, g) = cluster_loss_with_grad(&emb, &labels, &state.prototypes, cfg.margin)?;
                        for (row, &b) in annotated.iter().enumerate() {
                            add(&mut ups[b].embedding, &scaled(g.row(row), new_mult * cfg.weights.lambda_cont));
                        }
                        v
                    } else {
                        0.0
                    };
                    Some(NewTaskTerms {
                        cls,
                        loc,
                        cont,
                        total: cls + cfg.weights.lambda_loc * loc + cfg.weights.lambda_cont * cont,
                    })
                };

                let inherit_terms = match distill {
                    None => None,
                    Some(t) => {
                        let nb = batch.len() as f64;
                        let (mut nfd, mut kl, mut reg) = (0.0, 0.0, 0.0);
                        for (b, &i) in batch.iter().enumerate() {
                            let tf = t.model().forward(&data.regions[i].feature)?;
                            let tp = masked_softmax(&tf.logits, &teacher_seen)?;
                            let (v, g) = nfd_loss_with_grad(&fwds[b].feature, &tf.feature)?;
                            nfd += v / nb;
                            add(&mut ups[b].feature, &scaled(&g, inh_mult / nb));
                            kl += kl_old_classes(&probs[b], &tp, &old)? / nb;
                            let g = kl_old_classes_logit_grad(&probs[b], &tp, &old)?;
                            add(&mut ups[b].logits, &scaled(&g, inh_mult / nb));
                            reg += mse(&fwds[b].boxes, &tf.boxes)? / nb;
                            let g = mse_grad(&fwds[b].boxes, &tf.boxes)?;
                            add(&mut ups[b].boxes, &scaled(&g, inh_mult / nb));
                        }
                        Some(InheritTerms {
                            nfd,
                            kl,
                            reg,
                            total: nfd + kl + reg,
                        })
                    }
                };

                let total = inh_mult * inherit_terms.map_or(0.0, |t| t.total) + new_mult * new_terms.map_or(0.0, |t| t.total);
                if !total.is_finite() {
                    return Err(divergence(step, "task loss", total));
                }
                for (b, up) in ups.iter().enumerate() {
                    model.backward(&fwds[b], &up.as_upstream(), &mut grads)?;
                }
                sgd.step(model.tensors_mut(), &grads.into_tensors(), &task_mask, lr, cfg.sgd.momentum)?;
                StepLog {
                    step,
                    phase,
                    lr,
                    new_task: new_terms,
                    inherit: inherit_terms,
                    inductive: None,
                    total,
                }
            }
            Phase::InductiveUpdate => {
                let mut total = 0.0;
                for (c, i, w) in state.queue.entry_weights() {
                    let e = state.queue.entry(c, i).expect("weights index live entries");
                    let f = model.forward(&e.input).map_err(|err| divergence_from(step, err))?;
                    let p = masked_softmax(&f.logits, &seen)?;
                    let (v, g) = balanced_loss_with_logit_grad(&p, e.target_class, &loss_cfg, &state.counts)?;
                    total += w * (v + smooth_l1(&f.boxes, &e.target_box)?);
                    let gb = smooth_l1_grad(&f.boxes, &e.target_box)?;
                    let gl = scaled(&g, w);
                    let gb = [w * gb[0], w * gb[1], w * gb[2], w * gb[3]];
                    let up = Upstream {
                        logits: Some(&gl),
                        boxes: Some(&gb),
                        ..Default::default()
                    };
                    model.backward(&f, &up, &mut grads)?;
                }
                if !total.is_finite() {
                    return Err(divergence(step, "inductive loss", total));
                }
                sgd.step(model.tensors_mut(), &grads.into_tensors(), &ind_mask, lr, cfg.sgd.momentum)?;
                StepLog {
                    step,
                    phase,
                    lr,
                    new_task: None,
                    inherit: None,
                    inductive: Some(total),
                    total,
                }
            }
        };
        observe(&entry, model);
        log.steps.push(entry);
    }
    Ok(log)
}

fn divergence_from(step: usize, e: Error) -> Error {
    match e {
        Error::NumericDomain(detail) => Error::Divergence { step, detail },
        other => other,
    }
}

fn add(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

#[derive(Debug, Clone)]
struct UpstreamBuf {
    logits: Vec<f64>,
    boxes: [f64; 4],
    embedding: Vec<f64>,
    feature: Vec<f64>,
}

impl UpstreamBuf {
    fn zero(classes: usize, width: usize, feature: usize) -> Self {
        Self {
            logits: vec![0.0; classes],
            boxes: [0.0; 4],
            embedding: vec![0.0; width],
            feature: vec![0.0; feature],
        }
    }

    fn as_upstream(&self) -> Upstream<'_> {
        Upstream {
            logits: Some(&self.logits),
            boxes: Some(&self.boxes),
            embedding: Some(&self.embedding),
            feature: Some(&self.feature),
        }
    }
}
