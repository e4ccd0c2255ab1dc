//! The inductive fully connected block and its alternating update schedule.
//!
//! The block is `fc1 -> ind1 -> tanh -> fc2 -> ind2`. The `fc` layers carry
//! task parameters and the square `ind` layers carry inductive parameters.
//! Task steps train only the task set; every `iter`-th step instead trains
//! only the inductive set on the inductive loss computed over per-class FIFO
//! queues of recent predictions.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{balanced_loss, balanced_loss_prob_grad, smooth_l1, smooth_l1_grad, ClassCounts, LossConfig};
use crate::numcore::{Linear, LinearGrad, Tensor};

pub const DEFAULT_EMBED_WIDTH: usize = 1024;
pub const DEFAULT_QUEUE_CAPACITY: usize = 10;
pub const DEFAULT_ITER: usize = 30;
pub const DEFAULT_INDUCTIVE_NOISE: f64 = 1e-3;

/// Which of the two disjoint parameter sets a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamSet {
    Task,
    Inductive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IfcBlock {
    pub fc1: Linear,
    pub ind1: Linear,
    pub fc2: Linear,
    pub ind2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IfcGrads {
    pub fc1: LinearGrad,
    pub ind1: LinearGrad,
    pub fc2: LinearGrad,
    pub ind2: LinearGrad,
}

impl IfcGrads {
    pub fn zeros_like(block: &IfcBlock) -> Self {
        Self {
            fc1: LinearGrad::zeros_like(&block.fc1),
            ind1: LinearGrad::zeros_like(&block.ind1),
            fc2: LinearGrad::zeros_like(&block.fc2),
            ind2: LinearGrad::zeros_like(&block.ind2),
        }
    }

    /// Gradients in the same order as [`IfcBlock::tensors`].
    pub fn into_tensors(self) -> Vec<Vec<f64>> {
        [self.fc1, self.ind1, self.fc2, self.ind2]
            .into_iter()
            .flat_map(|g| [g.weight, g.bias])
            .collect()
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct IfcTrace {
    input: Vec<f64>,
    after_fc1: Vec<f64>,
    hidden: Vec<f64>,
    after_fc2: Vec<f64>,
}

impl IfcBlock {
    /// Glorot task layers and near-identity inductive layers.
    pub fn new<R: Rng + ?Sized>(in_dim: usize, width: usize, inductive_noise: f64, rng: &mut R) -> Self {
        Self {
            fc1: Linear::glorot(in_dim, width, rng),
            ind1: Linear::near_identity(width, inductive_noise, rng),
            fc2: Linear::glorot(width, width, rng),
            ind2: Linear::near_identity(width, inductive_noise, rng),
        }
    }

    pub fn from_layers(fc1: Linear, ind1: Linear, fc2: Linear, ind2: Linear) -> Result<Self> {
        let width = fc1.out_dim();
        for (name, layer) in [("ind1", &ind1), ("fc2", &fc2), ("ind2", &ind2)] {
            if layer.in_dim() != width || layer.out_dim() != width {
                return Err(Error::invalid(format!(
                    "{name} must be {width}x{width}, got {}x{}",
                    layer.out_dim(),
                    layer.in_dim()
                )));
            }
        }
        Ok(Self { fc1, ind1, fc2, ind2 })
    }

    /// Same task layers with both inductive layers reset to exact identity.
    pub fn with_identity_inductive(&self) -> Self {
        let width = self.width();
        Self {
            ind1: Linear::identity(width),
            ind2: Linear::identity(width),
            ..self.clone()
        }
    }

    pub fn in_dim(&self) -> usize {
        self.fc1.in_dim()
    }

    pub fn width(&self) -> usize {
        self.fc1.out_dim()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        [&self.fc1, &self.ind1, &self.fc2, &self.ind2]
            .into_iter()
            .flat_map(Linear::tensors)
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let Self { fc1, ind1, fc2, ind2 } = self;
        [fc1, ind1, fc2, ind2]
            .into_iter()
            .flat_map(Linear::tensors_mut)
            .collect()
    }

    /// Partition tag for each entry of [`IfcBlock::tensors`].
    pub fn param_sets() -> [ParamSet; 8] {
        use ParamSet::*;
        [Task, Task, Inductive, Inductive, Task, Task, Inductive, Inductive]
    }

    pub fn forward_one(&self, x: &[f64]) -> (Vec<f64>, IfcTrace) {
        let after_fc1 = self.fc1.forward(x);
        let hidden: Vec<f64> = self.ind1.forward(&after_fc1).into_iter().map(f64::tanh).collect();
        let after_fc2 = self.fc2.forward(&hidden);
        let out = self.ind2.forward(&after_fc2);
        let trace = IfcTrace {
            input: x.to_vec(),
            after_fc1,
            hidden,
            after_fc2,
        };
        (out, trace)
    }

    /// Accumulates parameter gradients and returns `dL/dinput`.
    pub fn backward_one(&self, trace: &IfcTrace, grad_out: &[f64], grads: &mut IfcGrads) -> Vec<f64> {
        let g = self.ind2.backward(&trace.after_fc2, grad_out, &mut grads.ind2);
        let mut g = self.fc2.backward(&trace.hidden, &g, &mut grads.fc2);
        for (gi, h) in g.iter_mut().zip(&trace.hidden) {
            *gi *= 1.0 - h * h;
        }
        let g = self.ind1.backward(&trace.after_fc1, &g, &mut grads.ind1);
        self.fc1.backward(&trace.input, &g, &mut grads.fc1)
    }
}

/// Runs the block on every row of a `[B, D]` batch.
pub fn ifc_forward(block: &IfcBlock, features: &Tensor) -> Result<Tensor> {
    let shape = features.shape();
    if shape.len() != 2 || shape[1] != block.in_dim() {
        return Err(Error::invalid(format!(
            "features of shape {shape:?} for a block with input width {}",
            block.in_dim()
        )));
    }
    let mut out = Vec::with_capacity(shape[0] * block.width());
    for row in features.rows() {
        out.extend(block.forward_one(row).0);
    }
    Tensor::new(vec![shape[0], block.width()], out)
}

/// One stored `{p, l, p*, l*}` record. `input` keeps the region feature the
/// prediction came from so the record can be re-scored under the current
/// parameters during an inductive update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseEntry {
    pub probs: Vec<f64>,
    pub boxes: [f64; 4],
    pub target_class: usize,
    pub target_box: [f64; 4],
    #[serde(default)]
    pub input: Vec<f64>,
}

/// Per-class FIFO queues of capacity `N_c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseQueue {
    capacity: usize,
    classes: BTreeMap<usize, VecDeque<BaseEntry>>,
}

impl Default for BaseQueue {
    fn default() -> Self {
        Self::new(DEFAULT_QUEUE_CAPACITY).expect("nonzero capacity")
    }
}

impl BaseQueue {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("queue capacity must be >= 1"));
        }
        Ok(Self {
            capacity,
            classes: BTreeMap::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends to `class`'s queue, evicting its oldest entry when full.
    pub fn push(&mut self, class: usize, entry: BaseEntry) {
        let q = self.classes.entry(class).or_default();
        if q.len() == self.capacity {
            q.pop_front();
        }
        q.push_back(entry);
    }

    pub fn class_len(&self, class: usize) -> usize {
        self.classes.get(&class).map_or(0, VecDeque::len)
    }

    pub fn entries(&self, class: usize) -> impl Iterator<Item = &BaseEntry> {
        self.classes.get(&class).into_iter().flatten()
    }

    pub fn total_len(&self) -> usize {
        self.classes.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_len() == 0
    }

    /// Non-empty classes with their entries, in class order.
    pub fn non_empty(&self) -> impl Iterator<Item = (usize, &VecDeque<BaseEntry>)> {
        self.classes.iter().filter(|(_, q)| !q.is_empty()).map(|(&c, q)| (c, q))
    }

    /// Weight of every entry in the inductive loss, `1 / (K * len_c)` where
    /// `K` is the number of non-empty classes.
    pub fn entry_weights(&self) -> Vec<(usize, usize, f64)> {
        let k = self.non_empty().count() as f64;
        self.non_empty()
            .flat_map(|(c, q)| {
                let w = 1.0 / (k * q.len() as f64);
                (0..q.len()).map(move |i| (c, i, w))
            })
            .collect()
    }

    pub fn entry(&self, class: usize, index: usize) -> Option<&BaseEntry> {
        self.classes.get(&class).and_then(|q| q.get(index))
    }
}

fn entry_loss(e: &BaseEntry, counts: &ClassCounts, cfg: &LossConfig) -> Result<f64> {
    Ok(balanced_loss(&e.probs, e.target_class, cfg, counts)? + smooth_l1(&e.boxes, &e.target_box)?)
}

/// Mean over each class's entries of `balanced_loss + smooth_l1`, then an
/// unweighted mean over classes.
pub fn inductive_loss(queue: &BaseQueue, counts: &ClassCounts, cfg: &LossConfig) -> Result<f64> {
    if queue.is_empty() {
        return Err(Error::invalid("all base queues are empty"));
    }
    let mut total = 0.0;
    for (c, i, w) in queue.entry_weights() {
        total += w * entry_loss(queue.entry(c, i).unwrap(), counts, cfg)?;
    }
    Ok(total)
}

/// Gradient of [`inductive_loss`] with respect to one stored entry.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryGrad {
    pub class: usize,
    pub index: usize,
    pub probs: Vec<f64>,
    pub boxes: [f64; 4],
}

pub fn inductive_loss_with_grad(
    queue: &BaseQueue,
    counts: &ClassCounts,
    cfg: &LossConfig,
) -> Result<(f64, Vec<EntryGrad>)> {
    if queue.is_empty() {
        return Err(Error::invalid("all base queues are empty"));
    }
    let mut total = 0.0;
    let mut grads = Vec::new();
    for (c, i, w) in queue.entry_weights() {
        let e = queue.entry(c, i).unwrap();
        total += w * entry_loss(e, counts, cfg)?;
        let mut probs = vec![0.0; e.probs.len()];
        probs[e.target_class] = w * balanced_loss_prob_grad(&e.probs, e.target_class, cfg, counts)?;
        let box_grad = smooth_l1_grad(&e.boxes, &e.target_box)?;
        let boxes = [w * box_grad[0], w * box_grad[1], w * box_grad[2], w * box_grad[3]];
        grads.push(EntryGrad {
            class: c,
            index: i,
            probs,
            boxes,
        });
    }
    Ok((total, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    TaskUpdate,
    InductiveUpdate,
}

impl Phase {
    /// The parameter set trained in this phase; the other one is frozen.
    pub fn trainable(self) -> ParamSet {
        match self {
            Phase::TaskUpdate => ParamSet::Task,
            Phase::InductiveUpdate => ParamSet::Inductive,
        }
    }
}

/// Decides, step by step, which parameter set is trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateScheduler {
    iter: usize,
    step: usize,
}

impl UpdateScheduler {
    pub fn new(iter: usize) -> Result<Self> {
        if iter == 0 {
            return Err(Error::invalid("inductive update interval must be >= 1"));
        }
        Ok(Self { iter, step: 0 })
    }

    pub fn iter(&self) -> usize {
        self.iter
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Phase of the 1-based `step_index`.
    pub fn phase(&self, step_index: usize) -> Phase {
        debug_assert!(step_index >= 1);
        if step_index.is_multiple_of(self.iter) {
            Phase::InductiveUpdate
        } else {
            Phase::TaskUpdate
        }
    }

    /// Advances the counter and returns the phase of the new step.
    pub fn alternating_step(&mut self) -> Phase {
        self.step += 1;
        self.phase(self.step)
    }
}
