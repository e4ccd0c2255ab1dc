//! Seeded experiment runs over the ablation, loss-mode and sensitivity grids.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distill::{CombineMode, TeacherSnapshot};
use crate::error::{Error, Result};
use crate::harness::evaluate::{calibrate_energy, evaluate_model};
use crate::harness::model::{Detector, ModelConfig};
use crate::harness::stats::{summarize, Summary};
use crate::harness::train::{train_task, LearnerState, LossMode, TrainConfig, TrainData};
use crate::harness::world::{gen_task_stream, SyntheticScene, WorldConfig};
use crate::openworld::{EvalResult, DEFAULT_ENERGY_QUANTILE};

pub const SENSITIVITY_ALPHAS: [f64; 6] = [0.1, 0.2, 0.3, 0.4, 0.6, 0.8];
pub const SENSITIVITY_ITERS: [usize; 3] = [30, 300, 3000];
pub const REPORT_FORMAT: &str = "owlab-report/1";

/// Which set of configurations one experiment expands into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grid {
    Single,
    /// All eight on/off combinations of the B, D and I switches.
    Ablation,
    /// CE, weighted CE, focal and balanced losses.
    LossModes,
    /// `alpha x iter` with the convex combination of the two losses.
    Sensitivity,
}

impl Grid {
    pub fn as_str(self) -> &'static str {
        match self {
            Grid::Single => "single",
            Grid::Ablation => "ablation",
            Grid::LossModes => "loss-modes",
            Grid::Sensitivity => "sensitivity",
        }
    }
}

impl std::str::FromStr for Grid {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Grid::Single, Grid::Ablation, Grid::LossModes, Grid::Sensitivity]
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown grid `{s}`")))
    }
}

/// The B / D / I switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub balanced_loss: bool,
    pub distill: bool,
    pub ifc: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            balanced_loss: true,
            distill: true,
            ifc: true,
        }
    }
}

impl Ablation {
    pub fn label(&self) -> String {
        let s = |on: bool| if on { "on" } else { "off" };
        format!("B={},D={},I={}", s(self.balanced_loss), s(self.distill), s(self.ifc))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub world: WorldConfig,
    pub model: ModelConfig,
    /// Its `loss_mode`, `distill_on` and `ifc_on` are overwritten per variant.
    pub train: TrainConfig,
    pub ablation: Ablation,
    /// Loss used when the balanced-loss switch is on.
    pub loss_mode: LossMode,
    pub grid: Grid,
    /// Stop after this many tasks.
    pub max_tasks: Option<usize>,
    pub energy_quantile: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ablation: Ablation::default(),
            loss_mode: LossMode::Balanced,
            grid: Grid::Single,
            max_tasks: None,
            energy_quantile: DEFAULT_ENERGY_QUANTILE,
        }
    }
}

/// One fully resolved configuration of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub ablation: Ablation,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let unique: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if unique.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.max_tasks == Some(0) {
            return Err(Error::Config("max_tasks must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.energy_quantile) {
            return Err(Error::Config("energy_quantile must be in [0, 1]".into()));
        }
        Ok(())
    }

    fn resolve(&self, label: String, ablation: Ablation, loss_mode: LossMode, train: TrainConfig) -> Variant {
        let mut train = train;
        train.loss_mode = if ablation.balanced_loss { loss_mode } else { LossMode::Ce };
        train.distill_on = ablation.distill;
        train.ifc_on = ablation.ifc;
        Variant { label, ablation, train }
    }

    pub fn variants(&self) -> Vec<Variant> {
        match self.grid {
            Grid::Single => vec![self.resolve("base".into(), self.ablation, self.loss_mode, self.train.clone())],
            Grid::Ablation => {
                // all components on, then each one switched off in turn
                let on = Ablation {
                    balanced_loss: true,
                    distill: true,
                    ifc: true,
                };
                let rows = [
                    on,
                    Ablation { balanced_loss: false, ..on },
                    Ablation { distill: false, ..on },
                    Ablation { ifc: false, ..on },
                ];
                rows.into_iter()
                    .map(|a| self.resolve(a.label(), a, self.loss_mode, self.train.clone()))
                    .collect()
            }
            Grid::LossModes => LossMode::ALL
                .into_iter()
                .map(|m| {
                    let a = Ablation {
                        balanced_loss: true,
                        ..self.ablation
                    };
                    self.resolve(format!("loss={}", m.as_str()), a, m, self.train.clone())
                })
                .collect(),
            Grid::Sensitivity => {
                let mut out = Vec::new();
                for alpha in SENSITIVITY_ALPHAS {
                    for iter in SENSITIVITY_ITERS {
                        let mut t = self.train.clone();
                        t.weights.alpha = alpha;
                        t.weights.combine_mode = CombineMode::AlphaConvex;
                        t.iter = iter;
                        out.push(self.resolve(format!("alpha={alpha},iter={iter}"), self.ablation, self.loss_mode, t));
                    }
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task_id: usize,
    pub eval: EvalResult,
    /// Mean AP over classes introduced after the first task.
    pub minority_ap: Option<f64>,
    pub energy_threshold: f64,
    pub max_unseen_prob: f64,
    pub steps: usize,
    pub inductive_updates: usize,
    /// Mean task-step loss over the last tenth of training.
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: String,
    pub seed: u64,
    pub tasks: Vec<TaskReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub variant: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAggregate {
    pub task_id: usize,
    pub metrics: BTreeMap<String, Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub format: String,
    pub crate_version: String,
    pub config_hash: String,
    /// Canonical key=value configuration.
    pub config: String,
    pub grid: Grid,
    pub seeds: Vec<u64>,
    pub variants: Vec<String>,
    pub runs: Vec<RunReport>,
    pub aggregates: BTreeMap<String, Vec<TaskAggregate>>,
    pub metadata: BTreeMap<String, String>,
    pub failures: Vec<RunFailure>,
}

impl ExperimentReport {
    pub fn runs_of<'a>(&'a self, variant: &'a str) -> impl Iterator<Item = &'a RunReport> + 'a {
        self.runs.iter().filter(move |r| r.variant == variant)
    }

    /// Per-seed values of `metric` at `task_id` for `variant`, in seed order.
    pub fn metric_values(&self, variant: &str, task_id: usize, metric: &str) -> Vec<f64> {
        self.runs_of(variant)
            .filter_map(|r| r.tasks.iter().find(|t| t.task_id == task_id))
            .filter_map(|t| task_metrics(t).get(metric).copied().flatten())
            .collect()
    }

    pub fn aggregate(&self, variant: &str, task_id: usize, metric: &str) -> Option<Summary> {
        self.aggregates
            .get(variant)?
            .iter()
            .find(|a| a.task_id == task_id)?
            .metrics
            .get(metric)
            .copied()
    }
}

pub const METRICS: [&str; 7] = [
    "map50_previously_known",
    "map50_current_known",
    "map50_both",
    "minority_ap",
    "wi",
    "a_ose",
    "final_loss",
];

pub fn task_metrics(t: &TaskReport) -> BTreeMap<&'static str, Option<f64>> {
    let e = &t.eval;
    BTreeMap::from([
        ("map50_previously_known", e.map50_previously_known),
        ("map50_current_known", e.map50_current_known),
        ("map50_both", e.map50_both),
        ("minority_ap", t.minority_ap),
        ("wi", e.wi),
        ("a_ose", Some(e.a_ose as f64)),
        ("final_loss", Some(t.final_loss)),
    ])
}

fn minority_ap(eval: &EvalResult, first_task_classes: &[usize]) -> Option<f64> {
    let vals: Vec<f64> = eval
        .ap_per_class
        .iter()
        .filter(|(c, _)| !first_task_classes.contains(c))
        .map(|(_, &ap)| ap)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

const MODEL_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;
const BATCH_STREAM: u64 = 0xd1b5_4a32_d192_ed03;

/// A finished run together with the final model and what it was last
/// evaluated against.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub report: RunReport,
    pub model: Detector,
    pub previously_known: BTreeSet<usize>,
    pub current_known: BTreeSet<usize>,
    pub energy_threshold: f64,
}

/// Trains through the task stream for one seed, evaluating after each task.
pub fn run_single(cfg: &ExperimentConfig, variant: &Variant, seed: u64) -> Result<RunReport> {
    run_trained(cfg, variant, seed).map(|r| r.report)
}

pub fn run_trained(cfg: &ExperimentConfig, variant: &Variant, seed: u64) -> Result<TrainedRun> {
    let tasks = gen_task_stream(&cfg.world, seed)?;
    let n_tasks = cfg.max_tasks.map_or(tasks.len(), |m| m.min(tasks.len()));
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed ^ MODEL_STREAM);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(seed ^ BATCH_STREAM);
    let num_classes = cfg.world.num_classes();
    let mut model = Detector::new(&cfg.model, cfg.world.feature_dim(), num_classes, variant.ablation.ifc, &mut init_rng)?;
    let mut state = LearnerState::new(num_classes, cfg.model.embed_width, variant.train.queue_capacity)?;
    let mut teacher: Option<TeacherSnapshot<Detector>> = None;
    let test: Vec<SyntheticScene> = tasks.iter().flat_map(|t| t.test.iter().cloned()).collect();
    let mut reports = Vec::with_capacity(n_tasks);
    let mut val: Vec<SyntheticScene> = Vec::new();
    let mut last = (BTreeSet::new(), BTreeSet::new(), f64::NAN);

    for (t, task) in tasks.iter().take(n_tasks).enumerate() {
        let previously_known: BTreeSet<usize> = state.seen_classes().into_iter().collect();
        let data = TrainData::from_scenes(&task.train, &task.spec.class_ids, variant.train.replay_old_labels);
        let log = train_task(&mut model, teacher.as_ref(), &data, &mut state, &variant.train, &mut batch_rng)?;
        teacher = Some(TeacherSnapshot::new(&model));

        let current: BTreeSet<usize> = task.spec.class_ids.iter().copied().collect();
        let seen: BTreeSet<usize> = previously_known.union(&current).copied().collect();
        val.extend(task.val.iter().cloned());
        let threshold = calibrate_energy(&model, &val, &seen, cfg.energy_quantile)?;
        let out = evaluate_model(&model, &test, &previously_known, &current, threshold)?;
        let task_steps: Vec<f64> = log.steps.iter().filter(|s| s.inductive.is_none()).map(|s| s.total).collect();
        let tail = &task_steps[task_steps.len() - (task_steps.len() / 10).max(1)..];
        reports.push(TaskReport {
            task_id: t + 1,
            minority_ap: minority_ap(&out.result, &tasks[0].spec.class_ids),
            eval: out.result,
            energy_threshold: threshold,
            max_unseen_prob: out.max_unseen_prob,
            steps: log.steps.len(),
            inductive_updates: log.inductive_updates(),
            final_loss: tail.iter().sum::<f64>() / tail.len() as f64,
        });
        last = (previously_known, current, threshold);
    }
    let (previously_known, current_known, energy_threshold) = last;
    Ok(TrainedRun {
        report: RunReport {
            variant: variant.label.clone(),
            seed,
            tasks: reports,
        },
        model,
        previously_known,
        current_known,
        energy_threshold,
    })
}

fn aggregate(runs: &[RunReport], variants: &[Variant]) -> BTreeMap<String, Vec<TaskAggregate>> {
    let mut out = BTreeMap::new();
    for v in variants {
        let mine: Vec<&RunReport> = runs.iter().filter(|r| r.variant == v.label).collect();
        let task_ids: BTreeSet<usize> = mine.iter().flat_map(|r| r.tasks.iter().map(|t| t.task_id)).collect();
        let aggs = task_ids
            .into_iter()
            .map(|task_id| {
                let per_task: Vec<BTreeMap<&str, Option<f64>>> = mine
                    .iter()
                    .filter_map(|r| r.tasks.iter().find(|t| t.task_id == task_id))
                    .map(task_metrics)
                    .collect();
                let metrics = METRICS
                    .iter()
                    .filter_map(|&m| {
                        let vals: Vec<f64> = per_task.iter().filter_map(|tm| tm[m]).collect();
                        summarize(&vals).map(|s| (m.to_string(), s))
                    })
                    .collect();
                TaskAggregate { task_id, metrics }
            })
            .collect();
        out.insert(v.label.clone(), aggs);
    }
    out
}

fn metadata() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("wi".into(), "precision over all known-labeled detections, no fixed recall level".into()),
        ("matching".into(), "greedy by score, highest-IoU unmatched ground truth, IoU >= 0.5".into()),
        ("ap".into(), "all-point interpolation; classes without ground truth excluded".into()),
        ("unknown_threshold".into(), "quantile of known-class validation energies".into()),
        ("minority_ap".into(), "mean AP over classes of tasks 2 and later".into()),
        ("detections".into(), "argmax class plus every seen class with probability >= 0.05, per region".into()),
    ])
}

/// Runs every (variant, seed) pair. Pairs run in parallel; each run is
/// sequential and fully determined by its configuration and seed, so the
/// report does not depend on scheduling. On any failure the completed runs
/// are returned inside [`Error::PartialRun`].
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment_with(cfg, |_| Ok(()))
}

/// [`run_experiment`], handing every finished run to `sink` (for example to
/// write its checkpoint). A sink error counts as a failure of that run.
pub fn run_experiment_with<F>(cfg: &ExperimentConfig, sink: F) -> Result<ExperimentReport>
where
    F: Fn(&TrainedRun) -> Result<()> + Sync,
{
    cfg.validate()?;
    let variants = cfg.variants();
    let jobs: Vec<(&Variant, u64)> = variants.iter().flat_map(|v| cfg.seeds.iter().map(move |&s| (v, s))).collect();
    let results: Vec<Result<RunReport>> = jobs
        .par_iter()
        .map(|(v, s)| {
            let run = run_trained(cfg, v, *s)?;
            sink(&run)?;
            Ok(run.report)
        })
        .collect();
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    let mut first_error = None;
    for ((v, s), r) in jobs.iter().zip(results) {
        match r {
            Ok(run) => runs.push(run),
            Err(e) => {
                failures.push(RunFailure {
                    variant: v.label.clone(),
                    seed: *s,
                    error: e.to_string(),
                });
                first_error.get_or_insert(e);
            }
        }
    }
    let report = build_report(cfg, runs, failures);
    match first_error {
        None => Ok(report),
        Some(cause) => Err(Error::PartialRun {
            cause: cause.to_string(),
            report: Box::new(report),
        }),
    }
}

/// Assembles a report from finished runs. Aggregation is a pure function of
/// the runs, so merging partial results gives the same document.
pub fn build_report(cfg: &ExperimentConfig, runs: Vec<RunReport>, failures: Vec<RunFailure>) -> ExperimentReport {
    let variants = cfg.variants();
    ExperimentReport {
        format: REPORT_FORMAT.into(),
        crate_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.config_hash(),
        config: cfg.to_kv(),
        grid: cfg.grid,
        seeds: cfg.seeds.clone(),
        variants: variants.iter().map(|v| v.label.clone()).collect(),
        aggregates: aggregate(&runs, &variants),
        runs,
        metadata: metadata(),
        failures,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.world.test_scale = 0.1;
        cfg.max_tasks = Some(1);
        cfg.train.epochs = 1;
        cfg
    }

    #[test]
    fn grids_have_the_expected_shape() {
        let mut cfg = ExperimentConfig::default();
        for (grid, n) in [(Grid::Single, 1), (Grid::Ablation, 4), (Grid::LossModes, 4), (Grid::Sensitivity, 18)] {
            cfg.grid = grid;
            let v = cfg.variants();
            assert_eq!(v.len(), n, "{grid:?}");
            let labels: BTreeSet<&str> = v.iter().map(|v| v.label.as_str()).collect();
            assert_eq!(labels.len(), n);
        }
        cfg.grid = Grid::Ablation;
        let v = cfg.variants();
        assert_eq!(v[0].label, "B=on,D=on,I=on");
        assert_eq!(v[1].train.loss_mode, LossMode::Ce);
        assert!(!v[2].train.distill_on && !v[3].train.ifc_on);
        cfg.grid = Grid::Sensitivity;
        assert!(cfg.variants().iter().all(|v| v.train.weights.combine_mode == CombineMode::AlphaConvex));
    }

    #[test]
    fn single_task_report_has_one_block() {
        let r = run_experiment(&quick()).unwrap();
        assert_eq!(r.runs.len(), 1);
        assert_eq!(r.runs[0].tasks.len(), 1);
        assert!(r.runs[0].tasks[0].minority_ap.is_none());
        assert!(r.aggregate("base", 1, "map50_current_known").is_some());
        assert!(r.failures.is_empty());
    }

    #[test]
    fn seeds_change_results_but_not_the_hash() {
        let mut a = quick();
        let mut b = quick();
        a.seeds = vec![1];
        b.seeds = vec![2];
        let (ra, rb) = (run_experiment(&a).unwrap(), run_experiment(&b).unwrap());
        assert_eq!(ra.config_hash, rb.config_hash);
        assert_ne!(ra.runs[0].tasks, rb.runs[0].tasks);
    }

    #[test]
    fn reports_are_bit_identical_across_runs() {
        let mut cfg = quick();
        cfg.max_tasks = Some(2);
        cfg.seeds = vec![3, 4];
        let a = serde_json::to_string(&run_experiment(&cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&run_experiment(&cfg).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn failures_come_back_with_partial_results() {
        let mut cfg = quick();
        cfg.seeds = vec![0, 1];
        cfg.train.sgd.learning_rate = 1e8;
        cfg.train.sgd.warmup_iters = 0;
        cfg.train.epochs = 20;
        match run_experiment(&cfg) {
            Err(Error::PartialRun { report, .. }) => {
                assert_eq!(report.failures.len() + report.runs.len(), 2);
                assert!(!report.failures.is_empty());
            }
            other => panic!("expected a partial run, got {:?}", other.map(|r| r.runs.len())),
        }
    }
}
