//! Acceptance criteria. Each criterion prints one PASS/FAIL line; the test
//! fails if any criterion does.

mod common;

use std::collections::{BTreeMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use owlab::distill::{inherit_loss, nfd_loss, normalize_feature, FeatureMap, InheritBatch, NORM_EPS};
use owlab::gradcheck::{run_gradcheck, DEFAULT_SAMPLES, TOLERANCE};
use owlab::harness::experiment::{run_experiment, ExperimentConfig, ExperimentReport, Grid};
use owlab::harness::model::{Detector, ModelConfig};
use owlab::harness::report::{sensitivity_grid, GRID_METRIC};
use owlab::harness::stats::sign_test;
use owlab::harness::train::{train_task_observed, LearnerState, TrainConfig, TrainData};
use owlab::harness::world::{gen_task_stream, WorldConfig};
use owlab::inductive::{BaseEntry, BaseQueue, ParamSet, Phase, UpdateScheduler};
use owlab::losses::{balanced_loss, ce_multiclass, focal_softmax, ClassCounts, LossConfig};
use owlab::numcore::{softmax, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn trend_seeds() -> Vec<u64> {
    (0..20).collect()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let report = run_gradcheck(DEFAULT_SAMPLES, 0).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = report.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let detail = format!(
        "{} checks x {} inputs, worst rel err {worst:.2e} (tol {TOLERANCE:e}), {elapsed:.1?}",
        report.checks.len(),
        DEFAULT_SAMPLES
    );
    ensure(
        report.passed() && report.checks.len() == 11 && report.checks.iter().all(|c| c.samples >= 100) && elapsed < Duration::from_secs(60),
        detail,
    )
}

fn reduction_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut to_focal, mut to_ce) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let k = rng.random_range(2..10);
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-4.0..4.0)).collect();
        let p = softmax(&logits).unwrap();
        let t = rng.random_range(0..k);
        let cfg = LossConfig {
            gamma: rng.random_range(0.0..4.0),
            alpha: [(t, rng.random_range(0.1..2.0))].into_iter().collect(),
            ..LossConfig::default()
        };
        // n_c / n = 1e-15
        let rare = ClassCounts::new([(t, 1), (k + 1, 999_999_999_999_999)].into_iter().collect());
        let b = balanced_loss(&p, t, &cfg, &rare).unwrap();
        to_focal = to_focal.max((b - focal_softmax(&p, t, &cfg).unwrap()).abs());
        let plain = LossConfig {
            gamma: 0.0,
            ..LossConfig::default()
        };
        to_ce = to_ce.max((focal_softmax(&p, t, &plain).unwrap() - ce_multiclass(&p, t).unwrap()).abs());
    }
    ensure(
        to_focal <= 1e-9 && to_ce <= 1e-9,
        format!("max |balanced - focal| {to_focal:.1e}, max |focal(0,1) - ce| {to_ce:.1e} over 1000 inputs"),
    )
}

fn random_map(rng: &mut ChaCha8Rng) -> FeatureMap {
    let (c, h, w) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(2..6));
    let scale = 10f64.powf(rng.random_range(-2.0..3.0));
    let data = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
    FeatureMap::new(c, h, w, data).unwrap()
}

fn moments(x: &[f64]) -> (f64, f64) {
    let m = mean(x);
    (m, (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64).sqrt())
}

fn normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_mean, mut worst_std, mut worst_affine) = (0.0f64, 0.0f64, 0.0f64);
    let mut channels = 0;
    for _ in 0..1000 {
        let f = random_map(&mut rng);
        let n = normalize_feature(&f, NORM_EPS);
        for c in 0..f.channels() {
            let (m, s) = moments(n.channel(c));
            worst_mean = worst_mean.max(m.abs());
            if moments(f.channel(c)).1 > NORM_EPS {
                worst_std = worst_std.max((s - 1.0).abs());
                channels += 1;
            }
        }
        let t = FeatureMap::new(f.shape()[0], f.shape()[1], f.shape()[2], f.data().iter().map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let coef: Vec<(f64, f64)> = (0..f.channels()).map(|_| (rng.random_range(0.01..100.0), rng.random_range(-50.0..50.0))).collect();
        let sp = f.spatial();
        let moved = |m: &FeatureMap| {
            let d = m.data().iter().enumerate().map(|(i, v)| coef[i / sp].0 * v + coef[i / sp].1).collect();
            FeatureMap::new(m.shape()[0], m.shape()[1], m.shape()[2], d).unwrap()
        };
        let base = nfd_loss(&f, &t).unwrap();
        worst_affine = worst_affine
            .max((nfd_loss(&moved(&f), &t).unwrap() - base).abs())
            .max((nfd_loss(&f, &moved(&t)).unwrap() - base).abs());
    }
    ensure(
        worst_mean < 1e-9 && worst_std <= 1e-6 && worst_affine <= 1e-9,
        format!("|mean| {worst_mean:.1e}, |std - 1| {worst_std:.1e} over {channels} channels, affine shift {worst_affine:.1e}"),
    )
}

fn self_distillation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..9);
        let k = rng.random_range(2..12);
        let (c, h, w) = (rng.random_range(1..5), rng.random_range(1..4), rng.random_range(2..4));
        let feats: Vec<FeatureMap> = (0..n)
            .map(|_| FeatureMap::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap())
            .collect();
        let probs: Vec<Vec<f64>> = (0..n)
            .map(|_| softmax(&(0..k).map(|_| rng.random_range(-5.0..5.0)).collect::<Vec<_>>()).unwrap())
            .collect();
        let boxes: Vec<[f64; 4]> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0))).collect();
        let old: Vec<usize> = (0..k).filter(|_| rng.random_bool(0.5)).collect();
        let old = if old.is_empty() { vec![0] } else { old };
        let batch = InheritBatch {
            student_features: &feats,
            teacher_features: &feats,
            student_probs: &probs,
            teacher_probs: &probs,
            student_boxes: &boxes,
            teacher_boxes: &boxes,
        };
        worst = worst.max(inherit_loss(&batch, &old).map_err(|e| e.to_string())?.total.abs());
    }
    ensure(worst < 1e-9, format!("max inherit loss {worst:.1e} over 200 batches"))
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..1000 {
        let scene = common::random_scene(&mut rng);
        common::check_scene(&scene).map_err(|e| format!("scene {i}: {e}"))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(30), format!("1000 scenes agree, {elapsed:.1?}"))
}

fn masking(reports: &[&ExperimentReport]) -> Outcome {
    let tasks: Vec<f64> = reports
        .iter()
        .flat_map(|r| &r.runs)
        .flat_map(|run| &run.tasks)
        .map(|t| t.max_unseen_prob)
        .collect();
    let worst = tasks.iter().copied().fold(0.0, f64::max);
    ensure(
        !tasks.is_empty() && worst < 1e-12,
        format!("max unseen-class probability {worst:.1e} over {} evaluated tasks", tasks.len()),
    )
}

fn queue_and_scheduler() -> Outcome {
    // FIFO against a list model
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut queue = BaseQueue::new(10).unwrap();
    let mut model: BTreeMap<usize, VecDeque<u64>> = BTreeMap::new();
    for id in 0..10_000u64 {
        let class = rng.random_range(0..6);
        let entry = BaseEntry {
            probs: vec![1.0],
            boxes: [0.0; 4],
            target_class: class,
            target_box: [id as f64, 0.0, 0.0, 0.0],
            input: vec![],
        };
        queue.push(class, entry);
        let list = model.entry(class).or_default();
        list.push_back(id);
        if list.len() > 10 {
            list.pop_front();
        }
        let got: Vec<u64> = queue.entries(class).map(|e| e.target_box[0] as u64).collect();
        if !got.iter().eq(list.iter()) || queue.class_len(class) > 10 {
            return Err(format!("queue diverged from the list model at op {id}"));
        }
    }

    for (steps, iter) in [(90, 30), (1000, 7), (29, 30), (3000, 1)] {
        let mut s = UpdateScheduler::new(iter).unwrap();
        let n = (0..steps).filter(|_| s.alternating_step() == Phase::InductiveUpdate).count();
        if n != steps / iter {
            return Err(format!("{n} inductive updates in {steps} steps with iter {iter}"));
        }
    }

    // real training on the first task
    let world = WorldConfig::default();
    let task = gen_task_stream(&world, 0).unwrap().remove(0);
    let mcfg = ModelConfig::default();
    let num_classes = world.num_classes();
    let mut trng = ChaCha8Rng::seed_from_u64(0);
    let mut det = Detector::new(&mcfg, world.feature_dim(), num_classes, true, &mut trng).unwrap();
    let mut state = LearnerState::new(num_classes, mcfg.embed_width, 10).unwrap();
    let data = TrainData::from_scenes(&task.train, &task.spec.class_ids, true);
    let cfg = TrainConfig {
        epochs: 2,
        iter: 7,
        ..TrainConfig::default()
    };
    let sets = det.param_sets();
    let mut prev: Vec<Tensor> = det.tensors().into_iter().cloned().collect();
    let mut violations = 0;
    let mut checked = 0;
    let log = train_task_observed(&mut det, None, &data, &mut state, &cfg, &mut trng, |step, m| {
        let frozen = match step.phase {
            Phase::TaskUpdate => ParamSet::Inductive,
            Phase::InductiveUpdate => ParamSet::Task,
        };
        for ((now, before), set) in m.tensors().into_iter().zip(&prev).zip(&sets) {
            if *set == frozen {
                checked += 1;
                if !now.data().iter().zip(before.data()).all(|(a, b)| a.to_bits() == b.to_bits()) {
                    violations += 1;
                }
            }
        }
        prev = m.tensors().into_iter().cloned().collect();
    })
    .map_err(|e| e.to_string())?;
    let steps = log.steps.len();
    ensure(
        violations == 0 && checked > 0 && log.inductive_updates() == steps / 7,
        format!(
            "10000 queue ops match; training: {} inductive updates in {steps} steps (iter 7), {checked} frozen tensor checks, {violations} changed",
            log.inductive_updates()
        ),
    )
}

fn loss_mode_trend(r: &ExperimentReport, elapsed: Duration) -> Outcome {
    let last = r.runs[0].tasks.len();
    let modes = ["loss=ce", "loss=weighted-ce", "loss=focal", "loss=balanced"];
    let means: Vec<f64> = modes.iter().map(|m| mean(&r.metric_values(m, last, "minority_ap"))).collect();
    let st = sign_test(&r.metric_values("loss=balanced", last, "minority_ap"), &r.metric_values("loss=ce", last, "minority_ap"));
    let ordered = means.windows(2).all(|w| w[0] <= w[1]);
    ensure(
        st.p_value < 0.05 && ordered && elapsed < Duration::from_secs(300),
        format!(
            "minority AP at task {last}: ce {:.4} <= wce {:.4} <= focal {:.4} <= balanced {:.4}: {ordered}; balanced vs ce {}-{} (p = {:.4}); {} seeds in {elapsed:.1?}",
            means[0], means[1], means[2], means[3], st.wins, st.losses, st.p_value, r.seeds.len()
        ),
    )
}

fn ablation_trend(r: &ExperimentReport) -> Outcome {
    let last = r.runs[0].tasks.len();
    let on = "B=on,D=on,I=on";
    let st = sign_test(
        &r.metric_values(on, 2, "map50_previously_known"),
        &r.metric_values("B=on,D=off,I=on", 2, "map50_previously_known"),
    );
    let ifc_on = mean(&r.metric_values(on, last, "map50_both"));
    let ifc_off = mean(&r.metric_values("B=on,D=on,I=off", last, "map50_both"));
    ensure(
        st.p_value < 0.05 && ifc_on > ifc_off,
        format!(
            "distillation on vs off, previously-known mAP after task 2: {}-{} (p = {:.4}); combined mAP IFC on {ifc_on:.4} vs off {ifc_off:.4}",
            st.wins, st.losses, st.p_value
        ),
    )
}

fn sensitivity(r: &ExperimentReport) -> Outcome {
    let grid = sensitivity_grid(r, GRID_METRIC).map_err(|e| e.to_string())?;
    let cells: Vec<f64> = grid.iter().flatten().flatten().copied().collect();
    let shape_ok = grid.len() == 6 && grid.iter().all(|row| row.len() == 3) && cells.len() == 18;
    let spread = cells.iter().copied().fold(f64::MIN, f64::max) - cells.iter().copied().fold(f64::MAX, f64::min);
    ensure(
        shape_ok && spread > 0.0,
        format!("{}x{} grid, {} defined cells, combined mAP spread {spread:.4}", grid.len(), grid[0].len(), cells.len()),
    )
}

fn determinism() -> Outcome {
    let cfg = ExperimentConfig {
        seeds: vec![0, 1],
        ..ExperimentConfig::default()
    };
    let a = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let b = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let (ja, jb) = (serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    ensure(a == b && ja == jb, format!("two runs of 2 seeds, {} report bytes, identical: {}", ja.len(), ja == jb))
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    match &out {
        Ok(d) => println!("PASS  {name}: {d}"),
        Err(d) => println!("FAIL  {name}: {d}"),
    }
    out.is_ok()
}

fn experiment(grid: Grid, seeds: Vec<u64>) -> (ExperimentReport, Duration) {
    let cfg = ExperimentConfig {
        grid,
        seeds,
        ..ExperimentConfig::default()
    };
    let start = Instant::now();
    let r = run_experiment(&cfg).expect("experiment runs");
    (r, start.elapsed())
}

#[test]
fn acceptance_criteria() {
    let mut ok = vec![
        run("gradient suite", gradient_suite),
        run("reduction identities", reduction_identities),
        run("normalization", normalization),
        run("self-distillation zero", self_distillation),
        run("metric oracles", metric_oracles),
        run("scheduler/queue properties", queue_and_scheduler),
    ];

    let (losses, loss_time) = experiment(Grid::LossModes, trend_seeds());
    let (ablation, _) = experiment(Grid::Ablation, trend_seeds());
    let (grid, _) = experiment(Grid::Sensitivity, vec![0]);
    ok.push(run("masking", || masking(&[&losses, &ablation, &grid])));
    ok.push(run("trend: loss modes", || loss_mode_trend(&losses, loss_time)));
    ok.push(run("trend: distillation and IFC", || ablation_trend(&ablation)));
    ok.push(run("sensitivity grid", || sensitivity(&grid)));
    ok.push(run("determinism", determinism));

    let failed = ok.iter().filter(|p| !**p).count();
    println!("{} of {} criteria passed", ok.len() - failed, ok.len());
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}
