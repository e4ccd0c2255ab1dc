//! `owlab` command line.
//!
//! Exit codes: 0 on success, 1 on usage or input errors, 2 when training
//! diverges or a gradient check fails.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gradcheck::{run_gradcheck, DEFAULT_SAMPLES};
use crate::harness::evaluate::evaluate_model;
use crate::harness::experiment::{
    build_report, run_experiment_with, run_trained, ExperimentConfig, ExperimentReport, Grid,
};
use crate::harness::io::{read_json, read_scenes, write_json, write_jsonl, write_scenes, Checkpoint, JsonlHeader};
use crate::harness::report::export;
use crate::harness::world::{gen_task_stream, TaskSpec};
use crate::openworld::EvalResult;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "OWLAB_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "owlab-out";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "owlab", version, about = "Incremental open-world detection lab")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// key=value configuration file; defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Replaces the configured seed list with this single seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory [default: $OWLAB_OUT_DIR or ./owlab-out].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// More output; repeat for detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Errors only.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic task stream as JSON-lines datasets.
    GenTasks {
        /// Training-count scale relative to the full dataset (default 0.01).
        #[arg(long)]
        scale: Option<f64>,
    },
    /// Train one configuration through the task stream; writes a checkpoint
    /// and a report.
    Train {
        #[arg(long)]
        scale: Option<f64>,
    },
    /// Evaluate a checkpoint; writes an EvalResult document.
    Eval {
        /// Defaults to `<out>/checkpoint.txt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// JSON-lines test scenes; defaults to the generated stream.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run a grid of configurations over every seed.
    Experiment {
        /// single, ablation, loss-modes or sensitivity.
        #[arg(long)]
        grid: Option<Grid>,
        #[arg(long)]
        scale: Option<f64>,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        samples: usize,
    },
    /// Export a report as flat CSV and grid series.
    Report {
        /// Defaults to `<out>/report.json`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

struct Ctx {
    out: PathBuf,
    level: u8,
}

impl Ctx {
    fn info(&self, msg: impl AsRef<str>) {
        if self.level >= 1 {
            println!("{}", msg.as_ref());
        }
    }

    fn debug(&self, msg: impl AsRef<str>) {
        if self.level >= 2 {
            eprintln!("{}", msg.as_ref());
        }
    }
}

#[derive(Debug, Serialize)]
struct DatasetManifest<'a> {
    format: &'static str,
    config_hash: String,
    seed: u64,
    config: String,
    tasks: Vec<ManifestTask<'a>>,
}

#[derive(Debug, Serialize)]
struct ManifestTask<'a> {
    spec: &'a TaskSpec,
    train: String,
    val: String,
    test: String,
}

#[derive(Debug, Serialize)]
struct EvalDocument {
    format: &'static str,
    config_hash: String,
    seed: u64,
    variant: String,
    task: usize,
    model_checksum: String,
    energy_threshold: f64,
    max_unseen_prob: f64,
    result: EvalResult,
}

fn load_config(common: &Common, scale: Option<f64>) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_kv(&fs::read_to_string(path)?)?,
        None => ExperimentConfig::default(),
    };
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(s) = scale {
        cfg.world.train_scale = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn file_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

fn gen_tasks(ctx: &Ctx, cfg: &ExperimentConfig) -> Result<()> {
    let seed = cfg.seeds[0];
    let stream = gen_task_stream(&cfg.world, seed)?;
    let dir = ctx.out.join("data");
    let hash = cfg.config_hash();
    let mut tasks = Vec::new();
    for task in &stream {
        let t = task.spec.task_id;
        let names = [format!("task{t}_train.jsonl"), format!("task{t}_val.jsonl"), format!("task{t}_test.jsonl")];
        for (name, scenes) in names.iter().zip([&task.train, &task.val, &task.test]) {
            write_scenes(&dir.join(name), &hash, seed, scenes)?;
        }
        ctx.info(format!(
            "task {t}: classes {:?}, train instances {}, test instances {}",
            task.spec.class_ids, task.spec.train_count, task.spec.test_count
        ));
        let [train, val, test] = names;
        tasks.push(ManifestTask {
            spec: &task.spec,
            train,
            val,
            test,
        });
    }
    let manifest = DatasetManifest {
        format: "owlab-dataset/1",
        config_hash: hash,
        seed,
        config: cfg.to_kv(),
        tasks,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    ctx.info(format!("wrote {}", dir.display()));
    Ok(())
}

fn train(ctx: &Ctx, cfg: &mut ExperimentConfig) -> Result<()> {
    cfg.seeds.truncate(1);
    cfg.grid = Grid::Single;
    let seed = cfg.seeds[0];
    let variant = &cfg.variants()[0];
    let run = run_trained(cfg, variant, seed)?;
    let ck_path = ctx.out.join("checkpoint.txt");
    Checkpoint::from_run(cfg, &run, variant.ablation.ifc).save(&ck_path)?;
    let report = build_report(cfg, vec![run.report], vec![]);
    write_json(&ctx.out.join("report.json"), &report)?;
    for t in &report.runs[0].tasks {
        ctx.info(format!(
            "task {}: mAP prev {} / current {} / both {}, WI {}, A-OSE {}",
            t.task_id,
            fmt_opt(t.eval.map50_previously_known),
            fmt_opt(t.eval.map50_current_known),
            fmt_opt(t.eval.map50_both),
            fmt_opt(t.eval.wi),
            t.eval.a_ose
        ));
    }
    ctx.info(format!("wrote {} and report.json", ck_path.display()));
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.4}"))
}

fn eval(ctx: &Ctx, cfg: &ExperimentConfig, checkpoint: Option<&Path>, data: Option<&Path>) -> Result<()> {
    let ck_path = checkpoint.map_or_else(|| ctx.out.join("checkpoint.txt"), Path::to_path_buf);
    let ck = Checkpoint::load(&ck_path)?;
    let model = ck.restore(cfg)?;
    let scenes = match data {
        Some(p) => {
            let (header, scenes) = read_scenes(p)?;
            if header.config_hash != ck.config_hash || header.seed != ck.seed {
                ctx.info(format!(
                    "note: data from config {} seed {}, checkpoint from config {} seed {}",
                    header.config_hash, header.seed, ck.config_hash, ck.seed
                ));
            }
            scenes
        }
        None => gen_task_stream(&cfg.world, ck.seed)?
            .into_iter()
            .flat_map(|t| t.test)
            .collect(),
    };
    let out = evaluate_model(&model, &scenes, &ck.previously_known, &ck.current_known, ck.energy_threshold)?;
    let header = |format: &str| JsonlHeader {
        format: format.into(),
        config_hash: ck.config_hash.clone(),
        seed: ck.seed,
    };
    write_jsonl(&ctx.out.join("detections.jsonl"), &header("owlab-detections/1"), &out.detections)?;
    write_jsonl(&ctx.out.join("ground_truth.jsonl"), &header("owlab-ground-truth/1"), &out.ground_truth)?;
    let r = &out.result;
    ctx.info(format!(
        "mAP prev {} / current {} / both {}, WI {}, A-OSE {}",
        fmt_opt(r.map50_previously_known),
        fmt_opt(r.map50_current_known),
        fmt_opt(r.map50_both),
        fmt_opt(r.wi),
        r.a_ose
    ));
    let doc = EvalDocument {
        format: "owlab-eval/1",
        config_hash: ck.config_hash.clone(),
        seed: ck.seed,
        variant: ck.variant.clone(),
        task: ck.task_id,
        model_checksum: model.checksum(),
        energy_threshold: out.energy_threshold,
        max_unseen_prob: out.max_unseen_prob,
        result: out.result,
    };
    write_json(&ctx.out.join("eval.json"), &doc)?;
    ctx.info(format!("wrote {}", ctx.out.join("eval.json").display()));
    Ok(())
}

fn experiment(ctx: &Ctx, cfg: &ExperimentConfig) -> Result<()> {
    let variants = cfg.variants();
    let ifc_of = |label: &str| variants.iter().find(|v| v.label == label).is_some_and(|v| v.ablation.ifc);
    let ck_dir = ctx.out.join("checkpoints");
    ctx.info(format!(
        "{} configurations x {} seeds, config {}",
        variants.len(),
        cfg.seeds.len(),
        &cfg.config_hash()[..12]
    ));
    let result = run_experiment_with(cfg, |run| {
        let name = format!("{}_seed{}.txt", file_label(&run.report.variant), run.report.seed);
        Checkpoint::from_run(cfg, run, ifc_of(&run.report.variant)).save(&ck_dir.join(&name))?;
        ctx.debug(format!("finished {} seed {}", run.report.variant, run.report.seed));
        Ok(())
    });
    let report_path = ctx.out.join("report.json");
    match result {
        Ok(report) => {
            write_json(&report_path, &report)?;
            summarize(ctx, &report);
            ctx.info(format!("wrote {}", report_path.display()));
            Ok(())
        }
        Err(Error::PartialRun { cause, report }) => {
            write_json(&report_path, &report)?;
            eprintln!("partial report with {} failed runs written to {}", report.failures.len(), report_path.display());
            Err(Error::PartialRun { cause, report })
        }
        Err(e) => Err(e),
    }
}

fn summarize(ctx: &Ctx, report: &ExperimentReport) {
    for v in &report.variants {
        if let Some(last) = report.aggregates.get(v).and_then(|a| a.last()) {
            let m = |k: &str| last.metrics.get(k).map_or("-".into(), |s| format!("{:.4}±{:.4}", s.mean, s.std));
            ctx.info(format!(
                "{v:<28} task {}: mAP both {}, prev {}, minority {}",
                last.task_id,
                m("map50_both"),
                m("map50_previously_known"),
                m("minority_ap")
            ));
        }
    }
}

fn gradcheck(ctx: &Ctx, samples: usize, seed: u64) -> Result<bool> {
    let report = run_gradcheck(samples, seed)?;
    for c in &report.checks {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        // printed even when quiet: this is the command's output
        println!("{:<16} samples {:>4}  max rel err {:.3e}  {verdict}", c.name, c.samples, c.max_rel_err);
    }
    ctx.debug(format!("tolerance {:e}, seed {seed}", report.tolerance));
    Ok(report.passed())
}

fn report(ctx: &Ctx, input: Option<&Path>, out_given: bool) -> Result<()> {
    let input = input.map_or_else(|| ctx.out.join("report.json"), Path::to_path_buf);
    let rep: ExperimentReport = read_json(&input)?;
    let dir = if out_given {
        ctx.out.clone()
    } else {
        input.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    };
    for p in export(&rep, &dir)? {
        ctx.info(format!("wrote {}", p.display()));
    }
    Ok(())
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } | Error::PartialRun { .. } => EXIT_FAILURE,
        _ => EXIT_USAGE,
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    let ctx = Ctx {
        out: out_dir(&cli.common),
        level: if cli.common.quiet { 0 } else { 1 + cli.common.verbose },
    };
    match &cli.command {
        Command::GenTasks { scale } => gen_tasks(&ctx, &load_config(&cli.common, *scale)?)?,
        Command::Train { scale } => train(&ctx, &mut load_config(&cli.common, *scale)?)?,
        Command::Eval { checkpoint, data } => eval(
            &ctx,
            &load_config(&cli.common, None)?,
            checkpoint.as_deref(),
            data.as_deref(),
        )?,
        Command::Experiment { grid, scale } => {
            let mut cfg = load_config(&cli.common, *scale)?;
            if let Some(g) = grid {
                cfg.grid = *g;
            }
            experiment(&ctx, &cfg)?
        }
        Command::Gradcheck { samples } => {
            // config flags do not affect the suite but must still be valid
            load_config(&cli.common, None)?;
            if !gradcheck(&ctx, *samples, cli.common.seed.unwrap_or(0))? {
                eprintln!("gradient check failed");
                return Ok(EXIT_FAILURE);
            }
        }
        Command::Report { input } => {
            load_config(&cli.common, None)?;
            report(&ctx, input.as_deref(), cli.common.out.is_some())?
        }
    }
    Ok(EXIT_OK)
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
