//! Flat `section.key=value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::experiment::ExperimentConfig;

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Parse(format!("{key}: cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Parse(format!("{key}: expected on/off, got `{value}`"))),
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: Display>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Sets one key. The value is taken verbatim (already trimmed).
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let w = &mut self.world;
        let t = &mut self.train;
        match key {
            "seeds" => self.seeds = parse_list(key, v)?,
            "experiment.grid" => self.grid = v.parse()?,
            "experiment.max_tasks" => self.max_tasks = if v == "all" { None } else { Some(parse(key, v)?) },
            "eval.energy_quantile" => self.energy_quantile = parse(key, v)?,
            "world.tasks" => w.tasks = parse(key, v)?,
            "world.classes_per_task" => w.classes_per_task = parse(key, v)?,
            "world.train_scale" => w.train_scale = parse(key, v)?,
            "world.test_scale" => w.test_scale = parse(key, v)?,
            "world.separation" => w.separation = parse(key, v)?,
            "world.noise" => w.noise = parse(key, v)?,
            "world.offset_radius" => w.offset_radius = parse(key, v)?,
            "world.context_per_instance" => w.context_per_instance = parse(key, v)?,
            "world.regions_per_scene" => w.regions_per_scene = parse(key, v)?,
            "world.zipf_exponent" => w.zipf_exponent = parse(key, v)?,
            "model.hidden" => self.model.hidden = parse(key, v)?,
            "model.feature_shape" => {
                let dims: Vec<usize> = parse_list(key, v)?;
                self.model.feature_shape = dims
                    .try_into()
                    .map_err(|_| Error::Parse(format!("{key}: expected three comma-separated sizes")))?;
            }
            "model.embed_width" => self.model.embed_width = parse(key, v)?,
            "model.inductive_noise" => self.model.inductive_noise = parse(key, v)?,
            "sgd.learning_rate" => t.sgd.learning_rate = parse(key, v)?,
            "sgd.final_rate" => t.sgd.final_rate = parse(key, v)?,
            "sgd.warmup_iters" => t.sgd.warmup_iters = parse(key, v)?,
            "sgd.momentum" => t.sgd.momentum = parse(key, v)?,
            "sgd.batch_size" => t.sgd.batch_size = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.min_steps" => t.min_steps = parse(key, v)?,
            "train.warmup_every_task" => t.warmup_every_task = parse_bool(key, v)?,
            "train.iter" => t.iter = parse(key, v)?,
            "train.queue_capacity" => t.queue_capacity = parse(key, v)?,
            "train.margin" => t.margin = parse(key, v)?,
            "train.ema_rate" => t.ema_rate = parse(key, v)?,
            "train.replay_old_labels" => t.replay_old_labels = parse_bool(key, v)?,
            "weights.lambda_loc" => t.weights.lambda_loc = parse(key, v)?,
            "weights.lambda_cont" => t.weights.lambda_cont = parse(key, v)?,
            "weights.lambda" => t.weights.lambda = parse(key, v)?,
            "weights.alpha" => t.weights.alpha = parse(key, v)?,
            "weights.combine_mode" => t.weights.combine_mode = v.parse()?,
            "loss.gamma" => t.loss.gamma = parse(key, v)?,
            "loss.balanced_factor_mode" => t.loss.balanced_factor_mode = v.parse()?,
            "loss.alpha" => {
                let mut alpha = BTreeMap::new();
                for pair in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    let (c, a) = pair
                        .split_once(':')
                        .ok_or_else(|| Error::Parse(format!("{key}: expected class:weight, got `{pair}`")))?;
                    alpha.insert(parse(key, c.trim())?, parse(key, a.trim())?);
                }
                t.loss.alpha = alpha;
            }
            "loss.mode" => self.loss_mode = v.parse()?,
            "ablation.balanced_loss" => self.ablation.balanced_loss = parse_bool(key, v)?,
            "ablation.distill" => self.ablation.distill = parse_bool(key, v)?,
            "ablation.ifc" => self.ablation.ifc = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses a config file on top of the defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key=value", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn entries(&self) -> BTreeMap<&'static str, String> {
        let w = &self.world;
        let t = &self.train;
        BTreeMap::from([
            ("seeds", join(&self.seeds)),
            ("experiment.grid", self.grid.as_str().to_string()),
            ("experiment.max_tasks", self.max_tasks.map_or("all".to_string(), |m| m.to_string())),
            ("eval.energy_quantile", self.energy_quantile.to_string()),
            ("world.tasks", w.tasks.to_string()),
            ("world.classes_per_task", w.classes_per_task.to_string()),
            ("world.train_scale", w.train_scale.to_string()),
            ("world.test_scale", w.test_scale.to_string()),
            ("world.separation", w.separation.to_string()),
            ("world.noise", w.noise.to_string()),
            ("world.offset_radius", w.offset_radius.to_string()),
            ("world.context_per_instance", w.context_per_instance.to_string()),
            ("world.regions_per_scene", w.regions_per_scene.to_string()),
            ("world.zipf_exponent", w.zipf_exponent.to_string()),
            ("model.hidden", self.model.hidden.to_string()),
            ("model.feature_shape", join(self.model.feature_shape)),
            ("model.embed_width", self.model.embed_width.to_string()),
            ("model.inductive_noise", self.model.inductive_noise.to_string()),
            ("sgd.learning_rate", t.sgd.learning_rate.to_string()),
            ("sgd.final_rate", t.sgd.final_rate.to_string()),
            ("sgd.warmup_iters", t.sgd.warmup_iters.to_string()),
            ("sgd.momentum", t.sgd.momentum.to_string()),
            ("sgd.batch_size", t.sgd.batch_size.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.min_steps", t.min_steps.to_string()),
            ("train.warmup_every_task", on_off(t.warmup_every_task).to_string()),
            ("train.iter", t.iter.to_string()),
            ("train.queue_capacity", t.queue_capacity.to_string()),
            ("train.margin", t.margin.to_string()),
            ("train.ema_rate", t.ema_rate.to_string()),
            ("train.replay_old_labels", on_off(t.replay_old_labels).to_string()),
            ("weights.lambda_loc", t.weights.lambda_loc.to_string()),
            ("weights.lambda_cont", t.weights.lambda_cont.to_string()),
            ("weights.lambda", t.weights.lambda.to_string()),
            ("weights.alpha", t.weights.alpha.to_string()),
            ("weights.combine_mode", t.weights.combine_mode.as_str().to_string()),
            ("loss.gamma", t.loss.gamma.to_string()),
            ("loss.balanced_factor_mode", t.loss.balanced_factor_mode.as_str().to_string()),
            ("loss.alpha", join(t.loss.alpha.iter().map(|(c, a)| format!("{c}:{a}")))),
            ("loss.mode", self.loss_mode.as_str().to_string()),
            ("ablation.balanced_loss", on_off(self.ablation.balanced_loss).to_string()),
            ("ablation.distill", on_off(self.ablation.distill).to_string()),
            ("ablation.ifc", on_off(self.ablation.ifc).to_string()),
        ])
    }

    /// Canonical text form: every key, sorted. Round-trips through
    /// [`ExperimentConfig::from_kv`].
    pub fn to_kv(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// sha256 of the canonical form without the seed list and grid choice.
    /// A run is identified by this hash, its seed and its variant label.
    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries().into_iter().filter(|(k, _)| !matches!(*k, "seeds" | "experiment.grid")) {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::experiment::Grid;

    #[test]
    fn round_trip() {
        let mut cfg = ExperimentConfig {
            seeds: vec![3, 1, 4],
            grid: Grid::Sensitivity,
            ..ExperimentConfig::default()
        };
        cfg.train.loss.alpha.insert(2, 0.5);
        cfg.max_tasks = Some(2);
        let back = ExperimentConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_kv("loss.gama=2\n").unwrap_err();
        assert!(err.to_string().contains("loss.gama"));
        assert!(ExperimentConfig::from_kv("seeds 1").is_err());
        assert!(ExperimentConfig::from_kv("ablation.ifc=maybe").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = ExperimentConfig::from_kv("# grid\n\nloss.gamma = 1.5  # focusing\nseeds=7,8\n").unwrap();
        assert_eq!(cfg.train.loss.gamma, 1.5);
        assert_eq!(cfg.seeds, vec![7, 8]);
    }

    #[test]
    fn hash_ignores_seeds_and_grid_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.seeds = vec![99];
        b.grid = Grid::Ablation;
        assert_eq!(a.config_hash(), b.config_hash());
        b.train.iter = 31;
        assert_ne!(a.config_hash(), b.config_hash());
    }
}
