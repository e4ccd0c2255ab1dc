//! On-disk formats: JSON-lines datasets, atomic JSON documents and plain-text
//! checkpoints.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::experiment::{ExperimentConfig, TrainedRun};
use crate::harness::model::Detector;
use crate::harness::world::SyntheticScene;

pub const CHECKPOINT_MAGIC: &str = "owlab-checkpoint 1";

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp-{}", std::process::id()));
    path.with_file_name(name)
}

/// Writes via a temporary sibling and a rename, so readers never see a
/// half-written file. Parent directories are created.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = tmp_path(path);
    {
        let mut f = BufWriter::new(fs::File::create(&tmp)?);
        f.write_all(bytes)?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value)?;
    text.push(b'\n');
    write_atomic(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// First line of every JSON-lines file: where the records came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonlHeader {
    pub format: String,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    header: JsonlHeader,
}

/// A `{"header": ...}` line followed by one compact JSON record per line.
pub fn write_jsonl<T: Serialize>(path: &Path, header: &JsonlHeader, records: &[T]) -> Result<()> {
    let mut buf = serde_json::to_vec(&HeaderLine { header: header.clone() })?;
    buf.push(b'\n');
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// Blank lines are skipped; a missing header or malformed line is reported
/// with its line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(JsonlHeader, Vec<T>)> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut header = None;
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let located = |e: serde_json::Error| Error::Parse(format!("{}:{}: {e}", path.display(), n + 1));
        if header.is_none() {
            header = Some(serde_json::from_str::<HeaderLine>(&line).map_err(located)?.header);
        } else {
            out.push(serde_json::from_str(&line).map_err(located)?);
        }
    }
    let header = header.ok_or_else(|| Error::Parse(format!("{}: empty file, no header", path.display())))?;
    Ok((header, out))
}

pub const SCENES_FORMAT: &str = "owlab-scenes/1";

pub fn write_scenes(path: &Path, config_hash: &str, seed: u64, scenes: &[SyntheticScene]) -> Result<()> {
    let header = JsonlHeader {
        format: SCENES_FORMAT.into(),
        config_hash: config_hash.into(),
        seed,
    };
    write_jsonl(path, &header, scenes)
}

pub fn read_scenes(path: &Path) -> Result<(JsonlHeader, Vec<SyntheticScene>)> {
    let (header, scenes) = read_jsonl(path)?;
    if header.format != SCENES_FORMAT {
        return Err(Error::Parse(format!("{}: format `{}` is not scenes", path.display(), header.format)));
    }
    Ok((header, scenes))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorDump {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Plain numeric dump of a detector plus what is needed to evaluate it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub seed: u64,
    pub variant: String,
    pub task_id: usize,
    pub ifc_on: bool,
    pub previously_known: BTreeSet<usize>,
    pub current_known: BTreeSet<usize>,
    pub energy_threshold: f64,
    pub tensors: Vec<TensorDump>,
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_set(v: &str) -> Result<BTreeSet<usize>> {
    v.split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Parse(format!("bad class id `{s}`"))))
        .collect()
}

fn take<'a>(lines: &mut std::str::Lines<'a>, what: &str) -> Result<&'a str> {
    lines
        .next()
        .ok_or_else(|| Error::Parse(format!("checkpoint truncated before {what}")))
}

fn field(lines: &mut std::str::Lines<'_>, key: &str) -> Result<String> {
    let line = take(lines, key)?;
    let (k, v) = line.split_once(' ').unwrap_or((line, ""));
    if k != key {
        return Err(Error::Parse(format!("expected `{key}`, found `{k}`")));
    }
    Ok(v.to_string())
}

impl Checkpoint {
    pub fn from_run(cfg: &ExperimentConfig, run: &TrainedRun, ifc_on: bool) -> Self {
        let model = &run.model;
        Self {
            config_hash: cfg.config_hash(),
            seed: run.report.seed,
            variant: run.report.variant.clone(),
            task_id: run.report.tasks.last().map_or(0, |t| t.task_id),
            ifc_on,
            previously_known: run.previously_known.clone(),
            current_known: run.current_known.clone(),
            energy_threshold: run.energy_threshold,
            tensors: model
                .tensor_names()
                .into_iter()
                .zip(model.tensors())
                .map(|(name, t)| TensorDump {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Values use the shortest representation that parses back to the same
    /// bits.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(CHECKPOINT_MAGIC);
        s.push('\n');
        s.push_str(&format!("config_hash {}\n", self.config_hash));
        s.push_str(&format!("seed {}\n", self.seed));
        s.push_str(&format!("variant {}\n", self.variant));
        s.push_str(&format!("task {}\n", self.task_id));
        s.push_str(&format!("ifc {}\n", if self.ifc_on { "on" } else { "off" }));
        s.push_str(&format!("previously_known {}\n", join(&self.previously_known)));
        s.push_str(&format!("current_known {}\n", join(&self.current_known)));
        s.push_str(&format!("energy_threshold {}\n", self.energy_threshold));
        s.push_str(&format!("tensors {}\n", self.tensors.len()));
        for t in &self.tensors {
            s.push_str(&format!("tensor {} {}\n", t.name, join(&t.shape)));
            s.push_str(&t.data.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if take(&mut lines, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Parse("not an owlab checkpoint".into()));
        }
        let bad = |k: &str| Error::Parse(format!("bad `{k}` value"));
        let config_hash = field(&mut lines, "config_hash")?;
        let seed = field(&mut lines, "seed")?.parse().map_err(|_| bad("seed"))?;
        let variant = field(&mut lines, "variant")?;
        let task_id = field(&mut lines, "task")?.parse().map_err(|_| bad("task"))?;
        let ifc_on = match field(&mut lines, "ifc")?.as_str() {
            "on" => true,
            "off" => false,
            _ => return Err(bad("ifc")),
        };
        let previously_known = parse_set(&field(&mut lines, "previously_known")?)?;
        let current_known = parse_set(&field(&mut lines, "current_known")?)?;
        let energy_threshold = field(&mut lines, "energy_threshold")?.parse().map_err(|_| bad("energy_threshold"))?;
        let count: usize = field(&mut lines, "tensors")?.parse().map_err(|_| bad("tensors"))?;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let head = field(&mut lines, "tensor")?;
            let (name, shape) = head.split_once(' ').ok_or_else(|| bad("tensor"))?;
            let shape: Vec<usize> = shape
                .split(',')
                .map(|d| d.parse().map_err(|_| bad("tensor shape")))
                .collect::<Result<_>>()?;
            let data: Vec<f64> = take(&mut lines, "tensor data")?
                .split_ascii_whitespace()
                .map(|v| v.parse().map_err(|_| bad("tensor data")))
                .collect::<Result<_>>()?;
            if data.len() != shape.iter().product::<usize>() {
                return Err(Error::Parse(format!("tensor {name}: {} values for shape {shape:?}", data.len())));
            }
            tensors.push(TensorDump {
                name: name.to_string(),
                shape,
                data,
            });
        }
        Ok(Self {
            config_hash,
            seed,
            variant,
            task_id,
            ifc_on,
            previously_known,
            current_known,
            energy_threshold,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    /// Rebuilds the detector. `cfg` must hash to the checkpoint's config.
    pub fn restore(&self, cfg: &ExperimentConfig) -> Result<Detector> {
        if cfg.config_hash() != self.config_hash {
            return Err(Error::Config(format!(
                "checkpoint was written under config {}, not {}",
                self.config_hash,
                cfg.config_hash()
            )));
        }
        // initial values are overwritten below
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Detector::new(
            &cfg.model,
            cfg.world.feature_dim(),
            cfg.world.num_classes(),
            self.ifc_on,
            &mut rng,
        )?;
        let names = model.tensor_names();
        if names.len() != self.tensors.len() {
            return Err(Error::Parse(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                names.len()
            )));
        }
        for ((name, t), dump) in names.iter().zip(model.tensors_mut()).zip(&self.tensors) {
            if *name != dump.name || t.shape() != dump.shape.as_slice() {
                return Err(Error::Parse(format!(
                    "checkpoint tensor {} {:?} does not match model tensor {name} {:?}",
                    dump.name,
                    dump.shape,
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(&dump.data);
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::world::{gen_task_stream, WorldConfig};

    #[test]
    fn scenes_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = gen_task_stream(&WorldConfig::default(), 3).unwrap().remove(1).train;
        let path = dir.path().join("nested/train.jsonl");
        write_scenes(&path, "abc", 3, &scenes).unwrap();
        let (header, back) = read_scenes(&path).unwrap();
        assert_eq!(back, scenes);
        assert_eq!((header.config_hash.as_str(), header.seed), ("abc", 3));
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), scenes.len() + 1);
        assert!(text.lines().next().unwrap().starts_with("{\"header\":"));
        assert!(text.lines().nth(1).unwrap().contains("\"image_id\""));
    }

    #[test]
    fn bad_jsonl_line_is_located() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        let head = "{\"header\":{\"format\":\"owlab-scenes/1\",\"config_hash\":\"h\",\"seed\":1}}";
        fs::write(&path, format!("{head}\n{{\"image_id\":1,\"regions\":[]}}\n\nnot json\n")).unwrap();
        let err = read_scenes(&path).unwrap_err().to_string();
        assert!(err.contains(":4:"), "{err}");
        fs::write(&path, "{\"image_id\":1,\"regions\":[]}\n").unwrap();
        let err = read_scenes(&path).unwrap_err().to_string();
        assert!(err.contains(":1:"), "{err}");
        fs::write(&path, "").unwrap();
        assert!(read_scenes(&path).is_err());
    }

    #[test]
    fn atomic_write_leaves_no_temporaries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        write_json(&path, &vec![1, 2, 3]).unwrap();
        write_json(&path, &vec![4]).unwrap();
        assert_eq!(read_json::<Vec<i32>>(&path).unwrap(), vec![4]);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    fn sample_checkpoint() -> (ExperimentConfig, Checkpoint, Detector) {
        let cfg = ExperimentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Detector::new(&cfg.model, cfg.world.feature_dim(), cfg.world.num_classes(), true, &mut rng).unwrap();
        let ck = Checkpoint {
            config_hash: cfg.config_hash(),
            seed: 5,
            variant: "base".into(),
            task_id: 2,
            ifc_on: true,
            previously_known: (0..6).collect(),
            current_known: (6..12).collect(),
            energy_threshold: -1.25e-3,
            tensors: model
                .tensor_names()
                .into_iter()
                .zip(model.tensors())
                .map(|(name, t)| TensorDump {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        (cfg, ck, model)
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let (cfg, ck, model) = sample_checkpoint();
        let back = Checkpoint::from_text(&ck.to_text()).unwrap();
        assert_eq!(back, ck);
        let restored = back.restore(&cfg).unwrap();
        assert_eq!(restored.checksum(), model.checksum());
    }

    #[test]
    fn checkpoint_rejects_other_configs_and_corruption() {
        let (mut cfg, ck, _) = sample_checkpoint();
        let text = ck.to_text();
        assert!(Checkpoint::from_text(&text.replacen("seed 5", "seed x", 1)).is_err());
        assert!(Checkpoint::from_text(&text[..text.len() / 2]).is_err());
        assert!(Checkpoint::from_text("hello").is_err());
        cfg.model.hidden += 1;
        assert!(ck.restore(&cfg).is_err());
    }
}
