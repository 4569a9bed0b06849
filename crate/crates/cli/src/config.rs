//! Run configuration: one TOML file covering every pipeline stage, with
//! dotted-path overrides and a content hash recorded next to the artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use kinemod::data::manifest::SplitRule;
use kinemod::data::synthetic::SyntheticSpec;
use kinemod::distill::DistillConfig;
use kinemod::engine::config::TrainConfig;
use kinemod::error::{Error, Result};
use kinemod::eval::EvalConfig;
use kinemod::skeleton::{default_topology, parse_topology_str, toy_topology, SkeletonTopology};

/// Dataset location and split policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Manifest CSV; sample paths inside it are relative to its directory.
    pub manifest: PathBuf,
    /// `ntu25`, `toy`, or a path to a topology file.
    pub topology: String,
    /// Body slots kept per sample; extra tracked bodies are dropped.
    pub max_bodies: usize,
    /// Train/eval split applied by `eval`.
    pub split: SplitRule,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            manifest: PathBuf::from("dataset/manifest.csv"),
            topology: "ntu25".into(),
            max_bodies: 2,
            split: SplitRule::RandomFraction { fraction: 0.5 },
        }
    }
}

impl DatasetConfig {
    pub fn load_topology(&self) -> Result<SkeletonTopology> {
        match self.topology.as_str() {
            "ntu25" => Ok(default_topology()),
            "toy" => Ok(toy_topology()),
            path => {
                let text = fs::read_to_string(path).map_err(|e| {
                    Error::Config(format!("cannot read topology file {path}: {e}"))
                })?;
                parse_topology_str(&text, path)
            }
        }
    }
}

/// Artifact locations. Checkpoint fields default to the pretraining output
/// inside `out_dir`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: Option<PathBuf>,
    /// Teacher loaded by `distill`.
    pub teacher_checkpoint: Option<PathBuf>,
    /// Checkpoint scored by `eval`.
    pub eval_checkpoint: Option<PathBuf>,
}

/// Everything one pipeline run needs, serializable as a single TOML file.
/// Every field has a default, so an absent config file is a valid run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, overrides the per-stage seeds wholesale.
    pub seed: Option<u64>,
    pub dataset: DatasetConfig,
    pub synthetic: SyntheticSpec,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Read the file (defaults when `None`), apply `--set` overrides in
    /// order, then deserialize.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut table: toml::Table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| {
                    Error::Config(format!("cannot read config {}: {e}", p.display()))
                })?;
                text.parse().map_err(|e| {
                    Error::Config(format!("config {} is not valid TOML: {e}", p.display()))
                })?
            }
            None => toml::Table::new(),
        };
        for spec in overrides {
            apply_override(&mut table, spec)?;
        }
        table
            .try_into()
            .map_err(|e| Error::Config(format!("bad configuration: {e}")))
    }

    /// Push the top-level seed, if any, into every stage.
    pub fn resolve(mut self) -> RunConfig {
        if let Some(seed) = self.seed {
            self.synthetic.seed = seed;
            self.train.seed = seed;
            self.distill.seed = seed;
            self.eval.seed = seed;
        }
        self
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths
            .out_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn teacher_checkpoint(&self) -> PathBuf {
        self.paths
            .teacher_checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir().join("pretrain.ckpt"))
    }

    pub fn eval_checkpoint(&self) -> PathBuf {
        self.paths
            .eval_checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir().join("pretrain.ckpt"))
    }

    /// Canonical serialized form, written next to the artifacts.
    pub fn canonical_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// Hex SHA-256 of the canonical form.
    pub fn hash(&self) -> Result<String> {
        let text = self.canonical_toml()?;
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        Ok(format!("{:x}", hasher.finalize()))
    }

    /// Record the resolved config and its hash in `dir` so every artifact
    /// set is traceable to the exact settings that produced it.
    pub fn record(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), self.canonical_toml()?)?;
        fs::write(dir.join("config.sha256"), format!("{}\n", self.hash()?))?;
        Ok(())
    }
}

/// Parse the value side of an override: TOML literal when it reads as one,
/// bare string otherwise.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Apply one `section.key=value` override, creating intermediate tables.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| {
        Error::Config(format!("override '{spec}' must look like section.key=value"))
    })?;
    if path.is_empty() {
        return Err(Error::Config(format!("override '{spec}' names no key")));
    }
    let segments: Vec<&str> = path.split('.').collect();
    let mut current = table;
    for seg in &segments[..segments.len() - 1] {
        current = current
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::Config(format!("'{seg}' in override '{path}' is not a table"))
            })?;
    }
    current.insert(segments[segments.len() - 1].to_string(), parse_value(raw));
    Ok(())
}
