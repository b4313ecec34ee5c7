//! Experiment configuration: a TOML file with sections mirroring
//! [`ExperimentConfig`], dotted `section.key=value` overrides, and the
//! `TDM_SEED` / `TDM_THREADS` environment variables.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentFlags, SynthConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::parallel::Execution;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    /// `class_name/*.ppm` tree at `data.path`.
    Folder,
    /// A dataset written by `synth-data` at `data.path`.
    Saved,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    /// Resize target for folder images.
    pub image_size: usize,
    pub synthetic: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            image_size: 84,
            synthetic: SynthConfig::desk(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            fractions: [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    /// Validate every this many episodes (0 disables validation).
    pub val_every: usize,
    pub val_episodes: usize,
    /// Queries per class in validation episodes (defaults to `eval.n_query`).
    pub val_n_query: Option<usize>,
    pub augment: AugmentFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 2000,
            n_way: 5,
            k_shot: 1,
            n_query: 16,
            val_every: 100,
            val_episodes: 100,
            val_n_query: None,
            augment: AugmentFlags {
                flip: true,
                crop: true,
                jitter: true,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub n_way: usize,
    /// Shots at evaluation; unset means the training value. Setting it
    /// evaluates a checkpoint trained with a different K.
    pub k_shot: Option<usize>,
    pub n_query: usize,
    /// Episode `e` is drawn with seed `base_seed + e`.
    pub base_seed: u64,
    pub keep_per_episode: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 600,
            n_way: 5,
            k_shot: None,
            n_query: 16,
            base_seed: 1_000_000,
            keep_per_episode: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub n_list: Vec<usize>,
    pub k_list: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            n_list: vec![2, 5],
            k_list: vec![1, 5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Dump per-episode channel weights during evaluation.
    pub dump_weights: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            dump_weights: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub execution: Execution,
    /// Worker cap for evaluation.
    pub threads: Option<usize>,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// Reads `path` (if any), applies `overrides` (`section.key`, raw value)
    /// and then the environment variables.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        // Partial sections inherit the experiment defaults, not the
        // per-type defaults.
        let mut table = toml::Table::try_from(ExperimentConfig::default())
            .map_err(|e| Error::Config(e.to_string()))?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            let file = text
                .parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            merge(&mut table, file);
        }
        for (key, value) in overrides {
            set_dotted(&mut table, key, parse_value(value))?;
        }
        let mut cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(s) = std::env::var("TDM_SEED") {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("TDM_SEED is not an integer: `{s}`")))?;
        }
        if let Some(t) = crate::parallel::env_thread_cap() {
            self.threads = Some(t);
        }
        Ok(())
    }

    pub fn eval_k_shot(&self) -> usize {
        self.eval.k_shot.unwrap_or(self.train.k_shot)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.data.source == DataSource::Synthetic {
            self.data.synthetic.validate()?;
        } else if self.data.path.is_none() {
            return Err(Error::Config("data.path is required for folder and saved sources".into()));
        }
        let t = &self.train;
        let e = &self.eval;
        for (name, v) in [
            ("train.n_way", t.n_way),
            ("train.k_shot", t.k_shot),
            ("train.n_query", t.n_query),
            ("eval.episodes", e.episodes),
            ("eval.n_way", e.n_way),
            ("eval.n_query", e.n_query),
            ("eval.k_shot", self.eval_k_shot()),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.model.tdm.sam && t.n_way < 2 {
            return Err(Error::Config("support attention needs train.n_way ≥ 2".into()));
        }
        if !(self.optim.lr >= 0.0 && self.optim.momentum >= 0.0 && self.optim.weight_decay >= 0.0) {
            return Err(Error::Config("optimizer settings must be non-negative".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Integers, floats, booleans and arrays are recognised; anything else is a string.
fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key `{key}`")));
    }
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
