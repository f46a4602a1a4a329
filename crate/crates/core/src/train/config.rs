//! Run configuration in TOML, with dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{EpisodeSpec, Normalization};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Imagenet,
    Synthetic,
}

impl NormKind {
    pub fn normalization(self) -> Normalization {
        match self {
            NormKind::Imagenet => Normalization::IMAGENET,
            NormKind::Synthetic => Normalization::SYNTHETIC,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root; empty means "use the environment default".
    pub root: String,
    /// Split file; empty means "derive a split from `split_counts` and the seed".
    pub split_file: String,
    /// Train / val / test class counts for a derived split.
    pub split_counts: [usize; 3],
    pub normalization: NormKind,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: String::new(),
            split_file: String::new(),
            split_counts: [64, 16, 20],
            normalization: NormKind::Imagenet,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: EpisodeSpec,
    pub episodes: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Validate and checkpoint every this many episodes.
    pub eval_interval: u64,
    pub val_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: EpisodeSpec { n_way: 30, k_shot: 5, n_query: 15 },
            episodes: 10_000,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            eval_interval: 250,
            val_episodes: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Target task; validation uses it too.
    pub task: EpisodeSpec,
    pub episodes: usize,
    /// Shots evaluated by the ablation grid, with the task's way and query counts.
    pub ablation_shots: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { task: EpisodeSpec { n_way: 5, k_shot: 5, n_query: 15 }, episodes: 600, ablation_shots: vec![1, 5] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuntimeConfig {
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
    pub deterministic: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub model: ModelConfig,
    pub runtime: RuntimeConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.train.lr)));
        }
        if self.train.episodes == 0 {
            return Err(Error::Config("train.episodes must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.train.beta1) || !(0.0..1.0).contains(&self.train.beta2) {
            return Err(Error::Config("train.beta1 and train.beta2 must lie in [0, 1)".into()));
        }
        if self.train.eps <= 0.0 {
            return Err(Error::Config("train.eps must be positive".into()));
        }
        self.train.task.validate()?;
        self.eval.task.validate()?;
        if self.eval.ablation_shots.contains(&0) {
            return Err(Error::Config("eval.ablation_shots entries must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        Ok(cfg)
    }

    /// Reads `path` (or the defaults when `None`) and applies `key=value`
    /// overrides. Every override key must already exist.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?,
            None => Self::default().to_toml(),
        };
        let mut value: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.message().to_string()))?;
        // Missing sections fall back to their defaults before overrides resolve.
        let defaults: toml::Table = toml::from_str(&Self::default().to_toml()).expect("defaults parse");
        merge_defaults(&mut value, &defaults);
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_toml(&toml::to_string(&value).expect("table serialises"))
    }

    /// Short digest of the resolved configuration.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Dataset root, falling back to `MSENET_DATA_ROOT`.
    pub fn data_root(&self) -> Result<PathBuf> {
        if !self.data.root.is_empty() {
            return Ok(PathBuf::from(&self.data.root));
        }
        match std::env::var_os("MSENET_DATA_ROOT") {
            Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
            _ => Err(Error::Config("data.root is unset and MSENET_DATA_ROOT is not defined".into())),
        }
    }
}

fn merge_defaults(target: &mut toml::Table, defaults: &toml::Table) {
    for (k, dv) in defaults {
        match (target.get_mut(k), dv) {
            (None, _) => {
                target.insert(k.clone(), dv.clone());
            }
            (Some(toml::Value::Table(t)), toml::Value::Table(d)) => merge_defaults(t, d),
            _ => {}
        }
    }
}

/// Applies one `dotted.key=value` override. The value is parsed as a TOML
/// literal and taken as a bare string when that fails.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) =
        spec.split_once('=').ok_or_else(|| Error::Config(format!("override '{spec}' is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let parts: Vec<&str> = key.split('.').collect();
    let unknown = || Error::Config(format!("unknown config key '{key}'"));
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = match cur.get_mut(*p) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(unknown()),
        };
    }
    let last = parts[parts.len() - 1];
    let slot = cur.get_mut(last).ok_or_else(unknown)?;
    if slot.is_table() {
        return Err(Error::Config(format!("config key '{key}' is a section, not a value")));
    }
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    // Integers given for float keys are promoted so `train.lr=1` works.
    *slot = match (&*slot, parsed) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    Ok(())
}
