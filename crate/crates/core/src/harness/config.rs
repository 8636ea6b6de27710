use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, HarnessError, Result};
use crate::library::Strategy;
use crate::model::{ModelKind, NetworkSpec};
use crate::program::Structure;
use crate::transformer::ModelConfig;

/// Environment variable holding the evaluation thread count.
pub const THREADS_ENV: &str = "TMN_THREADS";

fn default_strategy() -> Strategy {
    Strategy::Individual
}
fn default_structure() -> Structure {
    Structure::Stack
}
fn default_lr() -> f64 {
    3e-4
}
fn default_batch() -> usize {
    64
}
fn default_epochs() -> usize {
    30
}
fn default_one() -> usize {
    1
}
fn default_true() -> bool {
    true
}

/// One training run, read from a key-value file:
///
/// ```toml
/// name = "tmn-closure"
/// model_kind = "tmn"
/// strategy = "individual"
/// data_dir = "data/closure"
/// out_dir = "runs/tmn-closure"
/// lr = 0.001
/// epochs = 10
///
/// [model]
/// d_model = 32
/// ```
///
/// Relative paths are resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub model_kind: ModelKind,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default)]
    pub library_seed: u64,
    #[serde(default = "default_structure")]
    pub structure: Structure,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Seeds weight init, shuffling and dropout.
    #[serde(default)]
    pub seed: u64,
    /// Evaluate every this many epochs (the last epoch is always evaluated).
    #[serde(default = "default_one")]
    pub eval_every: usize,
    /// Stop after this many evaluations without a val improvement.
    #[serde(default)]
    pub patience: Option<usize>,
    /// Stop once val accuracy reaches this value.
    #[serde(default)]
    pub target_val_accuracy: Option<f64>,
    /// Use only the first `max_train` training samples.
    #[serde(default)]
    pub max_train: Option<usize>,
    #[serde(default = "default_true")]
    pub eval_test: bool,
    #[serde(default)]
    pub model: ModelConfig,
}

impl ExperimentConfig {
    pub fn new(name: &str, model_kind: ModelKind, data_dir: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            name: name.to_string(),
            model_kind,
            strategy: default_strategy(),
            library_seed: 0,
            structure: default_structure(),
            data_dir: data_dir.into(),
            out_dir: out_dir.into(),
            lr: default_lr(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            seed: 0,
            eval_every: 1,
            patience: None,
            target_val_accuracy: None,
            max_train: None,
            eval_test: true,
            model: ModelConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Usage(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.data_dir = base.join(&cfg.data_dir);
        cfg.out_dir = base.join(&cfg.out_dir);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Usage(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch_size and eval_every must be at least 1");
        }
        self.model.validate().map_err(|e| HarnessError::Usage(e.to_string()))?;
        Ok(())
    }

    /// Network layout for a `height x width` dataset.
    pub fn network_spec(&self, height: usize, width: usize) -> NetworkSpec {
        let mut spec = match self.model_kind {
            ModelKind::Tmn => NetworkSpec::tmn(self.model.clone(), self.strategy, self.structure),
            kind => NetworkSpec::baseline(kind, self.model.clone()),
        };
        spec.library_seed = self.library_seed;
        spec.height = height;
        spec.width = width;
        spec
    }
}
