use std::path::{Path, PathBuf};

use gridner::corpus::InstanceOptions;
use gridner::model::ModelConfig;
use gridner::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

/// File locations. Relative paths resolve against the config file's
/// directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train_file: Option<PathBuf>,
    pub dev_file: Option<PathBuf>,
    pub test_file: Option<PathBuf>,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

/// One JSON document describing a whole run. Every field has a default.
/// The top-level `seed` drives model initialization and training and
/// overrides `train.seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub vocab_min_freq: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub instances: InstanceOptions,
    pub data: DataPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            vocab_min_freq: 1,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            instances: InstanceOptions::default(),
            data: DataPaths {
                checkpoint_dir: "checkpoints".into(),
                report_dir: "reports".into(),
                ..DataPaths::default()
            },
        }
    }
}

impl RunConfig {
    /// Reads, resolves paths and validates everything that can be checked
    /// before any work starts.
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut self.data;
        for p in [&mut d.train_file, &mut d.dev_file, &mut d.test_file].into_iter().flatten() {
            join(p);
        }
        join(&mut d.checkpoint_dir);
        join(&mut d.report_dir);
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.model.validate()?;
        self.train.validate()?;
        if self.instances.max_len > self.model.max_len {
            return Err(Failure::usage(format!(
                "instances.max_len {} exceeds model.max_len {}",
                self.instances.max_len, self.model.max_len
            )));
        }
        if self.instances.label_scheme.n_classes() != self.model.n_classes {
            return Err(Failure::usage(format!(
                "label scheme has {} classes but model.n_classes is {}",
                self.instances.label_scheme.n_classes(),
                self.model.n_classes
            )));
        }
        let d = &self.data;
        for p in [&d.train_file, &d.dev_file, &d.test_file].into_iter().flatten() {
            if !p.is_file() {
                return Err(Failure::usage(format!("data file not found: {}", p.display())));
            }
        }
        Ok(())
    }

    pub fn train_file(&self) -> Result<&Path, Failure> {
        self.data
            .train_file
            .as_deref()
            .ok_or_else(|| Failure::usage("config has no data.train_file"))
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
