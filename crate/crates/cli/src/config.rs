//! The run configuration: one TOML document with top-level `seed`,
//! `deterministic` and `output_dir` keys and `[model]`, `[optim]` and
//! `[data]` sections.

use std::path::{Path, PathBuf};

use mhmtl_core::data::SizeRange;
use mhmtl_core::train::TrainConfig;
use mhmtl_core::{ConfigError, ModelConfig, TaskSpec};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Samples per subtask.
    pub count: usize,
    #[serde(default)]
    pub val_count: usize,
    #[serde(default = "default_orig_min")]
    pub orig_size_min: usize,
    #[serde(default = "default_orig_max")]
    pub orig_size_max: usize,
}

fn default_orig_min() -> usize {
    300
}

fn default_orig_max() -> usize {
    800
}

impl SynthConfig {
    pub fn sizes(&self) -> SizeRange {
        SizeRange {
            min: self.orig_size_min,
            max: self.orig_size_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Training manifest; relative paths resolve against the config file.
    pub manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub synth: Option<SynthConfig>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub deterministic: bool,
    pub output_dir: Option<PathBuf>,
    pub model: ModelConfig,
    #[serde(default)]
    pub optim: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl RunConfig {
    /// Parses and validates a config. The top-level `seed` fills in
    /// `model.init_seed` and `optim.seed` where those are not given.
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Toml(e.to_string()))?;
        if let Some(seed) = table.get("seed").cloned() {
            if let Some(toml::Value::Table(model)) = table.get_mut("model") {
                model.entry("init_seed").or_insert_with(|| seed.clone());
            }
            let optim = table
                .entry("optim")
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            if let toml::Value::Table(optim) = optim {
                optim.entry("seed").or_insert(seed);
            }
        }
        let mut cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| CliError::Toml(e.to_string()))?;
        for p in [&mut cfg.data.manifest, &mut cfg.data.val_manifest, &mut cfg.output_dir]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.deterministic && self.seed.is_none() {
            return Err(ConfigError::invalid("seed", "required when `deterministic` is set"));
        }
        self.model.validate()?;
        self.optim.validate()?;
        if let Some(s) = &self.data.synth {
            s.sizes().validate()?;
            if s.count == 0 {
                return Err(ConfigError::invalid("data.synth.count", "must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.model.tasks
    }

    /// Every task a dataset declares must be configured identically in the
    /// model.
    pub fn check_tasks(&self, dataset: &[TaskSpec]) -> Result<(), ConfigError> {
        for t in dataset {
            match self.model.task(&t.id) {
                Some(m) if m == t => {}
                Some(m) => {
                    return Err(ConfigError::invalid(
                        format!("model.tasks.{}", t.id),
                        format!("model has {m:?}, dataset declares {t:?}"),
                    ))
                }
                None => {
                    return Err(ConfigError::invalid(
                        "model.tasks",
                        format!("dataset subtask `{}` is not configured", t.id),
                    ))
                }
            }
        }
        Ok(())
    }
}
