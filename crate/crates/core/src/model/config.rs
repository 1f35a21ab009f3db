use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::task::{ConfigError, TaskSpec};

pub const STAGES: usize = 5;
/// Stride of the deepest encoder stage.
pub const MAX_STRIDE: usize = 1 << STAGES;
/// Stride of the fused pyramid output used by dense heads.
pub const DENSE_STRIDE: usize = 4;

fn default_input_size() -> [usize; 2] {
    [256, 256]
}

fn default_widths() -> [usize; STAGES] {
    [8, 16, 24, 32, 48]
}

fn default_fpn_channels() -> usize {
    32
}

fn default_dropout() -> f64 {
    0.2
}

/// Network shape and task list. The digest of this struct guards
/// checkpoints against being loaded into a different architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `[H, W]`, both divisible by 32.
    #[serde(default = "default_input_size")]
    pub input_size: [usize; 2],
    #[serde(default = "default_widths")]
    pub encoder_widths: [usize; STAGES],
    /// Adds a stride-1 3×3 conv after the downsampling conv of each stage.
    #[serde(default)]
    pub encoder_double_conv: bool,
    #[serde(default = "default_fpn_channels")]
    pub fpn_channels: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default)]
    pub init_seed: u64,
    pub tasks: Vec<TaskSpec>,
}

impl ModelConfig {
    pub fn new(tasks: Vec<TaskSpec>) -> Self {
        Self {
            input_size: default_input_size(),
            encoder_widths: default_widths(),
            encoder_double_conv: false,
            fpn_channels: default_fpn_channels(),
            dropout_rate: default_dropout(),
            init_seed: 0,
            tasks,
        }
    }

    pub fn with_input_size(mut self, h: usize, w: usize) -> Self {
        self.input_size = [h, w];
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || h % MAX_STRIDE != 0 || w % MAX_STRIDE != 0 {
            return Err(ConfigError::invalid(
                "model.input_size",
                format!("{h}x{w} must be positive multiples of {MAX_STRIDE}"),
            ));
        }
        if self.encoder_widths.contains(&0) {
            return Err(ConfigError::invalid("model.encoder_widths", "widths must be positive"));
        }
        if self.fpn_channels == 0 {
            return Err(ConfigError::invalid("model.fpn_channels", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ConfigError::invalid(
                "model.dropout_rate",
                format!("{} outside [0, 1)", self.dropout_rate),
            ));
        }
        if self.tasks.is_empty() {
            return Err(ConfigError::invalid("model.tasks", "at least one task is required"));
        }
        let mut seen = HashSet::new();
        for t in &self.tasks {
            t.validate()?;
            if !seen.insert(t.id.as_str()) {
                return Err(ConfigError::invalid(
                    "model.tasks.id",
                    format!("duplicate subtask id `{}`", t.id),
                ));
            }
        }
        Ok(())
    }

    pub fn task(&self, id: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.id == id)
    }

    /// Spatial extent of encoder stage `level` (1-based), stride `2^level`.
    pub fn level_size(&self, level: usize) -> [usize; 2] {
        let s = 1 << level;
        [self.input_size[0] / s, self.input_size[1] / s]
    }

    /// Detection grid `[h', w']`, the pyramid output resolution.
    pub fn grid_size(&self) -> [usize; 2] {
        [
            self.input_size[0] / DENSE_STRIDE,
            self.input_size[1] / DENSE_STRIDE,
        ]
    }

    /// SHA-256 over the canonical JSON encoding, hex encoded.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config is always serializable");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tasks() -> Vec<TaskSpec> {
        vec![TaskSpec::classification("c", 3)]
    }

    #[test]
    fn defaults_match_reference_setup() {
        let c = ModelConfig::new(tasks());
        assert_eq!(c.input_size, [256, 256]);
        assert_eq!(c.dropout_rate, 0.2);
        assert_eq!(c.level_size(5), [8, 8]);
        assert_eq!(c.grid_size(), [64, 64]);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_input_size() {
        let c = ModelConfig::new(tasks()).with_input_size(100, 64);
        let e = c.validate().unwrap_err();
        assert!(e.to_string().contains("model.input_size"));
    }

    #[test]
    fn rejects_duplicate_ids() {
        let mut c = ModelConfig::new(tasks());
        c.tasks.push(TaskSpec::detection("c"));
        assert!(c.validate().is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = ModelConfig::new(tasks());
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.fpn_channels = 16;
        assert_ne!(a.digest(), b.digest());
    }
}
