//! Multi-head multi-task learning for ultrasound-style images.
//!
//! One shared convolutional encoder feeds a feature pyramid decoder; a task
//! identifier routes each batch either through a global branch (pooled
//! deepest features, for classification and keypoint regression) or a dense
//! branch (the fused stride-4 pyramid map, for segmentation and grid
//! detection). Every subtask owns its own head.
//!
//! The crate also carries the task losses, the evaluation metrics, a
//! deterministic synthetic phantom generator and the training engine.

pub mod data;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod task;
pub mod train;

pub use mhmtl_autograd as autograd;
pub use model::{Model, ModelConfig, ModelError};
pub use task::{ConfigError, TaskKind, TaskSpec};
