//! Optimization: AdamW with two learning-rate groups under cosine
//! annealing, round-robin task-homogeneous batching, validation,
//! checkpointing and evaluation.

pub mod checkpoint;
mod engine;
pub mod eval;
pub mod optim;
pub mod schedule;

pub use checkpoint::{Checkpoint, CheckpointError, NamedTensor};
pub use engine::{
    LogRecord, StepRecord, TrainConfig, TrainError, TrainSummary, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT,
    METRICS_LOG,
};
pub use eval::{evaluate, EvalError, ModelPredictor, OraclePredictor, Prediction, Predictor};
pub use optim::{AdamW, AdamWConfig, AdamWState, OptimError};
pub use schedule::{lr_at, LrSchedule};
