use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc};

use mhmtl_autograd::{Graph, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::checkpoint::{Checkpoint, CheckpointError};
use super::eval::{evaluate, EvalError, ModelPredictor};
use super::optim::{AdamW, AdamWConfig, OptimError};
use super::schedule::LrSchedule;
use crate::data::{augment, resize_to_model, sample_seed, Batch, DataError, ModelSample, Sample};
use crate::losses::{self, LossConfig, LossError};
use crate::metrics::EvalReport;
use crate::model::{Model, ModelError, ParamGroup};
use crate::task::{ConfigError, TaskSpec};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_LOG: &str = "metrics.jsonl";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("no training samples for any subtask of the model")]
    NoSamples,
    #[error("non-finite loss at step {step} on subtask `{subtask}`")]
    NonFiniteLoss { step: u64, subtask: String },
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn default_epochs() -> u64 {
    50
}
fn default_batch_size() -> usize {
    8
}
fn default_backbone_lr() -> f64 {
    1e-4
}
fn default_head_lr() -> f64 {
    1e-3
}
fn default_true() -> bool {
    true
}
fn default_prefetch() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_backbone_lr")]
    pub backbone_lr: f64,
    #[serde(default = "default_head_lr")]
    pub head_lr: f64,
    #[serde(default)]
    pub min_lr: f64,
    #[serde(default)]
    pub adamw: AdamWConfig,
    /// Overrides `epochs`: the run (and the cosine horizon) is exactly this
    /// many optimization steps.
    #[serde(default)]
    pub max_steps: Option<u64>,
    /// Validation period in steps; once per epoch when unset.
    #[serde(default)]
    pub eval_every: Option<u64>,
    #[serde(default = "default_true")]
    pub augment: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss: LossConfig,
    /// Batches prepared ahead of the optimizer by the loader thread.
    #[serde(default = "default_prefetch")]
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            backbone_lr: default_backbone_lr(),
            head_lr: default_head_lr(),
            min_lr: 0.0,
            adamw: AdamWConfig::default(),
            max_steps: None,
            eval_every: None,
            augment: true,
            seed: 0,
            loss: LossConfig::default(),
            prefetch: default_prefetch(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |field: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(ConfigError::invalid(format!("optim.{field}"), format!("{v} must be positive")))
            }
        };
        if self.epochs == 0 && self.max_steps.is_none() {
            return Err(ConfigError::invalid("optim.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::invalid("optim.batch_size", "must be at least 1"));
        }
        if self.max_steps == Some(0) || self.eval_every == Some(0) {
            return Err(ConfigError::invalid("optim.max_steps", "step counts must be at least 1"));
        }
        positive("backbone_lr", self.backbone_lr)?;
        positive("head_lr", self.head_lr)?;
        positive("adamw.eps", self.adamw.eps)?;
        positive("loss.dice_eps", self.loss.dice_eps)?;
        positive("loss.det_lambda", self.loss.det_lambda)?;
        if !(0.0..self.backbone_lr.min(self.head_lr)).contains(&self.min_lr) {
            return Err(ConfigError::invalid("optim.min_lr", "must lie in [0, smallest base lr)"));
        }
        for (field, b) in [("adamw.beta1", self.adamw.beta1), ("adamw.beta2", self.adamw.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(ConfigError::invalid(format!("optim.{field}"), format!("{b} outside [0, 1)")));
            }
        }
        if !(self.adamw.weight_decay >= 0.0) {
            return Err(ConfigError::invalid("optim.adamw.weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

/// One optimization step as it happened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub subtask: String,
    pub loss: f64,
    pub lr_backbone: f64,
    pub lr_head: f64,
}

/// One line of the metric log, written at every validation event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Checkpoint selection score: validation loss, or the training loss
    /// window when there is no validation set.
    pub score: f64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: u64,
    pub last_loss: Option<f64>,
    pub best_score: Option<f64>,
    pub last_report: Option<EvalReport>,
}

/// Immutable batch planning state, shared with the loader thread.
struct BatchSource {
    subtasks: Vec<(TaskSpec, Vec<ModelSample>)>,
    batch_size: usize,
    augment: bool,
    seed: u64,
    size: [usize; 2],
}

impl BatchSource {
    fn steps_per_epoch(&self) -> u64 {
        self.subtasks
            .iter()
            .map(|(_, s)| s.len().div_ceil(self.batch_size) as u64)
            .sum()
    }

    /// Round-robin over subtasks of their shuffled, chunked sample orders:
    /// batch 0 of every subtask, then batch 1, and so on.
    fn epoch_plan(&self, epoch: u64) -> Vec<(usize, Vec<usize>)> {
        let chunked: Vec<Vec<Vec<usize>>> = self
            .subtasks
            .iter()
            .map(|(task, samples)| {
                let mut order: Vec<usize> = (0..samples.len()).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(self.seed ^ epoch, &task.id, u64::MAX - 1));
                order.shuffle(&mut rng);
                order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
            })
            .collect();
        let rounds = chunked.iter().map(Vec::len).max().unwrap_or(0);
        let mut plan = Vec::new();
        for r in 0..rounds {
            for (t, batches) in chunked.iter().enumerate() {
                if let Some(b) = batches.get(r) {
                    plan.push((t, b.clone()));
                }
            }
        }
        plan
    }

    fn batch(&self, task: usize, indices: &[usize], step: u64) -> Result<Batch, DataError> {
        let samples = &self.subtasks[task].1;
        let picked: Vec<&ModelSample> = indices.iter().map(|&i| &samples[i]).collect();
        let images = self.augment.then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(self.seed, "augment", step));
            picked
                .iter()
                .map(|s| {
                    let mut img = s.image.clone();
                    augment(&mut img, &mut rng, true);
                    img
                })
                .collect()
        });
        Batch::collate(&picked, images, self.size)
    }
}

pub struct Trainer {
    model: Model<f32>,
    config: TrainConfig,
    optim: AdamW,
    schedule: LrSchedule,
    source: Arc<BatchSource>,
    is_head: Vec<bool>,
    val: Vec<Sample>,
    step: u64,
    best: Option<f64>,
    history: Vec<StepRecord>,
    log: Vec<LogRecord>,
    window: Vec<f64>,
    out_dir: Option<PathBuf>,
    append_log: bool,
    last_report: Option<EvalReport>,
}

fn check_samples(model: &Model<f32>, samples: &[Sample]) -> Result<(), TrainError> {
    for s in samples {
        let task = model.task(&s.subtask_id)?;
        s.validate(task)?;
    }
    Ok(())
}

impl Trainer {
    /// Prepares a run over `train`. Subtasks without samples are skipped.
    pub fn new(model: Model<f32>, config: TrainConfig, train: &[Sample]) -> Result<Self, TrainError> {
        config.validate()?;
        check_samples(&model, train)?;
        let size = model.config().input_size;
        let mut subtasks = Vec::new();
        for task in &model.config().tasks {
            let mine: Vec<&Sample> = train.iter().filter(|s| s.subtask_id == task.id).collect();
            if mine.is_empty() {
                log::warn!("subtask `{}` has no training samples; its head stays untrained", task.id);
                continue;
            }
            let resized = mine.par_iter().map(|s| resize_to_model(s, size)).collect();
            subtasks.push((task.clone(), resized));
        }
        if subtasks.is_empty() {
            return Err(TrainError::NoSamples);
        }
        let source = BatchSource {
            subtasks,
            batch_size: config.batch_size,
            augment: config.augment,
            seed: config.seed,
            size,
        };
        let total_steps = config
            .max_steps
            .unwrap_or_else(|| config.epochs * source.steps_per_epoch());
        let schedule = LrSchedule {
            backbone_lr: config.backbone_lr,
            head_lr: config.head_lr,
            min_lr: config.min_lr,
            total_steps,
        };
        let is_head = model
            .params()
            .ids()
            .map(|id| model.param_group(id) == ParamGroup::Head)
            .collect();
        Ok(Self {
            optim: AdamW::new(config.adamw, model.params()),
            model,
            config,
            schedule,
            source: Arc::new(source),
            is_head,
            val: Vec::new(),
            step: 0,
            best: None,
            history: Vec::new(),
            log: Vec::new(),
            window: Vec::new(),
            out_dir: None,
            append_log: false,
            last_report: None,
        })
    }

    pub fn with_validation(mut self, val: Vec<Sample>) -> Result<Self, TrainError> {
        check_samples(&self.model, &val)?;
        self.val = val;
        Ok(self)
    }

    /// Checkpoints and the metric log go here.
    pub fn with_output_dir(mut self, dir: &Path) -> Result<Self, TrainError> {
        fs::create_dir_all(dir).map_err(|source| TrainError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    pub fn schedule(&self) -> &LrSchedule {
        &self.schedule
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.source.steps_per_epoch()
    }

    pub fn total_steps(&self) -> u64 {
        self.schedule.total_steps
    }

    /// Steps completed so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn history(&self) -> &[StepRecord] {
        &self.history
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config().clone(),
            params: Checkpoint::params_of(&self.model),
            optimizer: self.optim.state().clone(),
            schedule: self.schedule,
            step: self.step,
            seed: self.config.seed,
            best_score: self.best,
        }
    }

    /// Continues from `ckpt`, which must come from a run with the same model
    /// config, schedule and seed.
    pub fn resume(&mut self, ckpt: &Checkpoint) -> Result<(), TrainError> {
        ckpt.restore_params(&mut self.model)?;
        if ckpt.schedule != self.schedule {
            return Err(TrainError::Resume(format!(
                "schedule {:?} differs from the configured {:?}",
                ckpt.schedule, self.schedule
            )));
        }
        if ckpt.seed != self.config.seed {
            return Err(TrainError::Resume(format!(
                "checkpoint seed {} differs from configured seed {}",
                ckpt.seed, self.config.seed
            )));
        }
        self.optim.set_state(ckpt.optimizer.clone(), self.model.params())?;
        self.step = ckpt.step;
        self.best = ckpt.best_score;
        self.append_log = true;
        Ok(())
    }

    fn eval_every(&self) -> u64 {
        self.config.eval_every.unwrap_or_else(|| self.steps_per_epoch()).max(1)
    }

    /// Trains to the end of the schedule.
    pub fn run(&mut self) -> Result<TrainSummary, TrainError> {
        self.run_until(self.schedule.total_steps)
    }

    /// Trains until `until` steps have completed (capped at the schedule
    /// length). Batches are assembled on a loader thread; their content
    /// depends only on the seed and the step index, never on timing.
    pub fn run_until(&mut self, until: u64) -> Result<TrainSummary, TrainError> {
        let until = until.min(self.schedule.total_steps);
        let start = self.step;
        let eval_every = self.eval_every();
        let spe = self.source.steps_per_epoch();
        let (tx, rx) = mpsc::sync_channel::<Result<(u64, Batch), DataError>>(self.config.prefetch.max(1));
        let source = Arc::clone(&self.source);
        std::thread::scope(|scope| -> Result<(), TrainError> {
            scope.spawn(move || {
                let mut cached: Option<(u64, Vec<(usize, Vec<usize>)>)> = None;
                for t in start..until {
                    let epoch = t / spe;
                    if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                        cached = Some((epoch, source.epoch_plan(epoch)));
                    }
                    let (task, indices) = &cached.as_ref().expect("plan cached above").1[(t % spe) as usize];
                    let batch = source.batch(*task, indices, t);
                    let failed = batch.is_err();
                    if tx.send(batch.map(|b| (t, b))).is_err() || failed {
                        break;
                    }
                }
            });
            for received in rx.iter() {
                let (t, batch) = received?;
                debug_assert_eq!(t, self.step);
                self.train_step(&batch)?;
                if self.step % eval_every == 0 || self.step == self.schedule.total_steps {
                    self.validate()?;
                }
            }
            Ok(())
        })?;
        Ok(TrainSummary {
            steps: self.step,
            last_loss: self.history.last().map(|r| r.loss),
            best_score: self.best,
            last_report: self.last_report.clone(),
        })
    }

    fn train_step(&mut self, batch: &Batch) -> Result<(), TrainError> {
        let t = self.step;
        let task = self.model.task(&batch.subtask_id)?.clone();
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(sample_seed(self.config.seed, "dropout", t));
        let mut g = Graph::new();
        let x = g.constant(&batch.images);
        let y = self.model.forward(&mut g, x, &task.id, true, &mut dropout_rng)?;
        let loss = losses::composite(&mut g, &task, y, &batch.targets, &self.config.loss)?;
        let value = g.value(loss)[0] as f64;
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step: t,
                subtask: task.id,
            });
        }
        let params = self.model.params_mut();
        params.zero_grad();
        g.backward(loss, params)?;
        let (lr_b, lr_h) = (self.schedule.backbone(t), self.schedule.head(t));
        let is_head = &self.is_head;
        self.optim
            .step(params, |id| if is_head[id.0] { lr_h } else { lr_b })?;
        params.zero_grad();
        self.history.push(StepRecord {
            step: t,
            subtask: task.id,
            loss: value,
            lr_backbone: lr_b,
            lr_head: lr_h,
        });
        self.window.push(value);
        self.step += 1;
        Ok(())
    }

    /// Mean validation loss: sample-weighted within a subtask, then
    /// averaged over subtasks.
    pub fn validation_loss(&self, samples: &[Sample]) -> Result<Option<f64>, TrainError> {
        let size = self.model.config().input_size;
        let mut per_task = Vec::new();
        for task in &self.model.config().tasks {
            let mine: Vec<ModelSample> = samples
                .iter()
                .filter(|s| s.subtask_id == task.id)
                .map(|s| resize_to_model(s, size))
                .collect();
            if mine.is_empty() {
                continue;
            }
            let mut total = 0.0;
            for chunk in mine.chunks(self.config.batch_size) {
                let refs: Vec<&ModelSample> = chunk.iter().collect();
                let batch = Batch::collate(&refs, None, size)?;
                let mut g = Graph::new();
                let x = g.constant(&batch.images);
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let y = self.model.forward(&mut g, x, &task.id, false, &mut rng)?;
                let loss = losses::composite(&mut g, task, y, &batch.targets, &self.config.loss)?;
                total += g.value(loss)[0] as f64 * chunk.len() as f64;
            }
            per_task.push(total / mine.len() as f64);
        }
        Ok((!per_task.is_empty()).then(|| per_task.iter().sum::<f64>() / per_task.len() as f64))
    }

    fn validate(&mut self) -> Result<(), TrainError> {
        let train_loss = if self.window.is_empty() {
            f64::NAN
        } else {
            self.window.iter().sum::<f64>() / self.window.len() as f64
        };
        self.window.clear();
        let (val_loss, report) = if self.val.is_empty() {
            (None, None)
        } else {
            let report = evaluate(&ModelPredictor::new(&self.model), &self.model.config().tasks, &self.val)?;
            (self.validation_loss(&self.val)?, Some(report))
        };
        let score = val_loss.unwrap_or(train_loss);
        let mut metrics = BTreeMap::new();
        if let Some(r) = &report {
            metrics.extend(r.category_means());
            for (id, s) in &r.subtasks {
                for (m, v) in &s.metrics {
                    metrics.insert(format!("subtask.{id}.{m}"), *v);
                }
            }
        }
        let record = LogRecord {
            step: self.step,
            epoch: self.step.div_ceil(self.steps_per_epoch()),
            train_loss,
            val_loss,
            score,
            metrics,
        };
        let improved = self.best.is_none_or(|b| score < b);
        if improved {
            self.best = Some(score);
        }
        if let Some(dir) = self.out_dir.clone() {
            let ckpt = self.checkpoint();
            ckpt.save(&dir.join(LAST_CHECKPOINT))?;
            if improved {
                ckpt.save(&dir.join(BEST_CHECKPOINT))?;
            }
            self.append_log_line(&dir.join(METRICS_LOG), &record)?;
            if let Some(r) = &report {
                let path = dir.join("last_eval.txt");
                fs::write(&path, r.to_string()).map_err(|source| TrainError::Io { path, source })?;
            }
        }
        log::info!(
            "step {} train_loss {:.5} val_loss {:?} score {:.5}",
            record.step,
            record.train_loss,
            record.val_loss,
            record.score
        );
        self.log.push(record);
        self.last_report = report;
        Ok(())
    }

    fn append_log_line(&mut self, path: &Path, record: &LogRecord) -> Result<(), TrainError> {
        let io = |source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(self.append_log)
            .truncate(!self.append_log)
            .open(path)
            .map_err(io)?;
        self.append_log = true;
        let line = serde_json::to_string(record).expect("log record serializes");
        writeln!(file, "{line}").map_err(io)
    }
}
