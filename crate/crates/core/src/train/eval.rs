//! Decoding network outputs into predictions and scoring them at original
//! resolution.

use std::collections::BTreeMap;

use mhmtl_autograd::Graph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{resize_nearest, resize_to_model, Batch, DataError, Label, Sample};
use crate::metrics::{self, ConfusionMatrix, EvalReport, MetricError, SubtaskReport};
use crate::model::{decode_detection, Model, ModelError};
use crate::task::{TaskKind, TaskSpec};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("prediction for `{id}` does not fit its task: {reason}")]
    Prediction { id: String, reason: String },
    #[error("nothing to evaluate")]
    Empty,
}

/// A decoded prediction for one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    /// Class map at the sample's original resolution.
    Mask(Vec<u8>),
    /// Class probabilities.
    Class(Vec<f64>),
    /// Normalized `(cx, cy, w, h)` and objectness probability.
    Box { bbox: [f64; 4], score: f64 },
    /// Normalized `(x, y)`.
    Keypoints(Vec<[f64; 2]>),
}

pub trait Predictor {
    /// Predictions for samples that all belong to `task`, in input order.
    fn predict(&self, task: &TaskSpec, samples: &[&Sample]) -> Result<Vec<Prediction>, EvalError>;
}

/// Runs the network in inference mode.
pub struct ModelPredictor<'a> {
    pub model: &'a Model<f32>,
    pub batch_size: usize,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(model: &'a Model<f32>) -> Self {
        Self { model, batch_size: 8 }
    }
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, task: &TaskSpec, samples: &[&Sample]) -> Result<Vec<Prediction>, EvalError> {
        let size = self.model.config().input_size;
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.batch_size.max(1)) {
            let resized: Vec<_> = chunk.iter().map(|s| resize_to_model(s, size)).collect();
            let refs: Vec<_> = resized.iter().collect();
            let batch = Batch::collate(&refs, None, size)?;
            let mut g = Graph::new();
            let x = g.constant(&batch.images);
            // Inference never draws from the generator (dropout is off).
            let y = self.model.forward(&mut g, x, &task.id, false, &mut ChaCha8Rng::seed_from_u64(0))?;
            let values = g.value(y);
            let per = values.len() / chunk.len();
            for (s, v) in chunk.iter().zip(values.chunks_exact(per)) {
                out.push(decode(task, v, size, s.orig_size()));
            }
        }
        Ok(out)
    }
}

fn softmax(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let e: Vec<f64> = logits.iter().map(|&z| (z as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Turns one sample's raw head output into a prediction.
pub fn decode(task: &TaskSpec, out: &[f32], model_size: [usize; 2], orig_size: [usize; 2]) -> Prediction {
    match task.kind {
        TaskKind::Segmentation => {
            let k = task.num_classes();
            let plane = model_size[0] * model_size[1];
            let labels: Vec<u8> = (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if out[c * plane + p] > out[best * plane + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            Prediction::Mask(resize_nearest(&labels, model_size, orig_size))
        }
        TaskKind::Classification => Prediction::Class(softmax(out)),
        TaskKind::Detection => {
            let [gh, gw] = [model_size[0] / 4, model_size[1] / 4];
            let d = decode_detection(out, gh, gw);
            Prediction::Box {
                bbox: d.bbox,
                score: d.score,
            }
        }
        TaskKind::Regression => Prediction::Keypoints(out.chunks_exact(2).map(|p| [p[0] as f64, p[1] as f64]).collect()),
    }
}

/// Feeds ground truth back as the prediction; every metric should come out
/// at its ideal value.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, task: &TaskSpec, samples: &[&Sample]) -> Result<Vec<Prediction>, EvalError> {
        Ok(samples
            .iter()
            .map(|s| {
                let [h0, w0] = s.orig_size();
                match &s.label {
                    Label::Mask(m) => Prediction::Mask(m.clone()),
                    Label::Class(c) => {
                        Prediction::Class((0..task.num_classes()).map(|k| (k == *c) as u8 as f64).collect())
                    }
                    Label::Box(b) => Prediction::Box { bbox: *b, score: 1.0 },
                    Label::Keypoints(k) => {
                        Prediction::Keypoints(k.iter().map(|p| [p[0] / w0 as f64, p[1] / h0 as f64]).collect())
                    }
                }
            })
            .collect())
    }
}

fn mismatch(s: &Sample, reason: &str) -> EvalError {
    EvalError::Prediction {
        id: s.id.clone(),
        reason: reason.into(),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Scores one subtask. Segmentation is scored per foreground class and
/// averaged over classes, then over samples.
pub fn score_subtask(task: &TaskSpec, samples: &[&Sample], preds: &[Prediction]) -> Result<SubtaskReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut metrics = BTreeMap::new();
    match task.kind {
        TaskKind::Segmentation => {
            let (mut dscs, mut hds) = (Vec::new(), Vec::new());
            for (s, p) in samples.iter().zip(preds) {
                let (Label::Mask(gt), Prediction::Mask(pm)) = (&s.label, p) else {
                    return Err(mismatch(s, "expected a mask"));
                };
                if pm.len() != gt.len() {
                    return Err(mismatch(s, "mask size differs from the original image"));
                }
                let [h, w] = s.orig_size();
                let (mut d, mut hd) = (Vec::new(), Vec::new());
                for c in 1..task.num_classes() as u8 {
                    let a: Vec<bool> = pm.iter().map(|&v| v == c).collect();
                    let b: Vec<bool> = gt.iter().map(|&v| v == c).collect();
                    d.push(metrics::dsc(&a, &b)?);
                    hd.push(metrics::hausdorff(&a, &b, h, w)?);
                }
                dscs.push(mean(&d));
                hds.push(mean(&hd));
            }
            metrics.insert("dsc".into(), mean(&dscs));
            metrics.insert("hd".into(), mean(&hds));
        }
        TaskKind::Classification => {
            let k = task.num_classes();
            let (mut scores, mut labels, mut cm) = (Vec::new(), Vec::new(), ConfusionMatrix::new(k));
            for (s, p) in samples.iter().zip(preds) {
                let (Label::Class(c), Prediction::Class(probs)) = (&s.label, p) else {
                    return Err(mismatch(s, "expected class probabilities"));
                };
                if probs.len() != k {
                    return Err(mismatch(s, "probability vector length differs from class count"));
                }
                let argmax = (0..k).fold(0, |b, i| if probs[i] > probs[b] { i } else { b });
                cm.add(*c, argmax)?;
                scores.push(probs.clone());
                labels.push(*c);
            }
            let (f1, mcc) = metrics::f1_mcc(&cm)?;
            metrics.insert("auc".into(), metrics::auc(&scores, &labels)?);
            metrics.insert("f1".into(), f1);
            metrics.insert("mcc".into(), mcc);
        }
        TaskKind::Detection => {
            let mut ious = Vec::new();
            for (s, p) in samples.iter().zip(preds) {
                let (Label::Box(gt), Prediction::Box { bbox, .. }) = (&s.label, p) else {
                    return Err(mismatch(s, "expected a box"));
                };
                ious.push(metrics::iou(*bbox, *gt));
            }
            metrics.insert("iou".into(), mean(&ious));
        }
        TaskKind::Regression => {
            let mut errs = Vec::new();
            for (s, p) in samples.iter().zip(preds) {
                let (Label::Keypoints(gt), Prediction::Keypoints(k)) = (&s.label, p) else {
                    return Err(mismatch(s, "expected keypoints"));
                };
                errs.push(metrics::mre(k, gt, s.orig_size())?);
            }
            metrics.insert("mre".into(), mean(&errs));
        }
    }
    Ok(SubtaskReport {
        kind: task.kind,
        samples: samples.len(),
        metrics,
    })
}

/// Predicts and scores every sample, grouped by subtask.
pub fn evaluate(predictor: &dyn Predictor, tasks: &[TaskSpec], samples: &[Sample]) -> Result<EvalReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut report = EvalReport::default();
    for task in tasks {
        let subset: Vec<&Sample> = samples.iter().filter(|s| s.subtask_id == task.id).collect();
        if subset.is_empty() {
            continue;
        }
        let preds = predictor.predict(task, &subset)?;
        report.insert(&task.id, score_subtask(task, &subset, &preds)?);
    }
    if let Some(s) = samples.iter().find(|s| !tasks.iter().any(|t| t.id == s.subtask_id)) {
        return Err(ModelError::UnknownSubtask(s.subtask_id.clone()).into());
    }
    Ok(report)
}
