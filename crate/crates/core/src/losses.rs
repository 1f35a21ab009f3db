//! Task losses as fused graph ops, and the per-batch dispatch.

use mhmtl_autograd::{Backward, BackwardContext, Graph, Scalar, Var, LOG_EPS};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::detection::{encode_detection_target, sigmoid, OBJECTNESS_CHANNEL};
use crate::task::{TaskKind, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "LossConfig::default_dice_eps")]
    pub dice_eps: f64,
    #[serde(default = "LossConfig::default_det_lambda")]
    pub det_lambda: f64,
}

impl LossConfig {
    fn default_dice_eps() -> f64 {
        1e-6
    }
    fn default_det_lambda() -> f64 {
        8.0
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            dice_eps: Self::default_dice_eps(),
            det_lambda: Self::default_det_lambda(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("{loss}: prediction shape {shape:?} incompatible with {targets} targets")]
    Shape {
        loss: &'static str,
        shape: Vec<usize>,
        targets: usize,
    },
    #[error("{loss}: target value {value} out of range for {classes} classes")]
    TargetRange {
        loss: &'static str,
        value: usize,
        classes: usize,
    },
    #[error("detection loss needs one box per image")]
    EmptyTargets,
    #[error("{kind} task `{subtask}` got {got} targets")]
    TargetKind {
        subtask: String,
        kind: TaskKind,
        got: &'static str,
    },
}

/// Supervision for one task-homogeneous batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// `N·H·W` class indices.
    Masks(Vec<u8>),
    Classes(Vec<usize>),
    /// Normalized `(cx, cy, w, h)` per image.
    Boxes(Vec<[f64; 4]>),
    /// `N·2M` normalized `(x, y)` coordinates.
    Keypoints(Vec<f64>),
}

impl Targets {
    pub fn variant(&self) -> &'static str {
        match self {
            Targets::Masks(_) => "mask",
            Targets::Classes(_) => "class",
            Targets::Boxes(_) => "box",
            Targets::Keypoints(_) => "keypoint",
        }
    }
}

fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64(v)
}

struct PrecomputedGrad<T>(Vec<T>);

impl<T: Scalar> Backward<T> for PrecomputedGrad<T> {
    fn name(&self) -> &'static str {
        "loss"
    }
    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> {
        let g = ctx.grad_output[0];
        vec![Some(self.0.iter().map(|&v| v * g).collect())]
    }
}

/// Soft Dice over foreground classes `1..K` on softmax probabilities
/// `[N,K,H,W]`, averaged over classes then batch:
/// `1 − (2Σ y·p + ε) / (Σ y + Σ p + ε)`.
pub fn dice_loss<T: Scalar>(g: &mut Graph<T>, probs: Var, target: &[u8], eps: f64) -> Result<Var, LossError> {
    let shape = g.shape(probs).to_vec();
    if shape.len() != 4 || shape[1] < 2 || target.len() != shape[0] * shape[2] * shape[3] {
        return Err(LossError::Shape {
            loss: "dice",
            shape,
            targets: target.len(),
        });
    }
    let (n, k, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    if let Some(&bad) = target.iter().find(|&&t| t as usize >= k) {
        return Err(LossError::TargetRange {
            loss: "dice",
            value: bad as usize,
            classes: k,
        });
    }
    let p = g.value(probs);
    let terms = (n * (k - 1)) as f64;
    let mut total = 0.0;
    let mut grad = vec![T::zero(); p.len()];
    for s in 0..n {
        let tgt = &target[s * plane..(s + 1) * plane];
        for c in 1..k {
            let pc = &p[(s * k + c) * plane..][..plane];
            let (mut inter, mut sy, mut sp) = (0.0, 0.0, 0.0);
            for (&pv, &t) in pc.iter().zip(tgt) {
                let pv = pv.as_f64();
                let y = if t as usize == c { 1.0 } else { 0.0 };
                inter += y * pv;
                sy += y;
                sp += pv;
            }
            let num = 2.0 * inter + eps;
            let den = sy + sp + eps;
            total += 1.0 - num / den;
            let gc = &mut grad[(s * k + c) * plane..][..plane];
            for (gv, &t) in gc.iter_mut().zip(tgt) {
                let y = if t as usize == c { 1.0 } else { 0.0 };
                *gv = lit(-(2.0 * y * den - num) / (den * den) / terms);
            }
        }
    }
    Ok(g.record(&[probs], vec![1], vec![lit(total / terms)], PrecomputedGrad(grad)))
}

/// Mean over the batch of `−log softmax(logits)[target]`, with the
/// probability clamped at `1e-12`.
pub fn ce_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, target: &[usize]) -> Result<Var, LossError> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != target.len() {
        return Err(LossError::Shape {
            loss: "cross_entropy",
            shape,
            targets: target.len(),
        });
    }
    let (n, k) = (shape[0], shape[1]);
    if let Some(&bad) = target.iter().find(|&&t| t >= k) {
        return Err(LossError::TargetRange {
            loss: "cross_entropy",
            value: bad,
            classes: k,
        });
    }
    let z = g.value(logits);
    let mut total = 0.0;
    let mut grad = vec![T::zero(); z.len()];
    for (s, &t) in target.iter().enumerate() {
        let row = &z[s * k..(s + 1) * k];
        let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
        let zsum: f64 = exps.iter().sum();
        let pt = exps[t] / zsum;
        total -= pt.max(LOG_EPS).ln();
        if pt > LOG_EPS {
            for c in 0..k {
                let onehot = if c == t { 1.0 } else { 0.0 };
                grad[s * k + c] = lit((exps[c] / zsum - onehot) / n as f64);
            }
        }
    }
    Ok(g.record(&[logits], vec![1], vec![lit(total / n as f64)], PrecomputedGrad(grad)))
}

/// `(1/M) Σ_k ‖ŷ_k − y_k‖²` per sample, averaged over the batch.
pub fn keypoint_mse<T: Scalar>(g: &mut Graph<T>, pred: Var, target: &[f64]) -> Result<Var, LossError> {
    let shape = g.shape(pred).to_vec();
    if shape.len() != 2 || shape[1] % 2 != 0 || shape[0] * shape[1] != target.len() {
        return Err(LossError::Shape {
            loss: "keypoint_mse",
            shape,
            targets: target.len(),
        });
    }
    let (n, m) = (shape[0], shape[1] / 2);
    let scale = 1.0 / (n * m) as f64;
    let p = g.value(pred);
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(p.len());
    for (&pv, &t) in p.iter().zip(target) {
        let d = pv.as_f64() - t;
        total += d * d;
        grad.push(lit(2.0 * d * scale));
    }
    Ok(g.record(&[pred], vec![1], vec![lit(total * scale)], PrecomputedGrad(grad)))
}

/// Centre-cell detection loss on `[N,5,h',w']` head output:
/// `BCE(objectness, 1) + λ · mean|box − box_gt|`, evaluated only at the cell
/// holding each target centre and averaged over the batch. Every other cell
/// gets zero gradient.
pub fn detection_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    targets: &[[f64; 4]],
    lambda: f64,
) -> Result<Var, LossError> {
    if targets.is_empty() {
        return Err(LossError::EmptyTargets);
    }
    let shape = g.shape(pred).to_vec();
    if shape.len() != 4 || shape[1] != 5 || shape[0] != targets.len() {
        return Err(LossError::Shape {
            loss: "detection",
            shape,
            targets: targets.len(),
        });
    }
    let (n, gh, gw) = (shape[0], shape[2], shape[3]);
    let plane = gh * gw;
    let v = g.value(pred);
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grad = vec![T::zero(); v.len()];
    for (s, b) in targets.iter().enumerate() {
        let (i, j) = encode_detection_target(b[0], b[1], gh, gw);
        let cell = i * gw + j;
        let at = |c: usize| (s * 5 + c) * plane + cell;
        let logit = v[at(OBJECTNESS_CHANNEL)].as_f64();
        // −log σ(s), written to stay finite for large |s|.
        let bce = if logit > 0.0 {
            (-logit).exp().ln_1p()
        } else {
            -logit + logit.exp().ln_1p()
        };
        grad[at(OBJECTNESS_CHANNEL)] = lit((sigmoid(logit) - 1.0) * inv_n);
        let mut l1 = 0.0;
        for c in 0..4 {
            let d = v[at(c)].as_f64() - b[c];
            l1 += d.abs();
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            grad[at(c)] = lit(lambda * sign / 4.0 * inv_n);
        }
        total += bce + lambda * l1 / 4.0;
    }
    Ok(g.record(&[pred], vec![1], vec![lit(total * inv_n)], PrecomputedGrad(grad)))
}

/// Dispatches to the loss of `task.kind`. Segmentation outputs are logits;
/// the softmax is applied here before the Dice term.
pub fn composite<T: Scalar>(
    g: &mut Graph<T>,
    task: &TaskSpec,
    output: Var,
    targets: &Targets,
    cfg: &LossConfig,
) -> Result<Var, LossError> {
    match (task.kind, targets) {
        (TaskKind::Segmentation, Targets::Masks(m)) => {
            let probs = g.softmax(output, 1).map_err(|_| LossError::Shape {
                loss: "dice",
                shape: g.shape(output).to_vec(),
                targets: m.len(),
            })?;
            dice_loss(g, probs, m, cfg.dice_eps)
        }
        (TaskKind::Classification, Targets::Classes(c)) => ce_loss(g, output, c),
        (TaskKind::Detection, Targets::Boxes(b)) => detection_loss(g, output, b, cfg.det_lambda),
        (TaskKind::Regression, Targets::Keypoints(k)) => keypoint_mse(g, output, k),
        (kind, t) => Err(LossError::TargetKind {
            subtask: task.id.clone(),
            kind,
            got: t.variant(),
        }),
    }
}
