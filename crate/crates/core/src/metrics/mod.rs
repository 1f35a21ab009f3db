//! Evaluation metrics: overlap and boundary distance for masks, rank AUC and
//! confusion-matrix scores for classes, box IoU and radial error for
//! keypoints.

mod distance;
mod report;

use thiserror::Error;

pub use distance::{boundary, hausdorff, squared_distance_transform};
pub use report::{metric_names, EvalReport, ReportParseError, SubtaskReport};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("{metric}: length mismatch ({left} vs {right})")]
    Length {
        metric: &'static str,
        left: usize,
        right: usize,
    },
    #[error("{metric}: {reason}")]
    Invalid { metric: &'static str, reason: String },
}

fn same_len(metric: &'static str, left: usize, right: usize) -> Result<(), MetricError> {
    if left == right {
        Ok(())
    } else {
        Err(MetricError::Length { metric, left, right })
    }
}

/// `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dsc(pred: &[bool], gt: &[bool]) -> Result<f64, MetricError> {
    same_len("dsc", pred.len(), gt.len())?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    }
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

/// Mann–Whitney estimate of the binary AUC, ties counted as one half.
/// `None` when either class is absent.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Result<Option<f64>, MetricError> {
    same_len("auc", scores.len(), positive.len())?;
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Midranks (1-based) over tied runs.
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let midrank = (start + end + 1) as f64 / 2.0;
        rank_sum += midrank * order[start..end].iter().filter(|&&i| positive[i]).count() as f64;
        start = end;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(Some(u / (n_pos * n_neg) as f64))
}

/// Macro one-vs-rest AUC over `K = scores[0].len()` classes. Classes with no
/// positive or no negative sample are left out of the mean; if every class is
/// degenerate the result is 0.5.
pub fn auc(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64, MetricError> {
    same_len("auc", scores.len(), labels.len())?;
    let k = scores.first().map_or(0, Vec::len);
    if scores.iter().any(|s| s.len() != k) {
        return Err(MetricError::Invalid {
            metric: "auc",
            reason: "score rows differ in length".into(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(MetricError::Invalid {
            metric: "auc",
            reason: format!("label {bad} out of range for {k} classes"),
        });
    }
    let mut sum = 0.0;
    let mut used = 0;
    for c in 0..k {
        let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if let Some(a) = binary_auc(&col, &pos)? {
            sum += a;
            used += 1;
        }
    }
    Ok(if used == 0 { 0.5 } else { sum / used as f64 })
}

/// `K×K` counts, rows indexed by ground truth and columns by prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self, MetricError> {
        same_len("confusion_matrix", counts.len(), k * k)?;
        Ok(Self { k, counts })
    }

    pub fn from_pairs(k: usize, truth: &[usize], pred: &[usize]) -> Result<Self, MetricError> {
        same_len("confusion_matrix", truth.len(), pred.len())?;
        let mut cm = Self::new(k);
        for (&t, &p) in truth.iter().zip(pred) {
            cm.add(t, p)?;
        }
        Ok(cm)
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<(), MetricError> {
        if truth >= self.k || pred >= self.k {
            return Err(MetricError::Invalid {
                metric: "confusion_matrix",
                reason: format!("pair ({truth}, {pred}) out of range for {} classes", self.k),
            });
        }
        self.counts[truth * self.k + pred] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Macro F1 (per-class `2TP/(2TP+FP+FN)`, 0 when that denominator is 0) and
/// the multiclass Matthews correlation
/// `(c·s − Σ p_k t_k) / √((s² − Σ p_k²)(s² − Σ t_k²))`, 0 when a factor
/// under the root vanishes.
pub fn f1_mcc(cm: &ConfusionMatrix) -> Result<(f64, f64), MetricError> {
    let k = cm.classes();
    let s = cm.total();
    if s == 0 || k == 0 {
        return Err(MetricError::Invalid {
            metric: "f1_mcc",
            reason: "empty confusion matrix".into(),
        });
    }
    let truth: Vec<f64> = (0..k).map(|t| (0..k).map(|p| cm.get(t, p)).sum::<u64>() as f64).collect();
    let predicted: Vec<f64> = (0..k).map(|p| (0..k).map(|t| cm.get(t, p)).sum::<u64>() as f64).collect();
    let correct: f64 = (0..k).map(|c| cm.get(c, c) as f64).sum();

    let f1 = (0..k)
        .map(|c| {
            let tp = cm.get(c, c) as f64;
            let denom = truth[c] + predicted[c];
            if denom == 0.0 {
                0.0
            } else {
                2.0 * tp / denom
            }
        })
        .sum::<f64>()
        / k as f64;

    let s = s as f64;
    let cov_pt: f64 = s * correct - predicted.iter().zip(&truth).map(|(p, t)| p * t).sum::<f64>();
    let var_p = s * s - predicted.iter().map(|p| p * p).sum::<f64>();
    let var_t = s * s - truth.iter().map(|t| t * t).sum::<f64>();
    let mcc = if var_p == 0.0 || var_t == 0.0 {
        0.0
    } else {
        cov_pt / (var_p * var_t).sqrt()
    };
    Ok((f1, mcc))
}

/// IoU of two `(cx, cy, w, h)` boxes after conversion to corners; zero union
/// gives 0.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let corners = |r: [f64; 4]| [r[0] - r[2] / 2.0, r[1] - r[3] / 2.0, r[0] + r[2] / 2.0, r[1] + r[3] / 2.0];
    let (a, b) = (corners(a), corners(b));
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Mean radial error in original pixels: predictions are normalized `(x, y)`
/// and are mapped back with `(x·W₀, y·H₀)` before measuring against the
/// original-resolution ground truth.
pub fn mre(pred_norm: &[[f64; 2]], gt_px: &[[f64; 2]], orig_size: [usize; 2]) -> Result<f64, MetricError> {
    same_len("mre", pred_norm.len(), gt_px.len())?;
    if gt_px.is_empty() {
        return Err(MetricError::Invalid {
            metric: "mre",
            reason: "no keypoints".into(),
        });
    }
    let [h0, w0] = orig_size;
    let total: f64 = pred_norm
        .iter()
        .zip(gt_px)
        .map(|(p, g)| (p[0] * w0 as f64 - g[0]).hypot(p[1] * h0 as f64 - g[1]))
        .sum();
    Ok(total / gt_px.len() as f64)
}
