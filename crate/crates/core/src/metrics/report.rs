use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::task::TaskKind;

/// Metric names reported for each task kind, in output order.
pub fn metric_names(kind: TaskKind) -> &'static [&'static str] {
    match kind {
        TaskKind::Segmentation => &["dsc", "hd"],
        TaskKind::Classification => &["auc", "f1", "mcc"],
        TaskKind::Detection => &["iou"],
        TaskKind::Regression => &["mre"],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubtaskReport {
    pub kind: TaskKind,
    pub samples: usize,
    pub metrics: BTreeMap<String, f64>,
}

/// Per-subtask metrics plus per-category unweighted means over subtasks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub subtasks: BTreeMap<String, SubtaskReport>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReportParseError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: bad value `{value}`")]
    Value { line: usize, value: String },
    #[error("subtask `{0}` has no kind line")]
    MissingKind(String),
}

impl EvalReport {
    pub fn insert(&mut self, id: &str, report: SubtaskReport) {
        self.subtasks.insert(id.to_string(), report);
    }

    /// Unweighted mean of `metric` over the subtasks of `kind`.
    pub fn category_mean(&self, kind: TaskKind, metric: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .subtasks
            .values()
            .filter(|s| s.kind == kind)
            .filter_map(|s| s.metrics.get(metric).copied())
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// `(key, value)` pairs for every category mean present.
    pub fn category_means(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for kind in TaskKind::ALL {
            for metric in metric_names(kind) {
                if let Some(v) = self.category_mean(kind, metric) {
                    out.push((format!("{kind}.mean_{metric}"), v));
                }
            }
        }
        out
    }

    /// Reads back the text produced by `Display`. Category lines are derived
    /// data and are recomputed rather than trusted.
    pub fn parse(text: &str) -> Result<Self, ReportParseError> {
        let mut kinds: BTreeMap<String, TaskKind> = BTreeMap::new();
        let mut samples: BTreeMap<String, usize> = BTreeMap::new();
        let mut metrics: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ReportParseError::Syntax { line: i + 1 })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = || ReportParseError::Value {
                line: i + 1,
                value: value.to_string(),
            };
            let Some(rest) = key.strip_prefix("subtask.") else {
                continue;
            };
            let (id, field) = rest.rsplit_once('.').ok_or(ReportParseError::Syntax { line: i + 1 })?;
            match field {
                "kind" => {
                    let kind = TaskKind::ALL.into_iter().find(|k| k.name() == value).ok_or_else(bad)?;
                    kinds.insert(id.to_string(), kind);
                }
                "samples" => {
                    samples.insert(id.to_string(), value.parse().map_err(|_| bad())?);
                }
                metric => {
                    let v: f64 = value.parse().map_err(|_| bad())?;
                    metrics.entry(id.to_string()).or_default().insert(metric.to_string(), v);
                }
            }
        }
        let mut report = EvalReport::default();
        let ids: Vec<String> = metrics.keys().chain(samples.keys()).cloned().collect();
        for id in ids {
            let kind = *kinds.get(&id).ok_or_else(|| ReportParseError::MissingKind(id.clone()))?;
            report.insert(
                &id,
                SubtaskReport {
                    kind,
                    samples: samples.get(&id).copied().unwrap_or(0),
                    metrics: metrics.get(&id).cloned().unwrap_or_default(),
                },
            );
        }
        Ok(report)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# category means (unweighted over subtasks)")?;
        for (key, v) in self.category_means() {
            writeln!(f, "{key} = {v}")?;
        }
        for (id, s) in &self.subtasks {
            writeln!(f)?;
            writeln!(f, "subtask.{id}.kind = {}", s.kind)?;
            writeln!(f, "subtask.{id}.samples = {}", s.samples)?;
            for (m, v) in &s.metrics {
                writeln!(f, "subtask.{id}.{m} = {v}")?;
            }
        }
        Ok(())
    }
}
