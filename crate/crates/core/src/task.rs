use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

impl ConfigError {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Segmentation,
    Classification,
    Detection,
    Regression,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::Segmentation,
        TaskKind::Classification,
        TaskKind::Detection,
        TaskKind::Regression,
    ];

    /// Global tasks read pooled deepest features; dense tasks read the
    /// pyramid output.
    pub fn is_dense(self) -> bool {
        matches!(self, TaskKind::Segmentation | TaskKind::Detection)
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Segmentation => "segmentation",
            TaskKind::Classification => "classification",
            TaskKind::Detection => "detection",
            TaskKind::Regression => "regression",
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One subtask: its kind plus the class count (segmentation counts the
/// background) or keypoint count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: String,
    pub kind: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<usize>,
}

impl TaskSpec {
    pub fn segmentation(id: &str, classes: usize) -> Self {
        Self {
            id: id.into(),
            kind: TaskKind::Segmentation,
            classes: Some(classes),
            keypoints: None,
        }
    }

    pub fn classification(id: &str, classes: usize) -> Self {
        Self {
            id: id.into(),
            kind: TaskKind::Classification,
            classes: Some(classes),
            keypoints: None,
        }
    }

    pub fn detection(id: &str) -> Self {
        Self {
            id: id.into(),
            kind: TaskKind::Detection,
            classes: None,
            keypoints: None,
        }
    }

    pub fn regression(id: &str, keypoints: usize) -> Self {
        Self {
            id: id.into(),
            kind: TaskKind::Regression,
            classes: None,
            keypoints: Some(keypoints),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let field = |name: &str| format!("tasks.{}.{name}", self.id);
        if self.id.is_empty() || self.id.chars().any(|c| c.is_whitespace()) {
            return Err(ConfigError::invalid(
                "tasks.id",
                format!("`{}` must be non-empty without whitespace", self.id),
            ));
        }
        let wants_classes = matches!(self.kind, TaskKind::Segmentation | TaskKind::Classification);
        match (wants_classes, self.classes) {
            (true, None) => return Err(ConfigError::invalid(field("classes"), "required")),
            (true, Some(k)) if k < 2 => {
                return Err(ConfigError::invalid(field("classes"), format!("{k} < 2")))
            }
            (false, Some(_)) => {
                return Err(ConfigError::invalid(
                    field("classes"),
                    format!("not allowed for {}", self.kind),
                ))
            }
            _ => {}
        }
        if self.kind == TaskKind::Segmentation && self.classes.unwrap_or(0) > 255 {
            return Err(ConfigError::invalid(field("classes"), "masks hold at most 255 classes"));
        }
        match (self.kind == TaskKind::Regression, self.keypoints) {
            (true, None) => Err(ConfigError::invalid(field("keypoints"), "required")),
            (true, Some(0)) => Err(ConfigError::invalid(field("keypoints"), "must be at least 1")),
            (false, Some(_)) => Err(ConfigError::invalid(
                field("keypoints"),
                format!("not allowed for {}", self.kind),
            )),
            _ => Ok(()),
        }
    }

    /// Class count for segmentation/classification, 0 otherwise.
    pub fn num_classes(&self) -> usize {
        self.classes.unwrap_or(0)
    }

    pub fn num_keypoints(&self) -> usize {
        self.keypoints.unwrap_or(0)
    }

    /// Channel count of the head output.
    pub fn output_width(&self) -> usize {
        match self.kind {
            TaskKind::Segmentation | TaskKind::Classification => self.num_classes(),
            TaskKind::Detection => 5,
            TaskKind::Regression => 2 * self.num_keypoints(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_rules() {
        assert!(TaskSpec::segmentation("s", 2).validate().is_ok());
        assert!(TaskSpec::segmentation("s", 1).validate().is_err());
        assert!(TaskSpec::regression("r", 0).validate().is_err());
        assert!(TaskSpec::detection("d").validate().is_ok());
        let bad = TaskSpec {
            classes: Some(3),
            ..TaskSpec::detection("d")
        };
        let err = bad.validate().unwrap_err();
        assert!(err.to_string().contains("tasks.d.classes"));
        assert!(TaskSpec::classification("has space", 2).validate().is_err());
    }

    #[test]
    fn output_widths() {
        assert_eq!(TaskSpec::classification("c", 3).output_width(), 3);
        assert_eq!(TaskSpec::regression("r", 2).output_width(), 4);
        assert_eq!(TaskSpec::detection("d").output_width(), 5);
    }

    #[test]
    fn kind_parses_snake_case() {
        let t: TaskSpec =
            serde_json::from_str(r#"{"id":"a","kind":"regression","keypoints":2}"#).unwrap();
        assert_eq!(t.kind, TaskKind::Regression);
        assert!(serde_json::from_str::<TaskSpec>(r#"{"id":"a","kind":"ranking"}"#).is_err());
    }
}
