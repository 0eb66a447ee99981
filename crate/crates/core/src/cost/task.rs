//! Task definition files: a model reference plus ordered running and
//! terminal residual terms.
//!
//! ```toml
//! name = "pendulum_swingup"
//! model = "pendulum"
//!
//! [[running]]
//! name = "effort"
//! kind = "effort"
//! weight = 0.01
//!
//! [[terminal]]
//! name = "goal"
//! kind = "linear"
//! weight = 10.0
//! c = [[1.0, 0.0], [0.0, 1.0]]
//! offset = [3.14159, 0.0]
//! ```

use serde::{Deserialize, Serialize};

use super::{CostError, CostSpec, ResidualTerm};
use crate::dynamics::Capabilities;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub model: String,
    /// Initial state; the model's home state when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<Vec<f64>>,
    /// Planning horizon in knots; the solver default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(default)]
    pub running: Vec<ResidualTerm>,
    #[serde(default)]
    pub terminal: Vec<ResidualTerm>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{}{message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
pub struct TaskFileError {
    pub line: Option<usize>,
    pub message: String,
}

impl TaskSpec {
    pub fn cost(&self) -> CostSpec {
        CostSpec {
            model: self.model.clone(),
            version: 0,
            running: self.running.clone(),
            terminal: self.terminal.clone(),
        }
    }

    pub fn validate(&self, caps: &Capabilities) -> Result<(), CostError> {
        if let Some(x0) = &self.initial_state {
            if x0.len() != caps.nx || x0.iter().any(|v| !v.is_finite()) {
                return Err(CostError::InvalidTerm {
                    term: "initial_state".into(),
                    reason: format!("expected {} finite entries", caps.nx),
                });
            }
        }
        if self.horizon == Some(0) {
            return Err(CostError::InvalidTerm {
                term: "horizon".into(),
                reason: "must be >= 1".into(),
            });
        }
        self.cost().validate(caps)
    }
}

/// Parses a task file. Model-dependent checks are left to
/// [`TaskSpec::validate`].
pub fn parse_task(text: &str) -> Result<TaskSpec, TaskFileError> {
    toml::from_str(text).map_err(|e| TaskFileError {
        line: e
            .span()
            .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1),
        message: e.message().to_string(),
    })
}

pub fn task_to_toml(task: &TaskSpec) -> String {
    toml::to_string(task).expect("task serializes to TOML")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{NormKind, ResidualKind};

    #[test]
    fn module_example_parses() {
        let text = "name = \"p\"\nmodel = \"pendulum\"\n\n[[running]]\nname = \"effort\"\nkind = \"effort\"\nweight = 0.01\n\n[[terminal]]\nname = \"goal\"\nkind = \"linear\"\nweight = 10.0\nc = [[1.0, 0.0], [0.0, 1.0]]\noffset = [3.14159, 0.0]\nnorm = { smooth_l2 = { c = 0.05 } }\n";
        let task = parse_task(text).unwrap();
        assert_eq!(task.running[0].kind, ResidualKind::Effort);
        assert_eq!(task.terminal[0].norm, NormKind::SmoothL2 { c: 0.05 });
        assert_eq!(parse_task(&task_to_toml(&task)).unwrap(), task);
    }

    #[test]
    fn unknown_kind_reports_a_line() {
        let text = "name = \"p\"\nmodel = \"pendulum\"\n\n[[running]]\nname = \"x\"\nkind = \"telepathy\"\nweight = 1.0\n";
        let err = parse_task(text).unwrap_err();
        assert!(err.line.is_some(), "{err}");
        assert!(err.message.contains("telepathy"), "{err}");
    }
}
