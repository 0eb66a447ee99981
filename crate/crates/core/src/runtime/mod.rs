//! MPC executive: plant, estimator, feedback controller and planner loops.
//!
//! [`SimRuntime`] interleaves the loops on one thread against simulated time
//! and is bit-reproducible for a given seed. [`LiveRuntime`] runs them on
//! their own threads against the wall clock.

mod episode;
mod estimator;
mod live;
mod log;

use std::collections::VecDeque;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::cost::CostError;
use crate::dynamics::{DynamicsError, ModelError};
use crate::solver::{PlanSolution, SolverError};

pub use episode::{run_episode, DivergenceBound, EpisodeConfig, SimRuntime, TickReport};
pub use estimator::{estimate, Estimator, EstimatorConfig};
pub use live::{CostFrame, LiveCommand, LiveFrame, LiveOptions, LiveRuntime, StateFrame};
pub use log::{
    EpisodeEnd, EpisodeHeader, EpisodeLog, EpisodeSummary, LogRecord, Percentiles, TickRecord,
    LOG_SCHEMA_VERSION,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    #[default]
    Simulated,
    WallClock,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClockConfig {
    /// Hz
    pub planner_rate: f64,
    /// Hz
    pub control_rate: f64,
    /// Hz
    pub sim_rate: f64,
    /// Delay between issuing a command and the plant seeing it, s.
    pub command_latency: f64,
    /// Simulated compute time granted to each solve, s. Defaults to one
    /// planner period. The solution becomes visible this long after the
    /// state it was rooted at.
    pub solve_budget: Option<f64>,
    pub mode: ClockMode,
}

impl Default for ClockConfig {
    fn default() -> Self {
        Self {
            planner_rate: 50.0,
            control_rate: 300.0,
            sim_rate: 1000.0,
            command_latency: 0.003,
            solve_budget: None,
            mode: ClockMode::Simulated,
        }
    }
}

impl ClockConfig {
    pub fn validate(&self) -> Result<(), RuntimeError> {
        for (name, v) in [
            ("clock.planner_rate", self.planner_rate),
            ("clock.control_rate", self.control_rate),
            ("clock.sim_rate", self.sim_rate),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(RuntimeError::config(name, format!("must be > 0 (got {v})")));
            }
        }
        if !(self.sim_rate >= self.control_rate && self.control_rate >= self.planner_rate) {
            return Err(RuntimeError::config(
                "clock",
                format!(
                    "rates must satisfy sim >= control >= planner (got {} / {} / {})",
                    self.sim_rate, self.control_rate, self.planner_rate
                ),
            ));
        }
        if !(self.command_latency.is_finite() && self.command_latency >= 0.0) {
            return Err(RuntimeError::config(
                "clock.command_latency",
                format!("must be >= 0 (got {})", self.command_latency),
            ));
        }
        if let Some(b) = self.solve_budget {
            if !(b.is_finite() && b >= 0.0 && b <= 1.0 / self.planner_rate + 1e-12) {
                return Err(RuntimeError::config(
                    "clock.solve_budget",
                    format!("must lie in [0, one planner period] (got {b})"),
                ));
            }
        }
        Ok(())
    }

    pub fn planner_period(&self) -> f64 {
        1.0 / self.planner_rate
    }

    pub fn budget(&self) -> f64 {
        self.solve_budget.unwrap_or_else(|| self.planner_period())
    }

    fn ticks(&self, seconds: f64) -> u64 {
        (seconds * self.sim_rate).round() as u64
    }
}

/// An impulse applied to the true plant state at `time`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceEvent {
    /// s
    pub time: f64,
    /// Link index.
    pub body: usize,
    /// World-frame planar impulse, N·s.
    pub impulse: [f64; 2],
}

impl DisturbanceEvent {
    pub fn validate(&self) -> Result<(), RuntimeError> {
        if !(self.time.is_finite() && self.time >= 0.0) {
            return Err(RuntimeError::config(
                "disturbance.time",
                format!("must be >= 0 (got {})", self.time),
            ));
        }
        if !self.impulse.iter().all(|p| p.is_finite()) {
            return Err(RuntimeError::config(
                "disturbance.impulse",
                "must be finite",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error("invalid {field}: {reason}")]
    Config { field: String, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("unknown model '{0}'")]
    UnknownModel(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl RuntimeError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

/// Feedback law of the control loop: `u = ū_t + K_t (x_est − x̄_t)` with the
/// knot found from `now` and held between knots. With `feedback` off the
/// gains are ignored and `ū` is replayed open loop. `None` when the solution
/// does not cover `now`.
pub fn control_tick(
    solution: &PlanSolution,
    estimate: &DVector<f64>,
    now: f64,
    feedback: bool,
) -> Option<DVector<f64>> {
    let traj = &solution.trajectory;
    let t = traj.knot_at(now)?;
    if feedback {
        solution.feedback(now, estimate)
    } else {
        Some(traj.controls[t].clone())
    }
}

/// Command issued by one control tick.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlOutput {
    pub control: DVector<f64>,
    /// Solution the command came from; `None` for the startup command.
    pub solution: Option<u64>,
    /// The active solution no longer covered `now`, so the last command was
    /// held.
    pub stale: bool,
}

/// Control loop state: holds the last command across stale ticks.
#[derive(Clone, Debug)]
pub struct Controller {
    feedback: bool,
    last: ControlOutput,
}

impl Controller {
    pub fn new(initial: DVector<f64>, feedback: bool) -> Self {
        Self {
            feedback,
            last: ControlOutput {
                control: initial,
                solution: None,
                stale: false,
            },
        }
    }

    pub fn feedback(&self) -> bool {
        self.feedback
    }

    pub fn set_feedback(&mut self, on: bool) {
        self.feedback = on;
    }

    pub fn tick(
        &mut self,
        solution: Option<&PlanSolution>,
        estimate: Option<&DVector<f64>>,
        now: f64,
    ) -> ControlOutput {
        let fresh = solution
            .zip(estimate)
            .and_then(|(sol, est)| control_tick(sol, est, now, self.feedback).map(|u| (u, sol.id)));
        self.last = match fresh {
            Some((control, id)) => ControlOutput {
                control,
                solution: Some(id),
                stale: false,
            },
            None => ControlOutput {
                stale: solution.is_some(),
                ..self.last.clone()
            },
        };
        self.last.clone()
    }

    pub fn reset(&mut self, initial: DVector<f64>) {
        self.last = ControlOutput {
            control: initial,
            solution: None,
            stale: false,
        };
    }
}

/// Commands in flight between the controller and the plant.
#[derive(Clone, Debug, Default)]
pub struct LatencyLine<T> {
    queue: VecDeque<(u64, T)>,
}

impl<T> LatencyLine<T> {
    pub fn new() -> Self {
        Self {
            queue: VecDeque::new(),
        }
    }

    pub fn push(&mut self, due: u64, item: T) {
        self.queue.push_back((due, item));
    }

    /// Newest item due at or before `tick`; older due items are dropped.
    pub fn pop_due(&mut self, tick: u64) -> Option<T> {
        let mut out = None;
        while self.queue.front().is_some_and(|(due, _)| *due <= tick) {
            out = self.queue.pop_front().map(|(_, item)| item);
        }
        out
    }

    pub fn clear(&mut self) {
        self.queue.clear();
    }
}

/// First sim tick at or after the `k`-th event of a loop running at `rate`.
fn event_tick(k: u64, rate: f64, sim_rate: f64) -> u64 {
    ((k as f64) * sim_rate / rate - 1e-9).ceil().max(0.0) as u64
}

/// Fires at exactly `rate` events per simulated second on the sim tick grid.
#[derive(Clone, Debug)]
struct Schedule {
    rate: f64,
    sim_rate: f64,
    next: u64,
}

impl Schedule {
    fn new(rate: f64, sim_rate: f64) -> Self {
        Self {
            rate,
            sim_rate,
            next: 0,
        }
    }

    fn due(&mut self, tick: u64) -> bool {
        if event_tick(self.next, self.rate, self.sim_rate) <= tick {
            self.next += 1;
            true
        } else {
            false
        }
    }
}
