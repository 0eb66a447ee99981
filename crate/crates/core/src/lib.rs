//! Whole-body model-predictive control with single-iteration iLQR.

pub mod cost;
pub mod derivs;
pub mod dynamics;
pub mod gateway;
pub mod runtime;
pub mod solver;

pub use cost::{CostSpec, NormKind, ResidualKind, ResidualTerm, TaskSpec};
pub use derivs::{FdConfig, FdScheme};
pub use dynamics::{Dynamics, Model, ModelSpec, State};
pub use runtime::{run_episode, ClockConfig, EpisodeConfig, EpisodeLog, EstimatorConfig};
pub use solver::{FeedbackPolicy, PlanSolution, Planner, SolverConfig, Trajectory};

/// The linear-algebra crate used in every public signature.
pub use nalgebra;
pub use nalgebra::{DMatrix, DVector};
