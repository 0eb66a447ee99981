//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use wbmpc::cost::builtin_task;
use wbmpc::dynamics::builtin_model;
use wbmpc::{CostSpec, DVector, Model, Planner, SolverConfig};

/// A planner on `task` warmed up for `iterations` steps from the task's
/// initial state, with the state and time to continue from.
pub fn warm_planner(task: &str, iterations: usize) -> (Planner, CostSpec, DVector<f64>, f64) {
    let spec = builtin_task(task).expect("builtin task");
    let model = Arc::new(
        Model::new(builtin_model(&spec.model).expect("builtin model")).expect("valid model"),
    );
    let mut config = SolverConfig::default();
    if let Some(h) = spec.horizon {
        config.horizon = h;
    }
    let cost = spec.cost();
    let x = spec
        .initial_state
        .as_ref()
        .map(|v| DVector::from_column_slice(v))
        .unwrap_or_else(|| model.home_state().to_vector());
    let mut planner = Planner::new(model, config).expect("valid solver config");
    for _ in 0..iterations {
        planner.plan_step(&cost, &x, 0.0).expect("plan step");
    }
    (planner, cost, x, 0.0)
}
