//! Single-shooting iLQR with one warm-started iteration per plan step.

mod riccati;

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cost::{cost_derivatives, eval_cost, CostBreakdown, CostError, CostSpec};
use crate::derivs::{linearize_with_residuals, FdConfig};
use crate::dynamics::{Dynamics, DynamicsError};

pub use riccati::{backward_pass, BackwardPass, NotPositiveDefinite};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Knots.
    pub horizon: usize,
    /// Knot spacing, s.
    pub dt: f64,
    pub line_search_alphas: Vec<f64>,
    pub reg_init: f64,
    pub reg_min: f64,
    pub reg_max: f64,
    pub fd: FdConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            horizon: 35,
            dt: 0.01,
            line_search_alphas: vec![1.0, 0.5, 0.25, 0.1, 0.03, 0.01],
            reg_init: 1e-6,
            reg_min: 1e-8,
            reg_max: 1e8,
            fd: FdConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SolverError {
    #[error("invalid solver config: {0}")]
    Config(String),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("state has dimension {got}, expected {expected}")]
    StateDimension { expected: usize, got: usize },
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: String| Err(SolverError::Config(m));
        if self.horizon == 0 {
            return bad("horizon must be >= 1".into());
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad(format!("dt must be > 0 (got {})", self.dt));
        }
        let a = &self.line_search_alphas;
        if a.first() != Some(&1.0) {
            return bad("line search must start at alpha = 1".into());
        }
        if a.windows(2).any(|w| w[1] >= w[0]) || a.iter().any(|&x| !(x > 0.0 && x <= 1.0)) {
            return bad("line search alphas must descend within (0, 1]".into());
        }
        if !(self.reg_min > 0.0 && self.reg_min <= self.reg_init && self.reg_init <= self.reg_max)
            || !self.reg_max.is_finite()
        {
            return bad("need 0 < reg_min <= reg_init <= reg_max < inf".into());
        }
        self.fd.validate().map_err(SolverError::Config)
    }
}

/// Nominal states `x̄₀..x̄_T` and controls `ū₀..ū_{T−1}` starting at absolute
/// time `t0`. States are always the rollout of the controls from `x̄₀`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub t0: f64,
    pub dt: f64,
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub cost: CostBreakdown,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn total_cost(&self) -> f64 {
        self.cost.total
    }

    /// Zero-order-hold knot index for absolute time `now`, or `None` past the
    /// horizon or before `t0`.
    pub fn knot_at(&self, now: f64) -> Option<usize> {
        let k = ((now - self.t0) / self.dt + 1e-9).floor();
        (k >= 0.0 && (k as usize) < self.horizon()).then_some(k as usize)
    }
}

/// Time-varying feedback `u = ū + K (x − x̄) + α k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackPolicy {
    pub gains: Vec<DMatrix<f64>>,
    pub feedforward: Vec<DVector<f64>>,
    /// Accepted step size; 0 when no step was accepted.
    pub alpha: f64,
    /// Id of the solution this one was warm-started from (0 for none).
    pub reference_id: u64,
    /// Absolute time of the state the solve was rooted at, s.
    pub timestamp: f64,
}

impl FeedbackPolicy {
    pub fn zeros(nx: usize, nu: usize, horizon: usize) -> Self {
        Self {
            gains: vec![DMatrix::zeros(nu, nx); horizon],
            feedforward: vec![DVector::zeros(nu); horizon],
            alpha: 0.0,
            reference_id: 0,
            timestamp: 0.0,
        }
    }
}

/// Wall-clock seconds per solver phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub model_derivatives: f64,
    pub cost_derivatives: f64,
    pub backward_pass: f64,
    pub rollouts: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverTelemetry {
    pub id: u64,
    /// Absolute time the solve was rooted at, s.
    pub time: f64,
    pub cost_version: u64,
    pub alpha: f64,
    /// Regularization used by the accepted backward pass.
    pub reg: f64,
    /// Cost of the accepted trajectory.
    pub cost: f64,
    /// Cost of the re-rooted warm start the step was measured against.
    pub reference_cost: f64,
    pub expected_decrease: f64,
    pub dynamics_evaluations: usize,
    pub residual_evaluations: usize,
    pub backward_attempts: usize,
    pub degraded: Option<String>,
    /// Excluded from reproducibility comparisons.
    pub timings: PhaseTimings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanSolution {
    pub id: u64,
    pub trajectory: Trajectory,
    pub policy: FeedbackPolicy,
    pub telemetry: SolverTelemetry,
}

impl PlanSolution {
    pub fn cost_version(&self) -> u64 {
        self.telemetry.cost_version
    }

    /// Feedback control at absolute time `now` for estimated state `x`:
    /// `ū_t + K_t (x − x̄_t)` with zero-order hold inside a knot. `None` once
    /// the solution is stale.
    pub fn feedback(&self, now: f64, x: &DVector<f64>) -> Option<DVector<f64>> {
        let t = self.trajectory.knot_at(now)?;
        Some(
            &self.trajectory.controls[t] + &self.policy.gains[t] * (x - &self.trajectory.states[t]),
        )
    }
}

fn clamp_control(u: &mut DVector<f64>, bounds: &Option<(DVector<f64>, DVector<f64>)>) {
    if let Some((lo, hi)) = bounds {
        for i in 0..u.len() {
            u[i] = u[i].clamp(lo[i], hi[i]);
        }
    }
}

fn rollout(
    dynamics: &dyn Dynamics,
    x0: &DVector<f64>,
    horizon: usize,
    dt: f64,
    mut control: impl FnMut(usize, &DVector<f64>) -> DVector<f64>,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>), DynamicsError> {
    let bounds = dynamics.control_bounds();
    let mut states = Vec::with_capacity(horizon + 1);
    let mut controls = Vec::with_capacity(horizon);
    states.push(x0.clone());
    for t in 0..horizon {
        let mut u = control(t, &states[t]);
        clamp_control(&mut u, &bounds);
        let next = dynamics.step(&states[t], &u, dt)?;
        controls.push(u);
        states.push(next);
    }
    Ok((states, controls))
}

/// Rolls the nonlinear dynamics from `x0` under
/// `u_t = ū_t + K_t (x_t − x̄_t) + α k_t`, clamped to the control bounds.
pub fn forward_rollout(
    dynamics: &dyn Dynamics,
    spec: &CostSpec,
    reference: &Trajectory,
    policy: &FeedbackPolicy,
    alpha: f64,
    x0: &DVector<f64>,
) -> Result<Trajectory, DynamicsError> {
    let (states, controls) = rollout(dynamics, x0, reference.horizon(), reference.dt, |t, x| {
        &reference.controls[t]
            + &policy.gains[t] * (x - &reference.states[t])
            + &policy.feedforward[t] * alpha
    })?;
    if states.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
        return Err(DynamicsError::NonFinite);
    }
    let cost = eval_cost(
        spec,
        dynamics,
        &states,
        &controls,
        reference.t0,
        reference.dt,
    )?;
    Ok(Trajectory {
        t0: reference.t0,
        dt: reference.dt,
        states,
        controls,
        cost,
    })
}

/// Outcome of a backtracking line search.
#[derive(Clone, Debug)]
pub struct LineSearch {
    pub trajectory: Trajectory,
    /// 0 when no step decreased the cost.
    pub alpha: f64,
    pub rollouts: usize,
}

/// Tries each `alpha` in order and accepts the first rollout whose cost is
/// strictly below the reference cost. Failed rollouts count as non-improving.
pub fn line_search(
    dynamics: &dyn Dynamics,
    spec: &CostSpec,
    reference: &Trajectory,
    policy: &FeedbackPolicy,
    alphas: &[f64],
    x0: &DVector<f64>,
) -> LineSearch {
    for (i, &alpha) in alphas.iter().enumerate() {
        if let Ok(candidate) = forward_rollout(dynamics, spec, reference, policy, alpha, x0) {
            if candidate.total_cost() < reference.total_cost() {
                return LineSearch {
                    trajectory: candidate,
                    alpha,
                    rollouts: i + 1,
                };
            }
        }
    }
    LineSearch {
        trajectory: reference.clone(),
        alpha: 0.0,
        rollouts: alphas.len(),
    }
}

/// Consecutive rejected steps after which offline optimization stops.
const MAX_REJECTED: usize = 5;

/// Warm-started MPC planner. Holds the previous solution and the adaptive
/// regularization between calls.
#[derive(Clone)]
pub struct Planner {
    dynamics: Arc<dyn Dynamics>,
    config: SolverConfig,
    reg: f64,
    previous: Option<Arc<PlanSolution>>,
    seed: Option<Vec<DVector<f64>>>,
    next_id: u64,
}

impl Planner {
    pub fn new(dynamics: Arc<dyn Dynamics>, config: SolverConfig) -> Result<Self, SolverError> {
        config.validate()?;
        Ok(Self {
            reg: config.reg_init,
            dynamics,
            config,
            previous: None,
            seed: None,
            next_id: 1,
        })
    }

    /// Controls used for the first solve instead of repeating the default
    /// control.
    pub fn with_seed(mut self, controls: Vec<DVector<f64>>) -> Self {
        self.seed = Some(controls);
        self
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn set_config(&mut self, config: SolverConfig) -> Result<(), SolverError> {
        config.validate()?;
        self.reg = self.reg.clamp(config.reg_min, config.reg_max);
        self.config = config;
        Ok(())
    }

    pub fn dynamics(&self) -> &Arc<dyn Dynamics> {
        &self.dynamics
    }

    /// Swaps the model. The warm start is kept when dimensions agree.
    pub fn set_dynamics(&mut self, dynamics: Arc<dyn Dynamics>) {
        if dynamics.nx() != self.dynamics.nx() || dynamics.nu() != self.dynamics.nu() {
            self.previous = None;
        }
        self.dynamics = dynamics;
    }

    pub fn reg(&self) -> f64 {
        self.reg
    }

    pub fn previous(&self) -> Option<&Arc<PlanSolution>> {
        self.previous.as_ref()
    }

    pub fn reset(&mut self) {
        self.previous = None;
        self.reg = self.config.reg_init;
    }

    /// Warm-start controls, reference states and gains shifted to `time`,
    /// padded or truncated to the current horizon.
    fn shifted_warm(
        &self,
        time: f64,
    ) -> (
        Vec<DVector<f64>>,
        Option<(Vec<DVector<f64>>, Vec<DMatrix<f64>>)>,
    ) {
        let horizon = self.config.horizon;
        let Some(prev) = &self.previous else {
            let controls = match &self.seed {
                Some(seed) if !seed.is_empty() => (0..horizon)
                    .map(|t| seed[t.min(seed.len() - 1)].clone())
                    .collect(),
                _ => vec![self.dynamics.default_control(); horizon],
            };
            return (controls, None);
        };
        let traj = &prev.trajectory;
        let shift = ((time - traj.t0) / traj.dt + 1e-6).floor().max(0.0) as usize;
        let last = traj.horizon() - 1;
        let controls = (0..horizon)
            .map(|t| traj.controls[(t + shift).min(last)].clone())
            .collect();
        let states = (0..horizon)
            .map(|t| traj.states[(t + shift).min(last + 1)].clone())
            .collect();
        let gains = (0..horizon)
            .map(|t| prev.policy.gains[(t + shift).min(last)].clone())
            .collect();
        (controls, Some((states, gains)))
    }

    /// Re-rooted warm start: the shifted controls rolled out from `x0` under
    /// the previous feedback, falling back to open loop.
    fn reroot(
        &self,
        spec: &CostSpec,
        x0: &DVector<f64>,
        time: f64,
    ) -> Result<Trajectory, DynamicsError> {
        let dynamics = self.dynamics.as_ref();
        let (dt, horizon) = (self.config.dt, self.config.horizon);
        let (controls, feedback) = self.shifted_warm(time);
        let closed = feedback.as_ref().map(|(states, gains)| {
            rollout(dynamics, x0, horizon, dt, |t, x| {
                &controls[t] + &gains[t] * (x - &states[t])
            })
        });
        let (states, controls) = match closed {
            Some(Ok(r)) if r.0.iter().all(|x| x.iter().all(|v| v.is_finite())) => r,
            _ => rollout(dynamics, x0, horizon, dt, |t, _| controls[t].clone())?,
        };
        let cost = eval_cost(spec, dynamics, &states, &controls, time, dt)?;
        if !cost.total.is_finite() {
            return Err(DynamicsError::NonFinite);
        }
        Ok(Trajectory {
            t0: time,
            dt,
            states,
            controls,
            cost,
        })
    }

    fn publish(&mut self, solution: PlanSolution) -> Arc<PlanSolution> {
        let solution = Arc::new(solution);
        self.previous = Some(solution.clone());
        solution
    }

    /// One iLQR iteration rooted at `x0` at absolute time `time`: re-root and
    /// shift the previous solution, linearize, one backward pass, one line
    /// search. Numerical failures degrade to the re-rooted warm start with
    /// `telemetry.degraded` set; only invalid inputs are errors.
    pub fn plan_step(
        &mut self,
        spec: &CostSpec,
        x0: &DVector<f64>,
        time: f64,
    ) -> Result<Arc<PlanSolution>, SolverError> {
        let started = Instant::now();
        let dynamics = self.dynamics.clone();
        let caps = dynamics.capabilities();
        if x0.len() != caps.nx {
            return Err(SolverError::StateDimension {
                expected: caps.nx,
                got: x0.len(),
            });
        }
        spec.validate(&caps)?;
        let (nx, nu, horizon) = (caps.nx, caps.nu, self.config.horizon);
        let id = self.next_id;
        self.next_id += 1;
        let reference_id = self.previous.as_ref().map_or(0, |p| p.id);
        let mut telemetry = SolverTelemetry {
            id,
            time,
            cost_version: spec.version,
            alpha: 0.0,
            reg: self.reg,
            cost: f64::NAN,
            reference_cost: f64::NAN,
            expected_decrease: 0.0,
            dynamics_evaluations: 0,
            residual_evaluations: 0,
            backward_attempts: 0,
            degraded: None,
            timings: PhaseTimings::default(),
        };
        let mut policy = FeedbackPolicy {
            reference_id,
            timestamp: time,
            ..FeedbackPolicy::zeros(nx, nu, horizon)
        };

        let t_roll = Instant::now();
        let reference = match self.reroot(spec, x0, time) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("plan {id}: warm start rollout failed: {e}");
                telemetry.degraded = Some(format!("warm start rollout failed: {e}"));
                let trajectory = Trajectory {
                    t0: time,
                    dt: self.config.dt,
                    states: vec![x0.clone(); horizon + 1],
                    controls: self.shifted_warm(time).0,
                    cost: CostBreakdown {
                        total: f64::INFINITY,
                        terms: Vec::new(),
                    },
                };
                telemetry.timings.rollouts = t_roll.elapsed().as_secs_f64();
                telemetry.timings.total = started.elapsed().as_secs_f64();
                return Ok(self.publish(PlanSolution {
                    id,
                    trajectory,
                    policy,
                    telemetry,
                }));
            }
        };
        let mut rollout_seconds = t_roll.elapsed().as_secs_f64();
        telemetry.reference_cost = reference.total_cost();
        if let Some((_, gains)) = self.shifted_warm(time).1 {
            policy.gains = gains;
        }

        let lin = linearize_with_residuals(
            dynamics.as_ref(),
            |f, t, stage| spec.residuals(f, t, stage),
            &reference.states,
            &reference.controls,
            time,
            self.config.dt,
            &self.config.fd,
        );
        let lin = match lin {
            Ok(lin) => lin,
            Err(e) => {
                log::warn!("plan {id}: linearization failed: {e}");
                telemetry.degraded = Some(format!("linearization failed: {e}"));
                telemetry.cost = reference.total_cost();
                telemetry.timings.rollouts = rollout_seconds;
                telemetry.timings.total = started.elapsed().as_secs_f64();
                return Ok(self.publish(PlanSolution {
                    id,
                    trajectory: reference,
                    policy,
                    telemetry,
                }));
            }
        };
        telemetry.dynamics_evaluations = lin.counts.dynamics;
        telemetry.residual_evaluations = lin.counts.residual;
        let t_cd = Instant::now();
        let cd = cost_derivatives(spec, &caps, &lin);
        telemetry.timings.model_derivatives = lin.seconds - lin.residual_seconds;
        telemetry.timings.cost_derivatives = lin.residual_seconds + t_cd.elapsed().as_secs_f64();

        let t_bp = Instant::now();
        let backward = loop {
            telemetry.backward_attempts += 1;
            match backward_pass(&lin.dynamics, &cd, self.reg) {
                Ok(bp) => break Some(bp),
                Err(e) if self.reg < self.config.reg_max => {
                    log::debug!("plan {id}: {e} at reg {}", self.reg);
                    self.reg = (self.reg * 2.0).min(self.config.reg_max);
                }
                Err(e) => {
                    log::warn!("plan {id}: {e} at maximum regularization");
                    break None;
                }
            }
        };
        telemetry.timings.backward_pass = t_bp.elapsed().as_secs_f64();
        telemetry.reg = self.reg;

        let Some(bp) = backward else {
            telemetry.degraded = Some("backward pass failed at maximum regularization".into());
            telemetry.cost = reference.total_cost();
            telemetry.timings.rollouts = rollout_seconds;
            telemetry.timings.total = started.elapsed().as_secs_f64();
            return Ok(self.publish(PlanSolution {
                id,
                trajectory: reference,
                policy,
                telemetry,
            }));
        };
        policy.gains = bp.gains.clone();
        policy.feedforward = bp.feedforward.clone();

        let t_ls = Instant::now();
        let search = line_search(
            dynamics.as_ref(),
            spec,
            &reference,
            &policy,
            &self.config.line_search_alphas,
            x0,
        );
        rollout_seconds += t_ls.elapsed().as_secs_f64();
        policy.alpha = search.alpha;
        telemetry.alpha = search.alpha;
        telemetry.expected_decrease = bp.expected_decrease(search.alpha);
        if search.alpha == 0.0 {
            self.reg = (self.reg * 2.0).min(self.config.reg_max);
        } else if search.alpha == 1.0 {
            self.reg = (self.reg * 0.5).max(self.config.reg_min);
        }
        telemetry.cost = search.trajectory.total_cost();
        telemetry.timings.rollouts = rollout_seconds;
        telemetry.timings.total = started.elapsed().as_secs_f64();
        Ok(self.publish(PlanSolution {
            id,
            trajectory: search.trajectory,
            policy,
            telemetry,
        }))
    }

    /// Offline mode: repeated plan steps at a fixed root until the relative
    /// cost change drops below `tol` or `max_iters` is reached.
    pub fn optimize(
        &mut self,
        spec: &CostSpec,
        x0: &DVector<f64>,
        time: f64,
        max_iters: usize,
        tol: f64,
    ) -> Result<(Arc<PlanSolution>, usize), SolverError> {
        let mut last = self.plan_step(spec, x0, time)?;
        let mut iters = 1;
        let mut rejected = 0;
        while iters < max_iters {
            let next = self.plan_step(spec, x0, time)?;
            iters += 1;
            let change = last.telemetry.cost - next.telemetry.cost;
            rejected = if next.policy.alpha == 0.0 {
                rejected + 1
            } else {
                0
            };
            let stalled = rejected > 0 && self.reg >= self.config.reg_max;
            last = next;
            let small = change.abs() <= tol * last.telemetry.cost.abs().max(1.0);
            if (small && (rejected == 0 || rejected >= MAX_REJECTED)) || stalled {
                break;
            }
        }
        Ok((last, iters))
    }
}
