use std::sync::Arc;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::log::{EpisodeEnd, EpisodeHeader, EpisodeLog, LogRecord, TickRecord};
use super::{
    ClockConfig, ClockMode, ControlOutput, Controller, DisturbanceEvent, Estimator,
    EstimatorConfig, LatencyLine, RuntimeError, Schedule,
};
use crate::cost::{CostSpec, TaskSpec};
use crate::derivs::ResidualStage;
use crate::dynamics::{apply_impulse, builtin_model, step, Dynamics, Model, State};
use crate::solver::{PlanSolution, Planner, SolverConfig};

/// When the plant counts as diverged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DivergenceBound {
    /// Max-abs bound on the state vector.
    pub state_bound: f64,
    /// Floating-base models fail once the base drops below this height, m.
    pub min_base_height: Option<f64>,
}

impl Default for DivergenceBound {
    fn default() -> Self {
        Self {
            state_bound: 1e3,
            min_base_height: None,
        }
    }
}

/// Everything one episode needs.
#[derive(Clone)]
pub struct EpisodeConfig {
    pub task: String,
    pub model: Arc<Model>,
    pub cost: CostSpec,
    pub solver: SolverConfig,
    /// Defaults to the model's home state.
    pub initial_state: Option<DVector<f64>>,
    pub clock: ClockConfig,
    pub estimator: EstimatorConfig,
    pub disturbances: Vec<DisturbanceEvent>,
    /// Apply the TV-LQR gains; off replays `ū` open loop.
    pub feedback: bool,
    /// Planner stops solving from this time on.
    pub freeze_planner_at: Option<f64>,
    /// `[start, end)` intervals during which the planner does not solve and
    /// the control loop keeps using the last released solution.
    pub planner_outages: Vec<[f64; 2]>,
    /// Offline iterations at the initial state before the clock starts.
    pub warmup_iterations: usize,
    /// s
    pub duration: f64,
    pub seed: u64,
    pub divergence: DivergenceBound,
}

impl std::fmt::Debug for EpisodeConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EpisodeConfig")
            .field("task", &self.task)
            .field("model", &self.model.name())
            .field("clock", &self.clock)
            .field("estimator", &self.estimator)
            .field("feedback", &self.feedback)
            .field("duration", &self.duration)
            .field("seed", &self.seed)
            .finish_non_exhaustive()
    }
}

impl EpisodeConfig {
    /// Defaults around a task: solver horizon and initial state from the
    /// task, a fall bound at half the home base height for floating bases.
    pub fn new(model: Arc<Model>, task: &TaskSpec) -> Result<Self, RuntimeError> {
        task.validate(&model.capabilities())?;
        let mut solver = SolverConfig::default();
        if let Some(h) = task.horizon {
            solver.horizon = h;
        }
        let initial_state = task
            .initial_state
            .as_ref()
            .map(|x| DVector::from_column_slice(x));
        let min_base_height = (model.base_dofs() == 3).then(|| 0.5 * model.home_state().q[1]);
        Ok(Self {
            task: task.name.clone(),
            cost: task.cost(),
            solver,
            initial_state,
            clock: ClockConfig::default(),
            estimator: EstimatorConfig::default(),
            disturbances: Vec::new(),
            feedback: true,
            freeze_planner_at: None,
            planner_outages: Vec::new(),
            warmup_iterations: 0,
            duration: 5.0,
            seed: 0,
            divergence: DivergenceBound {
                min_base_height,
                ..DivergenceBound::default()
            },
            model,
        })
    }

    /// As [`Self::new`] with the task's builtin model.
    pub fn from_task(task: &TaskSpec) -> Result<Self, RuntimeError> {
        let spec = builtin_model(&task.model)
            .ok_or_else(|| RuntimeError::UnknownModel(task.model.clone()))?;
        Self::new(Arc::new(Model::new(spec)?), task)
    }

    pub fn validate(&self) -> Result<(), RuntimeError> {
        self.clock.validate()?;
        self.estimator.validate(self.clock.sim_rate)?;
        self.solver.validate()?;
        self.cost.validate(&self.model.capabilities())?;
        for d in &self.disturbances {
            d.validate()?;
            if d.body >= self.model.spec().links.len() {
                return Err(RuntimeError::config(
                    "disturbance.body",
                    format!("link {} out of range", d.body),
                ));
            }
        }
        for w in &self.planner_outages {
            if !(w[0].is_finite() && w[1].is_finite() && 0.0 <= w[0] && w[0] <= w[1]) {
                return Err(RuntimeError::config(
                    "planner_outages",
                    format!("window {w:?} must satisfy 0 <= start <= end"),
                ));
            }
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(RuntimeError::config(
                "duration",
                format!("must be > 0 (got {})", self.duration),
            ));
        }
        if let Some(x) = &self.initial_state {
            if x.len() != self.model.nx() || !x.iter().all(|v| v.is_finite()) {
                return Err(RuntimeError::config(
                    "initial_state",
                    format!("needs {} finite entries", self.model.nx()),
                ));
            }
        }
        Ok(())
    }
}

/// What happened during one sim tick.
#[derive(Clone, Debug, PartialEq)]
pub struct TickReport {
    pub time: f64,
    /// Command issued by the control loop this tick, if it ran.
    pub issued: Option<ControlOutput>,
    /// Id of a solve started this tick.
    pub planned: Option<u64>,
    /// The applied command changed this tick.
    pub applied: bool,
}

/// Single-threaded simulated-time executive. Per sim tick, in order:
/// disturbances, measurement, solution release, planner, control, command
/// delivery, log, plant step.
pub struct SimRuntime {
    cfg: EpisodeConfig,
    planner: Planner,
    cost: CostSpec,
    state: State,
    estimator: Estimator,
    controller: Controller,
    line: LatencyLine<ControlOutput>,
    applied: ControlOutput,
    active: Option<Arc<PlanSolution>>,
    pending: Option<(u64, Arc<PlanSolution>)>,
    plan_schedule: Schedule,
    control_schedule: Schedule,
    measure_schedule: Schedule,
    latency_ticks: u64,
    budget_ticks: u64,
    tick: u64,
    rng: ChaCha8Rng,
    position_noise: Normal<f64>,
    angle_noise: Normal<f64>,
    disturbances: Vec<DisturbanceEvent>,
    next_disturbance: usize,
    records: Vec<LogRecord>,
    failed: Option<String>,
}

impl SimRuntime {
    pub fn new(cfg: EpisodeConfig) -> Result<Self, RuntimeError> {
        cfg.validate()?;
        let model = cfg.model.clone();
        let mut planner = Planner::new(model.clone(), cfg.solver.clone())?;
        let x0 = cfg
            .initial_state
            .clone()
            .unwrap_or_else(|| model.home_state().to_vector());
        let mut active = None;
        let mut records = Vec::new();
        if cfg.warmup_iterations > 0 {
            let (sol, _) = planner.optimize(&cfg.cost, &x0, 0.0, cfg.warmup_iterations, 0.0)?;
            records.push(LogRecord::Plan(sol.telemetry.clone()));
            active = Some(sol);
        }
        let mut disturbances = cfg.disturbances.clone();
        disturbances.sort_by(|a, b| a.time.total_cmp(&b.time));
        let clock = cfg.clock;
        let noise = |std: f64| Normal::new(0.0, std).expect("validated noise std");
        let home_control = model.home_control();
        Ok(Self {
            planner,
            cost: cfg.cost.clone(),
            state: State::from_vector(&x0),
            estimator: Estimator::new(model.nq(), cfg.estimator),
            controller: Controller::new(home_control.clone(), cfg.feedback),
            line: LatencyLine::new(),
            applied: ControlOutput {
                control: home_control,
                solution: None,
                stale: false,
            },
            active,
            pending: None,
            plan_schedule: Schedule::new(clock.planner_rate, clock.sim_rate),
            control_schedule: Schedule::new(clock.control_rate, clock.sim_rate),
            measure_schedule: Schedule::new(cfg.estimator.measurement_rate, clock.sim_rate),
            latency_ticks: clock.ticks(clock.command_latency),
            budget_ticks: clock.ticks(clock.budget()),
            tick: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            position_noise: noise(cfg.estimator.position_noise_std),
            angle_noise: noise(cfg.estimator.angle_noise_std),
            disturbances,
            next_disturbance: 0,
            records,
            failed: None,
            cfg,
        })
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 / self.cfg.clock.sim_rate
    }

    pub fn state(&self) -> &State {
        &self.state
    }

    pub fn estimate(&self) -> Option<DVector<f64>> {
        self.estimator.state()
    }

    pub fn applied(&self) -> &ControlOutput {
        &self.applied
    }

    pub fn active_solution(&self) -> Option<&Arc<PlanSolution>> {
        self.active.as_ref()
    }

    pub fn cost(&self) -> &CostSpec {
        &self.cost
    }

    /// Takes effect at the next plan step.
    pub fn set_cost(&mut self, cost: CostSpec) -> Result<(), RuntimeError> {
        cost.validate(&self.cfg.model.capabilities())?;
        self.cost = cost;
        Ok(())
    }

    pub fn failed(&self) -> Option<&str> {
        self.failed.as_deref()
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    fn measure(&mut self, t: f64) {
        let mut q = self.state.q.clone();
        if self.cfg.model.base_dofs() == 3 {
            q[0] += self.position_noise.sample(&mut self.rng);
            q[1] += self.position_noise.sample(&mut self.rng);
            q[2] += self.angle_noise.sample(&mut self.rng);
        }
        self.estimator.update(t, &q);
    }

    fn check_divergence(&self) -> Option<String> {
        let bound = &self.cfg.divergence;
        let peak = self.state.q.amax().max(self.state.v.amax());
        if !self.state.is_finite() || peak > bound.state_bound {
            return Some(format!("state exceeded bound {}", bound.state_bound));
        }
        match bound.min_base_height {
            Some(h) if self.state.q[1] < h => Some(format!("base fell below {h} m")),
            _ => None,
        }
    }

    /// Advances one sim tick. Does nothing once the episode has failed.
    pub fn step(&mut self) -> TickReport {
        let n = self.tick;
        let t = self.time();
        let sim_dt = 1.0 / self.cfg.clock.sim_rate;
        let mut report = TickReport {
            time: t,
            issued: None,
            planned: None,
            applied: false,
        };
        if self.failed.is_some() {
            return report;
        }

        while let Some(d) = self.disturbances.get(self.next_disturbance).copied() {
            if d.time > t + 0.5 * sim_dt {
                break;
            }
            self.next_disturbance += 1;
            match apply_impulse(&self.cfg.model, &self.state, d.body, d.impulse) {
                Ok(s) => self.state = s,
                Err(e) => {
                    self.failed = Some(format!("disturbance failed: {e}"));
                    return report;
                }
            }
            self.records.push(LogRecord::Disturbance(d));
        }

        if self.measure_schedule.due(n) {
            self.measure(t);
        }

        if self.pending.as_ref().is_some_and(|(due, _)| *due <= n) {
            self.active = self.pending.take().map(|(_, s)| s);
        }

        let eps = 0.5 * sim_dt;
        let frozen = self.cfg.freeze_planner_at.is_some_and(|tf| t >= tf - eps)
            || self
                .cfg
                .planner_outages
                .iter()
                .any(|w| t >= w[0] - eps && t < w[1] - eps);
        if self.plan_schedule.due(n) && !frozen {
            if let Some(x0) = self.estimator.state() {
                match self.planner.plan_step(&self.cost, &x0, t) {
                    Ok(sol) => {
                        report.planned = Some(sol.id);
                        self.records.push(LogRecord::Plan(sol.telemetry.clone()));
                        if self.budget_ticks == 0 {
                            self.active = Some(sol);
                        } else {
                            self.pending = Some((n + self.budget_ticks, sol));
                        }
                    }
                    Err(e) => {
                        self.failed = Some(format!("planner error: {e}"));
                        return report;
                    }
                }
            }
        }

        let mut issued = None;
        if self.control_schedule.due(n) {
            let est = self.estimator.state();
            let out = self
                .controller
                .tick(self.active.as_deref(), est.as_ref(), t);
            issued = Some(out.stale);
            report.issued = Some(out.clone());
            self.line.push(n + self.latency_ticks, out);
        }
        if let Some(out) = self.line.pop_due(n) {
            report.applied = out.control != self.applied.control;
            self.applied = out;
        }

        if let Some(stale) = issued {
            let record = self.tick_record(t, stale);
            self.records.push(LogRecord::Tick(record));
        }

        match step(&self.cfg.model, &self.state, &self.applied.control, sim_dt) {
            Ok(s) => self.state = s,
            Err(e) => self.failed = Some(format!("plant step failed: {e}")),
        }
        self.tick += 1;
        if self.failed.is_none() {
            self.failed = self.check_divergence();
        }
        report
    }

    fn tick_record(&self, t: f64, stale: bool) -> TickRecord {
        let x = self.state.to_vector();
        let terms = self
            .cfg
            .model
            .features(&x, Some(&self.applied.control))
            .map(|f| self.cost.knot_costs(&f, t, ResidualStage::Running))
            .unwrap_or_else(|_| vec![f64::INFINITY; self.cost.running.len()]);
        TickRecord {
            time: t,
            state: x.as_slice().to_vec(),
            estimate: self
                .estimator
                .state()
                .map_or_else(Vec::new, |e| e.as_slice().to_vec()),
            control: self.applied.control.as_slice().to_vec(),
            solution: self.applied.solution,
            stale,
            cost: terms.iter().sum(),
            terms,
        }
    }

    /// Runs until `duration` or failure and returns the log.
    pub fn run(mut self) -> EpisodeLog {
        let ticks = self.cfg.clock.ticks(self.cfg.duration);
        while self.tick < ticks && self.failed.is_none() {
            self.step();
        }
        self.finish()
    }

    pub fn finish(mut self) -> EpisodeLog {
        let header = EpisodeHeader {
            schema: super::LOG_SCHEMA_VERSION,
            task: self.cfg.task.clone(),
            model: self.cfg.model.name().to_string(),
            seed: self.cfg.seed,
            feedback: self.cfg.feedback,
            clock: self.cfg.clock,
            estimator: self.cfg.estimator,
            terms: self.cost.running.iter().map(|t| t.name.clone()).collect(),
        };
        self.records.push(LogRecord::End(EpisodeEnd {
            duration: self.time(),
            failed: self.failed.clone(),
        }));
        EpisodeLog::finish(header, self.records)
    }
}

/// Runs one episode in the clock mode `cfg.clock.mode` selects. Only
/// simulated time is reproducible.
pub fn run_episode(cfg: &EpisodeConfig) -> Result<EpisodeLog, RuntimeError> {
    match cfg.clock.mode {
        ClockMode::Simulated => Ok(SimRuntime::new(cfg.clone())?.run()),
        ClockMode::WallClock => super::live::run_wall_clock(cfg),
    }
}
