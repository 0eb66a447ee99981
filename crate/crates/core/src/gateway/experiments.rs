//! Headless comparison experiments. Each one runs a small set of episodes
//! that differ in a single knob and reports per-run metrics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cost::{builtin_task, parse_task, TaskSpec};
use crate::derivs::FdScheme;
use crate::dynamics::{builtin_model, Dynamics, Model};
use crate::runtime::{
    run_episode, ClockConfig, ClockMode, DisturbanceEvent, EpisodeConfig, EpisodeLog,
    EpisodeSummary, EstimatorConfig, RuntimeError,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    FeedbackAblation,
    SlipSweep,
    SkipSweep,
    FdSchemeCompare,
    Swingup,
    WalkToTarget,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        Self::FeedbackAblation,
        Self::SlipSweep,
        Self::SkipSweep,
        Self::FdSchemeCompare,
        Self::Swingup,
        Self::WalkToTarget,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::FeedbackAblation => "feedback_ablation",
            Self::SlipSweep => "slip_sweep",
            Self::SkipSweep => "skip_sweep",
            Self::FdSchemeCompare => "fd_scheme_compare",
            Self::Swingup => "swingup",
            Self::WalkToTarget => "walk_to_target",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    fn default_tasks(self) -> &'static [&'static str] {
        match self {
            Self::FeedbackAblation => &["biped_trot"],
            Self::SlipSweep | Self::SkipSweep | Self::FdSchemeCompare => &["biped_stand"],
            Self::Swingup => &["pendulum_swingup", "cartpole_swingup"],
            Self::WalkToTarget => &["biped_walk"],
        }
    }

    fn default_duration(self) -> f64 {
        match self {
            Self::FeedbackAblation => 4.0,
            Self::SlipSweep | Self::FdSchemeCompare => 2.0,
            Self::SkipSweep => 3.0,
            Self::Swingup => 3.0,
            Self::WalkToTarget => 5.0,
        }
    }

    fn default_values(self) -> Vec<f64> {
        match self {
            Self::SlipSweep => vec![1.0, 100.0],
            Self::SkipSweep => vec![0.0, 1.0, 3.0],
            Self::WalkToTarget => vec![1.0],
            _ => Vec::new(),
        }
    }
}

/// Outage schedule and perturbations of the feedback ablation. Both arms
/// see the same planner outages and pushes; only the gains differ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationParams {
    /// s
    pub first_outage: f64,
    /// s
    pub outage_length: f64,
    /// s, start to start
    pub outage_every: f64,
    /// Horizontal torso impulse at each outage start, alternating sign, N·s.
    pub push: f64,
    /// Ticks after an outage that still count toward the window cost, s.
    pub window_tail: f64,
    /// m; the pitch noise is twice this in rad.
    pub pose_noise: f64,
}

impl Default for AblationParams {
    fn default() -> Self {
        Self {
            first_outage: 0.5,
            outage_length: 0.2,
            outage_every: 0.7,
            push: 0.5,
            window_tail: 0.1,
            pose_noise: 0.0002,
        }
    }
}

/// An experiment file.
///
/// ```toml
/// experiment = "slip_sweep"
/// task = "biped_stand"
/// seeds = [0]
/// duration = 2.0
/// values = [1.0, 100.0]
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub experiment: ExperimentKind,
    /// Builtin task name; the experiment's default when absent.
    #[serde(default)]
    pub task: Option<String>,
    /// Task file, resolved relative to the experiment file. Overrides `task`.
    #[serde(default)]
    pub task_file: Option<PathBuf>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// s
    #[serde(default)]
    pub duration: Option<f64>,
    /// Sweep values: slip stiffness, skip_deriv, or goal x.
    #[serde(default)]
    pub values: Option<Vec<f64>>,
    #[serde(default)]
    pub clock: Option<ClockConfig>,
    /// Overrides `clock.mode` without replacing the rates.
    #[serde(default)]
    pub mode: Option<ClockMode>,
    #[serde(default)]
    pub estimator: Option<EstimatorConfig>,
    #[serde(default)]
    pub ablation: AblationParams,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl ExperimentSpec {
    pub fn new(experiment: ExperimentKind) -> Self {
        Self {
            experiment,
            task: None,
            task_file: None,
            seeds: default_seeds(),
            duration: None,
            values: None,
            clock: None,
            mode: None,
            estimator: None,
            ablation: AblationParams::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, RuntimeError> {
        toml::from_str(text).map_err(|e| RuntimeError::config("experiment", e.to_string()))
    }

    /// Reads an experiment file and resolves `task_file` against its folder.
    pub fn load(path: &Path) -> Result<Self, RuntimeError> {
        let mut spec = Self::parse(&std::fs::read_to_string(path)?)?;
        if let (Some(tf), Some(dir)) = (&spec.task_file, path.parent()) {
            spec.task_file = Some(dir.join(tf));
        }
        Ok(spec)
    }

    pub fn duration(&self) -> f64 {
        self.duration
            .unwrap_or_else(|| self.experiment.default_duration())
    }

    pub fn values(&self) -> Vec<f64> {
        self.values
            .clone()
            .unwrap_or_else(|| self.experiment.default_values())
    }

    pub fn tasks(&self) -> Result<Vec<TaskSpec>, RuntimeError> {
        if let Some(path) = &self.task_file {
            let text = std::fs::read_to_string(path)?;
            return parse_task(&text)
                .map(|t| vec![t])
                .map_err(|e| RuntimeError::config("task_file", e.to_string()));
        }
        let names: Vec<&str> = match &self.task {
            Some(t) => vec![t.as_str()],
            None => self.experiment.default_tasks().to_vec(),
        };
        names
            .into_iter()
            .map(|n| {
                builtin_task(n)
                    .ok_or_else(|| RuntimeError::config("task", format!("unknown task '{n}'")))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), RuntimeError> {
        if self.seeds.is_empty() {
            return Err(RuntimeError::config(
                "seeds",
                "at least one seed is required",
            ));
        }
        let d = self.duration();
        if !(d.is_finite() && d > 0.0) {
            return Err(RuntimeError::config(
                "duration",
                format!("must be > 0 (got {d})"),
            ));
        }
        let values = self.values();
        match self.experiment {
            ExperimentKind::SlipSweep if values.iter().any(|&v| !(v.is_finite() && v >= 1.0)) => {
                return Err(RuntimeError::config(
                    "values",
                    "slip stiffness must be >= 1",
                ));
            }
            ExperimentKind::SkipSweep
                if values
                    .iter()
                    .any(|&v| !(v >= 0.0 && v.fract() == 0.0 && v < 1e6)) =>
            {
                return Err(RuntimeError::config(
                    "values",
                    "skip_deriv must be a non-negative integer",
                ));
            }
            ExperimentKind::SlipSweep
            | ExperimentKind::SkipSweep
            | ExperimentKind::WalkToTarget
                if values.is_empty() =>
            {
                return Err(RuntimeError::config(
                    "values",
                    "sweep needs at least one value",
                ));
            }
            _ => {}
        }
        let a = &self.ablation;
        if !(a.outage_length >= 0.0
            && a.outage_every > 0.0
            && a.first_outage >= 0.0
            && a.pose_noise >= 0.0)
        {
            return Err(RuntimeError::config(
                "ablation",
                "lengths must be >= 0 and outage_every > 0",
            ));
        }
        self.tasks().map(|_| ())
    }
}

/// One episode of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    /// Setting being compared, e.g. `slip=100` or `feedback`.
    pub label: String,
    pub task: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub summary: EpisodeSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: ExperimentKind,
    pub runs: Vec<RunResult>,
}

impl ExperimentReport {
    /// Labels in first-seen order.
    pub fn labels(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.runs {
            if !out.contains(&r.label.as_str()) {
                out.push(&r.label);
            }
        }
        out
    }

    /// Mean of `metric` over the runs with `label`. NaN if there are none.
    pub fn mean(&self, label: &str, metric: &str) -> f64 {
        let v: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.label == label)
            .filter_map(|r| r.metrics.get(metric).copied())
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Markdown table of per-label metric means.
    pub fn table(&self) -> String {
        let mut metrics: Vec<&str> = Vec::new();
        for r in &self.runs {
            for k in r.metrics.keys() {
                if !metrics.contains(&k.as_str()) {
                    metrics.push(k);
                }
            }
        }
        let mut out = format!("| {} | runs |", self.experiment.name());
        for m in &metrics {
            out.push_str(&format!(" {m} |"));
        }
        out.push_str("\n|---|---|");
        out.push_str(&"---|".repeat(metrics.len()));
        out.push('\n');
        for label in self.labels() {
            let n = self.runs.iter().filter(|r| r.label == label).count();
            out.push_str(&format!("| {label} | {n} |"));
            for m in &metrics {
                out.push_str(&format!(" {:.6} |", self.mean(label, m)));
            }
            out.push('\n');
        }
        out
    }
}

/// Episode logs keyed by a file-name stem, in run order.
pub type ExperimentLogs = Vec<(String, EpisodeLog)>;

fn builtin_model_for(task: &TaskSpec) -> Result<Arc<Model>, RuntimeError> {
    let spec =
        builtin_model(&task.model).ok_or_else(|| RuntimeError::UnknownModel(task.model.clone()))?;
    Ok(Arc::new(Model::new(spec)?))
}

/// Outage windows and pushes of the feedback ablation over `duration`.
pub fn ablation_schedule(
    p: &AblationParams,
    duration: f64,
) -> (Vec<[f64; 2]>, Vec<DisturbanceEvent>) {
    let mut outages = Vec::new();
    let mut pushes = Vec::new();
    let mut sign = 1.0;
    let mut k = 0u32;
    loop {
        let start = p.first_outage + f64::from(k) * p.outage_every;
        if start >= duration {
            break;
        }
        outages.push([start, start + p.outage_length]);
        if p.push != 0.0 {
            pushes.push(DisturbanceEvent {
                time: start,
                body: 0,
                impulse: [sign * p.push, 0.0],
            });
            sign = -sign;
        }
        k += 1;
    }
    (outages, pushes)
}

/// Mean tick cost inside the windows `[start, end + tail)`.
pub fn window_cost(log: &EpisodeLog, windows: &[[f64; 2]], tail: f64) -> f64 {
    let inside: Vec<f64> = log
        .ticks()
        .filter(|t| {
            windows
                .iter()
                .any(|w| t.time >= w[0] && t.time < w[1] + tail)
        })
        .map(|t| t.cost)
        .collect();
    inside.iter().sum::<f64>() / inside.len() as f64
}

/// Plan steps logged before the first tick whose last coordinate is within
/// `tol` of `goal`. `None` if never reached.
pub fn plans_to_reach(log: &EpisodeLog, nq: usize, goal: f64, tol: f64) -> Option<usize> {
    let mut plans = 0;
    for r in &log.records {
        match r {
            crate::runtime::LogRecord::Plan(_) => plans += 1,
            crate::runtime::LogRecord::Tick(t) if (t.state[nq - 1] - goal).abs() < tol => {
                return Some(plans)
            }
            _ => {}
        }
    }
    None
}

/// Goal tolerance of the swing-up experiment, rad.
pub const SWINGUP_TOLERANCE: f64 = 0.05;

fn base_config(
    spec: &ExperimentSpec,
    task: &TaskSpec,
    model: Arc<Model>,
    seed: u64,
) -> Result<EpisodeConfig, RuntimeError> {
    let mut cfg = EpisodeConfig::new(model, task)?;
    cfg.duration = spec.duration();
    cfg.seed = seed;
    if let Some(c) = spec.clock {
        cfg.clock = c;
    }
    if let Some(m) = spec.mode {
        cfg.clock.mode = m;
    }
    if let Some(e) = spec.estimator {
        cfg.estimator = e;
    }
    Ok(cfg)
}

fn run(
    cfg: &EpisodeConfig,
    label: String,
    out: &mut (Vec<RunResult>, ExperimentLogs),
    extra: impl FnOnce(&EpisodeLog, &mut BTreeMap<String, f64>),
) -> Result<(), RuntimeError> {
    log::info!("{} seed {}: {label}", cfg.task, cfg.seed);
    let log = run_episode(cfg)?;
    let mut metrics = BTreeMap::new();
    let s = &log.summary;
    metrics.insert("mean_cost".into(), s.mean_cost);
    metrics.insert("final_cost".into(), s.final_cost);
    metrics.insert("failed".into(), if s.failed.is_some() { 1.0 } else { 0.0 });
    extra(&log, &mut metrics);
    out.0.push(RunResult {
        label: label.clone(),
        task: cfg.task.clone(),
        seed: cfg.seed,
        metrics,
        summary: log.summary.clone(),
    });
    let stem = format!(
        "{}_{}_s{}",
        cfg.task,
        label.replace(['=', ' ', '.'], "_"),
        cfg.seed
    );
    out.1.push((stem, log));
    Ok(())
}

/// Runs every episode of `spec` in simulated or wall-clock time, as its
/// clock says.
pub fn run_experiment(
    spec: &ExperimentSpec,
) -> Result<(ExperimentReport, ExperimentLogs), RuntimeError> {
    spec.validate()?;
    let mut out = (Vec::new(), Vec::new());
    for task in spec.tasks()? {
        let model = builtin_model_for(&task)?;
        for &seed in &spec.seeds {
            let base = base_config(spec, &task, model.clone(), seed)?;
            match spec.experiment {
                ExperimentKind::FeedbackAblation => {
                    let p = spec.ablation;
                    let (outages, pushes) = ablation_schedule(&p, base.duration);
                    for feedback in [true, false] {
                        let mut cfg = base.clone();
                        cfg.feedback = feedback;
                        cfg.planner_outages = outages.clone();
                        cfg.disturbances = pushes.clone();
                        if spec.estimator.is_none() {
                            cfg.estimator.position_noise_std = p.pose_noise;
                            cfg.estimator.angle_noise_std = 2.0 * p.pose_noise;
                        }
                        // Both arms must cover the same windows.
                        cfg.divergence.min_base_height = None;
                        let label = if feedback { "feedback" } else { "open_loop" };
                        run(&cfg, label.into(), &mut out, |log, m| {
                            m.insert(
                                "window_cost".into(),
                                window_cost(log, &outages, p.window_tail),
                            );
                        })?;
                    }
                }
                ExperimentKind::SlipSweep => {
                    for slip in spec.values() {
                        let mut contact = model.spec().contact;
                        contact.slip_stiffness = slip;
                        let mut cfg = base.clone();
                        cfg.model = Arc::new(model.with_contact(contact)?);
                        run(&cfg, format!("slip={slip}"), &mut out, |log, m| {
                            m.insert("mean_control_jerk".into(), log.summary.mean_control_jerk);
                            m.insert(
                                "model_derivative_time".into(),
                                log.summary.phase_means.model_derivatives,
                            );
                            m.insert("solve_time_p50".into(), log.summary.solve_time.p50);
                        })?;
                    }
                }
                ExperimentKind::SkipSweep => {
                    for skip in spec.values() {
                        let mut cfg = base.clone();
                        cfg.solver.fd.skip_deriv = skip as usize;
                        run(&cfg, format!("skip={skip}"), &mut out, |log, m| {
                            m.insert(
                                "dynamics_evaluations".into(),
                                log.summary.dynamics_evaluations as f64,
                            );
                            m.insert(
                                "model_derivative_time".into(),
                                log.summary.phase_means.model_derivatives,
                            );
                        })?;
                    }
                }
                ExperimentKind::FdSchemeCompare => {
                    for (name, scheme) in [
                        ("forward", FdScheme::Forward),
                        ("centered", FdScheme::Centered),
                    ] {
                        let mut cfg = base.clone();
                        cfg.solver.fd.scheme = scheme;
                        run(&cfg, name.into(), &mut out, |log, m| {
                            m.insert(
                                "dynamics_evaluations".into(),
                                log.summary.dynamics_evaluations as f64,
                            );
                            m.insert(
                                "model_derivative_time".into(),
                                log.summary.phase_means.model_derivatives,
                            );
                        })?;
                    }
                }
                ExperimentKind::Swingup => {
                    let mut cfg = base.clone();
                    if spec.clock.is_none() {
                        // One solve per knot.
                        cfg.clock.planner_rate = 1.0 / cfg.solver.dt;
                    }
                    let nq = model.nq();
                    let goal = std::f64::consts::PI;
                    run(&cfg, "mpc".into(), &mut out, |log, m| {
                        let reached = plans_to_reach(log, nq, goal, SWINGUP_TOLERANCE);
                        m.insert(
                            "plans_to_goal".into(),
                            reached.map_or(f64::NAN, |n| n as f64),
                        );
                        let last = log.ticks().last().map_or(f64::NAN, |t| t.state[nq - 1]);
                        m.insert("final_angle_error".into(), (last - goal).abs());
                    })?;
                }
                ExperimentKind::WalkToTarget => {
                    for x in spec.values() {
                        let mut cfg = base.clone();
                        let home = model.home_state().to_vector();
                        let head = model.features(&home, None)?.head;
                        let goal = [x, head.map_or(0.0, |h| h[1])];
                        if !cfg.cost.set_goal(goal) {
                            return Err(RuntimeError::config(
                                "task",
                                "walk_to_target needs a position term",
                            ));
                        }
                        let features_model = cfg.model.clone();
                        run(&cfg, format!("goal_x={x}"), &mut out, move |log, m| {
                            let dist = log.ticks().last().and_then(|t| {
                                let x = nalgebra::DVector::from_column_slice(&t.state);
                                features_model
                                    .features(&x, None)
                                    .ok()?
                                    .head
                                    .map(|h| (h[0] - goal[0]).abs())
                            });
                            m.insert("final_goal_distance".into(), dist.unwrap_or(f64::NAN));
                        })?;
                    }
                }
            }
        }
    }
    Ok((
        ExperimentReport {
            experiment: spec.experiment,
            runs: out.0,
        },
        out.1,
    ))
}
