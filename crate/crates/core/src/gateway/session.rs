//! Transport-agnostic live session. A server feeds each client's text
//! messages to [`Session::handle`], sends the replies back to that client,
//! and broadcasts whatever [`Session::poll`] returns.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::cost::{builtin_tasks, CostSpec, ResidualKind, TaskSpec};
use crate::dynamics::{builtin_model, Dynamics, Model};
use crate::runtime::{
    ClockConfig, ClockMode, EpisodeConfig, EstimatorConfig, LiveCommand, LiveFrame, LiveOptions,
    LiveRuntime, RuntimeError,
};
use crate::solver::SolverConfig;

use super::protocol::{
    decode_client, ClientMessage, ParamPath, Role, SessionCommand, SessionParams, SessionUpdate,
    TaskInfo, PROTOCOL_VERSION,
};

pub type ClientId = u64;

pub const READ_ONLY: &str = "read-only";
pub const UNKNOWN_TERM: &str = "unknown residual term";

#[derive(Clone, Debug)]
pub struct SessionConfig {
    /// Tasks `start_task` may switch to.
    pub tasks: Vec<TaskSpec>,
    /// Task running when the session opens.
    pub task: String,
    pub clock: ClockConfig,
    pub estimator: EstimatorConfig,
    pub options: LiveOptions,
    pub seed: u64,
}

impl SessionConfig {
    /// Builtin tasks on the default wall clock.
    pub fn new(task: &str) -> Self {
        Self {
            tasks: builtin_tasks(),
            task: task.to_string(),
            clock: ClockConfig {
                mode: ClockMode::WallClock,
                ..ClockConfig::default()
            },
            estimator: EstimatorConfig::default(),
            options: LiveOptions::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Peer {
    /// Connected, no hello yet.
    Pending,
    Joined(Role),
}

/// Edits staged by one command, committed only if all of them validate.
struct Staged {
    cost: Option<CostSpec>,
    solver: Option<SolverConfig>,
    model: Option<Arc<Model>>,
    planner_rate: Option<f64>,
}

pub struct Session {
    config: SessionConfig,
    task: TaskSpec,
    episode: EpisodeConfig,
    runtime: Option<LiveRuntime>,
    peers: BTreeMap<ClientId, Peer>,
    operator: Option<ClientId>,
    next_client: ClientId,
    /// Session time at which the current runtime started. Frame times are
    /// shifted by it so they stay monotone across task switches.
    time_base: f64,
}

impl Session {
    pub fn start(config: SessionConfig) -> Result<Self, RuntimeError> {
        let task = find_task(&config.tasks, &config.task)?;
        let episode = episode_for(&config, &task, 0)?;
        let runtime = LiveRuntime::start(episode.clone(), config.options)?;
        Ok(Self {
            config,
            task,
            episode,
            runtime: Some(runtime),
            peers: BTreeMap::new(),
            operator: None,
            next_client: 1,
            time_base: 0.0,
        })
    }

    pub fn connect(&mut self) -> ClientId {
        let id = self.next_client;
        self.next_client += 1;
        self.peers.insert(id, Peer::Pending);
        id
    }

    /// Frees the operator seat if `client` held it; the next hello takes it.
    pub fn disconnect(&mut self, client: ClientId) {
        self.peers.remove(&client);
        if self.operator == Some(client) {
            self.operator = None;
        }
    }

    pub fn role(&self, client: ClientId) -> Option<Role> {
        match self.peers.get(&client)? {
            Peer::Joined(r) => Some(*r),
            Peer::Pending => None,
        }
    }

    pub fn task(&self) -> &str {
        &self.task.name
    }

    pub fn cost_version(&self) -> u64 {
        self.episode.cost.version
    }

    pub fn runtime(&self) -> &LiveRuntime {
        self.runtime.as_ref().expect("runtime is running")
    }

    pub fn params(&self) -> SessionParams {
        let cost = &self.episode.cost;
        let mut target = None;
        let mut gait_period = None;
        for t in cost.running.iter().chain(&cost.terminal) {
            match &t.kind {
                ResidualKind::Position { goal } => target = Some(*goal),
                ResidualKind::Gait { period, .. } => gait_period = Some(*period),
                _ => {}
            }
        }
        SessionParams {
            skip_deriv: self.episode.solver.fd.skip_deriv,
            fd_epsilon: self.episode.solver.fd.epsilon,
            horizon: self.episode.solver.horizon,
            slip_stiffness: self.episode.model.spec().contact.slip_stiffness,
            gait_period,
            planner_rate: self.episode.clock.planner_rate,
            target,
            weights: cost
                .running
                .iter()
                .chain(&cost.terminal)
                .map(|t| (t.name.clone(), t.weight))
                .collect(),
        }
    }

    pub fn catalog(&self) -> Vec<TaskInfo> {
        self.config
            .tasks
            .iter()
            .map(|t| TaskInfo {
                name: t.name.clone(),
                model: t.model.clone(),
                description: t.description.clone(),
            })
            .collect()
    }

    /// One text message from `client`; returns the replies for that client.
    pub fn handle(&mut self, client: ClientId, text: &str) -> Vec<SessionUpdate> {
        match decode_client(text) {
            Ok(msg) => self.handle_message(client, msg),
            Err(reason) => vec![nack(None, reason)],
        }
    }

    pub fn handle_message(&mut self, client: ClientId, msg: ClientMessage) -> Vec<SessionUpdate> {
        let Some(peer) = self.peers.get(&client).copied() else {
            return vec![nack(None, "unknown client")];
        };
        match (msg, peer) {
            (ClientMessage::Hello { protocol }, _) if protocol != PROTOCOL_VERSION => vec![nack(
                None,
                format!(
                    "unsupported protocol version {protocol} (server speaks {PROTOCOL_VERSION})"
                ),
            )],
            (ClientMessage::Hello { .. }, Peer::Joined(_)) => vec![nack(None, "already joined")],
            (ClientMessage::Hello { .. }, Peer::Pending) => {
                let role = if self.operator.is_none() {
                    self.operator = Some(client);
                    Role::Operator
                } else {
                    Role::Observer
                };
                self.peers.insert(client, Peer::Joined(role));
                vec![
                    SessionUpdate::Welcome {
                        protocol: PROTOCOL_VERSION,
                        role,
                        task: self.task.name.clone(),
                        model: self.task.model.clone(),
                        cost_version: self.cost_version(),
                        params: self.params(),
                    },
                    SessionUpdate::TaskCatalog {
                        tasks: self.catalog(),
                    },
                ]
            }
            (ClientMessage::Command { id, .. }, Peer::Pending) => {
                vec![nack(Some(id), "hello required")]
            }
            (ClientMessage::Command { id, .. }, Peer::Joined(Role::Observer)) => {
                vec![nack(Some(id), READ_ONLY)]
            }
            (ClientMessage::Command { id, command }, Peer::Joined(Role::Operator)) => {
                vec![match self.apply(command) {
                    Ok(()) => SessionUpdate::Ack {
                        id,
                        cost_version: self.cost_version(),
                        params: self.params(),
                    },
                    Err(reason) => nack(Some(id), reason),
                }]
            }
        }
    }

    /// Session time, s.
    pub fn time(&self) -> f64 {
        self.time_base + self.runtime().time()
    }

    /// Frames produced since the last poll, for every joined client.
    pub fn poll(&mut self) -> Vec<SessionUpdate> {
        let base = self.time_base;
        self.runtime()
            .drain_frames()
            .into_iter()
            .map(|f| match f {
                LiveFrame::State(mut s) => {
                    s.time += base;
                    SessionUpdate::StateFrame(s)
                }
                LiveFrame::Cost(mut c) => {
                    c.time += base;
                    SessionUpdate::CostFrame(c)
                }
                LiveFrame::Telemetry(mut t) => {
                    t.time += base;
                    SessionUpdate::Telemetry(t)
                }
            })
            .collect()
    }

    /// Stops the runtime threads.
    pub fn close(mut self) {
        if let Some(rt) = self.runtime.take() {
            rt.stop();
        }
    }

    fn apply(&mut self, command: SessionCommand) -> Result<(), String> {
        let rt = self.runtime();
        match command {
            SessionCommand::Pause => rt.send(LiveCommand::Pause),
            SessionCommand::Resume => rt.send(LiveCommand::Resume),
            SessionCommand::Reset => rt.send(LiveCommand::Reset),
            SessionCommand::Push { impulse, body } => {
                let links = self.episode.model.spec().links.len();
                if body >= links {
                    return Err(format!(
                        "body {body} out of range (model has {links} links)"
                    ));
                }
                if !impulse.iter().all(|v| v.is_finite()) {
                    return Err("impulse must be finite".into());
                }
                rt.send(LiveCommand::Push { body, impulse });
            }
            SessionCommand::StartTask { task } => self.start_task(&task)?,
            edit => {
                let staged = self.stage(edit)?;
                self.commit(staged);
            }
        }
        Ok(())
    }

    fn stage(&self, edit: SessionCommand) -> Result<Staged, String> {
        let mut staged = Staged {
            cost: None,
            solver: None,
            model: None,
            planner_rate: None,
        };
        let caps = self.episode.model.capabilities();
        match edit {
            SessionCommand::SetTarget { x, z } => {
                if !(x.is_finite() && z.is_finite()) {
                    return Err("target must be finite".into());
                }
                let mut cost = self.episode.cost.clone();
                if !cost.set_goal([x, z]) {
                    return Err(format!("task {} has no position term", self.task.name));
                }
                staged.cost = Some(cost);
            }
            SessionCommand::SetWeight { term, value } => {
                let mut cost = self.episode.cost.clone();
                cost.set_weight(&term, value).map_err(|e| match e {
                    crate::cost::CostError::UnknownTerm(name) => format!("{UNKNOWN_TERM} '{name}'"),
                    other => other.to_string(),
                })?;
                cost.validate(&caps).map_err(|e| e.to_string())?;
                staged.cost = Some(cost);
            }
            SessionCommand::SetParam { path, value } => {
                if !value.is_finite() {
                    return Err(format!("{} must be finite", param_name(path)));
                }
                match path {
                    ParamPath::SkipDeriv | ParamPath::HorizonT => {
                        if value < 0.0 || value.fract() != 0.0 {
                            return Err(format!(
                                "{} must be a non-negative integer",
                                param_name(path)
                            ));
                        }
                        let mut solver = self.episode.solver.clone();
                        if path == ParamPath::SkipDeriv {
                            solver.fd.skip_deriv = value as usize;
                        } else {
                            solver.horizon = value as usize;
                        }
                        solver.validate().map_err(|e| e.to_string())?;
                        staged.solver = Some(solver);
                    }
                    ParamPath::FdEpsilon => {
                        let mut solver = self.episode.solver.clone();
                        solver.fd.epsilon = value;
                        solver.validate().map_err(|e| e.to_string())?;
                        staged.solver = Some(solver);
                    }
                    ParamPath::SlipStiffness => {
                        let mut contact = self.episode.model.spec().contact;
                        contact.slip_stiffness = value;
                        let model = self
                            .episode
                            .model
                            .with_contact(contact)
                            .map_err(|e| e.to_string())?;
                        staged.model = Some(Arc::new(model));
                    }
                    ParamPath::GaitPeriod => {
                        let mut cost = self.episode.cost.clone();
                        if value <= 0.0 {
                            return Err("gait_period must be > 0".into());
                        }
                        if !cost.set_gait_period(value) {
                            return Err(format!("task {} has no gait term", self.task.name));
                        }
                        cost.validate(&caps).map_err(|e| e.to_string())?;
                        staged.cost = Some(cost);
                    }
                    ParamPath::PlannerRate => {
                        let clock = ClockConfig {
                            planner_rate: value,
                            solve_budget: None,
                            ..self.episode.clock
                        };
                        clock.validate().map_err(|e| e.to_string())?;
                        staged.planner_rate = Some(value);
                    }
                }
            }
            _ => unreachable!("only edits are staged"),
        }
        Ok(staged)
    }

    fn commit(&mut self, staged: Staged) {
        let rt = self.runtime.as_ref().expect("runtime is running");
        if let Some(model) = staged.model {
            self.episode.model = model.clone();
            rt.send(LiveCommand::SetModel(model));
        }
        if let Some(solver) = staged.solver {
            self.episode.solver = solver.clone();
            rt.send(LiveCommand::SetSolver(solver));
        }
        if let Some(rate) = staged.planner_rate {
            self.episode.clock.planner_rate = rate;
            self.episode.clock.solve_budget = None;
            rt.send(LiveCommand::SetPlannerRate(rate));
        }
        if let Some(cost) = staged.cost {
            self.episode.cost = cost.clone();
            rt.send(LiveCommand::SetCost(cost));
        }
    }

    /// Restarts the runtime on another task. Cost versions keep increasing
    /// across the switch so telemetry stays ordered.
    fn start_task(&mut self, name: &str) -> Result<(), String> {
        let task = find_task(&self.config.tasks, name).map_err(|e| e.to_string())?;
        let episode =
            episode_for(&self.config, &task, self.cost_version() + 1).map_err(|e| e.to_string())?;
        let runtime =
            LiveRuntime::start(episode.clone(), self.config.options).map_err(|e| e.to_string())?;
        if let Some(old) = self.runtime.replace(runtime) {
            self.time_base += old.time();
            old.stop();
        }
        self.task = task;
        self.episode = episode;
        Ok(())
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        if let Some(rt) = self.runtime.take() {
            rt.stop();
        }
    }
}

fn nack(id: Option<u64>, reason: impl Into<String>) -> SessionUpdate {
    SessionUpdate::Nack {
        id,
        reason: reason.into(),
    }
}

fn param_name(path: ParamPath) -> &'static str {
    match path {
        ParamPath::SkipDeriv => "skip_deriv",
        ParamPath::FdEpsilon => "fd_epsilon",
        ParamPath::HorizonT => "horizon_T",
        ParamPath::SlipStiffness => "slip_stiffness",
        ParamPath::GaitPeriod => "gait_period",
        ParamPath::PlannerRate => "planner_rate",
    }
}

fn find_task(tasks: &[TaskSpec], name: &str) -> Result<TaskSpec, RuntimeError> {
    tasks
        .iter()
        .find(|t| t.name == name)
        .cloned()
        .ok_or_else(|| RuntimeError::config("task", format!("unknown task '{name}'")))
}

/// Fixed-base tasks plan once per knot; their swing-ups need it.
fn episode_for(
    config: &SessionConfig,
    task: &TaskSpec,
    version: u64,
) -> Result<EpisodeConfig, RuntimeError> {
    let spec =
        builtin_model(&task.model).ok_or_else(|| RuntimeError::UnknownModel(task.model.clone()))?;
    let model = Arc::new(Model::new(spec)?);
    let mut ep = EpisodeConfig::new(model.clone(), task)?;
    ep.clock = config.clock;
    if model.base_dofs() == 0 {
        ep.clock.planner_rate = (1.0 / ep.solver.dt).min(ep.clock.control_rate);
        ep.clock.solve_budget = None;
    }
    ep.estimator = config.estimator;
    ep.seed = config.seed;
    ep.cost.version = version;
    ep.validate()?;
    Ok(ep)
}
