//! Wall-clock executive. Plant+estimator, controller and planner each run on
//! their own thread and meet only at three latest-value mailboxes (estimate,
//! solution, command queue into the plant) and the append-only log.

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::log::{EpisodeEnd, EpisodeHeader, EpisodeLog, LogRecord, TickRecord};
use super::{
    ControlOutput, Controller, EpisodeConfig, Estimator, LatencyLine, RuntimeError, Schedule,
};
use crate::cost::CostSpec;
use crate::derivs::ResidualStage;
use crate::dynamics::{apply_impulse, contact_force, step, ContactForce, Dynamics, Model, State};
use crate::solver::{PlanSolution, Planner, SolverConfig, SolverTelemetry};

/// Edits and control-flow requests. Cost, model and solver edits reach the
/// planner between plan steps.
#[derive(Clone, Debug)]
pub enum LiveCommand {
    SetCost(CostSpec),
    SetSolver(SolverConfig),
    SetModel(Arc<Model>),
    SetPlannerRate(f64),
    SetFeedback(bool),
    Push {
        body: usize,
        impulse: [f64; 2],
    },
    Pause,
    Resume,
    /// Back to the initial state; the planner drops its warm start.
    Reset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    pub time: f64,
    pub state: Vec<f64>,
    pub estimate: Vec<f64>,
    /// States of the active plan, knot by knot.
    pub planned: Vec<Vec<f64>>,
    pub contacts: Vec<ContactForce>,
    pub paused: bool,
    pub failed: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostFrame {
    pub time: f64,
    pub total: f64,
    /// Running terms by name.
    pub terms: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LiveFrame {
    State(StateFrame),
    Cost(CostFrame),
    Telemetry(SolverTelemetry),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LiveOptions {
    /// State and cost frames per second.
    pub stream_rate: f64,
    /// Frames kept for a slow reader before the oldest are dropped.
    pub frame_capacity: usize,
    /// Keep an [`EpisodeLog`]; off for open-ended sessions.
    pub record: bool,
}

impl Default for LiveOptions {
    fn default() -> Self {
        Self {
            stream_rate: 30.0,
            frame_capacity: 256,
            record: false,
        }
    }
}

struct Mailbox<T>(Mutex<Option<T>>);

impl<T: Clone> Mailbox<T> {
    fn new() -> Self {
        Self(Mutex::new(None))
    }

    fn put(&self, v: T) {
        *lock(&self.0) = Some(v);
    }

    fn get(&self) -> Option<T> {
        lock(&self.0).clone()
    }

    fn clear(&self) {
        *lock(&self.0) = None;
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

struct Shared {
    /// Simulated seconds, as f64 bits.
    time: AtomicU64,
    /// Bumped by every reset; stale messages from older epochs are ignored.
    epoch: AtomicU64,
    paused: AtomicBool,
    stop: AtomicBool,
    feedback: AtomicBool,
    estimate: Mailbox<(u64, f64, DVector<f64>)>,
    solution: Mailbox<(u64, Arc<PlanSolution>)>,
    failed: Mutex<Option<String>>,
    frames: Mutex<VecDeque<LiveFrame>>,
    dropped: AtomicU64,
    capacity: usize,
    log: Option<Mutex<Vec<LogRecord>>>,
}

impl Shared {
    fn time(&self) -> f64 {
        f64::from_bits(self.time.load(Ordering::Acquire))
    }

    fn emit(&self, frame: LiveFrame) {
        let mut q = lock(&self.frames);
        if q.len() >= self.capacity {
            q.pop_front();
            self.dropped.fetch_add(1, Ordering::Relaxed);
        }
        q.push_back(frame);
    }

    fn record(&self, r: LogRecord) {
        if let Some(log) = &self.log {
            lock(log).push(r);
        }
    }

    fn stopping(&self) -> bool {
        self.stop.load(Ordering::Acquire)
    }
}

enum PlantMsg {
    Command(u64, f64, ControlOutput),
    Live(LiveCommand),
}

/// Handle to a running wall-clock session.
pub struct LiveRuntime {
    shared: Arc<Shared>,
    plant_tx: Sender<PlantMsg>,
    planner_tx: Sender<LiveCommand>,
    threads: Vec<JoinHandle<()>>,
    header: EpisodeHeader,
}

impl LiveRuntime {
    pub fn start(cfg: EpisodeConfig, opts: LiveOptions) -> Result<Self, RuntimeError> {
        cfg.validate()?;
        if !(opts.stream_rate.is_finite() && opts.stream_rate > 0.0) {
            return Err(RuntimeError::config("stream_rate", "must be > 0"));
        }
        let planner = Planner::new(cfg.model.clone(), cfg.solver.clone())?;
        let shared = Arc::new(Shared {
            time: AtomicU64::new(0f64.to_bits()),
            epoch: AtomicU64::new(0),
            paused: AtomicBool::new(false),
            stop: AtomicBool::new(false),
            feedback: AtomicBool::new(cfg.feedback),
            estimate: Mailbox::new(),
            solution: Mailbox::new(),
            failed: Mutex::new(None),
            frames: Mutex::new(VecDeque::new()),
            dropped: AtomicU64::new(0),
            capacity: opts.frame_capacity.max(1),
            log: opts.record.then(|| Mutex::new(Vec::new())),
        });
        let header = EpisodeHeader {
            schema: super::LOG_SCHEMA_VERSION,
            task: cfg.task.clone(),
            model: cfg.model.name().to_string(),
            seed: cfg.seed,
            feedback: cfg.feedback,
            clock: cfg.clock,
            estimator: cfg.estimator,
            terms: cfg.cost.running.iter().map(|t| t.name.clone()).collect(),
        };
        let (plant_tx, plant_rx) = mpsc::channel();
        let (planner_tx, planner_rx) = mpsc::channel();
        let plant = PlantLoop::new(&cfg, opts, shared.clone(), plant_rx);
        let planner_loop = PlannerLoop {
            planner,
            cost: cfg.cost.clone(),
            rate: cfg.clock.planner_rate,
            shared: shared.clone(),
            rx: planner_rx,
            epoch: 0,
        };
        let controller = ControllerLoop {
            controller: Controller::new(cfg.model.home_control(), cfg.feedback),
            rate: cfg.clock.control_rate,
            shared: shared.clone(),
            tx: plant_tx.clone(),
            home: cfg.model.home_control(),
            epoch: 0,
        };
        let spawn = |name: &str, f: Box<dyn FnOnce() + Send>| {
            std::thread::Builder::new()
                .name(name.into())
                .spawn(f)
                .map_err(RuntimeError::Io)
        };
        let threads = vec![
            spawn("wbmpc-plant", Box::new(move || plant.run()))?,
            spawn("wbmpc-control", Box::new(move || controller.run()))?,
            spawn("wbmpc-planner", Box::new(move || planner_loop.run()))?,
        ];
        Ok(Self {
            shared,
            plant_tx,
            planner_tx,
            threads,
            header,
        })
    }

    pub fn send(&self, cmd: LiveCommand) {
        match &cmd {
            LiveCommand::SetSolver(_) | LiveCommand::SetPlannerRate(_) => {
                let _ = self.planner_tx.send(cmd);
            }
            LiveCommand::SetFeedback(on) => self.shared.feedback.store(*on, Ordering::Release),
            LiveCommand::SetCost(_) | LiveCommand::SetModel(_) => {
                let _ = self.planner_tx.send(cmd.clone());
                let _ = self.plant_tx.send(PlantMsg::Live(cmd));
            }
            LiveCommand::Push { .. } | LiveCommand::Reset => {
                let _ = self.plant_tx.send(PlantMsg::Live(cmd));
            }
            LiveCommand::Pause => self.shared.paused.store(true, Ordering::Release),
            LiveCommand::Resume => self.shared.paused.store(false, Ordering::Release),
        }
    }

    /// Frames produced since the last call, oldest first.
    pub fn drain_frames(&self) -> Vec<LiveFrame> {
        lock(&self.shared.frames).drain(..).collect()
    }

    /// Frames discarded because nobody drained them in time.
    pub fn dropped_frames(&self) -> u64 {
        self.shared.dropped.load(Ordering::Relaxed)
    }

    pub fn time(&self) -> f64 {
        self.shared.time()
    }

    pub fn paused(&self) -> bool {
        self.shared.paused.load(Ordering::Acquire)
    }

    pub fn failed(&self) -> Option<String> {
        lock(&self.shared.failed).clone()
    }

    pub fn active_solution(&self) -> Option<Arc<PlanSolution>> {
        self.shared.solution.get().map(|(_, s)| s)
    }

    /// Stops every loop and returns what was recorded.
    pub fn stop(mut self) -> EpisodeLog {
        self.shutdown();
        let mut records = match &self.shared.log {
            Some(log) => std::mem::take(&mut *lock(log)),
            None => Vec::new(),
        };
        records.push(LogRecord::End(EpisodeEnd {
            duration: self.shared.time(),
            failed: self.failed(),
        }));
        EpisodeLog::finish(self.header.clone(), records)
    }

    fn shutdown(&mut self) {
        self.shared.stop.store(true, Ordering::Release);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for LiveRuntime {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Runs `cfg` against the wall clock until its duration or a failure.
pub(crate) fn run_wall_clock(cfg: &EpisodeConfig) -> Result<EpisodeLog, RuntimeError> {
    let opts = LiveOptions {
        record: true,
        ..LiveOptions::default()
    };
    let rt = LiveRuntime::start(cfg.clone(), opts)?;
    let mut pending: Vec<_> = cfg.disturbances.clone();
    pending.sort_by(|a, b| b.time.total_cmp(&a.time));
    while rt.time() < cfg.duration && rt.failed().is_none() {
        while pending.last().is_some_and(|d| d.time <= rt.time()) {
            let d = pending.pop().expect("checked");
            rt.send(LiveCommand::Push {
                body: d.body,
                impulse: d.impulse,
            });
        }
        rt.drain_frames();
        std::thread::sleep(Duration::from_millis(2));
    }
    Ok(rt.stop())
}

struct PlantLoop {
    model: Arc<Model>,
    cost: CostSpec,
    x0: State,
    state: State,
    estimator: Estimator,
    line: LatencyLine<ControlOutput>,
    applied: ControlOutput,
    measure_schedule: Schedule,
    control: Schedule,
    sim_rate: f64,
    latency: f64,
    frame_every: u64,
    stream_period: Duration,
    noise: [Normal<f64>; 2],
    rng: ChaCha8Rng,
    shared: Arc<Shared>,
    rx: Receiver<PlantMsg>,
    tick: u64,
    divergence: super::DivergenceBound,
}

impl PlantLoop {
    fn new(
        cfg: &EpisodeConfig,
        opts: LiveOptions,
        shared: Arc<Shared>,
        rx: Receiver<PlantMsg>,
    ) -> Self {
        let x0 = State::from_vector(
            &cfg.initial_state
                .clone()
                .unwrap_or_else(|| cfg.model.home_state().to_vector()),
        );
        let clock = cfg.clock;
        let noise = |s: f64| Normal::new(0.0, s).expect("validated noise std");
        let home = cfg.model.home_control();
        Self {
            model: cfg.model.clone(),
            cost: cfg.cost.clone(),
            state: x0.clone(),
            x0,
            estimator: Estimator::new(cfg.model.nq(), cfg.estimator),
            line: LatencyLine::new(),
            applied: ControlOutput {
                control: home,
                solution: None,
                stale: false,
            },
            measure_schedule: Schedule::new(cfg.estimator.measurement_rate, clock.sim_rate),
            control: Schedule::new(clock.control_rate, clock.sim_rate),
            sim_rate: clock.sim_rate,
            latency: clock.command_latency,
            frame_every: ((clock.sim_rate / opts.stream_rate).round() as u64).max(1),
            stream_period: Duration::from_secs_f64(1.0 / opts.stream_rate),
            noise: [
                noise(cfg.estimator.position_noise_std),
                noise(cfg.estimator.angle_noise_std),
            ],
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            shared,
            rx,
            tick: 0,
            divergence: cfg.divergence,
        }
    }

    fn time(&self) -> f64 {
        self.tick as f64 / self.sim_rate
    }

    fn handle(&mut self, msg: PlantMsg) {
        match msg {
            PlantMsg::Command(epoch, issued, out) => {
                if epoch == self.shared.epoch.load(Ordering::Acquire) {
                    let due = ((issued + self.latency) * self.sim_rate).round() as u64;
                    self.line.push(due.max(self.tick), out);
                }
            }
            PlantMsg::Live(LiveCommand::SetCost(c)) => self.cost = c,
            PlantMsg::Live(LiveCommand::SetModel(m)) => self.model = m,
            PlantMsg::Live(LiveCommand::Push { body, impulse }) => {
                if let Ok(s) = apply_impulse(&self.model, &self.state, body, impulse) {
                    self.state = s;
                    self.shared
                        .record(LogRecord::Disturbance(super::DisturbanceEvent {
                            time: self.time(),
                            body,
                            impulse,
                        }));
                }
            }
            PlantMsg::Live(LiveCommand::Reset) => {
                self.shared.epoch.fetch_add(1, Ordering::AcqRel);
                self.state = self.x0.clone();
                self.estimator.reset();
                self.line.clear();
                self.applied = ControlOutput {
                    control: self.model.home_control(),
                    solution: None,
                    stale: false,
                };
                self.shared.estimate.clear();
                self.shared.solution.clear();
                *lock(&self.shared.failed) = None;
            }
            PlantMsg::Live(_) => {}
        }
    }

    fn measure(&mut self) {
        let mut q = self.state.q.clone();
        if self.model.base_dofs() == 3 {
            q[0] += self.noise[0].sample(&mut self.rng);
            q[1] += self.noise[0].sample(&mut self.rng);
            q[2] += self.noise[1].sample(&mut self.rng);
        }
        let t = self.time();
        self.estimator.update(t, &q);
        if let Some(x) = self.estimator.state() {
            let epoch = self.shared.epoch.load(Ordering::Acquire);
            self.shared.estimate.put((epoch, t, x));
        }
    }

    fn running_costs(&self) -> Vec<f64> {
        let x = self.state.to_vector();
        self.model
            .features(&x, Some(&self.applied.control))
            .map(|f| {
                self.cost
                    .knot_costs(&f, self.time(), ResidualStage::Running)
            })
            .unwrap_or_else(|_| vec![f64::INFINITY; self.cost.running.len()])
    }

    fn emit_frames(&self, paused: bool) {
        let planned = self
            .shared
            .solution
            .get()
            .map(|(_, s)| {
                s.trajectory
                    .states
                    .iter()
                    .map(|x| x.as_slice().to_vec())
                    .collect()
            })
            .unwrap_or_default();
        self.shared.emit(LiveFrame::State(StateFrame {
            time: self.time(),
            state: self.state.to_vector().as_slice().to_vec(),
            estimate: self
                .estimator
                .state()
                .map_or_else(Vec::new, |e| e.as_slice().to_vec()),
            planned,
            contacts: contact_force(&self.model, &self.state).unwrap_or_default(),
            paused,
            failed: lock(&self.shared.failed).clone(),
        }));
        if !paused {
            let terms = self.running_costs();
            let mut named = BTreeMap::new();
            for (t, c) in self.cost.running.iter().zip(&terms) {
                *named.entry(t.name.clone()).or_insert(0.0) += c;
            }
            self.shared.emit(LiveFrame::Cost(CostFrame {
                time: self.time(),
                total: terms.iter().sum(),
                terms: named,
            }));
        }
    }

    fn check_divergence(&self) -> Option<String> {
        let peak = self.state.q.amax().max(self.state.v.amax());
        if !self.state.is_finite() || peak > self.divergence.state_bound {
            return Some(format!(
                "state exceeded bound {}",
                self.divergence.state_bound
            ));
        }
        match self.divergence.min_base_height {
            Some(h) if self.state.q[1] < h => Some(format!("base fell below {h} m")),
            _ => None,
        }
    }

    fn run(mut self) {
        let mut anchor = (Instant::now(), 0u64);
        while !self.shared.stopping() {
            while let Ok(msg) = self.rx.try_recv() {
                self.handle(msg);
            }
            let halted =
                self.shared.paused.load(Ordering::Acquire) || lock(&self.shared.failed).is_some();
            if halted {
                self.emit_frames(true);
                std::thread::sleep(self.stream_period);
                anchor = (Instant::now(), self.tick);
                continue;
            }
            let n = self.tick;
            if self.measure_schedule.due(n) {
                self.measure();
            }
            let controlled = self.control.due(n);
            if let Some(out) = self.line.pop_due(n) {
                self.applied = out;
            }
            if controlled {
                let terms = self.running_costs();
                self.shared.record(LogRecord::Tick(TickRecord {
                    time: self.time(),
                    state: self.state.to_vector().as_slice().to_vec(),
                    estimate: self
                        .estimator
                        .state()
                        .map_or_else(Vec::new, |e| e.as_slice().to_vec()),
                    control: self.applied.control.as_slice().to_vec(),
                    solution: self.applied.solution,
                    stale: self.applied.stale,
                    cost: terms.iter().sum(),
                    terms,
                }));
            }
            if n % self.frame_every == 0 {
                self.emit_frames(false);
            }
            match step(
                &self.model,
                &self.state,
                &self.applied.control,
                1.0 / self.sim_rate,
            ) {
                Ok(s) => self.state = s,
                Err(e) => *lock(&self.shared.failed) = Some(format!("plant step failed: {e}")),
            }
            self.tick += 1;
            self.shared
                .time
                .store(self.time().to_bits(), Ordering::Release);
            if let Some(why) = self.check_divergence() {
                *lock(&self.shared.failed) = Some(why);
            }
            let due =
                anchor.0 + Duration::from_secs_f64((self.tick - anchor.1) as f64 / self.sim_rate);
            let now = Instant::now();
            if due > now {
                std::thread::sleep(due - now);
            }
        }
    }
}

struct ControllerLoop {
    controller: Controller,
    rate: f64,
    shared: Arc<Shared>,
    tx: Sender<PlantMsg>,
    home: DVector<f64>,
    epoch: u64,
}

impl ControllerLoop {
    fn run(mut self) {
        let period = Duration::from_secs_f64(1.0 / self.rate);
        let mut next = Instant::now();
        while !self.shared.stopping() {
            next += period;
            let epoch = self.shared.epoch.load(Ordering::Acquire);
            if epoch != self.epoch {
                self.epoch = epoch;
                self.controller.reset(self.home.clone());
            }
            if !self.shared.paused.load(Ordering::Acquire) {
                self.controller
                    .set_feedback(self.shared.feedback.load(Ordering::Acquire));
                let est = self
                    .shared
                    .estimate
                    .get()
                    .filter(|e| e.0 == epoch)
                    .map(|e| e.2);
                let sol = self
                    .shared
                    .solution
                    .get()
                    .filter(|s| s.0 == epoch)
                    .map(|s| s.1);
                let now = self.shared.time();
                let out = self.controller.tick(sol.as_deref(), est.as_ref(), now);
                if self.tx.send(PlantMsg::Command(epoch, now, out)).is_err() {
                    return;
                }
            }
            let now = Instant::now();
            if next > now {
                std::thread::sleep(next - now);
            } else {
                next = now;
            }
        }
    }
}

struct PlannerLoop {
    planner: Planner,
    cost: CostSpec,
    rate: f64,
    shared: Arc<Shared>,
    rx: Receiver<LiveCommand>,
    epoch: u64,
}

impl PlannerLoop {
    fn apply(&mut self, cmd: LiveCommand) {
        match cmd {
            LiveCommand::SetCost(c) => self.cost = c,
            LiveCommand::SetSolver(s) => {
                if let Err(e) = self.planner.set_config(s) {
                    log::warn!("solver config rejected: {e}");
                }
            }
            LiveCommand::SetModel(m) => self.planner.set_dynamics(m),
            LiveCommand::SetPlannerRate(r) if r.is_finite() && r > 0.0 => self.rate = r,
            _ => {}
        }
    }

    fn run(mut self) {
        let mut next = Instant::now();
        while !self.shared.stopping() {
            next += Duration::from_secs_f64(1.0 / self.rate);
            while let Ok(cmd) = self.rx.try_recv() {
                self.apply(cmd);
            }
            let epoch = self.shared.epoch.load(Ordering::Acquire);
            if epoch != self.epoch {
                self.epoch = epoch;
                self.planner.reset();
            }
            let halted =
                self.shared.paused.load(Ordering::Acquire) || lock(&self.shared.failed).is_some();
            let est = self.shared.estimate.get().filter(|e| e.0 == epoch);
            if let (false, Some((_, t, x))) = (halted, est) {
                match self.planner.plan_step(&self.cost, &x, t) {
                    Ok(sol) => {
                        // A reset during the solve makes this one stale.
                        if self.shared.epoch.load(Ordering::Acquire) == epoch {
                            self.shared.record(LogRecord::Plan(sol.telemetry.clone()));
                            self.shared
                                .emit(LiveFrame::Telemetry(sol.telemetry.clone()));
                            self.shared.solution.put((epoch, sol));
                        }
                    }
                    Err(e) => *lock(&self.shared.failed) = Some(format!("planner error: {e}")),
                }
            }
            let now = Instant::now();
            if next > now {
                std::thread::sleep(next - now);
            } else {
                next = now;
            }
        }
    }
}
