//! Session wire format: one JSON object per text message. Clients open with
//! `hello`; the server answers `welcome` with the role it granted.

use serde::{Deserialize, Serialize};

use crate::runtime::{CostFrame, StateFrame};
use crate::solver::SolverTelemetry;

pub const PROTOCOL_VERSION: u32 = 1;

/// Solver and model knobs a session may edit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamPath {
    #[serde(rename = "skip_deriv")]
    SkipDeriv,
    #[serde(rename = "fd_epsilon")]
    FdEpsilon,
    #[serde(rename = "horizon_T")]
    HorizonT,
    #[serde(rename = "slip_stiffness")]
    SlipStiffness,
    #[serde(rename = "gait_period")]
    GaitPeriod,
    #[serde(rename = "planner_rate")]
    PlannerRate,
}

impl ParamPath {
    pub const ALL: [ParamPath; 6] = [
        Self::SkipDeriv,
        Self::FdEpsilon,
        Self::HorizonT,
        Self::SlipStiffness,
        Self::GaitPeriod,
        Self::PlannerRate,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum SessionCommand {
    /// Goal of every position term, m.
    SetTarget {
        x: f64,
        z: f64,
    },
    SetWeight {
        term: String,
        value: f64,
    },
    SetParam {
        path: ParamPath,
        value: f64,
    },
    /// World-frame impulse on `body` (the base link by default), N·s.
    Push {
        impulse: [f64; 2],
        #[serde(default)]
        body: usize,
    },
    Pause,
    Resume,
    Reset,
    StartTask {
        task: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Hello { protocol: u32 },
    Command { id: u64, command: SessionCommand },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// May send commands.
    Operator,
    /// Receives the stream only.
    Observer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub name: String,
    pub model: String,
    pub description: String,
}

/// Current values of the editable parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionParams {
    pub skip_deriv: usize,
    pub fd_epsilon: f64,
    #[serde(rename = "horizon_T")]
    pub horizon: usize,
    pub slip_stiffness: f64,
    pub gait_period: Option<f64>,
    pub planner_rate: f64,
    /// Position goal, if the task has one.
    pub target: Option<[f64; 2]>,
    /// Running and terminal weights by term name.
    pub weights: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SessionUpdate {
    Welcome {
        protocol: u32,
        role: Role,
        task: String,
        model: String,
        cost_version: u64,
        params: SessionParams,
    },
    StateFrame(StateFrame),
    Telemetry(SolverTelemetry),
    CostFrame(CostFrame),
    Ack {
        id: u64,
        /// Plans tagged with this version or later include the change.
        cost_version: u64,
        params: SessionParams,
    },
    Nack {
        /// Absent when the message could not be parsed far enough.
        id: Option<u64>,
        reason: String,
    },
    TaskCatalog {
        tasks: Vec<TaskInfo>,
    },
}

pub fn encode<T: Serialize>(msg: &T) -> String {
    serde_json::to_string(msg).expect("protocol messages serialize")
}

pub fn decode_client(text: &str) -> Result<ClientMessage, String> {
    serde_json::from_str(text).map_err(|e| format!("parse error: {e}"))
}

pub fn decode_update(text: &str) -> Result<SessionUpdate, String> {
    serde_json::from_str(text).map_err(|e| format!("parse error: {e}"))
}
