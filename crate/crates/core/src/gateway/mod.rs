//! Operator surface: headless experiments and the live session protocol.

pub mod experiments;
pub mod protocol;
pub mod session;

pub use experiments::{
    run_experiment, ExperimentKind, ExperimentReport, ExperimentSpec, RunResult,
};
pub use protocol::{
    ClientMessage, ParamPath, Role, SessionCommand, SessionUpdate, PROTOCOL_VERSION,
};
pub use session::{ClientId, Session, SessionConfig};
