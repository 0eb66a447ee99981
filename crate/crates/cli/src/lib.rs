//! Pieces of the `wbmpc` binary that tests drive directly.

pub mod run;
pub mod serve;

pub use run::{run_experiment_to_dir, RunArgs};
pub use serve::{ServeOptions, Server};
