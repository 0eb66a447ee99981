use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use wbmpc::gateway::{run_experiment, ExperimentKind, ExperimentReport, ExperimentSpec};
use wbmpc::runtime::{ClockMode, RuntimeError};

#[derive(Clone, Debug, Default)]
pub struct RunArgs {
    /// Experiment name or path to an experiment file.
    pub experiment: String,
    pub task: Option<String>,
    pub task_file: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub duration: Option<f64>,
    pub clock: Option<ClockMode>,
    pub out: PathBuf,
}

impl RunArgs {
    /// Command-line flags override the file.
    pub fn spec(&self) -> Result<ExperimentSpec, RuntimeError> {
        let path = Path::new(&self.experiment);
        let mut spec = match ExperimentKind::from_name(&self.experiment) {
            Some(kind) => ExperimentSpec::new(kind),
            None if path.is_file() => ExperimentSpec::load(path)?,
            None => {
                let names: Vec<&str> = ExperimentKind::ALL.iter().map(|k| k.name()).collect();
                return Err(RuntimeError::config(
                    "experiment",
                    format!(
                        "unknown experiment '{}' (expected a file or one of: {})",
                        self.experiment,
                        names.join(", ")
                    ),
                ));
            }
        };
        if let Some(t) = &self.task {
            spec.task = Some(t.clone());
            spec.task_file = None;
        }
        if let Some(f) = &self.task_file {
            spec.task_file = Some(f.clone());
        }
        if !self.seeds.is_empty() {
            spec.seeds = self.seeds.clone();
        }
        if self.duration.is_some() {
            spec.duration = self.duration;
        }
        if self.clock.is_some() {
            spec.mode = self.clock;
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Runs the experiment and writes one log and summary per episode, plus
/// `report.json` and `report.md`, into `args.out`.
pub fn run_experiment_to_dir(args: &RunArgs) -> Result<ExperimentReport, RuntimeError> {
    let spec = args.spec()?;
    let (report, logs) = run_experiment(&spec)?;
    fs::create_dir_all(&args.out)?;
    for (stem, log) in &logs {
        log.write(&args.out, stem)?;
    }
    fs::write(
        args.out.join("report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    fs::write(args.out.join("report.md"), markdown(&spec, &report))?;
    Ok(report)
}

fn markdown(spec: &ExperimentSpec, report: &ExperimentReport) -> String {
    let mut s = String::new();
    let clock = spec.clock.unwrap_or_default();
    let mode = match spec.mode.unwrap_or(clock.mode) {
        ClockMode::Simulated => "simulated",
        ClockMode::WallClock => "wall-clock",
    };
    let _ = writeln!(s, "# {}\n", spec.experiment.name());
    let _ = writeln!(
        s,
        "seeds {:?}, duration {} s, {mode} time\n",
        spec.seeds,
        spec.duration(),
    );
    s.push_str(&report.table());
    s
}
