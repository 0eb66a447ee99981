use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ClockConfig, DisturbanceEvent, EstimatorConfig, RuntimeError};
use crate::solver::{PhaseTimings, SolverTelemetry};

pub const LOG_SCHEMA_VERSION: u32 = 1;

/// Window at the end of an episode averaged into `final_cost`, s.
const FINAL_WINDOW: f64 = 0.5;

/// First line of an episode log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub schema: u32,
    pub task: String,
    pub model: String,
    pub seed: u64,
    pub feedback: bool,
    pub clock: ClockConfig,
    pub estimator: EstimatorConfig,
    /// Running term names, in the order of `TickRecord::terms`.
    pub terms: Vec<String>,
}

/// Sampled at every control tick.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub time: f64,
    pub state: Vec<f64>,
    pub estimate: Vec<f64>,
    /// Command in effect at the plant.
    pub control: Vec<f64>,
    /// Solution the applied command came from.
    pub solution: Option<u64>,
    pub stale: bool,
    /// Running cost at the true state and applied command.
    pub cost: f64,
    pub terms: Vec<f64>,
}

/// Last line of an episode log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEnd {
    /// Simulated seconds run.
    pub duration: f64,
    pub failed: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogRecord {
    Tick(TickRecord),
    Plan(SolverTelemetry),
    Disturbance(DisturbanceEvent),
    End(EpisodeEnd),
}

impl LogRecord {
    /// Copy with wall-clock measurements zeroed.
    fn masked(&self) -> LogRecord {
        match self {
            LogRecord::Plan(t) => LogRecord::Plan(SolverTelemetry {
                timings: PhaseTimings::default(),
                ..t.clone()
            }),
            other => other.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

impl Percentiles {
    /// Nearest-rank percentiles; zeros for an empty sample.
    pub fn of(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let rank = |p: f64| s[((p * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        Self {
            p50: rank(0.5),
            p90: rank(0.9),
            p99: rank(0.99),
            max: s[s.len() - 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub task: String,
    pub seed: u64,
    /// Simulated seconds actually run.
    pub duration: f64,
    /// Why the episode stopped early, if it did.
    pub failed: Option<String>,
    /// Mean running cost over the last half second.
    pub final_cost: f64,
    /// Mean running cost over all control ticks.
    pub mean_cost: f64,
    /// Mean norm of the change in applied command between control ticks.
    pub mean_control_jerk: f64,
    pub control_ticks: usize,
    pub stale_ticks: usize,
    pub plan_steps: usize,
    pub degraded_solves: usize,
    pub dynamics_evaluations: usize,
    pub residual_evaluations: usize,
    /// Wall-clock solve time, s.
    pub solve_time: Percentiles,
    /// Mean wall-clock seconds per solve, by phase.
    pub phase_means: PhaseTimings,
    /// SHA-256 of the log with wall-clock timings zeroed.
    pub content_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLog {
    pub header: EpisodeHeader,
    pub records: Vec<LogRecord>,
    pub summary: EpisodeSummary,
}

impl EpisodeLog {
    pub(crate) fn finish(header: EpisodeHeader, records: Vec<LogRecord>) -> Self {
        let (duration, failed) = match records.last() {
            Some(LogRecord::End(end)) => (end.duration, end.failed.clone()),
            _ => (0.0, None),
        };
        let mut log = Self {
            summary: EpisodeSummary {
                task: header.task.clone(),
                seed: header.seed,
                duration,
                failed,
                final_cost: 0.0,
                mean_cost: 0.0,
                mean_control_jerk: 0.0,
                control_ticks: 0,
                stale_ticks: 0,
                plan_steps: 0,
                degraded_solves: 0,
                dynamics_evaluations: 0,
                residual_evaluations: 0,
                solve_time: Percentiles::default(),
                phase_means: PhaseTimings::default(),
                content_hash: String::new(),
            },
            header,
            records,
        };
        log.summarize();
        log
    }

    fn summarize(&mut self) {
        let ticks: Vec<&TickRecord> = self.ticks().collect();
        let plans: Vec<&SolverTelemetry> = self.plans().collect();
        let mut s = self.summary.clone();
        s.control_ticks = ticks.len();
        s.stale_ticks = ticks.iter().filter(|t| t.stale).count();
        if let Some(last) = ticks.last() {
            s.mean_cost = ticks.iter().map(|t| t.cost).sum::<f64>() / ticks.len() as f64;
            let tail: Vec<f64> = ticks
                .iter()
                .filter(|t| t.time > last.time - FINAL_WINDOW)
                .map(|t| t.cost)
                .collect();
            s.final_cost = tail.iter().sum::<f64>() / tail.len() as f64;
        }
        if ticks.len() > 1 {
            let jerk: f64 = ticks
                .windows(2)
                .map(|w| {
                    w[0].control
                        .iter()
                        .zip(&w[1].control)
                        .map(|(a, b)| (b - a) * (b - a))
                        .sum::<f64>()
                        .sqrt()
                })
                .sum();
            s.mean_control_jerk = jerk / (ticks.len() - 1) as f64;
        }
        s.plan_steps = plans.len();
        s.degraded_solves = plans.iter().filter(|p| p.degraded.is_some()).count();
        s.dynamics_evaluations = plans.iter().map(|p| p.dynamics_evaluations).sum();
        s.residual_evaluations = plans.iter().map(|p| p.residual_evaluations).sum();
        let totals: Vec<f64> = plans.iter().map(|p| p.timings.total).collect();
        s.solve_time = Percentiles::of(&totals);
        if !plans.is_empty() {
            let n = plans.len() as f64;
            let mean =
                |f: fn(&PhaseTimings) -> f64| plans.iter().map(|p| f(&p.timings)).sum::<f64>() / n;
            s.phase_means = PhaseTimings {
                model_derivatives: mean(|t| t.model_derivatives),
                cost_derivatives: mean(|t| t.cost_derivatives),
                backward_pass: mean(|t| t.backward_pass),
                rollouts: mean(|t| t.rollouts),
                total: mean(|t| t.total),
            };
        }
        s.content_hash = self.content_hash();
        self.summary = s;
    }

    pub fn ticks(&self) -> impl Iterator<Item = &TickRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Tick(t) => Some(t),
            _ => None,
        })
    }

    pub fn plans(&self) -> impl Iterator<Item = &SolverTelemetry> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Plan(p) => Some(p),
            _ => None,
        })
    }

    /// Header line followed by one line per record.
    pub fn to_ndjson(&self) -> String {
        self.render(false)
    }

    /// As [`Self::to_ndjson`] with wall-clock timings zeroed; identical for
    /// two simulated-time runs with the same inputs.
    pub fn reproducible_ndjson(&self) -> String {
        self.render(true)
    }

    fn render(&self, masked: bool) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            let line = if masked {
                serde_json::to_string(&r.masked())
            } else {
                serde_json::to_string(r)
            };
            out.push_str(&line.expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.reproducible_ndjson().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Parses the output of [`Self::to_ndjson`] and recomputes the summary.
    /// Wall-clock summary fields come from the logged timings.
    pub fn from_ndjson(text: &str) -> Result<Self, RuntimeError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: EpisodeHeader = match lines.next() {
            Some(l) => serde_json::from_str(l)?,
            None => return Err(RuntimeError::config("log", "empty episode log")),
        };
        let records = lines
            .map(serde_json::from_str)
            .collect::<Result<Vec<LogRecord>, _>>()?;
        Ok(Self::finish(header, records))
    }

    /// Writes `<stem>.ndjson` and `<stem>.summary.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf), RuntimeError> {
        std::fs::create_dir_all(dir)?;
        let log_path = dir.join(format!("{stem}.ndjson"));
        let summary_path = dir.join(format!("{stem}.summary.json"));
        std::fs::File::create(&log_path)?.write_all(self.to_ndjson().as_bytes())?;
        let mut f = std::fs::File::create(&summary_path)?;
        serde_json::to_writer_pretty(&mut f, &self.summary)?;
        f.write_all(b"\n")?;
        Ok((log_path, summary_path))
    }
}
