use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use wbmpc::cost::{builtin_tasks, parse_task};
use wbmpc::dynamics::builtin_models;
use wbmpc::gateway::SessionConfig;
use wbmpc::runtime::{ClockMode, RuntimeError};
use wbmpc_cli::serve::DEFAULT_BIND;
use wbmpc_cli::{run_experiment_to_dir, RunArgs, ServeOptions, Server};

#[derive(Parser)]
#[command(
    name = "wbmpc",
    version,
    about = "Whole-body MPC experiments and live sessions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Clock {
    Simulated,
    WallClock,
}

impl From<Clock> for ClockMode {
    fn from(c: Clock) -> Self {
        match c {
            Clock::Simulated => ClockMode::Simulated,
            Clock::WallClock => ClockMode::WallClock,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a builtin experiment or an experiment file and write logs.
    Run {
        /// Experiment name (feedback_ablation, slip_sweep, skip_sweep,
        /// fd_scheme_compare, swingup, walk_to_target) or a .toml file.
        experiment: String,
        /// Builtin task to use instead of the experiment's default.
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        task_file: Option<PathBuf>,
        /// Seeds, comma separated.
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
        /// Episode length, s.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long, short, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_enum)]
        clock: Option<Clock>,
    },
    /// Serve a live session over websockets.
    Serve {
        #[arg(long, env = "WBMPC_BIND", default_value = DEFAULT_BIND)]
        bind: String,
        #[arg(long, default_value = "biped_stand")]
        task: String,
        /// Extra task to add to the catalog and start with.
        #[arg(long)]
        task_file: Option<PathBuf>,
        /// State and cost frames per second.
        #[arg(long, default_value_t = 30.0)]
        stream_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// List builtin tasks.
    Tasks,
    /// List builtin models.
    Models,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<(), RuntimeError> {
    match command {
        Command::Run {
            experiment,
            task,
            task_file,
            seed,
            duration,
            out,
            clock,
        } => {
            let args = RunArgs {
                experiment,
                task,
                task_file,
                seeds: seed,
                duration,
                clock: clock.map(Into::into),
                out,
            };
            let report = run_experiment_to_dir(&args)?;
            println!("{}", report.table());
            println!("logs written to {}", args.out.display());
        }
        Command::Serve {
            bind,
            task,
            task_file,
            stream_rate,
            seed,
        } => {
            let mut session = SessionConfig::new(&task);
            if let Some(path) = task_file {
                let t = parse_task(&std::fs::read_to_string(&path)?).map_err(|e| {
                    RuntimeError::config("task_file", format!("{}: {e}", path.display()))
                })?;
                session.task = t.name.clone();
                session.tasks.retain(|x| x.name != t.name);
                session.tasks.push(t);
            }
            session.options.stream_rate = stream_rate;
            session.seed = seed;
            let server = Server::start(ServeOptions {
                bind,
                session,
                outbox_capacity: 64,
            })?;
            println!("listening on ws://{}", server.local_addr());
            server.wait();
        }
        Command::Tasks => {
            for t in builtin_tasks() {
                println!("{:<18} {:<8} {}", t.name, t.model, t.description);
            }
        }
        Command::Models => {
            for m in builtin_models() {
                println!(
                    "{:<10} {} links, {} joints",
                    m.name,
                    m.links.len(),
                    m.joints.len()
                );
            }
        }
    }
    Ok(())
}
