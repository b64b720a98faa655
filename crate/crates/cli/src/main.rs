use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use log::error;
use taskadapt_core::batch::{run_batch, summarize, BatchError, Execution};
use taskadapt_core::operators::OperatorKind;
use taskadapt_core::scenario::{ConfigError, Scenario};
use taskadapt_core::sim::replay_of;
use taskadapt_core::trace::{EpisodeTrace, Termination};
use taskadapt_teleop::service::{serve, Clock, ServiceConfig, ServiceError, DEFAULT_PORT};

const EXIT_EPISODE: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "taskadapt", version, about = "Task-adaptive motion policies: batch runs, summaries and live teleoperation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Operator {
    Perfect,
    Noisy,
    Idle,
    Replay,
}

impl From<Operator> for OperatorKind {
    fn from(op: Operator) -> Self {
        match op {
            Operator::Perfect => OperatorKind::Perfect,
            Operator::Noisy => OperatorKind::Noisy,
            Operator::Idle => OperatorKind::Idle,
            Operator::Replay => OperatorKind::Replay,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run seeded episodes and write one trace per seed plus summary.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        operator: Operator,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
        /// Trace whose inputs the replay operator plays back.
        #[arg(long, required_if_eq("operator", "replay"))]
        replay: Option<PathBuf>,
        /// Run seeds one after another instead of on the thread pool.
        #[arg(long)]
        sequential: bool,
    },
    /// Recompute summary.csv from the traces in a directory.
    Summarize {
        #[arg(long)]
        traces: PathBuf,
    },
    /// Serve one live session over a websocket.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value_t = IpAddr::V4(Ipv4Addr::LOCALHOST))]
        host: IpAddr,
        #[arg(long, default_value = "session.jsonl")]
        trace: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// End the session after this many seconds (default: until Ctrl-C).
        #[arg(long)]
        max_duration: Option<f64>,
        /// End the session when the inspection sequence is done.
        #[arg(long)]
        stop_on_completion: bool,
        /// Advance a tick only when the operator has answered its frame.
        #[arg(long)]
        lockstep: bool,
    },
    /// Check a scenario config without running anything.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn config_failure(e: impl std::fmt::Display) -> ExitCode {
    error!("{e}");
    eprintln!("error: {e}");
    ExitCode::from(EXIT_CONFIG)
}

fn episode_failure(e: impl std::fmt::Display) -> ExitCode {
    error!("{e}");
    eprintln!("error: {e}");
    ExitCode::from(EXIT_EPISODE)
}

fn batch_failure(e: BatchError) -> ExitCode {
    match e {
        BatchError::Config(_) | BatchError::MissingReplay => config_failure(e),
        e => episode_failure(e),
    }
}

fn load_scenario(path: &Path) -> Result<Scenario, ConfigError> {
    Scenario::load(path)
}

fn run(
    config: &Path,
    operator: Operator,
    seeds: u64,
    out: &Path,
    replay: Option<&Path>,
    sequential: bool,
) -> ExitCode {
    let replay = match replay {
        Some(p) => match EpisodeTrace::load(p) {
            Ok(t) => Some(replay_of(&t)),
            Err(e) => return config_failure(format!("replay trace {}: {e}", p.display())),
        },
        None => None,
    };
    let exec = if sequential { Execution::Sequential } else { Execution::Parallel };
    let report = match run_batch(config, operator.into(), replay.as_ref(), seeds, out, exec) {
        Ok(r) => r,
        Err(e) => return batch_failure(e),
    };
    for o in &report.outcomes {
        let end = o.trace.end.as_ref();
        println!(
            "seed {}: {:?}, {}/{} tasks, {:.2} s",
            o.seed,
            end.map(|e| e.termination),
            o.trace.completed_tasks(),
            o.trace.header.tasks.len(),
            o.trace.duration()
        );
    }
    println!("summary: {} ({} rows)", report.summary_path.display(), report.rows.len());
    if report.any_diverged() {
        return episode_failure("at least one episode diverged");
    }
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, operator, seeds, out, replay, sequential } => {
            run(&config, operator, seeds, &out, replay.as_deref(), sequential)
        }
        Command::Summarize { traces } => match summarize(&traces) {
            Ok((rows, path)) => {
                println!("summary: {} ({} rows)", path.display(), rows.len());
                ExitCode::SUCCESS
            }
            Err(e) => episode_failure(e),
        },
        Command::Validate { config } => match load_scenario(&config) {
            Ok(sc) => {
                println!(
                    "ok: {} targets, {} tasks, dt {} s, {} s per episode",
                    sc.config.targets.len(),
                    sc.tasks.len(),
                    sc.dt(),
                    sc.config.sim.max_duration
                );
                ExitCode::SUCCESS
            }
            Err(e) => config_failure(e),
        },
        Command::Serve { config, port, host, trace, seed, max_duration, stop_on_completion, lockstep } => {
            let sc = match load_scenario(&config) {
                Ok(sc) => Arc::new(sc),
                Err(e) => return config_failure(e),
            };
            let max_ticks = match max_duration {
                Some(d) => (d / sc.dt()).round() as u64,
                None => u64::MAX,
            };
            let clock = if lockstep {
                Clock::Lockstep { timeout: std::time::Duration::from_secs(5) }
            } else {
                Clock::RealTime
            };
            let cfg = ServiceConfig {
                addr: SocketAddr::new(host, port),
                clock,
                seed,
                max_ticks: Some(max_ticks),
                stop_on_completion,
                trace_path: Some(trace),
            };
            match serve(sc, cfg) {
                Ok(t) if t.end.as_ref().is_some_and(|e| e.termination == Termination::Diverged) => {
                    episode_failure("session diverged")
                }
                Ok(t) => {
                    println!("session ended: {} ticks, {} tasks completed", t.records.len(), t.completed_tasks());
                    ExitCode::SUCCESS
                }
                Err(e @ ServiceError::PortBusy { .. }) => config_failure(e),
                Err(e) => episode_failure(e),
            }
        }
    }
}
