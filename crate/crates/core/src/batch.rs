//! Batch execution over seeds, trace persistence and the summary table.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::metrics::{summary_rows, MetricsError, SummaryRow};
use crate::operators::{OperatorKind, OperatorModel};
use crate::scenario::{ConfigError, Scenario};
use crate::sim::{operator_for, run_episode, SimError};
use crate::trace::{EpisodeTrace, Termination, TraceError};

pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, Error)]
pub enum BatchError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("io on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("summary csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("simulation failed for seed {seed}: {source}")]
    Sim { seed: u64, source: SimError },
    #[error("replay needs recorded inputs")]
    MissingReplay,
    #[error("no traces found in {0}")]
    NoTraces(PathBuf),
}

/// `Parallel` runs on the rayon pool when the `parallel` feature is enabled
/// and falls back to sequential execution otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

#[derive(Debug)]
pub struct EpisodeOutcome {
    pub seed: u64,
    pub trace: EpisodeTrace,
    pub diverged: bool,
}

fn run_one(scenario: &Arc<Scenario>, kind: OperatorKind, replay: Option<&OperatorModel>, seed: u64) -> Result<EpisodeOutcome, BatchError> {
    let op = match (kind, replay) {
        (OperatorKind::Replay, Some(model)) => model.clone(),
        (OperatorKind::Replay, None) => return Err(BatchError::MissingReplay),
        _ => operator_for(kind, scenario, seed),
    };
    match run_episode(Arc::clone(scenario), op, seed) {
        Ok(trace) => Ok(EpisodeOutcome { seed, trace, diverged: false }),
        Err(SimError::Diverged { trace, .. }) => Ok(EpisodeOutcome { seed, trace: *trace, diverged: true }),
        Err(source) => Err(BatchError::Sim { seed, source }),
    }
}

/// One episode per seed; results in seed order regardless of execution.
pub fn run_seeds(
    scenario: &Arc<Scenario>,
    kind: OperatorKind,
    replay: Option<&OperatorModel>,
    seeds: &[u64],
    exec: Execution,
) -> Result<Vec<EpisodeOutcome>, BatchError> {
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            seeds.par_iter().map(|&s| run_one(scenario, kind, replay, s)).collect()
        }
        _ => seeds.iter().map(|&s| run_one(scenario, kind, replay, s)).collect(),
    }
}

pub fn trace_file_name(seed: u64) -> String {
    format!("trace_seed{seed}.jsonl")
}

#[derive(Debug)]
pub struct BatchReport {
    pub outcomes: Vec<EpisodeOutcome>,
    pub rows: Vec<SummaryRow>,
    pub summary_path: PathBuf,
}

impl BatchReport {
    pub fn any_diverged(&self) -> bool {
        self.outcomes.iter().any(|o| o.diverged)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BatchError + '_ {
    move |source| BatchError::Io { path: path.to_path_buf(), source }
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<(), BatchError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>, BatchError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Runs seeds `0..n_seeds`, writing one trace per episode and the summary.
pub fn run_batch(
    config: &Path,
    kind: OperatorKind,
    replay: Option<&OperatorModel>,
    n_seeds: u64,
    out_dir: &Path,
    exec: Execution,
) -> Result<BatchReport, BatchError> {
    let scenario = Arc::new(Scenario::load(config)?);
    let seeds: Vec<u64> = (0..n_seeds).collect();
    let outcomes = run_seeds(&scenario, kind, replay, &seeds, exec)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut rows = Vec::new();
    for o in &outcomes {
        o.trace.save(&out_dir.join(trace_file_name(o.seed)))?;
        rows.extend(summary_rows(&o.trace)?);
    }
    let summary_path = out_dir.join(SUMMARY_FILE);
    write_summary(&summary_path, &rows)?;
    Ok(BatchReport { outcomes, rows, summary_path })
}

/// Traces in `dir`, ordered by seed.
pub fn load_traces(dir: &Path) -> Result<Vec<EpisodeTrace>, BatchError> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let p = entry.map_err(io_err(dir))?.path();
        if p.extension().is_some_and(|e| e == "jsonl") {
            paths.push(p);
        }
    }
    if paths.is_empty() {
        return Err(BatchError::NoTraces(dir.to_path_buf()));
    }
    let mut traces = paths.iter().map(|p| EpisodeTrace::load(p)).collect::<Result<Vec<_>, _>>()?;
    traces.sort_by_key(|t| t.header.seed);
    Ok(traces)
}

/// Recomputes the summary from the traces in `dir` and writes it there.
pub fn summarize(dir: &Path) -> Result<(Vec<SummaryRow>, PathBuf), BatchError> {
    let mut rows = Vec::new();
    for t in load_traces(dir)? {
        rows.extend(summary_rows(&t)?);
    }
    let path = dir.join(SUMMARY_FILE);
    write_summary(&path, &rows)?;
    Ok((rows, path))
}

/// Whether the episode finished every scheduled task.
pub fn completed_all(trace: &EpisodeTrace) -> bool {
    trace.end.as_ref().is_some_and(|e| e.termination == Termination::ScheduleComplete)
        && trace.completed_tasks() == trace.header.tasks.len()
}
