//! Per-task evaluation metrics computed from an episode trace alone.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;
use crate::sim::pose_error;
use crate::trace::{EpisodeTrace, TraceRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("trace has no records")]
    EmptyTrace,
    #[error("trace has no task {0}")]
    NoSuchTask(usize),
}

/// Time average of the squared input norm, trapezoidal in time.
pub fn compute_effort(records: &[TraceRecord]) -> Result<f64, MetricsError> {
    let (first, last) = match (records.first(), records.last()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(MetricsError::EmptyTrace),
    };
    let sq = |r: &TraceRecord| r.u_h.iter().map(|v| v * v).sum::<f64>();
    let span = last.t - first.t;
    if span <= 0.0 {
        return Ok(sq(first));
    }
    let integral: f64 = records.windows(2).map(|w| 0.5 * (sq(&w[0]) + sq(&w[1])) * (w[1].t - w[0].t)).sum();
    Ok(integral / span)
}

fn task_records(trace: &EpisodeTrace, task: usize) -> Result<&[TraceRecord], MetricsError> {
    if task >= trace.header.tasks.len() {
        return Err(MetricsError::NoSuchTask(task));
    }
    let start = trace.records.iter().position(|r| r.task == Some(task)).ok_or(MetricsError::NoSuchTask(task))?;
    let len = trace.records[start..].iter().take_while(|r| r.task == Some(task)).count();
    Ok(&trace.records[start..start + len])
}

fn task_completed(trace: &EpisodeTrace, task: usize) -> bool {
    trace.completed_tasks() > task || trace.records.iter().any(|r| r.task.is_none_or(|k| k > task))
}

/// Time from task start until `alpha[policy]` last crossed the threshold
/// and stayed above it until the task ended.
pub fn convergence_time(records: &[TraceRecord], policy: usize, threshold: f64) -> Option<f64> {
    let start = records.first()?.t;
    let settled = records.iter().rposition(|r| r.alpha[policy] < threshold).map_or(0, |k| k + 1);
    records.get(settled).map(|r| r.t - start)
}

/// Trailing records of the task that are all within tolerance.
fn final_run<'a>(trace: &EpisodeTrace, records: &'a [TraceRecord], task: usize) -> &'a [TraceRecord] {
    let h = &trace.header;
    let target = &h.tasks[task];
    let inside = |r: &TraceRecord| {
        let (dp, dr) = pose_error(&Pose::from_array(&r.pose), target);
        dp <= h.position_tolerance && dr <= h.rotation_tolerance
    };
    let start = records.iter().rposition(|r| !inside(r)).map_or(0, |k| k + 1);
    &records[start..]
}

/// Minimum translation and rotation error over the final in-tolerance
/// window; `None` if the task was not completed.
pub fn pose_errors(trace: &EpisodeTrace, task: usize) -> Result<Option<(f64, f64)>, MetricsError> {
    let records = task_records(trace, task)?;
    if !task_completed(trace, task) {
        return Ok(None);
    }
    let target = &trace.header.tasks[task];
    let run = final_run(trace, records, task);
    if run.is_empty() {
        return Ok(None);
    }
    let errs = run.iter().map(|r| pose_error(&Pose::from_array(&r.pose), target));
    Ok(Some(errs.fold((f64::INFINITY, f64::INFINITY), |(a, b), (p, r)| (a.min(p), b.min(r)))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: usize,
    pub convergence_pos_s: Option<f64>,
    pub convergence_rot_s: Option<f64>,
    /// Task start until the final in-tolerance window began.
    pub completion_s: Option<f64>,
    pub trans_err_m: Option<f64>,
    pub rot_err_rad: Option<f64>,
    /// Effort over the task interval.
    pub effort: f64,
}

pub fn task_metrics(trace: &EpisodeTrace, task: usize) -> Result<TaskMetrics, MetricsError> {
    let records = task_records(trace, task)?;
    let t = &trace.header.tasks[task];
    let threshold = trace.header.convergence_threshold;
    let completed = task_completed(trace, task);
    let run = final_run(trace, records, task);
    let completion_s = (completed && !run.is_empty()).then(|| run[0].t - records[0].t);
    let errors = pose_errors(trace, task)?;
    Ok(TaskMetrics {
        task,
        convergence_pos_s: convergence_time(records, t.position_policy, threshold),
        convergence_rot_s: convergence_time(records, t.rotation_policy, threshold),
        completion_s,
        trans_err_m: errors.map(|e| e.0),
        rot_err_rad: errors.map(|e| e.1),
        effort: compute_effort(records)?,
    })
}

/// Metrics for every task the episode started.
pub fn episode_metrics(trace: &EpisodeTrace) -> Result<Vec<TaskMetrics>, MetricsError> {
    if trace.records.is_empty() {
        return Err(MetricsError::EmptyTrace);
    }
    (0..trace.header.tasks.len())
        .take_while(|&k| trace.records.iter().any(|r| r.task == Some(k)))
        .map(|k| task_metrics(trace, k))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub seed: u64,
    pub task: usize,
    pub convergence_pos_s: Option<f64>,
    pub convergence_rot_s: Option<f64>,
    pub completion_s: Option<f64>,
    pub trans_err_m: Option<f64>,
    pub rot_err_rad: Option<f64>,
    pub effort: f64,
}

pub fn summary_rows(trace: &EpisodeTrace) -> Result<Vec<SummaryRow>, MetricsError> {
    Ok(episode_metrics(trace)?
        .into_iter()
        .map(|m| SummaryRow {
            seed: trace.header.seed,
            task: m.task,
            convergence_pos_s: m.convergence_pos_s,
            convergence_rot_s: m.convergence_rot_s,
            completion_s: m.completion_s,
            trans_err_m: m.trans_err_m,
            rot_err_rad: m.rot_err_rad,
            effort: m.effort,
        })
        .collect())
}
