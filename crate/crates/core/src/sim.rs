//! Double-integrator end-effector simulation and episode execution.

use std::sync::Arc;

use nalgebra::{DVector, Vector6};
use thiserror::Error;

use crate::adaptation::{adaptation_step, human_view, HumanView, LikelihoodReport, OperatorInput};
use crate::geometry::{orientation_error, ChartError, Pose, Twist};
use crate::operators::{Observation, OperatorKind, OperatorModel};
use crate::rmp::{pullback, rmp_sum, MotionPolicy, RmpError};
use crate::scenario::{Scenario, Task};
use crate::trace::{EpisodeTrace, Termination, TraceEnd, TraceHeader, TraceRecord, TRACE_SCHEMA};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Rmp(#[from] RmpError),
    #[error("episode diverged at t={time:.2}s (twist norm {speed:.3e})")]
    Diverged { time: f64, speed: f64, trace: Box<EpisodeTrace> },
}

impl From<ChartError> for SimError {
    fn from(e: ChartError) -> Self {
        SimError::Rmp(e.into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobotState {
    pub pose: Pose,
    pub twist: Twist,
    pub time: f64,
}

impl RobotState {
    pub fn at_rest(pose: Pose) -> Self {
        Self { pose, twist: Twist::zero(), time: 0.0 }
    }
}

/// Every policy pulled back to the configuration space, mission metrics
/// scaled by `alpha`.
pub fn pulled_policies(scenario: &Scenario, state: &RobotState, alpha: &[f64]) -> Result<Vec<MotionPolicy>, SimError> {
    if alpha.len() != scenario.n_mission() {
        return Err(RmpError::DimensionMismatch { expected: scenario.n_mission(), got: alpha.len() }.into());
    }
    let twist = state.twist.to_dvector();
    let mut out = Vec::with_capacity(scenario.mission.len() + scenario.safety.len());
    for (spec, a) in scenario.mission.iter().zip(alpha) {
        let ev = spec.evaluate_at(&state.pose, &twist)?;
        out.push(pullback(&ev.policy, &ev.jacobian)?.scaled(*a));
    }
    for spec in &scenario.safety {
        let ev = spec.evaluate_at(&state.pose, &twist)?;
        out.push(pullback(&ev.policy, &ev.jacobian)?);
    }
    Ok(out)
}

/// Configuration-space acceleration from one metric-weighted sum over the
/// scaled mission policies and the unscaled safety policies.
pub fn compose_motion(scenario: &Scenario, state: &RobotState, alpha: &[f64]) -> Result<Vector6<f64>, SimError> {
    let f = rmp_sum(&pulled_policies(scenario, state, alpha)?)?.f;
    Ok(Vector6::from_iterator(f.iter().copied()))
}

/// Semi-implicit Euler: velocity first, then pose with the new velocity.
pub fn integrate_step(state: &RobotState, u: &Vector6<f64>, dt: f64) -> RobotState {
    let twist = Twist::from_vector(&(state.twist.to_vector() + u * dt));
    let pose = state.pose.retract(&(twist.to_vector() * dt));
    RobotState { pose, twist, time: state.time + dt }
}

/// Potential values at `pose`: mission policies, then safety policies.
pub fn potentials(scenario: &Scenario, pose: &Pose) -> Result<Vec<f64>, SimError> {
    scenario
        .mission
        .iter()
        .chain(&scenario.safety)
        .map(|s| Ok(s.potential.value(&s.chart.apply(pose)?)))
        .collect()
}

/// Translation and rotation error of `pose` against a task's target pose.
pub fn pose_error(pose: &Pose, task: &Task) -> (f64, f64) {
    let target = task.pose();
    ((pose.position - target.position).norm(), orientation_error(&pose.orientation, &target.orientation))
}

/// Whether `pose` is within the completion tolerances of `task`.
pub fn within_tolerance(pose: &Pose, task: &Task, position_tolerance: f64, rotation_tolerance: f64) -> bool {
    let (dp, dr) = pose_error(pose, task);
    dp <= position_tolerance && dr <= rotation_tolerance
}

/// Advances through the tasks once the tolerance has been held for the dwell.
#[derive(Clone, Debug)]
pub struct TaskSchedule {
    tasks: Vec<Task>,
    current: usize,
    held_ticks: u64,
    dwell_ticks: u64,
    position_tolerance: f64,
    rotation_tolerance: f64,
}

impl TaskSchedule {
    pub fn new(scenario: &Scenario) -> Self {
        let t = &scenario.config.task;
        Self {
            tasks: scenario.tasks.clone(),
            current: 0,
            held_ticks: 0,
            dwell_ticks: (t.dwell / scenario.dt()).round() as u64,
            position_tolerance: t.position_tolerance,
            rotation_tolerance: t.rotation_tolerance_deg.to_radians(),
        }
    }

    /// Feeds the pose at the start of a tick and returns the active task.
    pub fn update(&mut self, pose: &Pose) -> Option<usize> {
        let task = self.tasks.get(self.current)?;
        if within_tolerance(pose, task, self.position_tolerance, self.rotation_tolerance) {
            if self.held_ticks == self.dwell_ticks {
                self.current += 1;
                self.held_ticks = 0;
                return self.update(pose);
            }
            self.held_ticks += 1;
        } else {
            self.held_ticks = 0;
        }
        self.active()
    }

    pub fn active(&self) -> Option<usize> {
        (self.current < self.tasks.len()).then_some(self.current)
    }

    pub fn completed(&self) -> usize {
        self.current
    }

    pub fn is_complete(&self) -> bool {
        self.current >= self.tasks.len()
    }
}

/// Result of one tick, for live consumers.
#[derive(Clone, Debug)]
pub struct StepInfo {
    /// Coordinates on the input manifold at the start of the tick.
    pub h: DVector<f64>,
    pub distance_to_surface: f64,
    pub report: LikelihoodReport,
}

/// A running episode: the single owner of robot state, scales and trace.
#[derive(Debug)]
pub struct Episode {
    scenario: Arc<Scenario>,
    state: RobotState,
    alpha: Vec<f64>,
    schedule: TaskSchedule,
    trace: EpisodeTrace,
    tick: u64,
    max_ticks: u64,
    stop_on_completion: bool,
}

impl Episode {
    pub fn new(scenario: Arc<Scenario>, seed: u64, operator: OperatorKind) -> Self {
        let n = scenario.n_mission();
        let state = RobotState::at_rest(scenario.start);
        Self::with_initial(scenario, seed, operator, state, vec![1.0 / n as f64; n])
    }

    pub fn with_initial(
        scenario: Arc<Scenario>,
        seed: u64,
        operator: OperatorKind,
        state: RobotState,
        alpha: Vec<f64>,
    ) -> Self {
        let cfg = &scenario.config;
        let header = TraceHeader {
            schema: TRACE_SCHEMA,
            seed,
            operator,
            dt: cfg.sim.dt,
            n_mission: scenario.mission.len(),
            n_safety: scenario.safety.len(),
            policies: scenario.mission.iter().chain(&scenario.safety).map(|s| s.name.clone()).collect(),
            convergence_threshold: cfg.task.convergence_threshold,
            position_tolerance: cfg.task.position_tolerance,
            rotation_tolerance: cfg.task.rotation_tolerance_deg.to_radians(),
            dwell: cfg.task.dwell,
            d_safe: scenario.d_safe(),
            tasks: scenario.tasks.clone(),
        };
        let max_ticks = (cfg.sim.max_duration / cfg.sim.dt).round() as u64;
        Self {
            schedule: TaskSchedule::new(&scenario),
            trace: EpisodeTrace::new(header),
            scenario,
            state,
            alpha,
            tick: 0,
            max_ticks,
            stop_on_completion: matches!(operator, OperatorKind::Perfect | OperatorKind::Noisy),
        }
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn state(&self) -> &RobotState {
        &self.state
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn trace(&self) -> &EpisodeTrace {
        &self.trace
    }

    pub fn set_max_ticks(&mut self, n: u64) {
        self.max_ticks = n;
    }

    pub fn set_stop_on_completion(&mut self, stop: bool) {
        self.stop_on_completion = stop;
    }

    pub fn active_task(&self) -> Option<usize> {
        self.schedule.active()
    }

    pub fn completed_tasks(&self) -> usize {
        self.schedule.completed()
    }

    /// Whether the episode should stop before the next tick, and why.
    pub fn termination(&self) -> Option<Termination> {
        if self.stop_on_completion && self.schedule.is_complete() {
            Some(Termination::ScheduleComplete)
        } else if self.tick >= self.max_ticks {
            Some(Termination::MaxDuration)
        } else {
            None
        }
    }

    fn view(&self) -> Result<HumanView, SimError> {
        Ok(human_view(
            self.scenario.human_chart.as_ref(),
            &self.scenario.mission,
            &self.state.pose,
            &self.state.twist.to_dvector(),
        )?)
    }

    /// Runs one tick: schedule update, operator input, adaptation, motion
    /// composition, record, integration.
    pub fn step<F>(&mut self, operator: F) -> Result<StepInfo, SimError>
    where
        F: FnOnce(&Observation<'_>) -> OperatorInput,
    {
        let sc = Arc::clone(&self.scenario);
        let dt = sc.dt();
        let t = self.tick as f64 * dt;
        self.state.time = t;
        let task = self.schedule.update(&self.state.pose);
        let view = self.view()?;
        let gain = sc.config.adaptation.gain_matrix();
        let obs = Observation {
            tick: self.tick,
            t,
            state: &self.state,
            view: &view,
            task: task.map(|i| &sc.tasks[i]),
            task_index: task,
            alpha: &self.alpha,
            gain: &gain,
        };
        let input = operator(&obs);
        let (alpha, report) = adaptation_step(&view, &input, &self.alpha, &sc.config.adaptation)?;
        self.alpha = alpha;
        let u = compose_motion(&sc, &self.state, &self.alpha)?;
        let frame = sc.cylinder.frame(&self.state.pose)?;
        self.trace.records.push(TraceRecord {
            t,
            pose: self.state.pose.to_array(),
            twist: self.state.twist.to_vector().into(),
            u_h: input.u.iter().copied().collect(),
            u_r: u.iter().copied().collect(),
            alpha: self.alpha.clone(),
            p: report.combined.clone(),
            cond: report.conditional.clone(),
            prior: report.prior.clone(),
            phi: potentials(&sc, &self.state.pose)?,
            task,
        });
        self.state = integrate_step(&self.state, &u, dt);
        self.tick += 1;
        let speed = self.state.twist.to_vector().norm();
        if !(speed <= sc.config.sim.divergence_speed) {
            let trace = self.finish_ref(Termination::Diverged);
            return Err(SimError::Diverged { time: t, speed, trace: Box::new(trace) });
        }
        Ok(StepInfo { h: view.h, distance_to_surface: frame.values[2], report })
    }

    fn finish_ref(&mut self, termination: Termination) -> EpisodeTrace {
        let mut trace = self.trace.clone();
        trace.end = Some(TraceEnd { termination, completed_tasks: self.schedule.completed() });
        trace
    }

    /// Closes the trace with the given termination reason.
    pub fn finish(mut self, termination: Termination) -> EpisodeTrace {
        self.trace.end = Some(TraceEnd { termination, completed_tasks: self.schedule.completed() });
        self.trace
    }
}

/// Runs a full episode with a scripted operator.
pub fn run_episode(scenario: Arc<Scenario>, mut operator: OperatorModel, seed: u64) -> Result<EpisodeTrace, SimError> {
    let mut ep = Episode::new(scenario, seed, operator.kind());
    if let OperatorModel::Replay { inputs } = &operator {
        ep.set_max_ticks(ep.max_ticks.min(inputs.len() as u64));
    }
    loop {
        if let Some(reason) = ep.termination() {
            let reason = match (&operator, reason) {
                (OperatorModel::Replay { .. }, Termination::MaxDuration) => Termination::InputsExhausted,
                (_, r) => r,
            };
            return Ok(ep.finish(reason));
        }
        ep.step(|obs| operator.input(obs))?;
    }
}

/// Operator model of the given kind, seeded for this episode.
pub fn operator_for(kind: OperatorKind, scenario: &Scenario, seed: u64) -> OperatorModel {
    match kind {
        OperatorKind::Perfect => OperatorModel::Perfect,
        OperatorKind::Noisy => OperatorModel::noisy(scenario.config.operator.noise_std, seed),
        OperatorKind::Idle | OperatorKind::Live => OperatorModel::Idle,
        OperatorKind::Replay => OperatorModel::Replay { inputs: Vec::new() },
    }
}

/// Replay operator reproducing the inputs recorded in `trace`.
pub fn replay_of(trace: &EpisodeTrace) -> OperatorModel {
    OperatorModel::Replay { inputs: trace.records.iter().map(|r| DVector::from_vec(r.u_h.clone())).collect() }
}
