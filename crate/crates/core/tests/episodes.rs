use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use taskadapt_core::adaptation::{human_view, policy_likelihoods, OperatorInput};
use taskadapt_core::batch::{completed_all, read_summary, run_batch, run_seeds, summarize, Execution};
use taskadapt_core::metrics::{episode_metrics, summary_rows};
use taskadapt_core::operators::{perfect_input, OperatorKind, OperatorModel};
use taskadapt_core::policies::RotationMode;
use taskadapt_core::scenario::{Scenario, REFERENCE_CONFIG};
use taskadapt_core::sim::{
    compose_motion, pose_error, pulled_policies, replay_of, run_episode, Episode, RobotState,
};
use taskadapt_core::trace::{EpisodeTrace, Termination};

fn reference() -> Arc<Scenario> {
    Arc::new(Scenario::reference())
}

fn modes() -> [RotationMode; 2] {
    [RotationMode::Horizontal, RotationMode::Vertical]
}

#[test]
fn composed_motion_matches_weighted_average() {
    let sc = reference();
    let mut state = RobotState::at_rest(sc.surface_pose(0.45, 0.1, 0.3));
    state.twist.linear.x = 0.05;
    state.twist.angular.z = -0.2;
    let alpha = [0.1, 0.9, 0.0, 0.3, 0.0, 0.5, 1.0, 0.2];
    let u = compose_motion(&sc, &state, &alpha).unwrap();
    let pulled = pulled_policies(&sc, &state, &alpha).unwrap();
    let mut a = DMatrix::zeros(6, 6);
    let mut b = DVector::zeros(6);
    for p in &pulled {
        a += &p.metric;
        b += &p.metric * &p.f;
    }
    let oracle = a.clone().lu().solve(&b).unwrap();
    assert!((DVector::from_iterator(6, u.iter().copied()) - oracle).amax() < 1e-8);
}

#[test]
fn perfect_demonstration_ranks_target_first_at_rest() {
    let sc = reference();
    let gain = sc.config.adaptation.gain_matrix();
    for (k, task) in sc.tasks.iter().enumerate() {
        let pose = sc.start;
        let view = human_view(sc.human_chart.as_ref(), &sc.mission, &pose, &DVector::zeros(6)).unwrap();
        let target = &view.policies[task.position_policy].gradient;
        let u = perfect_input(target, &view.hdot, &gain).unwrap();
        let rep = policy_likelihoods(&view, &OperatorInput::new(u, 0.0), &gain).unwrap();
        let best = rep.combined[..6].iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(rep.combined[task.position_policy], best, "task {k}");
        assert!(rep.prior.iter().all(|p| (p - 1.0).abs() < 1e-12));
    }
}

#[test]
fn perfect_operator_converges_on_every_target_and_mode() {
    let base = Scenario::reference();
    let step = base.config.adaptation.alpha_step;
    let budget = (1.0 / step).ceil() as usize + 10;
    for target in 0..6 {
        for mode in modes() {
            let sc = Arc::new(base.with_tasks(&[(target, mode)]));
            let rot = sc.tasks[0].rotation_policy;
            let mut ep = Episode::new(Arc::clone(&sc), 0, OperatorKind::Perfect);
            let mut op = OperatorModel::Perfect;
            let mut competitors_cleared = false;
            for _ in 0..budget {
                ep.step(|o| op.input(o)).unwrap();
                competitors_cleared |= (0..6).filter(|&j| j != target).all(|j| ep.alpha()[j] == 0.0);
            }
            let a = ep.alpha();
            assert!(a[target] >= 0.95, "target {target} {mode:?}: {a:?}");
            assert!(a[rot] >= 0.95, "target {target} {mode:?}: {a:?}");
            assert!(competitors_cleared, "target {target} {mode:?}");
        }
    }
}

#[test]
fn demonstrated_target_reaches_full_scale() {
    let sc = Arc::new(Scenario::reference().with_tasks(&[(3, RotationMode::Vertical)]));
    let step = sc.config.adaptation.alpha_step;
    let mut ep = Episode::new(Arc::clone(&sc), 0, OperatorKind::Perfect);
    let mut op = OperatorModel::Perfect;
    for _ in 0..(1.0 / step).ceil() as usize + 5 {
        ep.step(|o| op.input(o)).unwrap();
    }
    let a = ep.alpha();
    assert_eq!(a[3], 1.0);
    assert_eq!(a[7], 1.0, "orthogonal rotation feature also at full scale");
    assert_eq!(a[6], 0.0);
    // targets on the same height ring end up orthogonal to the demonstrated
    // one once it is reached; only those may have regrown
    for j in [0, 2, 4] {
        assert_eq!(a[j], 0.0, "competitor {j}");
    }
}

fn mission_residual(sc: &Scenario, state: &RobotState, alpha: &[f64]) -> f64 {
    let twist = state.twist.to_dvector();
    let mut s = DVector::zeros(6);
    for (spec, a) in sc.mission.iter().zip(alpha) {
        let ev = spec.evaluate_at(&state.pose, &twist).unwrap();
        s += ev.jacobian.transpose() * (&ev.policy.metric * &ev.gradient) * *a;
    }
    s.norm()
}

#[test]
fn converged_scales_reach_optimum_when_idle() {
    let base = Scenario::reference();
    for target in [0, 4] {
        for mode in modes() {
            let sc = Arc::new(base.with_tasks(&[(target, mode)]));
            let mut ep = Episode::new(Arc::clone(&sc), 0, OperatorKind::Perfect);
            ep.set_stop_on_completion(false);
            let mut op = OperatorModel::Perfect;
            while ep.active_task().is_some() {
                ep.step(|o| op.input(o)).unwrap();
            }
            let mut idle = OperatorModel::Idle;
            for _ in 0..1000 {
                ep.step(|o| idle.input(o)).unwrap();
            }
            let st = ep.state();
            assert!(mission_residual(&sc, st, ep.alpha()) <= 1e-3);
            assert!(st.twist.linear.norm() <= 1e-3);
        }
    }
}

#[test]
fn idle_operator_settles_under_initial_scales() {
    let sc = reference();
    let tr = run_episode(Arc::clone(&sc), OperatorModel::Idle, 0).unwrap();
    let last = tr.records.last().unwrap();
    let speed = DVector::from_row_slice(&last.twist[..3]).norm();
    assert!(speed < 1e-3, "speed {speed}");
    assert!(tr.records.iter().all(|r| r.alpha == tr.records[0].alpha));
    assert_eq!(tr.end.unwrap().termination, Termination::MaxDuration);
}

#[test]
fn perfect_operator_completes_the_sequence_safely() {
    let sc = reference();
    let tr = run_episode(Arc::clone(&sc), OperatorModel::Perfect, 0).unwrap();
    assert!(completed_all(&tr));
    let d_safe = sc.d_safe();
    for r in &tr.records {
        let f = sc.cylinder.frame(&taskadapt_core::geometry::Pose::from_array(&r.pose)).unwrap();
        assert!(f.values[2] >= d_safe - 0.01);
    }
    for m in episode_metrics(&tr).unwrap() {
        assert!(m.trans_err_m.unwrap() <= 0.05);
        assert!(m.rot_err_rad.unwrap() <= 3f64.to_radians());
        assert!(m.convergence_pos_s.is_some() && m.convergence_rot_s.is_some());
    }
    // the final pose of each task is inside the tolerance box
    for (k, task) in sc.tasks.iter().enumerate() {
        let last = tr.records.iter().rev().find(|r| r.task == Some(k)).unwrap();
        let (dp, dr) = pose_error(&taskadapt_core::geometry::Pose::from_array(&last.pose), task);
        assert!(dp <= 0.05 && dr <= 3f64.to_radians());
    }
}

#[test]
fn same_seed_gives_identical_traces() {
    let sc = reference();
    let a = run_episode(Arc::clone(&sc), OperatorModel::noisy(0.2, 5), 5).unwrap();
    let b = run_episode(Arc::clone(&sc), OperatorModel::noisy(0.2, 5), 5).unwrap();
    assert_eq!(a.to_jsonl(), b.to_jsonl());
    let c = run_episode(Arc::clone(&sc), OperatorModel::noisy(0.2, 6), 6).unwrap();
    assert_ne!(a.records[1].u_h, c.records[1].u_h);
}

#[test]
fn persisted_traces_reproduce_metrics_exactly() {
    let sc = reference();
    let tr = run_episode(Arc::clone(&sc), OperatorModel::noisy(0.2, 3), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    tr.save(&path).unwrap();
    let back = EpisodeTrace::load(&path).unwrap();
    assert_eq!(back, tr);
    assert_eq!(summary_rows(&back).unwrap(), summary_rows(&tr).unwrap());
}

#[test]
fn replaying_recorded_inputs_reproduces_the_episode() {
    let sc = reference();
    let tr = run_episode(Arc::clone(&sc), OperatorModel::noisy(0.2, 9), 9).unwrap();
    let replay = run_episode(Arc::clone(&sc), replay_of(&tr), 9).unwrap();
    assert_eq!(replay.records.len(), tr.records.len());
    for (a, b) in tr.records.iter().zip(&replay.records) {
        assert_eq!(a.alpha, b.alpha);
        assert_eq!(a.pose, b.pose);
    }
    assert_eq!(replay.end.unwrap().termination, Termination::InputsExhausted);
}

#[test]
fn batch_writes_traces_and_idempotent_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("scenario.toml");
    std::fs::write(&cfg, REFERENCE_CONFIG).unwrap();
    let out = dir.path().join("out");
    let report = run_batch(&cfg, OperatorKind::Perfect, None, 1, &out, Execution::Parallel).unwrap();
    assert!(!report.any_diverged());
    assert_eq!(report.rows.len(), 6);
    assert!(out.join("trace_seed0.jsonl").exists());
    let written = read_summary(&report.summary_path).unwrap();
    assert_eq!(written, report.rows);
    let (again, _) = summarize(&out).unwrap();
    assert_eq!(again, report.rows);
    let (third, _) = summarize(&out).unwrap();
    assert_eq!(third, again);
}

#[test]
fn sequential_and_parallel_batches_agree() {
    let mut cfg = Scenario::reference().config;
    cfg.sim.max_duration = 3.0;
    let sc = Arc::new(Scenario::from_config(cfg).unwrap());
    let seeds = [0, 1, 2, 3];
    let a = run_seeds(&sc, OperatorKind::Noisy, None, &seeds, Execution::Sequential).unwrap();
    let b = run_seeds(&sc, OperatorKind::Noisy, None, &seeds, Execution::Parallel).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.seed, y.seed);
        assert_eq!(x.trace, y.trace);
    }
}

#[test]
fn missing_targets_are_named() {
    let text = REFERENCE_CONFIG.replace("[[targets]]", "[[nontargets]]");
    let err = taskadapt_core::scenario::ScenarioConfig::from_toml(&text).unwrap_err().to_string();
    assert!(err.contains("targets"), "{err}");
}
