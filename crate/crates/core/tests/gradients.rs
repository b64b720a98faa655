use nalgebra::{DVector, UnitQuaternion, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taskadapt_core::geometry::Pose;
use taskadapt_core::rmp::PolicySpec;
use taskadapt_core::scenario::Scenario;

const STATES: usize = 50;
const STEP: f64 = 1e-6;

fn rel_err(analytic: &DVector<f64>, numeric: &DVector<f64>) -> f64 {
    (analytic - numeric).norm() / analytic.norm().max(numeric.norm()).max(1e-3)
}

fn central_difference(spec: &PolicySpec, x: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let mut a = x.clone();
        let mut b = x.clone();
        a[i] += STEP;
        b[i] -= STEP;
        (spec.potential.value(&a) - spec.potential.value(&b)) / (2.0 * STEP)
    })
}

fn random_pose(sc: &Scenario, rng: &mut ChaCha8Rng) -> Pose {
    let base = sc.cylinder.aligned_pose(
        rng.gen_range(0.05..0.95),
        rng.gen_range(-0.6..0.6),
        rng.gen_range(0.02..0.3),
        rng.gen_range(-1.2..2.8),
    );
    let tilt = Vector3::new(rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4));
    Pose::new(base.position, base.orientation * UnitQuaternion::from_scaled_axis(tilt))
}

#[test]
fn chart_gradients_match_finite_differences() {
    let sc = Scenario::reference();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for spec in sc.mission.iter().chain(&sc.safety) {
        let mut worst: f64 = 0.0;
        for _ in 0..STATES {
            let x = spec.chart.apply(&random_pose(&sc, &mut rng)).unwrap();
            let g = spec.potential.gradient(&x);
            worst = worst.max(rel_err(&g, &central_difference(spec, &x)));
        }
        assert!(worst <= 1e-5, "{}: relative error {worst:.3e}", spec.name);
    }
}

#[test]
fn pose_gradients_match_finite_differences() {
    // J^T grad Phi against differences of Phi along the pose retraction
    let sc = Scenario::reference();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for spec in sc.mission.iter().chain(&sc.safety) {
        let mut worst: f64 = 0.0;
        for _ in 0..STATES {
            let pose = random_pose(&sc, &mut rng);
            let x = spec.chart.apply(&pose).unwrap();
            let j = spec.chart.jacobian(&pose).unwrap();
            let analytic = j.transpose() * spec.potential.gradient(&x);
            let phi = |p: &Pose| spec.potential.value(&spec.chart.apply(p).unwrap());
            let numeric = DVector::from_fn(6, |i, _| {
                let mut e = Vector6::zeros();
                e[i] = STEP;
                (phi(&pose.retract(&e)) - phi(&pose.retract(&-e))) / (2.0 * STEP)
            });
            worst = worst.max(rel_err(&analytic, &numeric));
        }
        assert!(worst <= 1e-5, "{}: relative error {worst:.3e}", spec.name);
    }
}

#[test]
fn potentials_vanish_only_at_their_optimum() {
    let sc = Scenario::reference();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for spec in sc.mission.iter().chain(&sc.safety) {
        assert_eq!(spec.potential.value(&spec.optimum), 0.0, "{}", spec.name);
        assert!(spec.potential.gradient(&spec.optimum).norm() < 1e-12, "{}", spec.name);
        for _ in 0..STATES {
            let x = spec.chart.apply(&random_pose(&sc, &mut rng)).unwrap();
            assert!(spec.potential.value(&x) >= 0.0);
        }
    }
}

#[test]
fn attractor_gradients_are_bounded_by_gain() {
    let sc = Scenario::reference();
    let gain = sc.config.mission.position.gain;
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for spec in &sc.mission[..6] {
        for _ in 0..200 {
            let x = DVector::from_fn(3, |_, _| rng.gen_range(-10.0..10.0));
            assert!(spec.potential.gradient(&x).norm() <= gain * (1.0 + 1e-12));
        }
        let far = &spec.optimum + DVector::from_vec(vec![5.0, 0.0, 0.0]);
        assert!((spec.potential.gradient(&far).norm() - gain).abs() <= 0.01 * gain);
    }
}
