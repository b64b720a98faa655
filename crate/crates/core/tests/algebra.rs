use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use taskadapt_core::rmp::{pinv, pullback, rmp_sum, spectral, MotionPolicy};

fn vec_strategy(n: usize) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-2.0..2.0f64, n).prop_map(DVector::from_vec)
}

fn psd_strategy(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.5..1.5f64, n * n).prop_map(move |v| {
        let m = DMatrix::from_vec(n, n, v);
        &m * m.transpose() + DMatrix::identity(n, n) * 0.1
    })
}

fn policy_strategy(n: usize) -> impl Strategy<Value = MotionPolicy> {
    (vec_strategy(n), psd_strategy(n)).prop_map(|(f, a)| MotionPolicy::new(f, a).unwrap())
}

// Independent solve of the metric-weighted average via normal equations.
fn oracle_sum(ps: &[MotionPolicy]) -> (DMatrix<f64>, DVector<f64>) {
    let n = ps[0].dim();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DVector::zeros(n);
    for p in ps {
        a += &p.metric;
        b += &p.metric * &p.f;
    }
    let f = a.clone().lu().solve(&b).unwrap();
    (a, f)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn identity_pullback_is_noop(p in policy_strategy(4)) {
        let q = pullback(&p, &DMatrix::identity(4, 4)).unwrap();
        prop_assert!((&q.f - &p.f).amax() <= 1e-12);
        prop_assert!((&q.metric - &p.metric).amax() <= 1e-12);
    }

    #[test]
    fn zero_metric_policy_is_neutral(p in policy_strategy(3), f in vec_strategy(3)) {
        let zero = MotionPolicy::new(f, DMatrix::zeros(3, 3)).unwrap();
        let s = rmp_sum([&p, &zero]).unwrap();
        prop_assert!((&s.f - &p.f).amax() <= 1e-9);
        prop_assert!((&s.metric - &p.metric).amax() == 0.0);
    }

    #[test]
    fn sum_is_permutation_invariant(ps in prop::collection::vec(policy_strategy(3), 2..6), seed in any::<u64>()) {
        let mut perm: Vec<usize> = (0..ps.len()).collect();
        let mut s = seed;
        for i in (1..perm.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let a = rmp_sum(&ps).unwrap();
        let b = rmp_sum(perm.iter().map(|&k| &ps[k])).unwrap();
        prop_assert!((&a.f - &b.f).amax() <= 1e-8);
        prop_assert!((&a.metric - &b.metric).amax() <= 1e-8);
    }

    #[test]
    fn sum_matches_normal_equations(ps in prop::collection::vec(policy_strategy(3), 1..5)) {
        let s = rmp_sum(&ps).unwrap();
        let (a, f) = oracle_sum(&ps);
        prop_assert!((&s.metric - &a).amax() <= 1e-12);
        prop_assert!((&s.f - &f).amax() <= 1e-8 * (1.0 + f.amax()));
    }

    #[test]
    fn pullback_commutes_with_sum(ps in prop::collection::vec(policy_strategy(3), 2..4),
                                  j in prop::collection::vec(-1.0..1.0f64, 12)) {
        let j = DMatrix::from_vec(3, 4, j);
        let pulled: Vec<_> = ps.iter().map(|p| pullback(p, &j).unwrap()).collect();
        let lhs = pullback(&rmp_sum(&ps).unwrap(), &j).unwrap();
        let rhs = rmp_sum(&pulled).unwrap();
        prop_assert!((&lhs.metric - &rhs.metric).amax() <= 1e-8);
        // forces agree where the pulled metric acts
        let dl = &lhs.metric * &lhs.f;
        let dr = &rhs.metric * &rhs.f;
        prop_assert!((&dl - &dr).amax() <= 1e-8 * (1.0 + dl.amax()));
    }

    #[test]
    fn spectral_reconstructs(a in psd_strategy(4)) {
        let e = spectral(&a).unwrap();
        prop_assert!((e.reconstruct() - &a).amax() <= 1e-8);
        prop_assert!(e.eigenvalues.iter().all(|&l| l >= 0.0));
        prop_assert!(e.eigenvalues.as_slice().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn pinv_penrose_conditions(v in prop::collection::vec(-1.0..1.0f64, 12)) {
        let m = DMatrix::from_vec(3, 4, v);
        let p = pinv(&m);
        prop_assert!((&m * &p * &m - &m).amax() <= 1e-9);
        prop_assert!((&p * &m * &p - &p).amax() <= 1e-9);
    }
}

#[test]
fn hand_pullback_example() {
    // x = 2q1 + q2 with A = 3, f = 1
    let p = MotionPolicy::new(DVector::from_vec(vec![1.0]), DMatrix::from_element(1, 1, 3.0)).unwrap();
    let j = DMatrix::from_row_slice(1, 2, &[2.0, 1.0]);
    let q = pullback(&p, &j).unwrap();
    assert_eq!(q.metric, DMatrix::from_row_slice(2, 2, &[12.0, 6.0, 6.0, 3.0]));
    // minimum-norm solution of J q = f
    assert!((&q.f - DVector::from_vec(vec![0.4, 0.2])).amax() < 1e-12);
}

#[test]
fn hand_sum_example() {
    let a = MotionPolicy::new(DVector::from_vec(vec![1.0, 0.0]), DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]))).unwrap();
    let b = MotionPolicy::new(DVector::from_vec(vec![3.0, 2.0]), DMatrix::identity(2, 2)).unwrap();
    let s = rmp_sum([&a, &b]).unwrap();
    assert_eq!(s.metric, DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0])));
    assert!((&s.f - DVector::from_vec(vec![2.0, 2.0])).amax() < 1e-12);
}
