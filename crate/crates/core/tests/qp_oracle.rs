mod common;

use common::{enumerate, random_qp};
use dmpc::qp::{solve_qp, QpError, QpProblem};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn matches_enumeration_on_random_problems() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for n in 0..1000 {
        let p = random_qp(&mut rng);
        let s = solve_qp(&p).unwrap_or_else(|e| panic!("problem {n}: {e}"));
        let oracle = enumerate(&p).expect("oracle found no point");
        assert!((s.objective - oracle).abs() <= 1e-8 * (1.0 + oracle.abs()), "problem {n}: {} vs {oracle}", s.objective);
        assert!(p.max_violation(&s.u_star) <= 1e-9);
        assert!(s.kkt_residual <= 1e-8, "problem {n}: kkt {}", s.kkt_residual);
    }
}

#[test]
fn infeasible_random_systems_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let m = rng.gen_range(1..=4);
        let a0 = DMatrix::from_fn(1, m, |_, _| rng.gen_range(-1.0..1.0));
        // a·u ≤ −1 and −a·u ≤ −1 cannot both hold
        let mut a = DMatrix::zeros(2, m);
        a.row_mut(0).copy_from(&a0.row(0));
        a.row_mut(1).copy_from(&(-a0.row(0)));
        let p = QpProblem::new(DMatrix::identity(m, m), DVector::zeros(m), a, DVector::from_vec(vec![-1.0, -1.0])).unwrap();
        assert!(matches!(solve_qp(&p), Err(QpError::Infeasible { .. })));
    }
}

proptest! {
    #[test]
    fn objective_scaling_preserves_argmin(seed in 0u64..5000, lambda in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_qp(&mut rng);
        let s1 = solve_qp(&p).unwrap();
        let scaled = QpProblem::new(&p.h * lambda, &p.c * lambda, p.a.clone(), p.b.clone()).unwrap();
        let s2 = solve_qp(&scaled).unwrap();
        prop_assert!((s1.u_star - s2.u_star).amax() <= 1e-9);
    }

    #[test]
    fn solutions_are_feasible(seed in 0u64..5000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_qp(&mut rng);
        let s = solve_qp(&p).unwrap();
        prop_assert!(p.max_violation(&s.u_star) <= 1e-9);
        prop_assert!(s.multipliers.iter().all(|l| *l >= 0.0));
    }
}
