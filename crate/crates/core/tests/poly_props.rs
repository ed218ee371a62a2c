#![allow(clippy::needless_range_loop)]

use dmpc::dynamics::{lie_derivative, spacecraft_model, SpacecraftParams};
use dmpc::poly::{Monomial, Polynomial};
use proptest::prelude::*;

const N: usize = 3;

fn poly_strategy(max_deg: u32) -> impl Strategy<Value = Polynomial> {
    prop::collection::vec((prop::collection::vec(0u32..=max_deg, N), -3.0f64..3.0), 0..8).prop_map(|terms| {
        terms
            .into_iter()
            .fold(Polynomial::zero(N), |acc, (e, c)| &acc + &Polynomial::monomial(Monomial::new(e), c))
    })
}

fn point() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.5f64..1.5, N)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

/// Central difference of `p` along coordinate `i`.
fn fd(p: &Polynomial, x: &[f64], i: usize) -> f64 {
    let h = 1e-5;
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += h;
    xm[i] -= h;
    (p.eval_unchecked(&xp) - p.eval_unchecked(&xm)) / (2.0 * h)
}

proptest! {
    #[test]
    fn ring_operations_agree_with_pointwise_arithmetic(p in poly_strategy(3), q in poly_strategy(3), x in point()) {
        let (pv, qv) = (p.eval_unchecked(&x), q.eval_unchecked(&x));
        prop_assert!(close((&p + &q).eval_unchecked(&x), pv + qv));
        prop_assert!(close((&p - &q).eval_unchecked(&x), pv - qv));
        prop_assert!(close((&p * &q).eval_unchecked(&x), pv * qv));
        prop_assert!(close(p.axpy(2.5, &q).eval_unchecked(&x), pv + 2.5 * qv));
    }

    #[test]
    fn multiplication_is_commutative_and_distributive(p in poly_strategy(2), q in poly_strategy(2), r in poly_strategy(2)) {
        prop_assert!((&p * &q).coeff_distance_sq(&(&q * &p)).unwrap() <= 1e-18);
        let lhs = &p * &(&q + &r);
        let rhs = &(&p * &q) + &(&p * &r);
        prop_assert!(lhs.coeff_distance_sq(&rhs).unwrap() <= 1e-18 * (1.0 + lhs.coeff_norm_sq()));
    }

    #[test]
    fn degree_of_product_is_additive(p in poly_strategy(3), q in poly_strategy(3)) {
        prop_assume!(!p.is_zero() && !q.is_zero());
        // top homogeneous parts multiply to a nonzero form
        prop_assert_eq!((&p * &q).degree(), p.degree() + q.degree());
    }

    #[test]
    fn gradient_matches_finite_differences(p in poly_strategy(4), x in point()) {
        let g = p.gradient();
        for i in 0..N {
            let a = g[i].eval_unchecked(&x);
            let b = fd(&p, &x, i);
            prop_assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs()), "{} vs {}", a, b);
        }
    }

    #[test]
    fn product_rule_holds(p in poly_strategy(3), q in poly_strategy(3)) {
        for i in 0..N {
            let lhs = (&p * &q).derivative(i);
            let rhs = &(&p.derivative(i) * &q) + &(&p * &q.derivative(i));
            prop_assert!(lhs.coeff_distance_sq(&rhs).unwrap() <= 1e-18 * (1.0 + lhs.coeff_norm_sq()));
        }
    }

    #[test]
    fn composition_evaluates_as_nested_call(p in poly_strategy(3), s in prop::collection::vec(poly_strategy(2), N), x in point()) {
        let c = p.compose(&s).unwrap();
        let inner: Vec<f64> = s.iter().map(|si| si.eval_unchecked(&x)).collect();
        let a = c.eval_unchecked(&x);
        let b = p.eval_unchecked(&inner);
        prop_assert!((a - b).abs() <= 1e-8 * (1.0 + b.abs()), "{} vs {}", a, b);
    }

    #[test]
    fn compiled_and_interpreted_evaluation_agree(p in poly_strategy(5), x in point()) {
        prop_assert!(close(p.compile().eval(&x), p.eval_unchecked(&x)));
    }

    #[test]
    fn json_round_trip_is_exact(p in poly_strategy(4)) {
        let text = serde_json::to_string(&p).unwrap();
        let q: Polynomial = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(p, q);
    }

    #[test]
    fn scaled_variables_match_scaled_arguments(p in poly_strategy(3), d in prop::collection::vec(0.1f64..3.0, N), x in point()) {
        let dx: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a * b).collect();
        prop_assert!(close(p.scale_vars(&d).eval_unchecked(&x), p.eval_unchecked(&dx)));
    }

    #[test]
    fn lie_derivative_is_directional_derivative(sig in prop::collection::vec(-0.5f64..0.5, 3), w in prop::collection::vec(-0.01f64..0.01, 3)) {
        // d/dt V(x(t)) along ẋ = f(x, 0) for V = |x|², checked against f·∇V
        let model = spacecraft_model(&SpacecraftParams::HUBBLE).unwrap();
        let v = Polynomial::sum_of_squares_of_vars(6);
        let lv = lie_derivative(&v, model.drift()).unwrap();
        let x = [w[0], w[1], w[2], sig[0], sig[1], sig[2]];
        let f = model.evaluate_dynamics(&x, &[0.0; 3]).unwrap();
        let expect: f64 = x.iter().zip(&f).map(|(a, b)| 2.0 * a * b).sum();
        prop_assert!((lv.eval_unchecked(&x) - expect).abs() <= 1e-12);
    }
}
