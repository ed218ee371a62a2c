use std::path::PathBuf;

use dmpc::control::{PolyController, StageCost};
use dmpc::dynamics::ControlAffineModel;
use dmpc::poly::Polynomial;
use dmpc::scenario::Scenario;
use dmpc::sim::{integral_stage_cost, rk4_step, simulate_closed_loop, ConvergenceRule, Monitor, SimOptions, Termination};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// `ẋ = A x + B u` with `A = [[0, 1], [−1, −0.2]]`, `B = (0, 1)`.
fn damped_oscillator() -> (ControlAffineModel, DMatrix<f64>) {
    let x = |i| Polynomial::var(2, i);
    let model = ControlAffineModel::new(
        vec![x(1), &x(0).scale(-1.0) - &x(1).scale(0.2)],
        vec![vec![Polynomial::zero(2)], vec![Polynomial::constant(2, 1.0)]],
    )
    .unwrap();
    (model, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.2]))
}

fn end_error(h: f64, horizon: f64) -> f64 {
    let (model, a) = damped_oscillator();
    let cm = model.compile();
    let x0 = [1.0, 0.0];
    let steps = (horizon / h).round() as usize;
    let mut x = x0.to_vec();
    for _ in 0..steps {
        x = rk4_step(&cm, &x, &[0.0], h).unwrap();
    }
    let exact = (a * horizon).exp() * DVector::from_row_slice(&x0);
    ((x[0] - exact[0]).powi(2) + (x[1] - exact[1]).powi(2)).sqrt()
}

#[test]
fn rk4_global_error_is_fourth_order() {
    let hs = [0.2, 0.1, 0.05, 0.025];
    let errs: Vec<f64> = hs.iter().map(|&h| end_error(h, 10.0)).collect();
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio} from {errs:?}");
    }
}

#[test]
fn rk4_local_error_is_fifth_order() {
    let e1 = end_error(0.1, 0.1);
    let e2 = end_error(0.05, 0.05);
    let ratio = e1 / e2;
    assert!((25.0..=40.0).contains(&ratio), "ratio {ratio}");
}

/// `ẋ = u` with `u ≡ 1` from 0 gives `L = t² + 1`; the trapezoid error
/// on `[0, T]` is exactly `T·dt²/6`.
#[test]
fn trapezoid_error_on_quadratic_integrand() {
    let model = ControlAffineModel::new(
        vec![Polynomial::zero(1)],
        vec![vec![Polynomial::constant(1, 1.0)]],
    )
    .unwrap();
    let stage = StageCost::identity(1, 1);
    let horizon = 10.0;
    for dt in [0.1, 0.05] {
        let opts = SimOptions {
            dt,
            t_max: horizon,
            convergence: ConvergenceRule::Norm { state_tol: 1e-12, input_tol: 1e-12 },
            ..Default::default()
        };
        let mut ctl = PolyController::new(&[Polynomial::constant(1, 1.0)]);
        let log = simulate_closed_loop(&model, &mut ctl, &[0.0], &opts, &Monitor::new(None, &stage, None)).unwrap();
        assert_eq!(log.status, Termination::Timeout);
        let t_end = *log.times.last().unwrap();
        let exact = t_end.powi(3) / 3.0 + t_end;
        let err = integral_stage_cost(&log, &stage) - exact;
        assert!((err - t_end * dt * dt / 6.0).abs() < 1e-9, "dt {dt}: err {err}");
    }
}

fn toy() -> Scenario {
    let cfg = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy2d.toml");
    Scenario::from_file(&cfg).unwrap().0
}

#[test]
fn toy_campaign_is_safe_and_reproducible() {
    let sc = toy();
    let cert = sc.load_certificate().unwrap();
    let kind = sc.config.controller.kind();
    let a = sc.monte_carlo(&cert, kind, 40, 5, 4).unwrap();
    let b = sc.monte_carlo(&cert, kind, 40, 5, 2).unwrap();
    assert_eq!(a.summary.safety_rate, 1.0);
    assert_eq!(a.summary.convergence_rate, 1.0);
    assert_eq!(a.summary.runs, b.summary.runs);
    for (la, lb) in a.logs.iter().zip(&b.logs) {
        assert_eq!(la.to_csv(), lb.to_csv());
    }
}

#[test]
fn equilibrium_start_has_zero_cost() {
    let mut sc = toy();
    sc.config.simulation.x0 = Some(vec![0.0, 0.0]);
    let cert = sc.load_certificate().unwrap();
    let log = sc.simulate(&cert, sc.config.controller.kind()).unwrap();
    assert_eq!(log.status, Termination::Converged);
    assert_eq!(log.convergence_time, Some(0.0));
    assert_eq!(integral_stage_cost(&log, &sc.stage), 0.0);
}

#[test]
fn unsafe_start_is_a_controller_error() {
    let mut sc = toy();
    sc.config.simulation.x0 = Some(vec![0.99, 0.99]);
    let cert = sc.load_certificate().unwrap();
    assert!(cert.h_hat.eval_unchecked(&[0.99, 0.99]) > 0.0);
    let log = sc.simulate(&cert, sc.config.controller.kind()).unwrap();
    assert_eq!(log.status, Termination::ControllerError);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Safety and Lyapunov traces along toy runs from random safe starts.
    #[test]
    fn toy_runs_keep_barrier_and_decrease_value(seed in 0u64..10_000) {
        let sc = toy();
        let cert = sc.load_certificate().unwrap();
        let r = sc.monte_carlo(&cert, sc.config.controller.kind(), 1, seed, 1).unwrap();
        let log = &r.logs[0];
        prop_assert!(log.max_h() <= 1e-9);
        prop_assert!(log.max_state_constraint <= 1e-9 && log.max_input_constraint <= 1e-9);
        let stop = log.convergence_index();
        for k in 1..stop {
            prop_assert!(log.v_hat[k] <= log.v_hat[k - 1] + 1e-6 * (1.0 + log.v_hat[k - 1]));
        }
        for w in log.cum_cost.windows(2) {
            prop_assert!(w[1] >= w[0]);
        }
    }
}
