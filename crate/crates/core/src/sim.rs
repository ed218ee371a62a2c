//! Fixed-step closed-loop simulation, convergence detection, cost
//! accounting and Monte-Carlo campaigns.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certify::{sample_sublevel, CertifyError, SampleBox};
use crate::control::{
    CbfClfController, CertificatePair, ControlError, Controller, DmpcController, PolyController, StageCost, SAFE_TOL,
};
use crate::dynamics::{mrp_to_euler, CompiledModel, ConstraintSet, ControlAffineModel};
use crate::poly::{CompiledPoly, Polynomial};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("non-finite state after integration step: {0:?}")]
    NonFinite(Vec<f64>),
    #[error("invalid simulation option: {0}")]
    InvalidOption(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Sampling(#[from] CertifyError),
    #[error("worker pool: {0}")]
    Pool(String),
}

/// One classical RK4 step with `u` held constant.
pub fn rk4_step(model: &CompiledModel, x: &[f64], u: &[f64], h: f64) -> Result<Vec<f64>, SimError> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(SimError::InvalidOption(format!("step size {h}")));
    }
    let n = x.len();
    let k1 = model.eval(x, u);
    let shifted = |k: &[f64], c: f64| -> Vec<f64> { x.iter().zip(k).map(|(xi, ki)| xi + c * ki).collect() };
    let k2 = model.eval(&shifted(&k1, 0.5 * h), u);
    let k3 = model.eval(&shifted(&k2, 0.5 * h), u);
    let k4 = model.eval(&shifted(&k3, h), u);
    let next: Vec<f64> = (0..n)
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    if next.iter().any(|v| !v.is_finite()) {
        return Err(SimError::NonFinite(next));
    }
    Ok(next)
}

/// When a sample counts as "at rest".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConvergenceRule {
    /// State `(ω, σ)`: rate, 3-2-1 Euler angle and torque thresholds.
    Attitude {
        rate_tol_rad: f64,
        angle_tol_rad: f64,
        input_tol: f64,
    },
    /// Infinity-norm thresholds on the raw state and input.
    Norm { state_tol: f64, input_tol: f64 },
}

impl ConvergenceRule {
    pub fn attitude_default() -> Self {
        ConvergenceRule::Attitude {
            rate_tol_rad: 0.001f64.to_radians(),
            angle_tol_rad: 0.3f64.to_radians(),
            input_tol: 0.001,
        }
    }

    pub fn holds(&self, x: &[f64], u: &[f64]) -> bool {
        let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        match self {
            ConvergenceRule::Attitude {
                rate_tol_rad,
                angle_tol_rad,
                input_tol,
            } => {
                if x.len() != 6 || inf(&x[..3]) > *rate_tol_rad || inf(u) > *input_tol {
                    return false;
                }
                match mrp_to_euler([x[3], x[4], x[5]]) {
                    Ok((a, b, c)) => inf(&[a, b, c]) <= *angle_tol_rad,
                    Err(_) => false,
                }
            }
            ConvergenceRule::Norm { state_tol, input_tol } => inf(x) <= *state_tol && inf(u) <= *input_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimOptions {
    pub dt: f64,
    pub t_max: f64,
    /// RK4 substeps per control step.
    pub substeps: usize,
    /// Consecutive grid points the thresholds must hold.
    pub debounce: usize,
    pub convergence: ConvergenceRule,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            dt: 0.1,
            t_max: 5000.0,
            substeps: 1,
            debounce: 10,
            convergence: ConvergenceRule::attitude_default(),
        }
    }
}

impl SimOptions {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::InvalidOption(format!("dt = {}", self.dt)));
        }
        if !(self.t_max >= 0.0 && self.t_max.is_finite()) {
            return Err(SimError::InvalidOption(format!("t_max = {}", self.t_max)));
        }
        if self.substeps == 0 || self.debounce == 0 {
            return Err(SimError::InvalidOption("substeps and debounce must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    Timeout,
    Unsafe,
    ControllerError,
}

/// Quantities logged next to the trajectory. Without a certificate the
/// `V̂`, `ĥ` and `τ` columns are NaN.
pub struct Monitor {
    v: Option<CompiledPoly>,
    h: Option<CompiledPoly>,
    grad_v: Vec<CompiledPoly>,
    stage: StageCost,
    constraints: Option<ConstraintSet>,
}

impl Monitor {
    pub fn new(cert: Option<&CertificatePair>, stage: &StageCost, constraints: Option<&ConstraintSet>) -> Self {
        Monitor {
            v: cert.map(|c| c.v_hat.compile()),
            h: cert.map(|c| c.h_hat.compile()),
            grad_v: cert
                .map(|c| c.v_hat.gradient().iter().map(Polynomial::compile).collect())
                .unwrap_or_default(),
            stage: stage.clone(),
            constraints: constraints.cloned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub v_hat: Vec<f64>,
    pub h_hat: Vec<f64>,
    pub tau: Vec<f64>,
    pub stage_cost: Vec<f64>,
    pub cum_cost: Vec<f64>,
    /// Wall time of each controller call; excluded from reproducibility checks.
    pub wall_ms: Vec<f64>,
    pub status: Termination,
    pub convergence_time: Option<f64>,
    pub message: Option<String>,
    /// Worst `g_k(x)` and `H_U u − 1` seen along the run.
    pub max_state_constraint: f64,
    pub max_input_constraint: f64,
}

impl TrajectoryLog {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn max_h(&self) -> f64 {
        self.h_hat.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_tau(&self) -> f64 {
        self.tau.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the convergence grid point, or the last row.
    pub fn convergence_index(&self) -> usize {
        match self.convergence_time {
            Some(t) => ((t / self.dt).round() as usize).min(self.len().saturating_sub(1)),
            None => self.len().saturating_sub(1),
        }
    }

    pub fn to_csv(&self) -> String {
        let nx = self.states.first().map(Vec::len).unwrap_or(0);
        let nu = self.inputs.first().map(Vec::len).unwrap_or(0);
        let mut s = String::from("t");
        for i in 1..=nx {
            let _ = write!(s, ",x{i}");
        }
        for j in 1..=nu {
            let _ = write!(s, ",u{j}");
        }
        s.push_str(",V_hat,h_hat,tau,L,cum_cost\n");
        for k in 0..self.len() {
            let _ = write!(s, "{}", self.times[k]);
            for v in self.states[k].iter().chain(&self.inputs[k]) {
                let _ = write!(s, ",{v:e}");
            }
            let _ = writeln!(
                s,
                ",{:e},{:e},{:e},{:e},{:e}",
                self.v_hat[k], self.h_hat[k], self.tau[k], self.stage_cost[k], self.cum_cost[k]
            );
        }
        s
    }
}

/// Runs `controller` in sample-and-hold at `opts.dt` from `x0`.
pub fn simulate_closed_loop(
    model: &ControlAffineModel,
    controller: &mut dyn Controller,
    x0: &[f64],
    opts: &SimOptions,
    monitor: &Monitor,
) -> Result<TrajectoryLog, SimError> {
    opts.validate()?;
    if x0.len() != model.nx() {
        return Err(SimError::Dimension(format!("x0 has {} entries, model {}", x0.len(), model.nx())));
    }
    let cm = model.compile();
    let steps = (opts.t_max / opts.dt).round() as usize;
    let hsub = opts.dt / opts.substeps as f64;
    let mut log = TrajectoryLog {
        dt: opts.dt,
        times: Vec::new(),
        states: Vec::new(),
        inputs: Vec::new(),
        v_hat: Vec::new(),
        h_hat: Vec::new(),
        tau: Vec::new(),
        stage_cost: Vec::new(),
        cum_cost: Vec::new(),
        wall_ms: Vec::new(),
        status: Termination::Timeout,
        convergence_time: None,
        message: None,
        max_state_constraint: f64::NEG_INFINITY,
        max_input_constraint: f64::NEG_INFINITY,
    };
    let mut x = x0.to_vec();
    let mut streak = 0usize;
    for k in 0..=steps {
        let t = k as f64 * opts.dt;
        let hx = monitor.h.as_ref().map_or(f64::NAN, |h| h.eval(&x));
        if let Some(cs) = &monitor.constraints {
            log.max_state_constraint = log.max_state_constraint.max(cs.max_state_violation(&x));
        }
        let t0 = Instant::now();
        let res = controller.control(&x);
        let wall = t0.elapsed().as_secs_f64() * 1e3;
        let u = match res {
            Ok(u) => u,
            Err(e) => {
                log.status = Termination::ControllerError;
                log.message = Some(format!("{e} at x = {x:?}"));
                break;
            }
        };
        if let Some(cs) = &monitor.constraints {
            log.max_input_constraint = log.max_input_constraint.max(cs.max_input_violation(&u));
        }
        let f = cm.eval(&x, &u);
        let tau = if monitor.grad_v.is_empty() {
            f64::NAN
        } else {
            monitor.grad_v.iter().zip(&f).map(|(g, fi)| g.eval(&x) * fi).sum::<f64>() + monitor.stage.eval(&x, &u)
        };
        let l = monitor.stage.eval(&x, &u);
        let cum = match (log.cum_cost.last(), log.stage_cost.last()) {
            (Some(c), Some(lp)) => c + 0.5 * opts.dt * (lp + l),
            _ => 0.0,
        };
        log.times.push(t);
        log.v_hat.push(monitor.v.as_ref().map_or(f64::NAN, |v| v.eval(&x)));
        log.h_hat.push(hx);
        log.tau.push(tau);
        log.stage_cost.push(l);
        log.cum_cost.push(cum);
        log.wall_ms.push(wall);
        log.states.push(x.clone());
        log.inputs.push(u.clone());

        if hx > SAFE_TOL {
            log.status = Termination::Unsafe;
            log.message = Some(format!("ĥ = {hx:e} at t = {t}"));
            break;
        }
        if opts.convergence.holds(&x, &u) {
            streak += 1;
            if streak == opts.debounce {
                log.status = Termination::Converged;
                log.convergence_time = Some((k + 1 - opts.debounce) as f64 * opts.dt);
                break;
            }
        } else {
            streak = 0;
        }
        if k == steps {
            break;
        }
        for _ in 0..opts.substeps {
            match rk4_step(&cm, &x, &u, hsub) {
                Ok(next) => x = next,
                Err(e) => {
                    log.status = Termination::Unsafe;
                    log.message = Some(e.to_string());
                    return Ok(log);
                }
            }
        }
    }
    Ok(log)
}

/// Trapezoidal `∫ L dt` over the log grid, truncated at convergence.
pub fn integral_stage_cost(log: &TrajectoryLog, stage: &StageCost) -> f64 {
    if log.is_empty() {
        return 0.0;
    }
    let end = log.convergence_index();
    let l: Vec<f64> = (0..=end).map(|k| stage.eval(&log.states[k], &log.inputs[k])).collect();
    l.windows(2)
        .zip(log.times.windows(2))
        .map(|(w, t)| 0.5 * (t[1] - t[0]) * (w[0] + w[1]))
        .sum()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControllerKind {
    #[default]
    Dmpc,
    CbfClf { a_v: f64, a_b: f64 },
    Poly,
}

/// Builds a boxed controller from a certificate pair.
pub fn build_controller(
    kind: ControllerKind,
    cert: &CertificatePair,
    model: &ControlAffineModel,
    stage: &StageCost,
    constraints: &ConstraintSet,
) -> Result<Box<dyn Controller + Send>, ControlError> {
    let hu = constraints.hu_matrix();
    Ok(match kind {
        ControllerKind::Dmpc => Box::new(DmpcController::new(cert, model, stage, &hu)?),
        ControllerKind::CbfClf { a_v, a_b } => Box::new(CbfClfController::new(
            &cert.v_hat,
            &cert.h_hat,
            model,
            &stage.r,
            &hu,
            a_v,
            a_b,
        )?),
        ControllerKind::Poly => {
            let k = cert.kappa_hat.as_ref().ok_or_else(|| {
                ControlError::InvalidCertificate("polynomial controller needs κ̂".into())
            })?;
            Box::new(PolyController::new(k))
        }
    })
}

/// Everything a campaign needs. Initial states have the coordinates in
/// `free` drawn from `{ĥ ≤ 0}` restricted to the others being zero.
#[derive(Debug, Clone)]
pub struct Campaign {
    pub model: ControlAffineModel,
    pub cert: CertificatePair,
    pub stage: StageCost,
    pub constraints: ConstraintSet,
    pub controller: ControllerKind,
    pub sim: SimOptions,
    pub free: Vec<usize>,
    pub sample_box: SampleBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub index: usize,
    pub x0: Vec<f64>,
    pub status: Termination,
    pub convergence_time: Option<f64>,
    pub integral_cost: f64,
    pub max_h: f64,
    pub max_tau: f64,
    pub max_state_constraint: f64,
    pub max_input_constraint: f64,
    pub message: Option<String>,
}

impl RunSummary {
    pub fn from_log(index: usize, log: &TrajectoryLog, stage: &StageCost) -> Self {
        RunSummary {
            index,
            x0: log.states.first().cloned().unwrap_or_default(),
            status: log.status,
            convergence_time: log.convergence_time,
            integral_cost: integral_stage_cost(log, stage),
            max_h: log.max_h(),
            max_tau: log.max_tau(),
            max_state_constraint: log.max_state_constraint,
            max_input_constraint: log.max_input_constraint,
            message: log.message.clone(),
        }
    }

    pub fn safe(&self) -> bool {
        self.status != Termination::Unsafe && self.max_h <= SAFE_TOL && self.max_state_constraint <= SAFE_TOL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean_step_ms: f64,
    pub worst_step_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub samples: usize,
    pub seed: u64,
    pub convergence_rate: f64,
    pub safety_rate: f64,
    pub mean_convergence_time: Option<f64>,
    pub min_neg_h: f64,
    pub min_neg_tau: f64,
    pub max_state_constraint: f64,
    pub max_input_constraint: f64,
    pub runs: Vec<RunSummary>,
    pub timing: Timing,
}

pub struct CampaignResult {
    pub summary: CampaignSummary,
    pub logs: Vec<TrajectoryLog>,
}

/// `p` with every coordinate outside `free` set to zero, as a polynomial in
/// the free coordinates.
pub fn restrict_to(p: &Polynomial, free: &[usize]) -> Result<Polynomial, SimError> {
    let ny = free.len();
    let subs: Vec<Polynomial> = (0..p.nvars())
        .map(|i| match free.iter().position(|&f| f == i) {
            Some(j) => Polynomial::var(ny, j),
            None => Polynomial::zero(ny),
        })
        .collect();
    p.compose(&subs).map_err(|e| SimError::Dimension(e.to_string()))
}

/// Draws `n` seeded initial states and simulates them on `workers` threads.
pub fn monte_carlo(c: &Campaign, n: usize, seed: u64, workers: usize) -> Result<CampaignResult, SimError> {
    let nx = c.model.nx();
    if c.free.len() != c.sample_box.dim() || c.free.iter().any(|&i| i >= nx) {
        return Err(SimError::Dimension("free coordinates and sampling box disagree".into()));
    }
    let slice = restrict_to(&c.cert.h_hat, &c.free)?;
    let samples = sample_sublevel(&slice, &c.sample_box, n, seed)?;
    let x0s: Vec<Vec<f64>> = samples
        .states
        .iter()
        .map(|y| {
            let mut x = vec![0.0; nx];
            for (j, &i) in c.free.iter().enumerate() {
                x[i] = y[j];
            }
            x
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| SimError::Pool(e.to_string()))?;
    let monitor = Monitor::new(Some(&c.cert), &c.stage, Some(&c.constraints));
    let logs: Vec<TrajectoryLog> = pool.install(|| {
        x0s.par_iter()
            .map(|x0| {
                let mut ctl = build_controller(c.controller, &c.cert, &c.model, &c.stage, &c.constraints)?;
                simulate_closed_loop(&c.model, ctl.as_mut(), x0, &c.sim, &monitor)
            })
            .collect::<Result<Vec<_>, SimError>>()
    })?;
    let runs: Vec<RunSummary> = logs
        .iter()
        .enumerate()
        .map(|(i, l)| RunSummary::from_log(i, l, &c.stage))
        .collect();
    let count = runs.len().max(1) as f64;
    let converged: Vec<f64> = runs.iter().filter_map(|r| r.convergence_time).collect();
    let fold_max = |it: &mut dyn Iterator<Item = f64>| it.fold(f64::NEG_INFINITY, f64::max);
    let wall: Vec<f64> = logs.iter().flat_map(|l| l.wall_ms.iter().copied()).collect();
    let summary = CampaignSummary {
        samples: runs.len(),
        seed,
        convergence_rate: converged.len() as f64 / count,
        safety_rate: runs.iter().filter(|r| r.safe()).count() as f64 / count,
        mean_convergence_time: (!converged.is_empty()).then(|| converged.iter().sum::<f64>() / converged.len() as f64),
        min_neg_h: -fold_max(&mut runs.iter().map(|r| r.max_h)),
        min_neg_tau: -fold_max(&mut runs.iter().map(|r| r.max_tau)),
        max_state_constraint: fold_max(&mut runs.iter().map(|r| r.max_state_constraint)),
        max_input_constraint: fold_max(&mut runs.iter().map(|r| r.max_input_constraint)),
        runs,
        timing: Timing {
            mean_step_ms: if wall.is_empty() { 0.0 } else { wall.iter().sum::<f64>() / wall.len() as f64 },
            worst_step_ms: wall.iter().copied().fold(0.0, f64::max),
        },
    };
    Ok(CampaignResult { summary, logs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oscillator() -> ControlAffineModel {
        let x = Polynomial::var(2, 0);
        let v = Polynomial::var(2, 1);
        ControlAffineModel::new(
            vec![v, -&x],
            vec![vec![Polynomial::zero(2)], vec![Polynomial::constant(2, 1.0)]],
        )
        .unwrap()
    }

    #[test]
    fn rk4_zero_field_is_identity() {
        let m = ControlAffineModel::new(
            vec![Polynomial::zero(2), Polynomial::zero(2)],
            vec![vec![Polynomial::zero(2)], vec![Polynomial::zero(2)]],
        )
        .unwrap()
        .compile();
        assert_eq!(rk4_step(&m, &[1.5, -2.0], &[3.0], 0.1).unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn rk4_constant_input_is_exact() {
        let m = ControlAffineModel::new(
            vec![Polynomial::zero(1)],
            vec![vec![Polynomial::constant(1, 1.0)]],
        )
        .unwrap()
        .compile();
        let x = rk4_step(&m, &[2.0], &[0.7], 0.25).unwrap();
        assert!((x[0] - (2.0 + 0.25 * 0.7)).abs() < 1e-15);
    }

    #[test]
    fn rk4_rejects_bad_step() {
        let m = oscillator().compile();
        assert!(rk4_step(&m, &[1.0, 0.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn rk4_one_step_matches_rotation() {
        let m = oscillator().compile();
        let h = 0.1f64;
        let x = rk4_step(&m, &[1.0, 0.0], &[0.0], h).unwrap();
        assert!((x[0] - h.cos()).abs() < h.powi(5));
        assert!((x[1] + h.sin()).abs() < h.powi(5));
    }

    #[test]
    fn equilibrium_start_converges_at_zero() {
        let model = oscillator();
        let stage = StageCost::identity(2, 1);
        let mut ctl = PolyController::new(&[Polynomial::zero(2)]);
        let opts = SimOptions {
            convergence: ConvergenceRule::Norm {
                state_tol: 1e-6,
                input_tol: 1e-6,
            },
            ..Default::default()
        };
        let log = simulate_closed_loop(&model, &mut ctl, &[0.0, 0.0], &opts, &Monitor::new(None, &stage, None)).unwrap();
        assert_eq!(log.status, Termination::Converged);
        assert_eq!(log.convergence_time, Some(0.0));
        assert_eq!(integral_stage_cost(&log, &stage), 0.0);
        assert_eq!(log.len(), 10);
    }

    #[test]
    fn trapezoid_constant_integrand_is_exact() {
        let stage = StageCost::identity(1, 1);
        let n = 11;
        let log = TrajectoryLog {
            dt: 0.1,
            times: (0..n).map(|k| k as f64 * 0.1).collect(),
            states: vec![vec![2.0]; n],
            inputs: vec![vec![1.0]; n],
            v_hat: vec![0.0; n],
            h_hat: vec![0.0; n],
            tau: vec![0.0; n],
            stage_cost: vec![5.0; n],
            cum_cost: vec![0.0; n],
            wall_ms: vec![0.0; n],
            status: Termination::Timeout,
            convergence_time: None,
            message: None,
            max_state_constraint: 0.0,
            max_input_constraint: 0.0,
        };
        assert!((integral_stage_cost(&log, &stage) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn attitude_rule_thresholds() {
        let r = ConvergenceRule::attitude_default();
        assert!(r.holds(&[0.0; 6], &[0.0; 3]));
        assert!(!r.holds(&[1e-4, 0.0, 0.0, 0.0, 0.0, 0.0], &[0.0; 3]));
        // 0.3° about x is σ = tan(0.3°/4)
        let s = (0.29f64.to_radians() / 4.0).tan();
        assert!(r.holds(&[0.0, 0.0, 0.0, s, 0.0, 0.0], &[0.0; 3]));
        let s = (0.31f64.to_radians() / 4.0).tan();
        assert!(!r.holds(&[0.0, 0.0, 0.0, s, 0.0, 0.0], &[0.0; 3]));
        assert!(!r.holds(&[0.0; 6], &[0.002, 0.0, 0.0]));
    }
}
