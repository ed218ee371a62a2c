//! Offline certificate synthesis: inner approximations of constraint sets,
//! Riccati initialization, and the alternating SOS scheme producing a
//! compatible value-function / barrier pair.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{CertificatePair, StageCost};
use crate::dynamics::{ConstraintSet, ControlAffineModel};
use crate::poly::{Monomial, Polynomial};
use crate::sdp::{SdpSettings, SdpStatus};

/// Synthesis subproblems lose strict complementarity at active blocks; the
/// solver may stop at a strictly feasible iterate with a looser gap.
const SYNTH_SDP: SdpSettings = SdpSettings {
    max_iter: 100,
    feas_tol: 1e-9,
    gap_tol: 1e-9,
    accept_feas: 1e-8,
    accept_gap: 1e-5,
};
use crate::sos::{monomials_in_range, AffinePoly, GramReport, SosError, SosProgram, Var};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("hyperellipsoid order must be even and at least 2, got {0}")]
    OddOrder(u32),
    #[error("no feasible scaling of the shape polynomial was found")]
    NoFeasibleScaling,
    #[error("Riccati iteration failed: {0}")]
    Riccati(String),
    #[error("subproblem infeasible in block '{block}'")]
    InfeasibleSubproblem {
        block: String,
        iterate: Box<CertificatePair>,
    },
    #[error("objective increased from {before:.6e} to {after:.6e}")]
    Stalled {
        before: f64,
        after: f64,
        iterate: Box<CertificatePair>,
    },
    #[error(transparent)]
    Sos(#[from] SosError),
}

/// `g(x) = Σ (x_i / b_i)^l − 1`.
pub fn inner_hyperellipsoid(bounds: &[f64], order: u32) -> Result<Polynomial, SynthError> {
    if order < 2 || order % 2 == 1 {
        return Err(SynthError::OddOrder(order));
    }
    if bounds.is_empty() || bounds.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
        return Err(SynthError::InvalidConfig("bounds must be positive".into()));
    }
    let n = bounds.len();
    let mut g = Polynomial::constant(n, -1.0);
    for (i, b) in bounds.iter().enumerate() {
        let mut e = vec![0; n];
        e[i] = order;
        g = g.axpy(1.0, &Polynomial::monomial(Monomial::new(e), b.powi(-(order as i32))));
    }
    Ok(g)
}

fn round_up_even(d: i64) -> u32 {
    let d = d.max(0) as u32;
    d + d % 2
}

/// Result of [`inner_approx_sos`].
#[derive(Debug, Clone)]
pub struct InnerApprox {
    pub g: Polynomial,
    pub scale: f64,
    pub multipliers: Vec<Polynomial>,
}

/// Largest margin `t` with `s·g − p − t·zᵀz ∈ Σ`, together with `s`.
fn containment_margin(g: &Polynomial, p: &Polynomial, trace_cap: f64) -> Result<Option<(f64, Polynomial)>, SynthError> {
    let n = g.nvars();
    let ds = round_up_even(p.degree() as i64 - g.degree() as i64);
    let mut prog = SosProgram::new(n);
    let (s, sb) = prog.new_sos_poly(&monomials_in_range(n, 0, ds / 2));
    let tr = prog.trace_form(sb);
    prog.add_le(tr, trace_cap);
    let t = prog.new_free(1)[0];
    prog.add_le(BTreeMap::from([(t, 1.0)]), 1.0);
    prog.add_cost(t, -1.0);
    let expr = s.mul_poly(g).add_poly(-1.0, p);
    prog.add_sos("containment", &expr, None, Some(t))?;
    let sol = prog.solve_with(&SYNTH_SDP)?;
    if sol.status != SdpStatus::Optimal {
        return Ok(None);
    }
    Ok(Some((sol.value(t), sol.eval_poly(&s))))
}

/// Inner approximation `{g ≤ 0} ⊆ ∩ {p_k ≤ 0}` with `g(x) = shape(x / c)`
/// and the scaling `c` maximized by bisection.
pub fn inner_approx_sos(constraints: &[Polynomial], shape: &Polynomial) -> Result<InnerApprox, SynthError> {
    let n = shape.nvars();
    let zero = vec![0.0; n];
    if constraints.is_empty() {
        return Err(SynthError::InvalidConfig("no constraints".into()));
    }
    for p in constraints {
        if p.nvars() != n {
            return Err(SynthError::InvalidConfig("constraint dimension differs from shape".into()));
        }
        if p.eval_unchecked(&zero) >= 0.0 {
            return Err(SynthError::InvalidConfig("constraint not negative at the origin".into()));
        }
    }
    if shape.eval_unchecked(&zero) >= 0.0 {
        return Err(SynthError::InvalidConfig("shape not negative at the origin".into()));
    }
    let scaled = |c: f64| shape.scale_vars(&vec![1.0 / c; n]);
    let check = |c: f64| -> Result<Option<Vec<Polynomial>>, SynthError> {
        let g = scaled(c);
        let mut mults = Vec::new();
        for p in constraints {
            match containment_margin(&g, p, 1e4)? {
                Some((t, s)) if t > 1e-9 => mults.push(s),
                _ => return Ok(None),
            }
        }
        Ok(Some(mults))
    };
    let (mut lo, mut hi, mut best);
    if let Some(m) = check(1.0)? {
        lo = 1.0;
        best = m;
        hi = 2.0;
        while let Some(m) = check(hi)? {
            lo = hi;
            best = m;
            hi *= 2.0;
            if hi > 1e6 {
                return Err(SynthError::InvalidConfig("constraint set appears unbounded".into()));
            }
        }
    } else {
        hi = 1.0;
        lo = 0.5;
        loop {
            if let Some(m) = check(lo)? {
                best = m;
                break;
            }
            hi = lo;
            lo *= 0.5;
            if lo < 1e-6 {
                return Err(SynthError::NoFeasibleScaling);
            }
        }
    }
    while (hi - lo) > 1e-4 * hi {
        let mid = 0.5 * (lo + hi);
        match check(mid)? {
            Some(m) => {
                lo = mid;
                best = m;
            }
            None => hi = mid,
        }
    }
    Ok(InnerApprox {
        g: scaled(lo),
        scale: lo,
        multipliers: best,
    })
}

/// Solves `AᵀP + PA + Q = 0` by Kronecker vectorization (small n only).
pub fn lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>, SynthError> {
    let n = a.nrows();
    let at = a.transpose();
    let mut m = DMatrix::zeros(n * n, n * n);
    // column-major vec: vec(AᵀP) = (I⊗Aᵀ) vec P, vec(PA) = (Aᵀ⊗I) vec P
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                m[(j * n + i, j * n + k)] += at[(i, k)];
                m[(j * n + i, k * n + i)] += a[(k, j)];
            }
        }
    }
    let rhs = -nalgebra::DVector::from_column_slice(q.as_slice());
    let sol = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| SynthError::Riccati("singular Lyapunov operator".into()))?;
    let p = DMatrix::from_column_slice(n, n, sol.as_slice());
    Ok((&p + p.transpose()) * 0.5)
}

fn is_hurwitz(a: &DMatrix<f64>) -> bool {
    a.complex_eigenvalues().iter().all(|l| l.re < 0.0)
}

fn riccati_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, rinv: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    a.transpose() * p + p * a - p * b * rinv * b.transpose() * p + q
}

/// Stabilizing solution of the continuous algebraic Riccati equation and
/// the gain `K = −R⁻¹BᵀP`, via the matrix sign function of the
/// Hamiltonian followed by Newton–Kleinman refinement.
pub fn riccati_init(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>), SynthError> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(SynthError::InvalidConfig("Riccati dimensions".into()));
    }
    let rinv = r
        .clone()
        .cholesky()
        .ok_or_else(|| SynthError::InvalidConfig("R must be positive definite".into()))?
        .inverse();
    let g = b * &rinv * b.transpose();
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-&g));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));
    let mut z = h;
    let mut converged = false;
    for _ in 0..100 {
        let lu = z.clone().lu();
        let det = lu.determinant();
        let zi = lu
            .try_inverse()
            .ok_or_else(|| SynthError::Riccati("Hamiltonian has eigenvalues on the imaginary axis".into()))?;
        let c = det.abs().powf(1.0 / (2 * n) as f64);
        if !c.is_finite() || c == 0.0 {
            return Err(SynthError::Riccati("sign iteration breakdown".into()));
        }
        let zn = (&z / c + zi * c) * 0.5;
        let diff = (&zn - &z).norm();
        let scale = zn.norm();
        z = zn;
        if diff <= 1e-12 * scale {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(SynthError::Riccati("sign iteration did not converge".into()));
    }
    let w11 = z.view((0, 0), (n, n)).clone_owned();
    let w12 = z.view((0, n), (n, n)).clone_owned();
    let w21 = z.view((n, 0), (n, n)).clone_owned();
    let w22 = z.view((n, n), (n, n)).clone_owned();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut lhs = DMatrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&w12);
    lhs.view_mut((n, 0), (n, n)).copy_from(&(w22 + &eye));
    let mut rhs = DMatrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&(-(w11 + &eye)));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-w21));
    let svd = lhs.svd(true, true);
    let mut p = svd
        .solve(&rhs, 1e-14)
        .map_err(|e| SynthError::Riccati(e.to_string()))?;
    p = (&p + p.transpose()) * 0.5;
    // Newton–Kleinman polishing
    for _ in 0..3 {
        let k = -(&rinv * b.transpose() * &p);
        let acl = a + b * &k;
        if !is_hurwitz(&acl) {
            return Err(SynthError::Riccati("pair is not stabilizable".into()));
        }
        let qk = q + k.transpose() * r * &k;
        p = lyapunov(&acl, &qk)?;
    }
    let k = -(&rinv * b.transpose() * &p);
    if !is_hurwitz(&(a + b * &k)) {
        return Err(SynthError::Riccati("pair is not stabilizable".into()));
    }
    let res = riccati_residual(a, b, q, &rinv, &p).amax();
    if !(res <= 1e-8 * (1.0 + p.amax())) {
        return Err(SynthError::Riccati(format!("residual {res:.3e}")));
    }
    Ok((p, k))
}

/// Tunables of the alternating synthesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub deg_v: u32,
    pub deg_h: u32,
    pub deg_kappa: u32,
    /// Overrides the per-block multiplier degree rule when set.
    pub deg_multipliers: Option<u32>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epsilon: f64,
    pub a: f64,
    pub beta: f64,
    pub max_outer_iters: usize,
    pub objective_stall_tol: f64,
    /// Weight of the proximal term keeping step D near the last iterate.
    pub proximal_weight: f64,
    /// Upper bound on the trace of every multiplier Gram matrix in step M.
    pub multiplier_trace_cap: f64,
    /// Smallest Gram margin imposed in step D.
    pub gram_margin: f64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            deg_v: 2,
            deg_h: 2,
            deg_kappa: 1,
            deg_multipliers: None,
            lambda1: 1.0,
            lambda2: 0.0,
            epsilon: 1e-6,
            a: 0.1,
            beta: 0.9,
            max_outer_iters: 30,
            objective_stall_tol: 1e-4,
            proximal_weight: 1e-3,
            multiplier_trace_cap: 1e4,
            gram_margin: 1e-7,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.into()));
        if self.deg_v < 2 || self.deg_v % 2 == 1 {
            return bad("deg_v must be even and at least 2");
        }
        if self.deg_h == 0 {
            return bad("deg_h must be positive");
        }
        if self.deg_kappa == 0 {
            return bad("deg_kappa must be positive");
        }
        if let Some(d) = self.deg_multipliers {
            if d % 2 == 1 {
                return bad("multiplier degree must be even");
            }
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && (self.lambda1 + self.lambda2 - 1.0).abs() <= 1e-12) {
            return bad("lambda1 and lambda2 must be nonnegative and sum to 1");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.a > 0.0) {
            return bad("a must be positive");
        }
        if !(self.beta > 0.0) {
            return bad("beta must be positive");
        }
        if self.max_outer_iters == 0 {
            return bad("max_outer_iters must be positive");
        }
        if !(self.objective_stall_tol >= 0.0 && self.proximal_weight >= 0.0) {
            return bad("tolerances must be nonnegative");
        }
        if !(self.multiplier_trace_cap > 0.0 && self.gram_margin >= 0.0) {
            return bad("multiplier cap must be positive and Gram margin nonnegative");
        }
        Ok(())
    }
}

/// Per-iteration record of the alternation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisIteration {
    pub iteration: usize,
    pub objective: f64,
    /// Step-M margin per SOS block.
    pub margins: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SynthesisStatus {
    Converged,
    IterationLimit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GramCheck {
    pub block: String,
    pub min_eig: f64,
    pub residual: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesisLog {
    pub status: SynthesisStatus,
    pub iterations: Vec<SynthesisIteration>,
    pub initial_objective: f64,
    pub final_objective: f64,
    /// Gram re-verification of every SOS block of the returned pair.
    pub gram_checks: Vec<GramCheck>,
}

#[derive(Debug, Clone)]
pub struct SynthesisResult {
    pub certificate: CertificatePair,
    pub log: SynthesisLog,
}

/// Fixed data of a synthesis problem.
struct Problem<'a> {
    model: &'a ControlAffineModel,
    constraints: &'a ConstraintSet,
    stage: &'a StageCost,
    config: &'a SynthesisConfig,
    target: &'a Polynomial,
    n: usize,
}

/// One S-procedure block `s·ĥ − p ∈ Σ`, where `p` is affine in the
/// decision polynomials.
struct BlockSpec {
    name: String,
    mult_lo: u32,
    mult_deg: u32,
    /// true when the multiplier must vanish at the origin
    zero_at_origin: bool,
}

impl<'a> Problem<'a> {
    fn kappa_poly(&self, cert: &CertificatePair) -> Vec<Polynomial> {
        cert.kappa_hat.clone().expect("validated")
    }

    fn mult_degree(&self, target_deg: u32) -> u32 {
        self.config
            .deg_multipliers
            .unwrap_or_else(|| round_up_even(target_deg as i64 - self.config.deg_h as i64))
    }

    fn block_specs(&self, cert: &CertificatePair) -> Vec<BlockSpec> {
        let kappa = self.kappa_poly(cert);
        let fk = self.model.closed_loop(&kappa).expect("dimensions validated");
        let fdeg = fk.iter().map(Polynomial::degree).max().unwrap_or(0);
        let kdeg = kappa.iter().map(Polynomial::degree).max().unwrap_or(0);
        let mut out = Vec::new();
        for (k, g) in self.constraints.state_polys.iter().enumerate() {
            let d = self.mult_degree(g.degree());
            out.push(BlockSpec { name: format!("state_{k}"), mult_lo: 0, mult_deg: d, zero_at_origin: false });
        }
        let hdot_deg = self.config.deg_h.saturating_sub(1) + fdeg;
        let d = self.mult_degree(hdot_deg);
        out.push(BlockSpec { name: "barrier".into(), mult_lo: 0, mult_deg: d, zero_at_origin: false });
        for j in 0..self.constraints.input_hu.len() {
            let d = self.mult_degree(kdeg);
            out.push(BlockSpec { name: format!("input_{j}"), mult_lo: 0, mult_deg: d, zero_at_origin: false });
        }
        let tau_deg = (self.config.deg_v - 1 + fdeg).max(2 * kdeg).max(2);
        let d = self.mult_degree(tau_deg).max(2);
        out.push(BlockSpec { name: "dissipation".into(), mult_lo: 1, mult_deg: d, zero_at_origin: true });
        out
    }

    /// `p` of block `idx` as an affine polynomial in `(V̂, ĥ)`.
    fn block_target(&self, idx: usize, v: &AffinePoly, h: &AffinePoly, kappa: &[Polynomial]) -> AffinePoly {
        let nk = self.constraints.state_polys.len();
        let nin = self.constraints.input_hu.len();
        let fk = self.model.closed_loop(kappa).expect("dimensions validated");
        if idx < nk {
            // s·ĥ − g
            return AffinePoly::zero(self.n).add_poly(-1.0, &self.constraints.state_polys[idx]);
        }
        if idx == nk {
            // s·ĥ − ⟨∇ĥ, f_κ⟩ − a·ĥ
            return h.lie_derivative(&fk).scale(-1.0).axpy(-self.config.a, h);
        }
        if idx < nk + 1 + nin {
            let row = &self.constraints.input_hu[idx - nk - 1];
            let mut hk = Polynomial::constant(self.n, -1.0);
            for (c, kp) in row.iter().zip(kappa) {
                hk = hk.axpy(*c, kp);
            }
            return AffinePoly::zero(self.n).add_poly(-1.0, &hk);
        }
        // s·ĥ − τ,  τ = ⟨∇V̂, f_κ⟩ + L_κ
        let lk = self.stage.along_feedback(kappa);
        v.lie_derivative(&fk).scale(-1.0).add_poly(-1.0, &lk)
    }

    fn objective(&self, cert: &CertificatePair) -> f64 {
        let cfg = self.config;
        let mut j = 0.0;
        if cfg.lambda1 > 0.0 {
            let hs = cert.h_hat.axpy(1.0, &Polynomial::constant(self.n, cfg.beta));
            j += cfg.lambda1 * self.target.coeff_distance_sq(&hs).unwrap_or(f64::INFINITY);
        }
        if cfg.lambda2 > 0.0 {
            let kappa = self.kappa_poly(cert);
            let fk = self.model.closed_loop(&kappa).expect("dimensions validated");
            let lk = self.stage.along_feedback(&kappa);
            let hjb = crate::dynamics::lie_derivative(&cert.v_hat, &fk)
                .expect("dimensions validated")
                .axpy(1.0, &lk);
            j += cfg.lambda2 * hjb.coeff_norm_sq();
        }
        j
    }

    /// Step M for one block: best multiplier and its margin.
    fn step_m_block(&self, idx: usize, spec: &BlockSpec, cert: &CertificatePair) -> Result<Option<Mult>, SynthError> {
        let (status, m) = self.step_m_block_raw(idx, spec, cert)?;
        Ok((status == SdpStatus::Optimal).then_some(m))
    }

    /// Step-M program of one block: `max t` s.t. `s·ĥ − p − t·I ⪰ 0` in Gram
    /// form, `s` SOS with capped trace.
    fn step_m_program(&self, idx: usize, spec: &BlockSpec, cert: &CertificatePair) -> Result<(SosProgram, AffinePoly, Var, Vec<Monomial>), SynthError> {
        let kappa = self.kappa_poly(cert);
        let v = AffinePoly::from_poly(&cert.v_hat);
        let h = AffinePoly::from_poly(&cert.h_hat);
        let mut prog = SosProgram::new(self.n);
        let lo = if spec.zero_at_origin { spec.mult_lo.max(1) } else { spec.mult_lo };
        let (s, sb) = prog.new_sos_poly(&monomials_in_range(self.n, lo, spec.mult_deg / 2));
        let tr = prog.trace_form(sb);
        prog.add_le(tr, self.config.multiplier_trace_cap);
        let t = prog.new_free(1)[0];
        prog.add_le(BTreeMap::from([(t, 1.0)]), 1.0);
        prog.add_cost(t, -1.0);
        let expr = s.mul_poly(&cert.h_hat).add(&self.block_target(idx, &v, &h, &kappa));
        let k = prog.add_sos(&spec.name, &expr, None, Some(t))?;
        let basis = prog.sos_blocks()[k].basis.clone();
        Ok((prog, s, t, basis))
    }

    fn step_m_block_raw(
        &self,
        idx: usize,
        spec: &BlockSpec,
        cert: &CertificatePair,
    ) -> Result<(SdpStatus, Mult), SynthError> {
        let (prog, s, t, basis) = self.step_m_program(idx, spec, cert)?;
        let sol = prog.solve_with(&SYNTH_SDP)?;
        Ok((
            sol.status,
            Mult {
                t: sol.value(t),
                s: sol.eval_poly(&s),
                basis,
            },
        ))
    }

    fn positivity_program(&self, cert: &CertificatePair) -> Result<(SosProgram, Var), SynthError> {
        let mut prog = SosProgram::new(self.n);
        let t = prog.new_free(1)[0];
        prog.add_le(BTreeMap::from([(t, 1.0)]), 1.0);
        prog.add_cost(t, -1.0);
        let expr = self.positivity_expr(&AffinePoly::from_poly(&cert.v_hat));
        prog.add_sos("positivity", &expr, None, Some(t))?;
        Ok((prog, t))
    }

    fn positivity_margin(&self, cert: &CertificatePair) -> Result<Option<f64>, SynthError> {
        let (prog, t) = self.positivity_program(cert)?;
        let sol = prog.solve_with(&SYNTH_SDP)?;
        if sol.status != SdpStatus::Optimal {
            return Ok(None);
        }
        Ok(Some(sol.value(t)))
    }

    fn positivity_expr(&self, v: &AffinePoly) -> AffinePoly {
        v.add_poly(-self.config.epsilon, &Polynomial::sum_of_squares_of_vars(self.n))
    }
}

/// Multiplier of one block with its margin and the Gram basis it was
/// certified on; step D keeps that basis.
struct Mult {
    t: f64,
    s: Polynomial,
    basis: Vec<Monomial>,
}

type StepM = (Vec<Mult>, f64);

fn step_m(pb: &Problem, specs: &[BlockSpec], cert: &CertificatePair) -> Result<StepM, SynthError> {
    let mut out = Vec::with_capacity(specs.len());
    for (idx, spec) in specs.iter().enumerate() {
        match pb.step_m_block(idx, spec, cert)? {
            Some(m) if m.t > 0.0 => out.push(m),
            _ => {
                return Err(SynthError::InfeasibleSubproblem {
                    block: spec.name.clone(),
                    iterate: Box::new(cert.clone()),
                })
            }
        }
    }
    let tp = match pb.positivity_margin(cert)? {
        Some(t) if t > 0.0 => t,
        _ => {
            return Err(SynthError::InfeasibleSubproblem {
                block: "positivity".into(),
                iterate: Box::new(cert.clone()),
            })
        }
    };
    Ok((out, tp))
}

/// Step-M outcome for one block of a candidate certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMargin {
    pub block: String,
    pub status: SdpStatus,
    pub margin: f64,
}

/// Best Gram margin of every block with freshly optimized multipliers.
pub fn multiplier_margins(
    model: &ControlAffineModel,
    constraints: &ConstraintSet,
    stage: &StageCost,
    config: &SynthesisConfig,
    cert: &CertificatePair,
) -> Result<Vec<BlockMargin>, SynthError> {
    let target = Polynomial::zero(model.nx());
    let pb = Problem {
        model,
        constraints,
        stage,
        config,
        target: &target,
        n: model.nx(),
    };
    let specs = pb.block_specs(cert);
    let mut out = Vec::new();
    for (idx, spec) in specs.iter().enumerate() {
        let (status, Mult { t: margin, .. }) = pb.step_m_block_raw(idx, spec, cert)?;
        out.push(BlockMargin {
            block: spec.name.clone(),
            status,
            margin,
        });
    }
    Ok(out)
}

/// Names of the S-procedure blocks checked for `cert`, in solve order,
/// followed by `positivity`.
pub fn block_names(
    model: &ControlAffineModel,
    constraints: &ConstraintSet,
    stage: &StageCost,
    config: &SynthesisConfig,
    cert: &CertificatePair,
) -> Vec<String> {
    let target = Polynomial::zero(model.nx());
    let pb = Problem { model, constraints, stage, config, target: &target, n: model.nx() };
    let mut names: Vec<String> = pb.block_specs(cert).into_iter().map(|s| s.name).collect();
    names.push("positivity".into());
    names
}

/// Step-M SOS program of the named block for a fixed certificate, for
/// export to an external solver.
pub fn block_program(
    model: &ControlAffineModel,
    constraints: &ConstraintSet,
    stage: &StageCost,
    config: &SynthesisConfig,
    cert: &CertificatePair,
    block: &str,
) -> Result<SosProgram, SynthError> {
    if cert.kappa_hat.is_none() {
        return Err(SynthError::InvalidConfig("certificate needs a feedback κ̂".into()));
    }
    let target = Polynomial::zero(model.nx());
    let pb = Problem { model, constraints, stage, config, target: &target, n: model.nx() };
    if block == "positivity" {
        return Ok(pb.positivity_program(cert)?.0);
    }
    let specs = pb.block_specs(cert);
    let Some(idx) = specs.iter().position(|s| s.name == block) else {
        return Err(SynthError::InvalidConfig(format!("unknown block {block}")));
    };
    Ok(pb.step_m_program(idx, &specs[idx], cert)?.0)
}

/// Candidate pair with per-block Gram reports.
type StepD = (CertificatePair, Vec<(String, GramReport)>);

/// Step D: decision polynomials with multipliers fixed.
fn step_d(
    pb: &Problem,
    specs: &[BlockSpec],
    mults: &[Mult],
    tpos: f64,
    cert: &CertificatePair,
) -> Result<Option<StepD>, SynthError> {
    let n = pb.n;
    let cfg = pb.config;
    let kappa = pb.kappa_poly(cert);
    let mut prog = SosProgram::new(n);
    let (v, _) = prog.new_poly(&monomials_in_range(n, 2, cfg.deg_v));
    let (hvar, _) = prog.new_poly(&monomials_in_range(n, 1, cfg.deg_h));
    let h0 = cert.h_hat.eval_unchecked(&vec![0.0; n]);
    let h = hvar.add_poly(1.0, &Polynomial::constant(n, h0));
    let fixed_margin = |prog: &mut SosProgram, t: f64| {
        let m = prog.new_free(1)[0];
        prog.add_eq(BTreeMap::from([(m, 1.0)]), t);
        m
    };
    let mp = fixed_margin(&mut prog, cfg.gram_margin.min(tpos));
    prog.add_sos("positivity", &pb.positivity_expr(&v), None, Some(mp))?;
    for (idx, (spec, mult)) in specs.iter().zip(mults).enumerate() {
        let expr = h.mul_poly(&mult.s).add(&pb.block_target(idx, &v, &h, &kappa));
        let m = fixed_margin(&mut prog, cfg.gram_margin.min(mult.t));
        prog.add_sos(&spec.name, &expr, Some(mult.basis.clone()), Some(m))?;
    }
    if cfg.lambda1 > 0.0 {
        let resid = h.add_poly(cfg.beta, &Polynomial::constant(n, 1.0)).add_poly(-1.0, pb.target);
        prog.add_coeff_norm_cost(cfg.lambda1, &resid);
    }
    if cfg.lambda2 > 0.0 {
        let fk = pb.model.closed_loop(&kappa).expect("dimensions validated");
        let hjb = v.lie_derivative(&fk).add_poly(1.0, &pb.stage.along_feedback(&kappa));
        prog.add_coeff_norm_cost(cfg.lambda2, &hjb);
    }
    if cfg.proximal_weight > 0.0 {
        prog.add_coeff_norm_cost(cfg.proximal_weight, &v.add_poly(-1.0, &cert.v_hat));
        prog.add_coeff_norm_cost(cfg.proximal_weight, &h.add_poly(-1.0, &cert.h_hat));
    }
    let sol = prog.solve_with(&SYNTH_SDP)?;
    if sol.status != SdpStatus::Optimal {
        return Ok(None);
    }
    let next = CertificatePair {
        v_hat: sol.eval_poly(&v),
        h_hat: sol.eval_poly(&h),
        kappa_hat: Some(kappa),
        a: cfg.a,
    };
    Ok(Some((next, sol.verify_all(1e-6))))
}

fn gram_checks(reports: Vec<(String, GramReport)>) -> Vec<GramCheck> {
    reports
        .into_iter()
        .map(|(block, r)| GramCheck {
            block,
            min_eig: r.min_eig,
            residual: r.residual,
            valid: r.valid,
        })
        .collect()
}

/// Alternating synthesis. `target` is the inner approximation `g` of the
/// constraint set that the barrier is pulled toward.
pub fn synthesize_certificate(
    model: &ControlAffineModel,
    constraints: &ConstraintSet,
    stage: &StageCost,
    config: &SynthesisConfig,
    init: &CertificatePair,
    target: &Polynomial,
) -> Result<SynthesisResult, SynthError> {
    config.validate()?;
    let n = model.nx();
    let bad = |m: &str| Err(SynthError::InvalidConfig(m.into()));
    if init.v_hat.nvars() != n || init.h_hat.nvars() != n || target.nvars() != n {
        return bad("initial certificate dimension differs from the model");
    }
    let Some(kappa) = &init.kappa_hat else {
        return bad("initial certificate needs a feedback κ̂");
    };
    if kappa.len() != model.nu() || constraints.nu() != model.nu() {
        return bad("feedback or input polytope dimension differs from the model");
    }
    if init.v_hat.degree() > config.deg_v || init.h_hat.degree() > config.deg_h {
        return bad("initial certificate degrees exceed the configuration");
    }
    if kappa.iter().any(|k| k.degree() > config.deg_kappa) {
        return bad("initial feedback degree exceeds the configuration");
    }
    init.validate().map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
    let pb = Problem {
        model,
        constraints,
        stage,
        config,
        target,
        n,
    };
    let mut cert = CertificatePair { a: config.a, ..init.clone() };
    let specs = pb.block_specs(&cert);
    let initial_objective = pb.objective(&cert);
    let mut objective = initial_objective;
    let mut iterations = Vec::new();
    let mut checks = None;
    let mut status = SynthesisStatus::IterationLimit;
    for it in 0..config.max_outer_iters {
        let (mults, tpos) = step_m(&pb, &specs, &cert)?;
        let mut margins: BTreeMap<String, f64> = specs.iter().zip(&mults).map(|(s, m)| (s.name.clone(), m.t)).collect();
        margins.insert("positivity".into(), tpos);
        let Some((next, reports)) = step_d(&pb, &specs, &mults, tpos, &cert)? else {
            return Err(SynthError::InfeasibleSubproblem {
                block: "step-D".into(),
                iterate: Box::new(cert),
            });
        };
        let jn = pb.objective(&next);
        if jn > objective + 1e-7 * (1.0 + objective) {
            return Err(SynthError::Stalled {
                before: objective,
                after: jn,
                iterate: Box::new(cert),
            });
        }
        let decrease = objective - jn;
        cert = next;
        checks = Some(reports);
        iterations.push(SynthesisIteration {
            iteration: it,
            objective: jn,
            margins,
        });
        objective = jn;
        if decrease <= config.objective_stall_tol * (1.0 + objective) {
            status = SynthesisStatus::Converged;
            break;
        }
    }
    Ok(SynthesisResult {
        certificate: cert,
        log: SynthesisLog {
            status,
            iterations,
            initial_objective,
            final_objective: objective,
            gram_checks: gram_checks(checks.unwrap_or_default()),
        },
    })
}

/// Linear-quadratic starting point: `κ̂ = Kx` from the Riccati gain of the
/// linearization with input weight `r_scale·R`, and `V̂ = (1+m)·xᵀP_K x`
/// where `P_K` is the true cost-to-go of that gain.
pub fn lq_initial_value(
    model: &ControlAffineModel,
    stage: &StageCost,
    r_scale: f64,
    value_margin: f64,
) -> Result<(Polynomial, Vec<Polynomial>, DMatrix<f64>), SynthError> {
    if !(r_scale > 0.0 && value_margin >= 0.0) {
        return Err(SynthError::InvalidConfig("r_scale must be positive and value_margin nonnegative".into()));
    }
    let (a, b) = model.linearize();
    let (_, k) = riccati_init(&a, &b, &stage.q, &(&stage.r * r_scale))?;
    let acl = &a + &b * &k;
    let pk = lyapunov(&acl, &(&stage.q + k.transpose() * &stage.r * &k))?;
    let v = Polynomial::quadratic_form(&(&pk * (1.0 + value_margin)));
    let kappa = (0..k.nrows())
        .map(|i| Polynomial::linear(k.row(i).transpose().as_slice()))
        .collect();
    Ok((v, kappa, pk))
}

/// Largest level `γ` such that `ĥ = V̂/γ − 1` passes step M, found by
/// bisection on a logarithmic scale.
pub fn fit_initial_barrier(
    model: &ControlAffineModel,
    constraints: &ConstraintSet,
    stage: &StageCost,
    config: &SynthesisConfig,
    v: &Polynomial,
    kappa: &[Polynomial],
) -> Result<CertificatePair, SynthError> {
    config.validate()?;
    let n = model.nx();
    let target = Polynomial::zero(n);
    let pb = Problem {
        model,
        constraints,
        stage,
        config,
        target: &target,
        n,
    };
    let make = |gamma: f64| CertificatePair {
        v_hat: v.clone(),
        h_hat: v.scale(1.0 / gamma).axpy(1.0, &Polynomial::constant(n, -1.0)),
        kappa_hat: Some(kappa.to_vec()),
        a: config.a,
    };
    let specs = pb.block_specs(&make(1.0));
    let ok = |gamma: f64| -> Result<bool, SynthError> {
        match step_m(&pb, &specs, &make(gamma)) {
            Ok(_) => Ok(true),
            Err(SynthError::InfeasibleSubproblem { .. }) => Ok(false),
            Err(e) => Err(e),
        }
    };
    // find a feasible level from above
    let mut lo = v.max_abs_coeff().max(1e-12);
    let mut tries = 0;
    while !ok(lo)? {
        lo *= 0.1;
        tries += 1;
        if tries > 30 {
            return Err(SynthError::NoFeasibleScaling);
        }
    }
    let mut hi = lo * 10.0;
    while ok(hi)? {
        lo = hi;
        hi *= 10.0;
        if hi > 1e30 {
            return Err(SynthError::InvalidConfig("barrier level unbounded".into()));
        }
    }
    while hi / lo > 1.0 + 1e-3 {
        let mid = (lo * hi).sqrt();
        if ok(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(make(lo))
}
