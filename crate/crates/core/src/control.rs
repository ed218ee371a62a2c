//! Online feedback laws: the infinitesimal-horizon MPC QP, the CBF-CLF QP
//! baseline, and direct evaluation of a polynomial feedback.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{CompiledModel, ConstraintSet, ControlAffineModel};
use crate::poly::{CompiledPoly, Polynomial};
use crate::qp::{solve_qp_from, QpError, QpProblem};

/// States with `ĥ(x)` up to this value are treated as inside the safe set.
pub const SAFE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("state outside the safe set (h = {h:.3e})")]
    OutsideSafeSet { h: f64 },
    #[error("controller QP infeasible at x = {state:?}")]
    QpInfeasible { state: Vec<f64> },
    #[error("QP solver failure: {0}")]
    Qp(QpError),
    #[error("invalid certificate: {0}")]
    InvalidCertificate(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Value-function approximation, shifted barrier, optional auxiliary
/// feedback and class-K slope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificatePair {
    pub v_hat: Polynomial,
    pub h_hat: Polynomial,
    #[serde(default)]
    pub kappa_hat: Option<Vec<Polynomial>>,
    pub a: f64,
}

impl CertificatePair {
    pub fn nx(&self) -> usize {
        self.v_hat.nvars()
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        let n = self.v_hat.nvars();
        if self.h_hat.nvars() != n {
            return Err(ControlError::Dimension("V̂ and ĥ dimensions differ".into()));
        }
        if let Some(k) = &self.kappa_hat {
            if k.iter().any(|p| p.nvars() != n) {
                return Err(ControlError::Dimension("κ̂ dimension".into()));
            }
        }
        let zero = vec![0.0; n];
        let v0 = self.v_hat.eval_unchecked(&zero);
        if v0.abs() > 1e-12 {
            return Err(ControlError::InvalidCertificate(format!("V̂(0) = {v0}")));
        }
        let h0 = self.h_hat.eval_unchecked(&zero);
        if h0 >= 0.0 {
            return Err(ControlError::InvalidCertificate(format!("ĥ(0) = {h0} is not negative")));
        }
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(ControlError::InvalidCertificate(format!("class-K slope {}", self.a)));
        }
        Ok(())
    }

    /// Same certificate expressed in coordinates `x = D x̃`, i.e. every
    /// polynomial `p(x)` becomes `p(D x̃)`; κ̂ is additionally divided by the
    /// input scale.
    pub fn rescaled(&self, state_scale: &[f64], input_scale: &[f64]) -> CertificatePair {
        CertificatePair {
            v_hat: self.v_hat.scale_vars(state_scale),
            h_hat: self.h_hat.scale_vars(state_scale),
            kappa_hat: self.kappa_hat.as_ref().map(|k| {
                k.iter()
                    .zip(input_scale)
                    .map(|(p, e)| p.scale_vars(state_scale).scale(1.0 / e))
                    .collect()
            }),
            a: self.a,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate is always serializable")
    }
}

/// `L(x, u) = xᵀQx + uᵀRu`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl StageCost {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self, ControlError> {
        let s = StageCost { q, r };
        s.validate()?;
        Ok(s)
    }

    pub fn identity(nx: usize, nu: usize) -> Self {
        StageCost {
            q: DMatrix::identity(nx, nx),
            r: DMatrix::identity(nu, nu),
        }
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        let sym = |m: &DMatrix<f64>| m.is_square() && (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0);
        if !sym(&self.q) || !sym(&self.r) {
            return Err(ControlError::Dimension("stage weights must be square and symmetric".into()));
        }
        let qmin = self.q.clone().symmetric_eigenvalues().min();
        if qmin < -1e-12 {
            return Err(ControlError::Dimension("Q must be positive semidefinite".into()));
        }
        if nalgebra::Cholesky::new(self.r.clone()).is_none() {
            return Err(ControlError::Dimension("R must be positive definite".into()));
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64], u: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        let uv = DVector::from_column_slice(u);
        xv.dot(&(&self.q * &xv)) + uv.dot(&(&self.r * &uv))
    }

    /// `xᵀQx + κ(x)ᵀRκ(x)` as a polynomial.
    pub fn along_feedback(&self, kappa: &[Polynomial]) -> Polynomial {
        let mut out = Polynomial::quadratic_form(&self.q);
        for (i, ki) in kappa.iter().enumerate() {
            for (j, kj) in kappa.iter().enumerate() {
                if self.r[(i, j)] != 0.0 {
                    out = out.axpy(self.r[(i, j)], &(ki * kj));
                }
            }
        }
        out
    }
}

/// Anything producing an input from a state.
pub trait Controller {
    fn control(&mut self, x: &[f64]) -> Result<Vec<f64>, ControlError>;
}

fn compile_grad(p: &Polynomial) -> Vec<CompiledPoly> {
    p.gradient().iter().map(Polynomial::compile).collect()
}

fn eval_grad(g: &[CompiledPoly], x: &[f64], out: &mut [f64]) {
    for (o, gi) in out.iter_mut().zip(g) {
        *o = gi.eval(x);
    }
}

/// Shared state of the two QP controllers.
#[derive(Debug, Clone)]
struct QpData {
    model: CompiledModel,
    hu: DMatrix<f64>,
    r2: DMatrix<f64>,
    drift: Vec<f64>,
    g: Vec<f64>,
}

impl QpData {
    fn new(model: &ControlAffineModel, r: &DMatrix<f64>, hu: &DMatrix<f64>) -> Result<Self, ControlError> {
        if r.nrows() != model.nu() || hu.ncols() != model.nu() {
            return Err(ControlError::Dimension("input weight or polytope does not match the model".into()));
        }
        Ok(QpData {
            model: model.compile(),
            hu: hu.clone(),
            r2: r * 2.0,
            drift: vec![0.0; model.nx()],
            g: vec![0.0; model.nx() * model.nu()],
        })
    }

    fn load(&mut self, x: &[f64]) {
        self.model.drift_into(x, &mut self.drift);
        self.model.input_matrix_into(x, &mut self.g);
    }

    /// `(⟨w, f0⟩, Gᵀw)`.
    fn project(&self, w: &[f64]) -> (f64, DVector<f64>) {
        let nu = self.model.nu();
        let wf: f64 = w.iter().zip(&self.drift).map(|(a, b)| a * b).sum();
        let mut gw = DVector::zeros(nu);
        for (i, wi) in w.iter().enumerate() {
            if *wi == 0.0 {
                continue;
            }
            for j in 0..nu {
                gw[j] += wi * self.g[i * nu + j];
            }
        }
        (wf, gw)
    }
}

fn solve_rows(
    h: DMatrix<f64>,
    c: DVector<f64>,
    rows: Vec<(DVector<f64>, f64)>,
    hu: &DMatrix<f64>,
    x: &[f64],
) -> Result<Vec<f64>, ControlError> {
    let nu = c.len();
    let k = rows.len() + hu.nrows();
    let mut a = DMatrix::zeros(k, nu);
    let mut b = DVector::zeros(k);
    for (i, (row, rhs)) in rows.iter().enumerate() {
        a.row_mut(i).copy_from(&row.transpose());
        b[i] = *rhs;
    }
    let off = rows.len();
    for i in 0..hu.nrows() {
        a.row_mut(off + i).copy_from(&hu.row(i));
        b[off + i] = 1.0;
    }
    let qp = QpProblem { h, c, a, b };
    match solve_qp_from(&qp, None) {
        Ok(s) => Ok(s.u_star.iter().cloned().collect()),
        Err(QpError::Infeasible { .. }) => Err(ControlError::QpInfeasible { state: x.to_vec() }),
        Err(e) => Err(ControlError::Qp(e)),
    }
}

/// Infinitesimal-horizon MPC feedback:
/// `min uᵀRu + ⟨∇V̂, G u⟩  s.t.  ⟨∇ĥ, f0 + G u⟩ ≤ a(−ĥ),  H_U u ≤ 1`.
#[derive(Debug, Clone)]
pub struct DmpcController {
    data: QpData,
    grad_v: Vec<CompiledPoly>,
    grad_h: Vec<CompiledPoly>,
    h: CompiledPoly,
    a: f64,
    wv: Vec<f64>,
    wh: Vec<f64>,
}

impl DmpcController {
    pub fn new(
        cert: &CertificatePair,
        model: &ControlAffineModel,
        stage: &StageCost,
        hu: &DMatrix<f64>,
    ) -> Result<Self, ControlError> {
        cert.validate()?;
        if cert.nx() != model.nx() {
            return Err(ControlError::Dimension("certificate and model dimensions differ".into()));
        }
        let nx = model.nx();
        Ok(DmpcController {
            data: QpData::new(model, &stage.r, hu)?,
            grad_v: compile_grad(&cert.v_hat),
            grad_h: compile_grad(&cert.h_hat),
            h: cert.h_hat.compile(),
            a: cert.a,
            wv: vec![0.0; nx],
            wh: vec![0.0; nx],
        })
    }

    /// QP data at `x` without solving (exposed for inspection and tests).
    pub fn qp_at(&mut self, x: &[f64]) -> Result<QpProblem, ControlError> {
        let hx = self.h.eval(x);
        if hx > SAFE_TOL {
            return Err(ControlError::OutsideSafeSet { h: hx });
        }
        self.data.load(x);
        eval_grad(&self.grad_v, x, &mut self.wv);
        eval_grad(&self.grad_h, x, &mut self.wh);
        let (_, c) = self.data.project(&self.wv);
        let (hf0, hg) = self.data.project(&self.wh);
        let nu = c.len();
        let k = 1 + self.data.hu.nrows();
        let mut a = DMatrix::zeros(k, nu);
        let mut b = DVector::zeros(k);
        a.row_mut(0).copy_from(&hg.transpose());
        b[0] = self.a * (-hx) - hf0;
        for i in 0..self.data.hu.nrows() {
            a.row_mut(1 + i).copy_from(&self.data.hu.row(i));
            b[1 + i] = 1.0;
        }
        Ok(QpProblem {
            h: self.data.r2.clone(),
            c,
            a,
            b,
        })
    }
}

impl Controller for DmpcController {
    fn control(&mut self, x: &[f64]) -> Result<Vec<f64>, ControlError> {
        let qp = self.qp_at(x)?;
        match solve_qp_from(&qp, None) {
            Ok(s) => Ok(s.u_star.iter().cloned().collect()),
            Err(QpError::Infeasible { .. }) => Err(ControlError::QpInfeasible { state: x.to_vec() }),
            Err(e) => Err(ControlError::Qp(e)),
        }
    }
}

/// One-shot form of [`DmpcController`].
pub fn dmpc_feedback(
    cert: &CertificatePair,
    model: &ControlAffineModel,
    stage: &StageCost,
    hu: &DMatrix<f64>,
    x: &[f64],
) -> Result<Vec<f64>, ControlError> {
    DmpcController::new(cert, model, stage, hu)?.control(x)
}

/// Classical CBF-CLF QP: `min uᵀRu` subject to barrier, Lyapunov decay and
/// input rows; no slack variable.
#[derive(Debug, Clone)]
pub struct CbfClfController {
    data: QpData,
    v: CompiledPoly,
    b: CompiledPoly,
    grad_v: Vec<CompiledPoly>,
    grad_b: Vec<CompiledPoly>,
    a_v: f64,
    a_b: f64,
    wv: Vec<f64>,
    wb: Vec<f64>,
}

pub const DEFAULT_A_V: f64 = 0.0025;
pub const DEFAULT_A_B: f64 = 0.0001;

impl CbfClfController {
    pub fn new(
        v: &Polynomial,
        b: &Polynomial,
        model: &ControlAffineModel,
        r: &DMatrix<f64>,
        hu: &DMatrix<f64>,
        a_v: f64,
        a_b: f64,
    ) -> Result<Self, ControlError> {
        if !(a_v > 0.0 && a_b > 0.0) {
            return Err(ControlError::InvalidCertificate("decay rates must be positive".into()));
        }
        if v.nvars() != model.nx() || b.nvars() != model.nx() {
            return Err(ControlError::Dimension("CLF/CBF dimensions differ from the model".into()));
        }
        let nx = model.nx();
        Ok(CbfClfController {
            data: QpData::new(model, r, hu)?,
            v: v.compile(),
            b: b.compile(),
            grad_v: compile_grad(v),
            grad_b: compile_grad(b),
            a_v,
            a_b,
            wv: vec![0.0; nx],
            wb: vec![0.0; nx],
        })
    }
}

impl Controller for CbfClfController {
    fn control(&mut self, x: &[f64]) -> Result<Vec<f64>, ControlError> {
        let bx = self.b.eval(x);
        if bx > SAFE_TOL {
            return Err(ControlError::OutsideSafeSet { h: bx });
        }
        self.data.load(x);
        eval_grad(&self.grad_v, x, &mut self.wv);
        eval_grad(&self.grad_b, x, &mut self.wb);
        let (vf0, vg) = self.data.project(&self.wv);
        let (bf0, bg) = self.data.project(&self.wb);
        let vx = self.v.eval(x);
        let nu = vg.len();
        let rows = vec![(bg, self.a_b * (-bx) - bf0), (vg, -self.a_v * vx - vf0)];
        solve_rows(self.data.r2.clone(), DVector::zeros(nu), rows, &self.data.hu, x)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn cbf_clf_feedback(
    v: &Polynomial,
    b: &Polynomial,
    model: &ControlAffineModel,
    r: &DMatrix<f64>,
    hu: &DMatrix<f64>,
    a_v: f64,
    a_b: f64,
    x: &[f64],
) -> Result<Vec<f64>, ControlError> {
    CbfClfController::new(v, b, model, r, hu, a_v, a_b)?.control(x)
}

/// `u = κ̂(x)` without clipping.
pub fn poly_feedback(kappa: &[Polynomial], x: &[f64]) -> Vec<f64> {
    kappa.iter().map(|k| k.eval_unchecked(x)).collect()
}

#[derive(Debug, Clone)]
pub struct PolyController {
    kappa: Vec<CompiledPoly>,
}

impl PolyController {
    pub fn new(kappa: &[Polynomial]) -> Self {
        PolyController {
            kappa: kappa.iter().map(Polynomial::compile).collect(),
        }
    }
}

impl Controller for PolyController {
    fn control(&mut self, x: &[f64]) -> Result<Vec<f64>, ControlError> {
        Ok(self.kappa.iter().map(|k| k.eval(x)).collect())
    }
}

/// Input polytope matrix of a constraint set.
pub fn input_polytope(cs: &ConstraintSet) -> DMatrix<f64> {
    cs.hu_matrix()
}
