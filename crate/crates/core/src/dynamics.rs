//! Control-affine polynomial models `ẋ = f0(x) + G(x) u`, the rigid-body
//! spacecraft attitude model in modified Rodrigues parameters, and the
//! polynomial constraint sets used by synthesis and simulation.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::{CompiledPoly, PolyError, Polynomial};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("drift does not vanish at the origin (component {component}: {value})")]
    NonzeroEquilibrium { component: usize, value: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("gimbal lock: pitch {pitch} rad is within 1e-6 of ±π/2")]
    GimbalLock { pitch: f64 },
    #[error(transparent)]
    Poly(#[from] PolyError),
}

/// `ẋ = drift(x) + input_matrix(x) · u` with polynomial entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlAffineModel {
    nx: usize,
    nu: usize,
    drift: Vec<Polynomial>,
    /// Row-major `nx × nu`.
    input_matrix: Vec<Vec<Polynomial>>,
}

impl ControlAffineModel {
    pub fn new(
        drift: Vec<Polynomial>,
        input_matrix: Vec<Vec<Polynomial>>,
    ) -> Result<Self, DynamicsError> {
        let nx = drift.len();
        if nx == 0 {
            return Err(DynamicsError::Dimension("empty state".into()));
        }
        if input_matrix.len() != nx {
            return Err(DynamicsError::Dimension(format!(
                "input matrix has {} rows, expected {nx}",
                input_matrix.len()
            )));
        }
        let nu = input_matrix[0].len();
        if nu == 0 || input_matrix.iter().any(|row| row.len() != nu) {
            return Err(DynamicsError::Dimension("ragged or empty input matrix".into()));
        }
        for p in drift.iter().chain(input_matrix.iter().flatten()) {
            if p.nvars() != nx {
                return Err(DynamicsError::Dimension(format!(
                    "entry in {} variables, expected {nx}",
                    p.nvars()
                )));
            }
        }
        let zero = vec![0.0; nx];
        for (component, p) in drift.iter().enumerate() {
            let value = p.eval_unchecked(&zero);
            if value.abs() > 1e-12 {
                return Err(DynamicsError::NonzeroEquilibrium { component, value });
            }
        }
        Ok(ControlAffineModel {
            nx,
            nu,
            drift,
            input_matrix,
        })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn nu(&self) -> usize {
        self.nu
    }

    pub fn drift(&self) -> &[Polynomial] {
        &self.drift
    }

    pub fn input_matrix(&self) -> &[Vec<Polynomial>] {
        &self.input_matrix
    }

    /// `f(x, u) = drift(x) + G(x) u`.
    pub fn evaluate_dynamics(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        if x.len() != self.nx || u.len() != self.nu {
            return Err(DynamicsError::Dimension(format!(
                "state {} / input {} for a model with nx = {}, nu = {}",
                x.len(),
                u.len(),
                self.nx,
                self.nu
            )));
        }
        Ok((0..self.nx)
            .map(|i| {
                let mut v = self.drift[i].eval_unchecked(x);
                for (j, uj) in u.iter().enumerate() {
                    if !self.input_matrix[i][j].is_zero() {
                        v += self.input_matrix[i][j].eval_unchecked(x) * uj;
                    }
                }
                v
            })
            .collect())
    }

    /// Closed-loop vector field `f(x, κ(x))` as polynomials.
    pub fn closed_loop(&self, kappa: &[Polynomial]) -> Result<Vec<Polynomial>, DynamicsError> {
        if kappa.len() != self.nu {
            return Err(DynamicsError::Dimension(format!(
                "feedback has {} components, expected {}",
                kappa.len(),
                self.nu
            )));
        }
        let mut out = self.drift.clone();
        for (i, row) in self.input_matrix.iter().enumerate() {
            for (g, k) in row.iter().zip(kappa) {
                if !g.is_zero() {
                    out[i] = out[i].axpy(1.0, &g.checked_mul(k)?);
                }
            }
        }
        Ok(out)
    }

    /// Jacobian linearization `(A, B)` at the origin.
    pub fn linearize(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.nx;
        let zero = vec![0.0; n];
        let mut a = DMatrix::zeros(n, n);
        for (i, p) in self.drift.iter().enumerate() {
            for j in 0..n {
                a[(i, j)] = p.derivative(j).eval_unchecked(&zero);
            }
        }
        let b = DMatrix::from_fn(n, self.nu, |i, j| self.input_matrix[i][j].eval_unchecked(&zero));
        (a, b)
    }

    /// Model in scaled coordinates `x = diag(state_scale) x̃`,
    /// `u = diag(input_scale) ũ`.
    pub fn scaled(&self, state_scale: &[f64], input_scale: &[f64]) -> ControlAffineModel {
        assert_eq!(state_scale.len(), self.nx);
        assert_eq!(input_scale.len(), self.nu);
        let drift = self
            .drift
            .iter()
            .zip(state_scale)
            .map(|(p, d)| p.scale_vars(state_scale).scale(1.0 / d))
            .collect();
        let input_matrix = self
            .input_matrix
            .iter()
            .zip(state_scale)
            .map(|(row, d)| {
                row.iter()
                    .zip(input_scale)
                    .map(|(g, e)| g.scale_vars(state_scale).scale(e / d))
                    .collect()
            })
            .collect();
        ControlAffineModel {
            nx: self.nx,
            nu: self.nu,
            drift,
            input_matrix,
        }
    }

    pub fn compile(&self) -> CompiledModel {
        CompiledModel {
            nx: self.nx,
            nu: self.nu,
            drift: self.drift.iter().map(Polynomial::compile).collect(),
            input_matrix: self
                .input_matrix
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|g| if g.is_zero() { None } else { Some(g.compile()) })
                        .collect()
                })
                .collect(),
        }
    }
}

/// `⟨∇p, field⟩` as a polynomial.
pub fn lie_derivative(p: &Polynomial, field: &[Polynomial]) -> Result<Polynomial, PolyError> {
    let mut out = Polynomial::zero(p.nvars());
    for (dp, fi) in p.gradient().iter().zip(field) {
        if !dp.is_zero() && !fi.is_zero() {
            out = out.axpy(1.0, &dp.checked_mul(fi)?);
        }
    }
    Ok(out)
}

/// Evaluation-only form of [`ControlAffineModel`].
#[derive(Debug, Clone)]
pub struct CompiledModel {
    nx: usize,
    nu: usize,
    drift: Vec<CompiledPoly>,
    input_matrix: Vec<Vec<Option<CompiledPoly>>>,
}

impl CompiledModel {
    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn nu(&self) -> usize {
        self.nu
    }

    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, p) in out.iter_mut().zip(&self.drift) {
            *o = p.eval(x);
        }
    }

    /// Writes `G(x)` row-major into `out` (length `nx · nu`).
    pub fn input_matrix_into(&self, x: &[f64], out: &mut [f64]) {
        for (i, row) in self.input_matrix.iter().enumerate() {
            for (j, g) in row.iter().enumerate() {
                out[i * self.nu + j] = g.as_ref().map_or(0.0, |g| g.eval(x));
            }
        }
    }

    pub fn eval_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        for i in 0..self.nx {
            let mut v = self.drift[i].eval(x);
            for (j, g) in self.input_matrix[i].iter().enumerate() {
                if let Some(g) = g {
                    v += g.eval(x) * u[j];
                }
            }
            out[i] = v;
        }
    }

    pub fn eval(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.nx];
        self.eval_into(x, u, &mut out);
        out
    }
}

/// Diagonal inertia of a rigid spacecraft, kg·m².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpacecraftParams {
    pub inertia_diag: [f64; 3],
}

impl SpacecraftParams {
    /// Hubble-like inertia used throughout the attitude studies.
    pub const HUBBLE: SpacecraftParams = SpacecraftParams {
        inertia_diag: [31046.0, 77217.0, 78754.0],
    };

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if self.inertia_diag.iter().any(|j| !(j.is_finite() && *j > 0.0)) {
            return Err(DynamicsError::InvalidParameter(format!(
                "inertia must be strictly positive, got {:?}",
                self.inertia_diag
            )));
        }
        Ok(())
    }
}

/// `ẋ₁ = x₂`, `ẋ₂ = u`.
pub fn double_integrator_model() -> ControlAffineModel {
    ControlAffineModel::new(
        vec![Polynomial::var(2, 1), Polynomial::zero(2)],
        vec![vec![Polynomial::zero(2)], vec![Polynomial::constant(2, 1.0)]],
    )
    .expect("double integrator is well formed")
}

/// Cross-product matrix entries applied to polynomial vectors: `a × b`.
fn cross(a: &[Polynomial; 3], b: &[Polynomial; 3]) -> [Polynomial; 3] {
    [
        &(&a[1] * &b[2]) - &(&a[2] * &b[1]),
        &(&a[2] * &b[0]) - &(&a[0] * &b[2]),
        &(&a[0] * &b[1]) - &(&a[1] * &b[0]),
    ]
}

fn dot(a: &[Polynomial; 3], b: &[Polynomial; 3]) -> Polynomial {
    &(&(&a[0] * &b[0]) + &(&a[1] * &b[1])) + &(&a[2] * &b[2])
}

/// Attitude model with state `x = (ω, σ)` and torque input `u ∈ ℝ³`:
/// `ω̇ = −J⁻¹(ω × Jω) + J⁻¹u`, `σ̇ = ¼ B(σ) ω` with
/// `B(σ) = (1 − σᵀσ) I + 2σ̃ + 2σσᵀ`.
pub fn spacecraft_model(params: &SpacecraftParams) -> Result<ControlAffineModel, DynamicsError> {
    params.validate()?;
    let n = 6;
    let j = params.inertia_diag;
    let w = [Polynomial::var(n, 0), Polynomial::var(n, 1), Polynomial::var(n, 2)];
    let s = [Polynomial::var(n, 3), Polynomial::var(n, 4), Polynomial::var(n, 5)];
    let jw = [w[0].scale(j[0]), w[1].scale(j[1]), w[2].scale(j[2])];
    let gyro = cross(&w, &jw);

    let ss = dot(&s, &s);
    let one_minus = &Polynomial::constant(n, 1.0) - &ss;
    let sxw = cross(&s, &w);
    let sw = dot(&s, &w);
    let mut drift = Vec::with_capacity(n);
    for i in 0..3 {
        drift.push(gyro[i].scale(-1.0 / j[i]));
    }
    for i in 0..3 {
        let bw = &(&(&one_minus * &w[i]) + &sxw[i].scale(2.0)) + &(&s[i] * &sw).scale(2.0);
        drift.push(bw.scale(0.25));
    }
    let input_matrix = (0..n)
        .map(|r| {
            (0..3)
                .map(|c| {
                    if r < 3 && r == c {
                        Polynomial::constant(n, 1.0 / j[r])
                    } else {
                        Polynomial::zero(n)
                    }
                })
                .collect()
        })
        .collect();
    ControlAffineModel::new(drift, input_matrix)
}

/// `B(σ)` evaluated numerically.
pub fn mrp_kinematics_matrix(sigma: &Vector3<f64>) -> Matrix3<f64> {
    let ss = sigma.dot(sigma);
    Matrix3::identity() * (1.0 - ss) + sigma.cross_matrix() * 2.0 + sigma * sigma.transpose() * 2.0
}

/// Body-to-inertial direction cosine matrix of an MRP attitude.
pub fn mrp_to_dcm(sigma: &Vector3<f64>) -> Matrix3<f64> {
    let ss = sigma.dot(sigma);
    let sx = sigma.cross_matrix();
    let d = (1.0 + ss) * (1.0 + ss);
    Matrix3::identity() + (sx * sx * 8.0 + sx * (4.0 * (1.0 - ss))) / d
}

/// Polynomial `c(σ)` (in the six-state space; only σ appears) whose sign
/// matches `⟨n, T_IB(σ) b⟩ − cos δ`. The rational direction-cosine matrix is
/// cleared by multiplying with `(1 + σᵀσ)² > 0`.
pub fn keep_out_cone_poly(
    n_inertial: [f64; 3],
    b_body: [f64; 3],
    delta_min: f64,
) -> Result<Polynomial, DynamicsError> {
    for (name, v) in [("inertial direction", n_inertial), ("boresight", b_body)] {
        let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(DynamicsError::InvalidParameter(format!(
                "{name} must be a unit vector (norm {norm})"
            )));
        }
    }
    if !(delta_min > 0.0 && delta_min < std::f64::consts::PI) {
        return Err(DynamicsError::InvalidParameter(format!(
            "cone half-angle {delta_min} outside (0, π)"
        )));
    }
    let nv = 6;
    let s = [Polynomial::var(nv, 3), Polynomial::var(nv, 4), Polynomial::var(nv, 5)];
    let ss = dot(&s, &s);
    let one = Polynomial::constant(nv, 1.0);
    let opss = &one + &ss;
    let d = &opss * &opss;
    let c = |k: f64| Polynomial::constant(nv, k);
    let b = [c(b_body[0]), c(b_body[1]), c(b_body[2])];
    // (1+s)² b + 8 σ×(σ×b) + 4 (1−s) σ×b
    let sxb = cross(&s, &b);
    let sxsxb = cross(&s, &sxb);
    let one_minus = &one - &ss;
    let mut rotated: [Polynomial; 3] = [Polynomial::zero(nv), Polynomial::zero(nv), Polynomial::zero(nv)];
    for i in 0..3 {
        rotated[i] = &(&d.scale(b_body[i]) + &sxsxb[i].scale(8.0)) + &(&one_minus * &sxb[i]).scale(4.0);
    }
    let nvec = [c(n_inertial[0]), c(n_inertial[1]), c(n_inertial[2])];
    Ok(&dot(&nvec, &rotated) - &d.scale(delta_min.cos()))
}

/// MRP → unit quaternion → 3-2-1 Euler angles `(φ, θ, ψ)` in radians.
pub fn mrp_to_euler(sigma: [f64; 3]) -> Result<(f64, f64, f64), DynamicsError> {
    let ss: f64 = sigma.iter().map(|s| s * s).sum();
    if !ss.is_finite() {
        return Err(DynamicsError::InvalidParameter("non-finite MRP".into()));
    }
    let den = 1.0 + ss;
    let q0 = (1.0 - ss) / den;
    let q1 = 2.0 * sigma[0] / den;
    let q2 = 2.0 * sigma[1] / den;
    let q3 = 2.0 * sigma[2] / den;
    let phi = (2.0 * (q0 * q1 + q2 * q3)).atan2(1.0 - 2.0 * (q1 * q1 + q2 * q2));
    let sin_theta = (2.0 * (q0 * q2 - q3 * q1)).clamp(-1.0, 1.0);
    let theta = sin_theta.asin();
    let psi = (2.0 * (q0 * q3 + q1 * q2)).atan2(1.0 - 2.0 * (q2 * q2 + q3 * q3));
    if theta.abs() >= std::f64::consts::FRAC_PI_2 - 1e-6 {
        return Err(DynamicsError::GimbalLock { pitch: theta });
    }
    Ok((phi, theta, psi))
}

/// Semialgebraic state constraints `g_k(x) ≤ 0` and the input polytope
/// `H_U u ≤ 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub state_polys: Vec<Polynomial>,
    /// Row-major `p × m`.
    pub input_hu: Vec<Vec<f64>>,
}

impl ConstraintSet {
    pub fn new(state_polys: Vec<Polynomial>, input_hu: Vec<Vec<f64>>) -> Result<Self, DynamicsError> {
        let cs = ConstraintSet {
            state_polys,
            input_hu,
        };
        cs.validate()?;
        Ok(cs)
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let nx = self.state_polys.first().map(Polynomial::nvars);
        for (k, g) in self.state_polys.iter().enumerate() {
            if Some(g.nvars()) != nx {
                return Err(DynamicsError::Dimension(format!("state constraint {k} dimension")));
            }
            let v = g.eval_unchecked(&vec![0.0; g.nvars()]);
            if v >= 0.0 {
                return Err(DynamicsError::InvalidParameter(format!(
                    "origin does not strictly satisfy state constraint {k} (g(0) = {v})"
                )));
            }
        }
        let m = self.input_hu.first().map(Vec::len).unwrap_or(0);
        if self.input_hu.iter().any(|r| r.len() != m) {
            return Err(DynamicsError::Dimension("ragged input polytope".into()));
        }
        Ok(())
    }

    pub fn nu(&self) -> usize {
        self.input_hu.first().map(Vec::len).unwrap_or(0)
    }

    pub fn hu_matrix(&self) -> DMatrix<f64> {
        let p = self.input_hu.len();
        DMatrix::from_fn(p, self.nu(), |i, j| self.input_hu[i][j])
    }

    /// Symmetric box `|u_j| ≤ bound_j` written as `H_U u ≤ 1`.
    pub fn input_box(bounds: &[f64]) -> Vec<Vec<f64>> {
        let m = bounds.len();
        let mut rows = Vec::with_capacity(2 * m);
        for (j, b) in bounds.iter().enumerate() {
            let mut r = vec![0.0; m];
            r[j] = 1.0 / b;
            rows.push(r);
        }
        for (j, b) in bounds.iter().enumerate() {
            let mut r = vec![0.0; m];
            r[j] = -1.0 / b;
            rows.push(r);
        }
        rows
    }

    /// Worst state-constraint value at `x` (≤ 0 means satisfied).
    pub fn max_state_violation(&self, x: &[f64]) -> f64 {
        self.state_polys
            .iter()
            .map(|g| g.eval_unchecked(x))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `max_i (H_U u)_i − 1`.
    pub fn max_input_violation(&self, u: &[f64]) -> f64 {
        self.input_hu
            .iter()
            .map(|r| r.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() - 1.0)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `(x_i / bound)² − 1` for one coordinate of an `nx`-dimensional state.
pub fn coordinate_bound_poly(nx: usize, i: usize, bound: f64) -> Polynomial {
    let x = Polynomial::var(nx, i);
    &(&x * &x).scale(1.0 / (bound * bound)) - &Polynomial::constant(nx, 1.0)
}

/// `σᵀσ − level` on the spacecraft state.
pub fn mrp_norm_poly(level: f64) -> Polynomial {
    let mut p = Polynomial::constant(6, -level);
    for i in 3..6 {
        let s = Polynomial::var(6, i);
        p = p.axpy(1.0, &(&s * &s));
    }
    p
}

/// Numerical gyroscopic term `−J⁻¹(ω × Jω)`.
pub fn gyroscopic_accel(params: &SpacecraftParams, omega: &Vector3<f64>) -> Vector3<f64> {
    let j = Matrix3::from_diagonal(&Vector3::from(params.inertia_diag));
    let jinv = Matrix3::from_diagonal(&Vector3::from(params.inertia_diag.map(|v| 1.0 / v)));
    -(jinv * omega.cross(&(j * omega)))
}

/// Vector of polynomials evaluated at a point.
pub fn eval_vec(ps: &[Polynomial], x: &[f64]) -> DVector<f64> {
    DVector::from_iterator(ps.len(), ps.iter().map(|p| p.eval_unchecked(x)))
}
