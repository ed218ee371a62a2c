//! Dense strictly convex QP: `min ½uᵀHu + cᵀu  s.t.  Au ≤ b`.
//!
//! Primal active-set method. Each iteration solves the equality-constrained
//! subproblem on the working set through its KKT system; blocking constraints
//! enter by smallest ratio (smallest index on ties) and the most negative
//! multiplier leaves. An infeasible start is repaired by a phase-1 problem
//! that minimizes the largest violation using the same iteration.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ACTIVE_TOL: f64 = 1e-10;
pub const KKT_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("Hessian is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("constraints are infeasible (smallest attainable violation {violation:.3e})")]
    Infeasible { violation: f64 },
    #[error("iteration limit reached after {iterations} iterations")]
    IterationLimit { iterations: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub u_star: DVector<f64>,
    pub active_set: Vec<usize>,
    pub multipliers: DVector<f64>,
    pub kkt_residual: f64,
    pub objective: f64,
    pub iterations: usize,
}

impl QpProblem {
    pub fn new(
        h: DMatrix<f64>,
        c: DVector<f64>,
        a: DMatrix<f64>,
        b: DVector<f64>,
    ) -> Result<Self, QpError> {
        let p = QpProblem { h, c, a, b };
        p.check_dims()?;
        Ok(p)
    }

    pub fn unconstrained(h: DMatrix<f64>, c: DVector<f64>) -> Result<Self, QpError> {
        let m = c.len();
        Self::new(h, c, DMatrix::zeros(0, m), DVector::zeros(0))
    }

    pub fn nvars(&self) -> usize {
        self.c.len()
    }

    pub fn ncons(&self) -> usize {
        self.b.len()
    }

    fn check_dims(&self) -> Result<(), QpError> {
        let m = self.c.len();
        if self.h.nrows() != m || self.h.ncols() != m {
            return Err(QpError::Dimension(format!(
                "H is {}×{}, expected {m}×{m}",
                self.h.nrows(),
                self.h.ncols()
            )));
        }
        if self.a.ncols() != m || self.a.nrows() != self.b.len() {
            return Err(QpError::Dimension(format!(
                "A is {}×{} with {} right-hand sides",
                self.a.nrows(),
                self.a.ncols(),
                self.b.len()
            )));
        }
        Ok(())
    }

    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.h * u)) + self.c.dot(u)
    }

    /// `max_i (Au − b)_i`, or −∞ without constraints.
    pub fn max_violation(&self, u: &DVector<f64>) -> f64 {
        (&self.a * u - &self.b).iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Solves from the origin, running phase 1 when the origin is infeasible.
pub fn solve_qp(problem: &QpProblem) -> Result<QpSolution, QpError> {
    solve_qp_from(problem, None)
}

/// As [`solve_qp`] but starting from `start` when it is feasible.
pub fn solve_qp_from(problem: &QpProblem, start: Option<&DVector<f64>>) -> Result<QpSolution, QpError> {
    problem.check_dims()?;
    let m = problem.nvars();
    let scale = problem.h.amax().max(1.0);
    for i in 0..m {
        for j in 0..i {
            if (problem.h[(i, j)] - problem.h[(j, i)]).abs() > 1e-12 * scale {
                return Err(QpError::NotPositiveDefinite);
            }
        }
    }
    let chol = Cholesky::new(problem.h.clone()).ok_or(QpError::NotPositiveDefinite)?;
    if chol.l().diagonal().iter().any(|d| *d <= 0.0 || !d.is_finite()) {
        return Err(QpError::NotPositiveDefinite);
    }
    let k = problem.ncons();
    let mut u0 = match start {
        Some(s) if s.len() == m && problem.max_violation(s) <= 0.0 => s.clone(),
        _ => DVector::zeros(m),
    };
    if k > 0 && problem.max_violation(&u0) > 0.0 {
        u0 = phase_one(problem)?;
    }
    let cap = 100 * k.max(1);
    let (u, working, lambda_w, iterations) = active_set(problem, u0, cap)?;
    let mut multipliers = DVector::zeros(k);
    for (pos, &i) in working.iter().enumerate() {
        multipliers[i] = lambda_w[pos].max(0.0);
    }
    let stationarity = &problem.h * &u + &problem.c + problem.a.transpose() * &multipliers;
    let slack = &problem.a * &u - &problem.b;
    let comp = multipliers
        .iter()
        .zip(slack.iter())
        .map(|(l, s)| (l * s).abs())
        .fold(0.0, f64::max);
    let kkt_residual = stationarity.amax().max(comp).max(slack.max().max(0.0));
    let mut active_set = working;
    active_set.sort_unstable();
    Ok(QpSolution {
        objective: problem.objective(&u),
        u_star: u,
        active_set,
        multipliers,
        kkt_residual,
        iterations,
    })
}

/// Equality-constrained step on the working set: returns `(p, λ_W)` solving
/// `H p + A_Wᵀ λ = −g`, `A_W p = 0`.
fn eqp_step(
    problem: &QpProblem,
    working: &[usize],
    g: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let m = problem.nvars();
    let w = working.len();
    let mut kkt = DMatrix::zeros(m + w, m + w);
    kkt.view_mut((0, 0), (m, m)).copy_from(&problem.h);
    for (pos, &i) in working.iter().enumerate() {
        for j in 0..m {
            kkt[(m + pos, j)] = problem.a[(i, j)];
            kkt[(j, m + pos)] = problem.a[(i, j)];
        }
    }
    let mut rhs = DVector::zeros(m + w);
    rhs.rows_mut(0, m).copy_from(&(-g));
    let sol = kkt.full_piv_lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some((sol.rows(0, m).into_owned(), sol.rows(m, w).into_owned()))
}

type ActiveSetResult = (DVector<f64>, Vec<usize>, DVector<f64>, usize);

fn active_set(problem: &QpProblem, mut u: DVector<f64>, cap: usize) -> Result<ActiveSetResult, QpError> {
    let k = problem.ncons();
    let mut working: Vec<usize> = Vec::new();
    for it in 0..=cap {
        let g = &problem.h * &u + &problem.c;
        let (p, lambda) = eqp_step(problem, &working, &g).ok_or(QpError::NotPositiveDefinite)?;
        let pnorm = p.amax();
        if pnorm <= 1e-13 * (1.0 + u.amax()) {
            // stationary on the working set; inspect multipliers
            let mut leave: Option<(usize, f64)> = None;
            for (pos, l) in lambda.iter().enumerate() {
                if *l < -KKT_TOL * 1e-2 {
                    match leave {
                        Some((_, best)) if *l >= best => {}
                        _ => leave = Some((pos, *l)),
                    }
                }
            }
            match leave {
                None => return Ok((u, working, lambda, it)),
                Some((pos, _)) => {
                    working.remove(pos);
                    continue;
                }
            }
        }
        let ap = &problem.a * &p;
        let slack = &problem.b - &problem.a * &u;
        let mut alpha = 1.0;
        let mut block: Option<usize> = None;
        for i in 0..k {
            if working.contains(&i) || ap[i] <= ACTIVE_TOL * p.amax().max(1e-300) {
                continue;
            }
            let ratio = slack[i].max(0.0) / ap[i];
            if ratio < alpha - 1e-14 || (block.is_none() && ratio <= alpha) {
                alpha = ratio;
                block = Some(i);
            }
        }
        u += &p * alpha;
        if let Some(i) = block {
            working.push(i);
        }
    }
    Err(QpError::IterationLimit { iterations: cap })
}

/// Proximal-point iteration on `min t s.t. Au − t ≤ b, t ≥ −1`, each step a
/// strictly convex QP solved by the active-set routine from a feasible point.
fn phase_one(problem: &QpProblem) -> Result<DVector<f64>, QpError> {
    let m = problem.nvars();
    let k = problem.ncons();
    let row_scale: Vec<f64> = (0..k)
        .map(|i| problem.a.row(i).amax().max(problem.b[i].abs()).max(1e-300))
        .collect();
    let mut a1 = DMatrix::zeros(k + 1, m + 1);
    let mut b1 = DVector::zeros(k + 1);
    for i in 0..k {
        for j in 0..m {
            a1[(i, j)] = problem.a[(i, j)] / row_scale[i];
        }
        a1[(i, m)] = -1.0;
        b1[i] = problem.b[i] / row_scale[i];
    }
    a1[(k, m)] = -1.0;
    b1[k] = 1.0;
    let delta = 1e-2;
    let mut z = DVector::zeros(m + 1);
    let viol0 = (0..k).map(|i| -b1[i]).fold(f64::NEG_INFINITY, f64::max);
    z[m] = viol0.max(-1.0);
    let h1 = DMatrix::identity(m + 1, m + 1) * delta;
    let mut last_t = f64::INFINITY;
    for _ in 0..200 {
        let c1 = {
            let mut c = -&z * delta;
            c[m] += 1.0;
            c
        };
        let sub = QpProblem {
            h: h1.clone(),
            c: c1,
            a: a1.clone(),
            b: b1.clone(),
        };
        let (zn, _, _, _) = active_set(&sub, z.clone(), 100 * (k + 1))?;
        z = zn;
        let u = z.rows(0, m).into_owned();
        if problem.max_violation(&u) <= 0.0 {
            return Ok(u);
        }
        let t = z[m];
        if (last_t - t).abs() <= 1e-13 * (1.0 + t.abs()) {
            if t > 1e-9 {
                return Err(QpError::Infeasible { violation: t });
            }
            // numerically on the boundary: accept after clipping is not possible,
            // so nudge toward the interior along the phase-1 objective
            break;
        }
        last_t = t;
    }
    let u = z.rows(0, m).into_owned();
    let v = problem.max_violation(&u);
    if v <= ACTIVE_TOL {
        Ok(u)
    } else {
        Err(QpError::Infeasible { violation: v })
    }
}
