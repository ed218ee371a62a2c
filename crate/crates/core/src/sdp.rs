//! Dense primal-dual interior-point solver for block-diagonal SDPs
//!
//! ```text
//! min  ⟨C, X⟩ + c_fᵀ x_f + ½ x_fᵀ H x_f
//! s.t. ⟨A_i, X⟩ + F_i x_f = b_i,   X ⪰ 0,   x_f free
//! ```
//!
//! Infeasible-start path following with the HKM search direction and a
//! Mehrotra predictor-corrector. Free variables and the optional quadratic
//! term are eliminated from the Newton system by a block Schur step.
//! Dependent equality rows are removed by a pivoted Cholesky factorization
//! of the normalized row Gram matrix before iterating.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

pub const CERT_TOL: f64 = 1e-6;
pub const PRESOLVE_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("ill-posed problem: {0}")]
    IllPosed(String),
}

/// One entry of a symmetric block matrix. Off-diagonal entries stand for
/// both `(row, col)` and `(col, row)`; repeated positions add up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SymEntry {
    pub block: usize,
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

impl SymEntry {
    pub fn new(block: usize, row: usize, col: usize, value: f64) -> Self {
        let (row, col) = if row <= col { (row, col) } else { (col, row) };
        SymEntry {
            block,
            row,
            col,
            value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdpProblem {
    pub blocks: Vec<usize>,
    pub c: Vec<SymEntry>,
    pub constraints: Vec<Vec<SymEntry>>,
    pub b: Vec<f64>,
    #[serde(default)]
    pub n_free: usize,
    /// Sparse rows of `F`, one per constraint.
    #[serde(default)]
    pub free_coeffs: Vec<Vec<(usize, f64)>>,
    #[serde(default)]
    pub c_free: Vec<f64>,
    /// Positive semidefinite `H` on the free variables.
    #[serde(default)]
    pub h_free: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SdpStatus {
    Optimal,
    PrimalInfeasible,
    DualInfeasible,
    IterationLimit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub primal_obj: f64,
    pub dual_obj: f64,
    pub complementarity: f64,
    pub primal_infeas: f64,
    pub dual_infeas: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdpSolution {
    pub status: SdpStatus,
    pub x: Vec<DMatrix<f64>>,
    pub y: DVector<f64>,
    pub s: Vec<DMatrix<f64>>,
    pub x_free: DVector<f64>,
    pub primal_obj: f64,
    pub dual_obj: f64,
    pub duality_gap: f64,
    pub primal_infeas: f64,
    pub dual_infeas: f64,
    pub iterations: usize,
    pub history: Vec<IterationRecord>,
    /// Constraint rows dropped by presolve as linearly dependent.
    pub dropped_rows: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdpSettings {
    pub max_iter: usize,
    pub feas_tol: f64,
    pub gap_tol: f64,
    /// When the tail of the iteration loses accuracy, the best iterate
    /// within these relative feasibility and gap levels is returned as
    /// optimal.
    pub accept_feas: f64,
    pub accept_gap: f64,
}

impl Default for SdpSettings {
    fn default() -> Self {
        SdpSettings {
            max_iter: 100,
            feas_tol: 1e-9,
            gap_tol: 1e-9,
            accept_feas: 1e-7,
            accept_gap: 1e-7,
        }
    }
}

impl SdpProblem {
    pub fn new(blocks: Vec<usize>) -> Self {
        SdpProblem {
            blocks,
            c: Vec::new(),
            constraints: Vec::new(),
            b: Vec::new(),
            n_free: 0,
            free_coeffs: Vec::new(),
            c_free: Vec::new(),
            h_free: None,
        }
    }

    pub fn ncons(&self) -> usize {
        self.b.len()
    }

    pub fn add_constraint(&mut self, entries: Vec<SymEntry>, free: Vec<(usize, f64)>, rhs: f64) {
        self.constraints.push(entries);
        self.free_coeffs.push(free);
        self.b.push(rhs);
    }

    pub fn validate(&self) -> Result<(), SdpError> {
        let m = self.b.len();
        if self.constraints.len() != m {
            return Err(SdpError::Dimension(format!(
                "{} constraint matrices for {m} right-hand sides",
                self.constraints.len()
            )));
        }
        if !self.free_coeffs.is_empty() && self.free_coeffs.len() != m {
            return Err(SdpError::Dimension("free-variable rows do not match constraints".into()));
        }
        if self.blocks.contains(&0) {
            return Err(SdpError::Dimension("zero-size block".into()));
        }
        let check = |e: &SymEntry| -> Result<(), SdpError> {
            match self.blocks.get(e.block) {
                Some(&d) if e.row < d && e.col < d && e.value.is_finite() => Ok(()),
                _ => Err(SdpError::Dimension(format!("entry {e:?} outside block structure"))),
            }
        };
        for e in self.c.iter().chain(self.constraints.iter().flatten()) {
            check(e)?;
        }
        for row in &self.free_coeffs {
            if row.iter().any(|(j, v)| *j >= self.n_free || !v.is_finite()) {
                return Err(SdpError::Dimension("free-variable index out of range".into()));
            }
        }
        if !self.c_free.is_empty() && self.c_free.len() != self.n_free {
            return Err(SdpError::Dimension("free-variable cost length".into()));
        }
        if let Some(h) = &self.h_free {
            if h.nrows() != self.n_free || h.ncols() != self.n_free {
                return Err(SdpError::Dimension("free-variable Hessian shape".into()));
            }
        }
        Ok(())
    }

    /// Plain JSON with sparse `(block, row, col, value)` triplets.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("SDP data is always serializable")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    fn c_free_vec(&self) -> DVector<f64> {
        if self.c_free.is_empty() {
            DVector::zeros(self.n_free)
        } else {
            DVector::from_vec(self.c_free.clone())
        }
    }

    /// Dense block of `C`.
    pub fn dense_c(&self) -> Vec<DMatrix<f64>> {
        let mut out: Vec<DMatrix<f64>> = self.blocks.iter().map(|&d| DMatrix::zeros(d, d)).collect();
        for e in &self.c {
            out[e.block][(e.row, e.col)] += e.value;
            if e.row != e.col {
                out[e.block][(e.col, e.row)] += e.value;
            }
        }
        out
    }

    /// `⟨A_i, X⟩ + F_i x_f − b_i` for every row.
    pub fn residuals(&self, x: &[DMatrix<f64>], x_free: &DVector<f64>) -> Vec<f64> {
        (0..self.ncons())
            .map(|i| {
                let mut v = -self.b[i];
                for e in &self.constraints[i] {
                    let w = if e.row == e.col { 1.0 } else { 2.0 };
                    v += w * e.value * x[e.block][(e.row, e.col)];
                }
                if let Some(row) = self.free_coeffs.get(i) {
                    for (j, a) in row {
                        v += a * x_free[*j];
                    }
                }
                v
            })
            .collect()
    }
}

/// `(row, col, value)`
type Triplet = (usize, usize, f64);

/// Constraint data of one block in oriented form (both triangles listed).
struct BlockOp {
    dim: usize,
    /// (reduced constraint index, oriented entries)
    cons: Vec<(usize, Vec<Triplet>)>,
}

struct Prepared {
    ops: Vec<BlockOp>,
    c: Vec<DMatrix<f64>>,
    b: DVector<f64>,
    f: DMatrix<f64>,
    c_free: DVector<f64>,
    h: Option<DMatrix<f64>>,
    kept: Vec<usize>,
    dropped: Vec<usize>,
}

fn orient(entries: &[SymEntry], block: usize) -> Vec<(usize, usize, f64)> {
    let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for e in entries.iter().filter(|e| e.block == block) {
        *acc.entry((e.row, e.col)).or_insert(0.0) += e.value;
    }
    let mut keys: Vec<_> = acc.into_iter().filter(|(_, v)| *v != 0.0).collect();
    keys.sort_by_key(|a| a.0);
    let mut out = Vec::with_capacity(2 * keys.len());
    for ((r, c), v) in keys {
        out.push((r, c, v));
        if r != c {
            out.push((c, r, v));
        }
    }
    out
}

/// Affine-step `(ΔX, ΔZ)` used by the corrector.
type BlockPair<'a> = (&'a [DMatrix<f64>], &'a [DMatrix<f64>]);

/// Primal blocks, multipliers, dual blocks and free variables.
type Iterate = (Vec<DMatrix<f64>>, DVector<f64>, Vec<DMatrix<f64>>, DVector<f64>);

enum Presolve {
    Ok(Box<Prepared>),
    Infeasible(Vec<usize>),
}

fn presolve(p: &SdpProblem) -> Result<Presolve, SdpError> {
    let m = p.ncons();
    // sparse rows keyed by variable coordinate, Frobenius weighting
    #[derive(PartialEq, Eq, PartialOrd, Ord, Clone, Copy)]
    enum Key {
        Mat(usize, usize, usize),
        Free(usize),
    }
    let mut rows: Vec<BTreeMap<Key, f64>> = Vec::with_capacity(m);
    for i in 0..m {
        let mut r: BTreeMap<Key, f64> = BTreeMap::new();
        for e in &p.constraints[i] {
            *r.entry(Key::Mat(e.block, e.row, e.col)).or_insert(0.0) += e.value;
        }
        if let Some(fr) = p.free_coeffs.get(i) {
            for (j, v) in fr {
                *r.entry(Key::Free(*j)).or_insert(0.0) += v;
            }
        }
        r.retain(|_, v| *v != 0.0);
        rows.push(r);
    }
    let weight = |k: &Key| match k {
        Key::Mat(_, r, c) if r != c => 2.0,
        _ => 1.0,
    };
    let norms: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().map(|(k, v)| weight(k) * v * v).sum::<f64>().sqrt())
        .collect();
    let bmax = p.b.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut infeasible_rows = Vec::new();
    let mut candidates = Vec::new();
    for i in 0..m {
        if norms[i] == 0.0 {
            if p.b[i].abs() > 1e-9 * (1.0 + bmax) {
                infeasible_rows.push(i);
            }
        } else {
            candidates.push(i);
        }
    }
    if !infeasible_rows.is_empty() {
        return Ok(Presolve::Infeasible(infeasible_rows));
    }
    // Gram matrix of normalized rows via the coordinate incidence lists
    let nc = candidates.len();
    let mut incidence: BTreeMap<Key, Vec<(usize, f64)>> = BTreeMap::new();
    for (pos, &i) in candidates.iter().enumerate() {
        for (k, v) in &rows[i] {
            incidence.entry(*k).or_default().push((pos, v / norms[i]));
        }
    }
    let mut gram = DMatrix::<f64>::zeros(nc, nc);
    for (k, list) in &incidence {
        let w = weight(k);
        for &(a, va) in list {
            for &(b, vb) in list {
                gram[(a, b)] += w * va * vb;
            }
        }
    }
    // greedy diagonal pivoting
    let mut diag: Vec<f64> = (0..nc).map(|i| gram[(i, i)]).collect();
    let mut l = DMatrix::<f64>::zeros(nc, nc);
    let mut chosen: Vec<usize> = Vec::new();
    let mut used = vec![false; nc];
    loop {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..nc {
            if !used[i] && best.is_none_or(|(_, d)| diag[i] > d) {
                best = Some((i, diag[i]));
            }
        }
        let Some((piv, d)) = best else { break };
        if d <= PRESOLVE_TOL {
            break;
        }
        let k = chosen.len();
        used[piv] = true;
        let s = d.sqrt();
        for i in 0..nc {
            if used[i] && i != piv {
                continue;
            }
            let mut v = gram[(i, piv)];
            for j in 0..k {
                v -= l[(i, j)] * l[(piv, j)];
            }
            l[(i, k)] = if i == piv { s } else { v / s };
        }
        for i in 0..nc {
            if !used[i] {
                diag[i] -= l[(i, k)] * l[(i, k)];
            }
        }
        chosen.push(piv);
    }
    let rank = chosen.len();
    let mut dropped = Vec::new();
    if rank < nc {
        // consistency of right-hand sides on dependent rows
        let lss = DMatrix::from_fn(rank, rank, |a, b| l[(chosen[a], b)]);
        let bs = DVector::from_fn(rank, |a, _| p.b[candidates[chosen[a]]] / norms[candidates[chosen[a]]]);
        // K_SS = Lss Lssᵀ; coefficient vector c = K_SS⁻¹ K_Sj, so cᵀ b_S = l_jᵀ Lss⁻¹ b_S
        let w = lss
            .solve_lower_triangular(&bs)
            .ok_or_else(|| SdpError::IllPosed("presolve factor singular".into()))?;
        for j in 0..nc {
            if used[j] {
                continue;
            }
            let lj = DVector::from_fn(rank, |a, _| l[(j, a)]);
            let pred = lj.dot(&w);
            let bj = p.b[candidates[j]] / norms[candidates[j]];
            if (pred - bj).abs() > 1e-7 * (1.0 + bj.abs() + pred.abs()) {
                infeasible_rows.push(candidates[j]);
            }
            dropped.push(candidates[j]);
        }
        if !infeasible_rows.is_empty() {
            return Ok(Presolve::Infeasible(infeasible_rows));
        }
    }
    let mut kept: Vec<usize> = chosen.iter().map(|&c| candidates[c]).collect();
    kept.sort_unstable();
    dropped.sort_unstable();
    for i in 0..m {
        if norms[i] == 0.0 {
            dropped.push(i);
        }
    }
    dropped.sort_unstable();

    let mk = kept.len();
    let mut ops: Vec<BlockOp> = p
        .blocks
        .iter()
        .map(|&d| BlockOp {
            dim: d,
            cons: Vec::new(),
        })
        .collect();
    for (ri, &i) in kept.iter().enumerate() {
        let mut blocks_touched: Vec<usize> = p.constraints[i].iter().map(|e| e.block).collect();
        blocks_touched.sort_unstable();
        blocks_touched.dedup();
        for blk in blocks_touched {
            let o = orient(&p.constraints[i], blk);
            if !o.is_empty() {
                ops[blk].cons.push((ri, o));
            }
        }
    }
    let mut f = DMatrix::zeros(mk, p.n_free);
    for (ri, &i) in kept.iter().enumerate() {
        if let Some(fr) = p.free_coeffs.get(i) {
            for (j, v) in fr {
                f[(ri, *j)] += v;
            }
        }
    }
    let h = p.h_free.as_ref().filter(|h| h.amax() > 0.0).cloned();
    Ok(Presolve::Ok(Box::new(Prepared {
        ops,
        c: p.dense_c(),
        b: DVector::from_fn(mk, |r, _| p.b[kept[r]]),
        f,
        c_free: p.c_free_vec(),
        h,
        kept,
        dropped,
    })))
}

impl Prepared {
    fn m(&self) -> usize {
        self.b.len()
    }

    fn apply_a(&self, x: &[DMatrix<f64>]) -> DVector<f64> {
        let mut out = DVector::zeros(self.m());
        for (op, xb) in self.ops.iter().zip(x) {
            for (i, ents) in &op.cons {
                let mut v = 0.0;
                for &(r, c, a) in ents {
                    v += a * xb[(r, c)];
                }
                out[*i] += v;
            }
        }
        out
    }

    fn apply_at(&self, y: &DVector<f64>) -> Vec<DMatrix<f64>> {
        self.ops
            .iter()
            .map(|op| {
                let mut m = DMatrix::zeros(op.dim, op.dim);
                for (i, ents) in &op.cons {
                    let yi = y[*i];
                    if yi != 0.0 {
                        for &(r, c, a) in ents {
                            m[(r, c)] += a * yi;
                        }
                    }
                }
                m
            })
            .collect()
    }

    /// `M_ij = tr(A_i X A_j Z⁻¹)`.
    fn schur(&self, x: &[DMatrix<f64>], zinv: &[DMatrix<f64>]) -> DMatrix<f64> {
        let m = self.m();
        let mut out = DMatrix::zeros(m, m);
        for ((op, xb), wb) in self.ops.iter().zip(x).zip(zinv) {
            let n = op.dim;
            if n == 1 {
                let s = xb[(0, 0)] * wb[(0, 0)];
                for (i, ei) in &op.cons {
                    let ai: f64 = ei.iter().map(|e| e.2).sum();
                    for (j, ej) in &op.cons {
                        let aj: f64 = ej.iter().map(|e| e.2).sum();
                        out[(*i, *j)] += ai * aj * s;
                    }
                }
                continue;
            }
            let mut pbuf = DMatrix::<f64>::zeros(n, n);
            for (idx, (i, ei)) in op.cons.iter().enumerate() {
                pbuf.fill(0.0);
                // P = W A_i X as a sum of rank-one terms
                for &(r, c, v) in ei {
                    for p in 0..n {
                        let xcp = v * xb[(c, p)];
                        if xcp == 0.0 {
                            continue;
                        }
                        let col = wb.column(r);
                        let mut pc = pbuf.column_mut(p);
                        pc.axpy(xcp, &col, 1.0);
                    }
                }
                for (j, ej) in &op.cons[idx..] {
                    let mut v = 0.0;
                    for &(p, q, u) in ej {
                        v += u * pbuf[(q, p)];
                    }
                    out[(*i, *j)] += v;
                    if i != j {
                        out[(*j, *i)] += v;
                    }
                }
            }
        }
        out
    }
}

fn inner(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)];
    }
    SymmetricEigen::new(sym(m)).eigenvalues.min()
}

/// Largest `α` with `X + αΔX ⪰ 0` (∞ when unbounded).
fn max_step(x: &DMatrix<f64>, dx: &DMatrix<f64>) -> f64 {
    if x.nrows() == 1 {
        return if dx[(0, 0)] < 0.0 { -x[(0, 0)] / dx[(0, 0)] } else { f64::INFINITY };
    }
    let Some(ch) = Cholesky::new(x.clone()) else { return 0.0 };
    let l = ch.l();
    let Some(t) = l.solve_lower_triangular(dx) else { return 0.0 };
    let Some(s) = l.solve_lower_triangular(&t.transpose()) else { return 0.0 };
    let lam = min_eig(&s);
    if lam >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / lam
    }
}

/// Cholesky of a Jacobi-equilibrated SPD matrix, `D M D = LLᵀ`, with a
/// diagonal shift as fallback.
struct ScaledChol {
    d: DVector<f64>,
    chol: Cholesky<f64, nalgebra::Dyn>,
}

impl ScaledChol {
    fn solve(&self, r: &DMatrix<f64>) -> DMatrix<f64> {
        let mut t = r.clone();
        for (i, mut row) in t.row_iter_mut().enumerate() {
            row *= self.d[i];
        }
        let mut out = self.chol.solve(&t);
        for (i, mut row) in out.row_iter_mut().enumerate() {
            row *= self.d[i];
        }
        out
    }

    fn solve_vec(&self, r: &DVector<f64>) -> DVector<f64> {
        let t = r.component_mul(&self.d);
        self.chol.solve(&t).component_mul(&self.d)
    }
}

fn chol_regularized(m: &DMatrix<f64>) -> Option<ScaledChol> {
    let n = m.nrows();
    let d = DVector::from_fn(n, |i, _| {
        let v = m[(i, i)];
        if v > 0.0 && v.is_finite() {
            1.0 / v.sqrt()
        } else {
            1.0
        }
    });
    let mut ms = m.clone();
    for i in 0..n {
        for j in 0..n {
            ms[(i, j)] *= d[i] * d[j];
        }
    }
    if let Some(chol) = Cholesky::new(ms.clone()) {
        return Some(ScaledChol { d, chol });
    }
    let mut reg = 1e-14;
    for _ in 0..8 {
        let mut mm = ms.clone();
        for i in 0..n {
            mm[(i, i)] += reg;
        }
        if let Some(chol) = Cholesky::new(mm) {
            return Some(ScaledChol { d, chol });
        }
        reg *= 100.0;
    }
    None
}

struct NewtonSystem {
    m: DMatrix<f64>,
    h: Option<DMatrix<f64>>,
    m_chol: ScaledChol,
    /// `M⁻¹F` and the Cholesky of `FᵀM⁻¹F + H`.
    elim: Option<(DMatrix<f64>, ScaledChol)>,
}

impl NewtonSystem {
    fn new(mm: &DMatrix<f64>, f: &DMatrix<f64>, h: Option<&DMatrix<f64>>) -> Option<Self> {
        let m_chol = chol_regularized(mm)?;
        let elim = if f.ncols() > 0 {
            let u = m_chol.solve(f);
            let mut s = f.transpose() * &u;
            if let Some(h) = h {
                s += h;
            }
            let s = sym(&s);
            Some((u, chol_regularized(&s)?))
        } else {
            None
        };
        Some(NewtonSystem {
            m: mm.clone(),
            h: h.cloned(),
            m_chol,
            elim,
        })
    }

    fn solve_once(&self, f: &DMatrix<f64>, r1: &DVector<f64>, r2: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let w = self.m_chol.solve_vec(r1);
        match &self.elim {
            None => (w, DVector::zeros(0)),
            Some((u, sc)) => {
                let rhs = f.transpose() * &w - r2;
                let dxf = sc.solve_vec(&rhs);
                let dy = w - u * &dxf;
                (dy, dxf)
            }
        }
    }

    /// Solves `M dy + F dxf = r1`, `Fᵀ dy − H dxf = r2` with two steps of
    /// iterative refinement.
    fn solve(&self, f: &DMatrix<f64>, r1: &DVector<f64>, r2: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let (mut dy, mut dxf) = self.solve_once(f, r1, r2);
        for _ in 0..2 {
            let mut e1 = r1 - &self.m * &dy;
            let mut e2 = r2.clone();
            if f.ncols() > 0 {
                e1 -= f * &dxf;
                e2 -= f.transpose() * &dy;
                if let Some(h) = &self.h {
                    e2 += h * &dxf;
                }
            }
            let (cy, cf) = self.solve_once(f, &e1, &e2);
            dy += cy;
            dxf += cf;
        }
        (dy, dxf)
    }
}

pub fn solve_sdp(problem: &SdpProblem) -> Result<SdpSolution, SdpError> {
    solve_sdp_with(problem, &SdpSettings::default())
}

pub fn solve_sdp_with(problem: &SdpProblem, settings: &SdpSettings) -> Result<SdpSolution, SdpError> {
    problem.validate()?;
    match eliminate_free_rows(problem) {
        FreeRows::None => {}
        FreeRows::Inconsistent(rows) => return Ok(structural_infeasible(problem, rows)),
        FreeRows::Reduced(red) => {
            let sol = solve_reduced(&red.problem, settings)?;
            return Ok(red.restore(problem, sol));
        }
    }
    solve_reduced(problem, settings)
}

/// Rows touching only free variables pin them to an affine subspace
/// `x = x0 + N z`; the remaining problem is posed in `z`.
struct FreeReduction {
    problem: SdpProblem,
    free_rows: Vec<usize>,
    kept_rows: Vec<usize>,
    x0: DVector<f64>,
    null: DMatrix<f64>,
    offset: f64,
}

enum FreeRows {
    None,
    Inconsistent(Vec<usize>),
    Reduced(Box<FreeReduction>),
}

fn eliminate_free_rows(p: &SdpProblem) -> FreeRows {
    let nf = p.n_free;
    let is_free_row = |i: usize| {
        p.constraints[i].iter().all(|e| e.value == 0.0) && p.free_coeffs.get(i).is_some_and(|f| f.iter().any(|(_, v)| *v != 0.0))
    };
    let free_rows: Vec<usize> = (0..p.ncons()).filter(|&i| is_free_row(i)).collect();
    if free_rows.is_empty() || nf == 0 {
        return FreeRows::None;
    }
    // unit-norm rows for a scale-free rank decision
    let r = free_rows.len();
    let mut a: DMatrix<f64> = DMatrix::zeros(r, nf);
    let mut b: DVector<f64> = DVector::zeros(r);
    for (k, &i) in free_rows.iter().enumerate() {
        for &(j, v) in &p.free_coeffs[i] {
            a[(k, j)] += v;
        }
        let nrm = a.row(k).norm();
        if nrm > 0.0 {
            a.row_mut(k).scale_mut(1.0 / nrm);
            b[k] = p.b[i] / nrm;
        }
    }
    let eig = (a.transpose() * &a).symmetric_eigen();
    let lmax = eig.eigenvalues.amax().max(1e-300);
    let tol = 1e-12 * lmax;
    let null_idx: Vec<usize> = (0..nf).filter(|&j| eig.eigenvalues[j] <= tol).collect();
    let range_idx: Vec<usize> = (0..nf).filter(|&j| eig.eigenvalues[j] > tol).collect();
    // minimum-norm particular solution through the range space
    let mut x0 = DVector::zeros(nf);
    let atb = a.transpose() * &b;
    for &j in &range_idx {
        let v = eig.eigenvectors.column(j);
        x0 += v * (v.dot(&atb) / eig.eigenvalues[j]);
    }
    let resid = &a * &x0 - &b;
    if resid.amax() > 1e-9 * (1.0 + b.amax()) {
        let bad = (0..r).filter(|&k| resid[k].abs() > 1e-9 * (1.0 + b.amax())).map(|k| free_rows[k]).collect();
        return FreeRows::Inconsistent(bad);
    }
    let null = DMatrix::from_fn(nf, null_idx.len(), |i, c| eig.eigenvectors[(i, null_idx[c])]);
    let nz = null.ncols();
    let mut is_free = vec![false; p.ncons()];
    for &i in &free_rows {
        is_free[i] = true;
    }
    let kept_rows: Vec<usize> = (0..p.ncons()).filter(|&i| !is_free[i]).collect();
    let mut q = SdpProblem::new(p.blocks.clone());
    q.c = p.c.clone();
    q.n_free = nz;
    for &i in &kept_rows {
        let mut fx0 = 0.0;
        let mut row = vec![0.0; nz];
        if let Some(f) = p.free_coeffs.get(i) {
            for &(j, v) in f {
                fx0 += v * x0[j];
                for (c, rc) in row.iter_mut().enumerate() {
                    *rc += v * null[(j, c)];
                }
            }
        }
        let scale = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let sparse = row
            .iter()
            .enumerate()
            .filter(|(_, v)| v.abs() > 1e-14 * scale)
            .map(|(c, v)| (c, *v))
            .collect();
        q.add_constraint(p.constraints[i].clone(), sparse, p.b[i] - fx0);
    }
    let c = DVector::from_iterator(nf, (0..nf).map(|j| p.c_free.get(j).copied().unwrap_or(0.0)));
    let mut grad = c.clone();
    let mut offset = c.dot(&x0);
    if let Some(h) = &p.h_free {
        let hx0 = h * &x0;
        offset += 0.5 * x0.dot(&hx0);
        grad += hx0;
        if nz > 0 {
            q.h_free = Some(null.transpose() * h * &null);
        }
    }
    q.c_free = (null.transpose() * grad).iter().copied().collect();
    FreeRows::Reduced(Box::new(FreeReduction {
        problem: q,
        free_rows,
        kept_rows,
        x0,
        null,
        offset,
    }))
}

impl FreeReduction {
    fn restore(&self, p: &SdpProblem, sol: SdpSolution) -> SdpSolution {
        let x_free = &self.x0 + &self.null * &sol.x_free;
        let mut y = DVector::zeros(p.ncons());
        for (k, &i) in self.kept_rows.iter().enumerate() {
            y[i] = sol.y[k];
        }
        // free-row duals from stationarity in x: Fᵀy = c + Hx
        let nf = p.n_free;
        let mut g = DVector::from_iterator(nf, (0..nf).map(|j| p.c_free.get(j).copied().unwrap_or(0.0)));
        if let Some(h) = &p.h_free {
            g += h * &x_free;
        }
        for &i in &self.kept_rows {
            if let Some(f) = p.free_coeffs.get(i) {
                for &(j, v) in f {
                    g[j] -= v * y[i];
                }
            }
        }
        let mut af = DMatrix::zeros(nf, self.free_rows.len());
        for (k, &i) in self.free_rows.iter().enumerate() {
            for &(j, v) in &p.free_coeffs[i] {
                af[(j, k)] += v;
            }
        }
        if let Ok(yf) = af.svd(true, true).solve(&g, 1e-12) {
            for (k, &i) in self.free_rows.iter().enumerate() {
                y[i] = yf[k];
            }
        }
        SdpSolution {
            x_free,
            y,
            primal_obj: sol.primal_obj + self.offset,
            dual_obj: sol.dual_obj + self.offset,
            dropped_rows: sol.dropped_rows.iter().map(|&k| self.kept_rows[k]).collect(),
            ..sol
        }
    }
}

fn solve_reduced(problem: &SdpProblem, settings: &SdpSettings) -> Result<SdpSolution, SdpError> {
    let prep = match presolve(problem)? {
        Presolve::Ok(p) => p,
        Presolve::Infeasible(rows) => {
            return Ok(structural_infeasible(problem, rows));
        }
    };
    let m = prep.m();
    let nf = problem.n_free;
    let nblocks = problem.blocks.len();
    let n_tot: usize = problem.blocks.iter().sum();

    // starting point
    let cnorm = prep.c.iter().map(|c| c.amax()).fold(0.0, f64::max).max(prep.c_free.amax());
    let mut x: Vec<DMatrix<f64>> = Vec::with_capacity(nblocks);
    let mut z: Vec<DMatrix<f64>> = Vec::with_capacity(nblocks);
    for (bi, op) in prep.ops.iter().enumerate() {
        let n = op.dim as f64;
        let mut xi = 10.0f64.max(n.sqrt());
        let mut eta = 10.0f64.max(n.sqrt()).max(prep.c[bi].norm());
        for (i, ents) in &op.cons {
            let fro = ents.iter().map(|e| e.2 * e.2).sum::<f64>().sqrt();
            xi = xi.max((1.0 + prep.b[*i].abs()) / (1.0 + fro));
            eta = eta.max(fro);
        }
        x.push(DMatrix::identity(op.dim, op.dim) * xi);
        z.push(DMatrix::identity(op.dim, op.dim) * eta);
    }
    let mut y = DVector::zeros(m);
    let mut xf = DVector::zeros(nf);
    let h = prep.h.clone();
    let equal_steps = h.is_some();
    let bscale = prep.b.map(|v| 1.0 + v.abs());
    let cscale = 1.0 + cnorm;

    let mut history = Vec::new();
    let mut status = SdpStatus::IterationLimit;
    let mut iterations = 0;
    let mut stall = 0;
    // best iterate by a scaled KKT merit, used when the tail of the
    // iteration loses accuracy to ill-conditioning
    let mut best: Option<((f64, f64), usize, Iterate, IterationRecord)> = None;

    let objective = |x: &[DMatrix<f64>], xf: &DVector<f64>, y: &DVector<f64>| -> (f64, f64) {
        let quad = h.as_ref().map_or(0.0, |h| 0.5 * xf.dot(&(h * xf)));
        let p = inner(&prep.c, x) + prep.c_free.dot(xf) + quad;
        let d = prep.b.dot(y) - quad;
        (p, d)
    };

    for it in 0..=settings.max_iter {
        iterations = it;
        let ax = prep.apply_a(&x);
        let r_p = &prep.b - &ax - &prep.f * &xf;
        let aty = prep.apply_at(&y);
        let r_d: Vec<DMatrix<f64>> = (0..nblocks).map(|k| &prep.c[k] - &aty[k] - &z[k]).collect();
        let mut r_f = prep.f.transpose() * &y - &prep.c_free;
        if let Some(h) = &h {
            r_f -= h * &xf;
        }
        let (pobj, dobj) = objective(&x, &xf, &y);
        let comp = inner(&x, &z);
        let pinf = r_p.component_div(&bscale).amax();
        let dinf = r_d.iter().map(|r| r.amax()).fold(0.0, f64::max).max(r_f.amax()) / cscale;
        history.push(IterationRecord {
            primal_obj: pobj,
            dual_obj: dobj,
            complementarity: comp,
            primal_infeas: pinf,
            dual_infeas: dinf,
        });
        let rel_gap = ((pobj - dobj).abs() / (1.0 + pobj.abs())).max(comp / (1.0 + pobj.abs()));
        let merit = pinf.max(dinf).max(rel_gap);
        let acceptable = pinf <= settings.accept_feas && dinf <= settings.accept_feas && rel_gap <= settings.accept_gap;
        // acceptable iterates always beat unacceptable ones
        let key = (if acceptable { 0.0 } else { 1.0 }, merit);
        if merit.is_finite() && best.as_ref().is_none_or(|b| key < b.0) {
            best = Some((key, it, (x.clone(), y.clone(), z.clone(), xf.clone()), *history.last().expect("pushed")));
        }
        if let Some(b) = &best {
            if b.0 .0 == 0.0 && it >= b.1 + 8 {
                break;
            }
        }
        let gap_ok = |tol: f64| (pobj - dobj).abs() <= tol * (1.0 + pobj.abs()) && comp <= tol * (1.0 + pobj.abs());
        if pinf <= settings.feas_tol && dinf <= settings.feas_tol && gap_ok(settings.gap_tol) {
            status = SdpStatus::Optimal;
            break;
        }
        if stall >= 3 && pinf <= 1e-7 && dinf <= 1e-7 && gap_ok(1e-7) {
            status = SdpStatus::Optimal;
            break;
        }
        if let Some(s) = infeasibility_check(&prep, &y, &x, &xf, h.as_ref()) {
            status = s;
            break;
        }
        if it == settings.max_iter {
            break;
        }

        let mu = comp / n_tot as f64;
        let zinv: Vec<DMatrix<f64>> = z
            .iter()
            .map(|zb| match Cholesky::new(zb.clone()) {
                Some(c) => c.inverse(),
                None => zb.clone().try_inverse().unwrap_or_else(|| DMatrix::identity(zb.nrows(), zb.nrows())),
            })
            .collect();
        let mm = prep.schur(&x, &zinv);
        let Some(newton) = NewtonSystem::new(&mm, &prep.f, h.as_ref()) else {
            return Err(SdpError::IllPosed(format!("Schur complement singular at iteration {it}")));
        };
        // X R_d Z⁻¹ is shared by predictor and corrector
        let xrz: Vec<DMatrix<f64>> = (0..nblocks).map(|k| &x[k] * &r_d[k] * &zinv[k]).collect();

        let direction = |mu_t: f64,
                         corr: Option<BlockPair>|
         -> Iterate {
            let kmat: Vec<DMatrix<f64>> = (0..nblocks)
                .map(|k| {
                    let mut km = &zinv[k] * mu_t - &x[k];
                    if let Some((dxa, dza)) = corr {
                        km -= &dxa[k] * &dza[k] * &zinv[k];
                    }
                    km
                })
                .collect();
            let t: Vec<DMatrix<f64>> = (0..nblocks).map(|k| &kmat[k] - &xrz[k]).collect();
            let rhs = &r_p - prep.apply_a(&t);
            let (mut dy, mut dxf) = newton.solve(&prep.f, &rhs, &(-&r_f));
            let build = |dy: &DVector<f64>| {
                let atdy = prep.apply_at(dy);
                let dz: Vec<DMatrix<f64>> = (0..nblocks).map(|k| &r_d[k] - &atdy[k]).collect();
                let dx: Vec<DMatrix<f64>> = (0..nblocks)
                    .map(|k| sym(&(&kmat[k] - &x[k] * &dz[k] * &zinv[k])))
                    .collect();
                (dx, dz)
            };
            let (mut dx, mut dz) = build(&dy);
            // refine against the primal equations as actually realized by
            // dX; rounding in M otherwise leaks into primal feasibility
            let zero_f = DVector::zeros(nf);
            for _ in 0..2 {
                let e = &r_p - prep.apply_a(&dx) - &prep.f * &dxf;
                if e.component_div(&bscale).amax() <= 1e-14 {
                    break;
                }
                let (cy, cf) = newton.solve(&prep.f, &e, &zero_f);
                dy += cy;
                dxf += cf;
                (dx, dz) = build(&dy);
            }
            (dx, dy, dz, dxf)
        };
        let steps = |dx: &[DMatrix<f64>], dz: &[DMatrix<f64>]| -> (f64, f64) {
            let ap = (0..nblocks).map(|k| max_step(&x[k], &dx[k])).fold(f64::INFINITY, f64::min);
            let ad = (0..nblocks).map(|k| max_step(&z[k], &dz[k])).fold(f64::INFINITY, f64::min);
            if equal_steps {
                let a = ap.min(ad);
                (a, a)
            } else {
                (ap, ad)
            }
        };

        let (dxa, _dya, dza, _dxfa) = direction(0.0, None);
        let (apa, ada) = steps(&dxa, &dza);
        let (apa, ada) = (apa.min(1.0), ada.min(1.0));
        let xa: Vec<DMatrix<f64>> = (0..nblocks).map(|k| &x[k] + &dxa[k] * apa).collect();
        let za: Vec<DMatrix<f64>> = (0..nblocks).map(|k| &z[k] + &dza[k] * ada).collect();
        let mu_aff = inner(&xa, &za) / n_tot as f64;
        let sigma = if mu > 0.0 { (mu_aff / mu).clamp(0.0, 1.0).powi(3) } else { 0.0 };
        let (dx, dy, dz, dxf) = direction(sigma * mu, Some((&dxa, &dza)));
        let (ap, ad) = steps(&dx, &dz);
        let gamma = 0.9 + 0.09 * apa.min(ada);
        let ap = (gamma * ap).min(1.0);
        let ad = (gamma * ad).min(1.0);
        if ap.min(ad) < 1e-3 {
            stall += 1;
        } else {
            stall = 0;
        }
        for k in 0..nblocks {
            x[k] += &dx[k] * ap;
            x[k] = sym(&x[k]);
            z[k] += &dz[k] * ad;
            z[k] = sym(&z[k]);
        }
        y += &dy * ad;
        if nf > 0 {
            xf += &dxf * ap;
        }
        if x.iter().chain(z.iter()).any(|b| b.iter().any(|v| !v.is_finite())) || y.iter().any(|v| !v.is_finite()) {
            return Err(SdpError::IllPosed(format!("non-finite iterate at iteration {it}")));
        }
        if stall > 10 {
            break;
        }
    }

    let mut last = *history.last().expect("at least one iteration recorded");
    if status == SdpStatus::IterationLimit {
        if let Some((key, _, (bx, by, bz, bxf), rec)) = best {
            if key.0 == 0.0 {
                x = bx;
                y = by;
                z = bz;
                xf = bxf;
                last = rec;
                status = SdpStatus::Optimal;
            }
        }
    }
    let (pobj, dobj) = objective(&x, &xf, &y);
    let mut y_full = DVector::zeros(problem.ncons());
    for (ri, &i) in prep.kept.iter().enumerate() {
        y_full[i] = y[ri];
    }
    Ok(SdpSolution {
        status,
        x,
        y: y_full,
        s: z,
        x_free: xf,
        primal_obj: pobj,
        dual_obj: dobj,
        duality_gap: (pobj - dobj).abs(),
        primal_infeas: last.primal_infeas,
        dual_infeas: last.dual_infeas,
        iterations,
        history,
        dropped_rows: prep.dropped,
    })
}

/// Farkas-type certificates from the current iterate.
fn infeasibility_check(
    prep: &Prepared,
    y: &DVector<f64>,
    x: &[DMatrix<f64>],
    xf: &DVector<f64>,
    h: Option<&DMatrix<f64>>,
) -> Option<SdpStatus> {
    let by = prep.b.dot(y);
    if by > 0.0 {
        let yh = y / by;
        let s = prep.apply_at(&yh);
        let ok = s.iter().all(|sb| min_eig(&(-sb)) >= -CERT_TOL)
            && (prep.f.ncols() == 0 || (prep.f.transpose() * &yh).amax() <= CERT_TOL);
        if ok {
            return Some(SdpStatus::PrimalInfeasible);
        }
    }
    let lin = inner(&prep.c, x) + prep.c_free.dot(xf);
    if lin < 0.0 {
        let scale = -lin;
        let xn: f64 = x.iter().map(|b| b.trace()).sum::<f64>() + xf.amax();
        if xn / scale > 1e8 {
            return None;
        }
        let res = (prep.apply_a(x) + &prep.f * xf) / scale;
        let hx = h.map_or(0.0, |h| (h * xf).amax() / scale);
        if res.amax() <= CERT_TOL && hx <= CERT_TOL && xn > 1e6 {
            return Some(SdpStatus::DualInfeasible);
        }
    }
    None
}

fn structural_infeasible(problem: &SdpProblem, rows: Vec<usize>) -> SdpSolution {
    let mut y = DVector::zeros(problem.ncons());
    for r in &rows {
        y[*r] = problem.b[*r].signum();
    }
    SdpSolution {
        status: SdpStatus::PrimalInfeasible,
        x: problem.blocks.iter().map(|&d| DMatrix::zeros(d, d)).collect(),
        y,
        s: problem.blocks.iter().map(|&d| DMatrix::zeros(d, d)).collect(),
        x_free: DVector::zeros(problem.n_free),
        primal_obj: f64::NAN,
        dual_obj: f64::NAN,
        duality_gap: f64::NAN,
        primal_infeas: f64::NAN,
        dual_infeas: f64::NAN,
        iterations: 0,
        history: Vec::new(),
        dropped_rows: rows,
    }
}
