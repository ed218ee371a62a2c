//! Sum-of-squares machinery: Gram transcription, certificate checking,
//! S-procedure assembly, and a small modelling layer ([`SosProgram`]) that
//! turns polynomial identities with unknown coefficients into an SDP.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

use crate::poly::{Monomial, PolyError, Polynomial};
use crate::sdp::{solve_sdp, solve_sdp_with, SdpError, SdpProblem, SdpSettings, SdpSolution, SdpStatus, SymEntry};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SosError {
    #[error("basis cannot express monomial {0} of the target")]
    StructurallyInfeasible(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Sdp(#[from] SdpError),
}

/// All monomials in `nvars` variables of degree ≤ `half_degree`, graded-lex.
pub fn monomial_basis(nvars: usize, half_degree: u32) -> Vec<Monomial> {
    monomials_in_range(nvars, 0, half_degree)
}

/// Monomials with `lo ≤ degree ≤ hi`, graded-lex.
pub fn monomials_in_range(nvars: usize, lo: u32, hi: u32) -> Vec<Monomial> {
    fn rec(i: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if i + 1 == cur.len() {
            cur[i] = left;
            out.push(cur.clone());
            return;
        }
        for e in 0..=left {
            cur[i] = e;
            rec(i + 1, left - e, cur, out);
        }
    }
    let mut out = Vec::new();
    if nvars == 0 {
        return out;
    }
    for d in lo..=hi {
        let mut buf = Vec::new();
        rec(0, d, &mut vec![0; nvars], &mut buf);
        out.extend(buf.into_iter().map(Monomial::new));
    }
    out.sort();
    out
}

/// Conservative Newton-polytope filter: keeps basis monomials whose
/// exponents lie in half the bounding box (per variable and in total degree)
/// of `support`.
pub fn newton_box_filter(support: &[Monomial], basis: &[Monomial]) -> Vec<Monomial> {
    let Some(first) = support.first() else {
        return Vec::new();
    };
    let n = first.nvars();
    let mut lo = vec![u32::MAX; n];
    let mut hi = vec![0u32; n];
    let (mut dlo, mut dhi) = (u32::MAX, 0u32);
    for m in support {
        for (i, e) in m.exps().iter().enumerate() {
            lo[i] = lo[i].min(*e);
            hi[i] = hi[i].max(*e);
        }
        dlo = dlo.min(m.degree());
        dhi = dhi.max(m.degree());
    }
    basis
        .iter()
        .filter(|m| {
            let d = m.degree();
            2 * d >= dlo
                && 2 * d <= dhi
                && m.exps().iter().enumerate().all(|(i, e)| 2 * e >= lo[i] && 2 * e <= hi[i])
        })
        .cloned()
        .collect()
}

/// `p = zᵀQz` with `z` the listed monomials.
#[derive(Debug, Clone, PartialEq)]
pub struct GramCertificate {
    pub basis: Vec<Monomial>,
    pub q: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct GramRepr {
    basis: Vec<Vec<u32>>,
    #[serde(rename = "Q")]
    q: Vec<f64>,
}

impl Serialize for GramCertificate {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let n = self.basis.len();
        let mut q = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                q.push(self.q[(i, j)]);
            }
        }
        GramRepr {
            basis: self.basis.iter().map(|m| m.exps().to_vec()).collect(),
            q,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for GramCertificate {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = GramRepr::deserialize(d)?;
        let n = r.basis.len();
        if r.q.len() != n * n {
            return Err(serde::de::Error::custom(format!(
                "Gram matrix has {} entries for a basis of {n}",
                r.q.len()
            )));
        }
        let nv = r.basis.first().map_or(0, Vec::len);
        if r.basis.iter().any(|e| e.len() != nv) {
            return Err(serde::de::Error::custom("ragged basis exponents"));
        }
        Ok(GramCertificate {
            basis: r.basis.into_iter().map(Monomial::new).collect(),
            q: DMatrix::from_row_slice(n, n, &r.q),
        })
    }
}

impl GramCertificate {
    /// `zᵀQz` expanded.
    pub fn to_polynomial(&self) -> Polynomial {
        let nv = self.basis.first().map_or(0, Monomial::nvars);
        let mut acc: BTreeMap<Monomial, f64> = BTreeMap::new();
        for (i, zi) in self.basis.iter().enumerate() {
            for (j, zj) in self.basis.iter().enumerate() {
                *acc.entry(zi.mul(zj)).or_insert(0.0) += self.q[(i, j)];
            }
        }
        Polynomial::from_terms(nv, acc.into_iter().map(|(m, c)| (m.exps().to_vec(), c))).expect("basis monomials share one dimension")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GramReport {
    pub min_eig: f64,
    pub residual: f64,
    pub valid: bool,
}

/// Smallest eigenvalue of `Q` and `‖p − zᵀQz‖∞` over coefficients.
pub fn verify_gram(p: &Polynomial, cert: &GramCertificate, tol: f64) -> GramReport {
    let n = cert.basis.len();
    if cert.q.nrows() != n || cert.q.ncols() != n || cert.basis.iter().any(|m| m.nvars() != p.nvars()) {
        return GramReport {
            min_eig: f64::NAN,
            residual: f64::INFINITY,
            valid: false,
        };
    }
    let qs = (&cert.q + cert.q.transpose()) * 0.5;
    let min_eig = if n == 0 { 0.0 } else { SymmetricEigen::new(qs).eigenvalues.min() };
    let diff = p - &cert.to_polynomial();
    let residual = diff.max_abs_coeff();
    let asym = (&cert.q - cert.q.transpose()).amax();
    GramReport {
        min_eig,
        residual,
        valid: min_eig >= -tol && residual <= tol && asym <= tol,
    }
}

/// Feasibility SDP for `p = zᵀQz`, `Q ⪰ 0`: one equality per monomial.
pub fn gram_transcribe(p: &Polynomial, basis: &[Monomial]) -> Result<SdpProblem, SosError> {
    if basis.is_empty() {
        if p.is_zero() {
            return Ok(SdpProblem::new(vec![1]));
        }
        return Err(SosError::StructurallyInfeasible(format!("{p}")));
    }
    if basis.iter().any(|m| m.nvars() != p.nvars()) {
        return Err(SosError::Dimension("basis and polynomial dimensions differ".into()));
    }
    let pairs = gram_pairs(basis);
    for (m, _) in p.terms() {
        if !pairs.contains_key(m) {
            return Err(SosError::StructurallyInfeasible(m.to_string()));
        }
    }
    let mut sdp = SdpProblem::new(vec![basis.len()]);
    for (mono, list) in &pairs {
        let entries = list.iter().map(|&(i, j)| SymEntry::new(0, i, j, 1.0)).collect();
        sdp.add_constraint(entries, vec![], p.coeff(mono));
    }
    Ok(sdp)
}

/// Monomial → list of `(i, j)` with `i ≤ j` and `z_i z_j` equal to it.
fn gram_pairs(basis: &[Monomial]) -> BTreeMap<Monomial, Vec<(usize, usize)>> {
    let mut pairs: BTreeMap<Monomial, Vec<(usize, usize)>> = BTreeMap::new();
    for i in 0..basis.len() {
        for j in i..basis.len() {
            pairs.entry(basis[i].mul(&basis[j])).or_default().push((i, j));
        }
    }
    pairs
}

/// Transcribe, solve, and extract a Gram certificate if one exists.
pub fn find_gram(p: &Polynomial, basis: &[Monomial]) -> Result<Option<GramCertificate>, SosError> {
    let sdp = match gram_transcribe(p, basis) {
        Ok(s) => s,
        Err(SosError::StructurallyInfeasible(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let sol = solve_sdp(&sdp)?;
    if sol.status != SdpStatus::Optimal {
        return Ok(None);
    }
    Ok(Some(GramCertificate {
        basis: basis.to_vec(),
        q: sol.x[0].clone(),
    }))
}

/// `p0 − Σ s_k p_k`.
pub fn s_procedure_assemble(p0: &Polynomial, pairs: &[(Polynomial, Polynomial)]) -> Result<Polynomial, SosError> {
    let mut out = p0.clone();
    for (s, p) in pairs {
        out = out.checked_sub(&s.checked_mul(p)?)?;
    }
    Ok(out)
}

/// Decision variable of an [`SosProgram`]: a free scalar, or the symmetric
/// functional `⟨E_ij, Q_b⟩` of a PSD block (`Q_ii` on the diagonal,
/// `2Q_ij` off it).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Var {
    Free(usize),
    Gram(usize, usize, usize),
}

/// Affine function of decision variables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Affine {
    pub constant: f64,
    pub lin: BTreeMap<Var, f64>,
}

impl Affine {
    fn add_scaled(&mut self, other: &Affine, a: f64) {
        self.constant += a * other.constant;
        for (v, c) in &other.lin {
            *self.lin.entry(*v).or_insert(0.0) += a * c;
        }
    }

    fn is_structurally_zero(&self) -> bool {
        self.constant == 0.0 && self.lin.values().all(|c| *c == 0.0)
    }

    pub fn eval(&self, values: &impl Fn(Var) -> f64) -> f64 {
        self.constant + self.lin.iter().map(|(v, c)| c * values(*v)).sum::<f64>()
    }
}

/// Polynomial whose coefficients are affine in decision variables.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePoly {
    nvars: usize,
    terms: BTreeMap<Monomial, Affine>,
}

impl AffinePoly {
    pub fn zero(nvars: usize) -> Self {
        AffinePoly {
            nvars,
            terms: BTreeMap::new(),
        }
    }

    pub fn from_poly(p: &Polynomial) -> Self {
        let mut out = Self::zero(p.nvars());
        for (m, c) in p.terms() {
            out.terms.insert(
                m.clone(),
                Affine {
                    constant: c,
                    lin: BTreeMap::new(),
                },
            );
        }
        out
    }

    /// `Σ_k v_k · m_k`.
    pub fn from_vars(nvars: usize, monos: &[Monomial], vars: &[Var]) -> Self {
        let mut out = Self::zero(nvars);
        for (m, v) in monos.iter().zip(vars) {
            out.terms.entry(m.clone()).or_default().lin.insert(*v, 1.0);
        }
        out
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &Affine)> {
        self.terms.iter()
    }

    /// Monomials with a structurally nonzero coefficient.
    pub fn support(&self) -> Vec<Monomial> {
        self.terms
            .iter()
            .filter(|(_, a)| !a.is_structurally_zero())
            .map(|(m, _)| m.clone())
            .collect()
    }

    pub fn add(&self, other: &AffinePoly) -> AffinePoly {
        self.axpy(1.0, other)
    }

    pub fn axpy(&self, a: f64, other: &AffinePoly) -> AffinePoly {
        assert_eq!(self.nvars, other.nvars);
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.terms.entry(m.clone()).or_default().add_scaled(c, a);
        }
        out
    }

    pub fn add_poly(&self, a: f64, p: &Polynomial) -> AffinePoly {
        self.axpy(a, &AffinePoly::from_poly(p))
    }

    pub fn scale(&self, a: f64) -> AffinePoly {
        AffinePoly::zero(self.nvars).axpy(a, self)
    }

    /// Product with a fixed polynomial.
    pub fn mul_poly(&self, p: &Polynomial) -> AffinePoly {
        assert_eq!(self.nvars, p.nvars());
        let mut out = AffinePoly::zero(self.nvars);
        for (m1, c1) in &self.terms {
            for (m2, c2) in p.terms() {
                out.terms.entry(m1.mul(m2)).or_default().add_scaled(c1, c2);
            }
        }
        out
    }

    pub fn derivative(&self, i: usize) -> AffinePoly {
        let mut out = AffinePoly::zero(self.nvars);
        for (m, c) in &self.terms {
            let e = m.exps()[i];
            if e == 0 {
                continue;
            }
            let mut exps = m.exps().to_vec();
            exps[i] -= 1;
            out.terms.entry(Monomial::new(exps)).or_default().add_scaled(c, e as f64);
        }
        out
    }

    /// `⟨∇self, field⟩`.
    pub fn lie_derivative(&self, field: &[Polynomial]) -> AffinePoly {
        let mut out = AffinePoly::zero(self.nvars);
        for (i, f) in field.iter().enumerate() {
            if f.is_zero() {
                continue;
            }
            let d = self.derivative(i);
            if d.terms.is_empty() {
                continue;
            }
            out = out.add(&d.mul_poly(f));
        }
        out
    }

    /// Substitutes decision values.
    pub fn evaluate(&self, values: &impl Fn(Var) -> f64) -> Polynomial {
        Polynomial::from_terms(self.nvars, self.terms.iter().map(|(m, a)| (m.exps().to_vec(), a.eval(values))))
            .expect("monomials share one dimension")
    }

    pub fn degree(&self) -> u32 {
        self.support().iter().map(Monomial::degree).max().unwrap_or(0)
    }
}

/// A named SOS constraint `expr = zᵀQz (+ t·Σz²)` inside a program.
#[derive(Debug, Clone)]
pub struct SosBlock {
    pub name: String,
    pub block: usize,
    pub basis: Vec<Monomial>,
    pub expr: AffinePoly,
    pub margin: Option<usize>,
}

/// Linear program-in-the-large over PSD blocks and free scalars.
#[derive(Debug, Clone)]
pub struct SosProgram {
    nvars: usize,
    n_free: usize,
    blocks: Vec<usize>,
    eqs: Vec<(BTreeMap<Var, f64>, f64)>,
    cost: BTreeMap<Var, f64>,
    quad: Vec<(usize, usize, f64)>,
    sos: Vec<SosBlock>,
}

#[derive(Debug, Clone)]
pub struct SosSolution {
    pub status: SdpStatus,
    pub free: DVector<f64>,
    pub blocks: Vec<DMatrix<f64>>,
    pub certificates: Vec<(String, Polynomial, GramCertificate)>,
    pub sdp: SdpSolution,
}

impl SosSolution {
    pub fn value(&self, v: Var) -> f64 {
        match v {
            Var::Free(i) => self.free[i],
            Var::Gram(b, i, j) => {
                if i == j {
                    self.blocks[b][(i, i)]
                } else {
                    self.blocks[b][(i, j)] + self.blocks[b][(j, i)]
                }
            }
        }
    }

    pub fn eval_poly(&self, p: &AffinePoly) -> Polynomial {
        p.evaluate(&|v| self.value(v))
    }

    /// Re-verifies every SOS block of the solution.
    pub fn verify_all(&self, tol: f64) -> Vec<(String, GramReport)> {
        self.certificates
            .iter()
            .map(|(name, p, cert)| (name.clone(), verify_gram(p, cert, tol)))
            .collect()
    }
}

impl SosProgram {
    pub fn new(nvars: usize) -> Self {
        SosProgram {
            nvars,
            n_free: 0,
            blocks: Vec::new(),
            eqs: Vec::new(),
            cost: BTreeMap::new(),
            quad: Vec::new(),
            sos: Vec::new(),
        }
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn sos_blocks(&self) -> &[SosBlock] {
        &self.sos
    }

    pub fn new_free(&mut self, k: usize) -> Vec<Var> {
        let start = self.n_free;
        self.n_free += k;
        (start..start + k).map(Var::Free).collect()
    }

    /// Polynomial with free coefficients on the given monomials.
    pub fn new_poly(&mut self, monos: &[Monomial]) -> (AffinePoly, Vec<Var>) {
        let vars = self.new_free(monos.len());
        (AffinePoly::from_vars(self.nvars, monos, &vars), vars)
    }

    pub fn new_psd_block(&mut self, dim: usize) -> usize {
        self.blocks.push(dim);
        self.blocks.len() - 1
    }

    /// Polynomial `zᵀQz` with a fresh PSD `Q` over `basis`; an SOS
    /// polynomial by construction.
    pub fn new_sos_poly(&mut self, basis: &[Monomial]) -> (AffinePoly, usize) {
        let b = self.new_psd_block(basis.len().max(1));
        let mut out = AffinePoly::zero(self.nvars);
        for i in 0..basis.len() {
            for j in i..basis.len() {
                *out.terms
                    .entry(basis[i].mul(&basis[j]))
                    .or_default()
                    .lin
                    .entry(Var::Gram(b, i, j))
                    .or_insert(0.0) += 1.0;
            }
        }
        (out, b)
    }

    /// Trace of a PSD block as a linear form.
    pub fn trace_form(&self, block: usize) -> BTreeMap<Var, f64> {
        (0..self.blocks[block]).map(|i| (Var::Gram(block, i, i), 1.0)).collect()
    }

    pub fn add_eq(&mut self, lin: BTreeMap<Var, f64>, rhs: f64) {
        self.eqs.push((lin, rhs));
    }

    /// `lin ≤ rhs` through a 1×1 slack block.
    pub fn add_le(&mut self, mut lin: BTreeMap<Var, f64>, rhs: f64) {
        let s = self.new_psd_block(1);
        lin.insert(Var::Gram(s, 0, 0), 1.0);
        self.eqs.push((lin, rhs));
    }

    /// `a(x) ≤ rhs` for an affine coefficient form.
    pub fn add_affine_le(&mut self, a: &Affine, rhs: f64) {
        self.add_le(a.lin.clone(), rhs - a.constant);
    }

    pub fn add_cost(&mut self, v: Var, c: f64) {
        *self.cost.entry(v).or_insert(0.0) += c;
    }

    /// Adds `weight · ‖coeffs(expr)‖²` to the objective (free variables only).
    pub fn add_coeff_norm_cost(&mut self, weight: f64, expr: &AffinePoly) {
        for (_, a) in expr.terms() {
            let lin: Vec<(usize, f64)> = a
                .lin
                .iter()
                .map(|(v, c)| match v {
                    Var::Free(i) => (*i, *c),
                    Var::Gram(..) => panic!("quadratic cost on Gram entries is unsupported"),
                })
                .collect();
            // w (c0 + aᵀx)² = w c0² + 2 w c0 aᵀx + w xᵀ a aᵀ x
            for (i, ai) in &lin {
                *self.cost.entry(Var::Free(*i)).or_insert(0.0) += 2.0 * weight * a.constant * ai;
                for (j, aj) in &lin {
                    // ½ xᵀHx convention: H += 2 w a aᵀ
                    self.quad.push((*i, *j, 2.0 * weight * ai * aj));
                }
            }
        }
    }

    /// Requires `expr ∈ Σ[x]` with Gram basis `basis` (box-filtered from the
    /// structural support when `None`). With `margin = Some(t)` the Gram
    /// matrix is `Q + t·I`, so `t > 0` certifies strict positivity.
    pub fn add_sos(
        &mut self,
        name: &str,
        expr: &AffinePoly,
        basis: Option<Vec<Monomial>>,
        margin: Option<Var>,
    ) -> Result<usize, SosError> {
        if expr.nvars() != self.nvars {
            return Err(SosError::Dimension(format!("constraint {name}")));
        }
        let basis = match basis {
            Some(b) => b,
            None => default_basis(expr),
        };
        let block = self.new_psd_block(basis.len().max(1));
        let pairs = gram_pairs(&basis);
        let mut all: BTreeSet<Monomial> = pairs.keys().cloned().collect();
        all.extend(expr.support());
        let margin_idx = match margin {
            Some(Var::Free(i)) => Some(i),
            Some(_) => return Err(SosError::Dimension("margin must be a free variable".into())),
            None => None,
        };
        for mono in all {
            let mut lin: BTreeMap<Var, f64> = BTreeMap::new();
            if let Some(list) = pairs.get(&mono) {
                for &(i, j) in list {
                    *lin.entry(Var::Gram(block, i, j)).or_insert(0.0) += 1.0;
                    if i == j {
                        if let Some(t) = margin_idx {
                            *lin.entry(Var::Free(t)).or_insert(0.0) += 1.0;
                        }
                    }
                }
            }
            let (c0, elin) = match expr.terms.get(&mono) {
                Some(a) => (a.constant, a.lin.clone()),
                None => (0.0, BTreeMap::new()),
            };
            for (v, c) in elin {
                *lin.entry(v).or_insert(0.0) -= c;
            }
            self.eqs.push((lin, c0));
        }
        self.sos.push(SosBlock {
            name: name.to_string(),
            block,
            basis,
            expr: expr.clone(),
            margin: margin_idx,
        });
        Ok(self.sos.len() - 1)
    }

    pub fn to_sdp(&self) -> SdpProblem {
        let mut sdp = SdpProblem::new(self.blocks.clone());
        sdp.n_free = self.n_free;
        for (lin, rhs) in &self.eqs {
            let mut ents = Vec::new();
            let mut free = Vec::new();
            for (v, c) in lin {
                if *c == 0.0 {
                    continue;
                }
                match v {
                    Var::Free(i) => free.push((*i, *c)),
                    Var::Gram(b, i, j) => ents.push(SymEntry::new(*b, *i, *j, *c)),
                }
            }
            sdp.add_constraint(ents, free, *rhs);
        }
        let mut cf = vec![0.0; self.n_free];
        for (v, c) in &self.cost {
            match v {
                Var::Free(i) => cf[*i] += c,
                Var::Gram(b, i, j) => sdp.c.push(SymEntry::new(*b, *i, *j, *c)),
            }
        }
        sdp.c_free = cf;
        if !self.quad.is_empty() {
            let mut h = DMatrix::zeros(self.n_free, self.n_free);
            for &(i, j, v) in &self.quad {
                h[(i, j)] += v;
            }
            sdp.h_free = Some(h);
        }
        sdp
    }

    pub fn solve(&self) -> Result<SosSolution, SosError> {
        self.solve_with(&SdpSettings::default())
    }

    pub fn solve_with(&self, settings: &SdpSettings) -> Result<SosSolution, SosError> {
        let sdp = self.to_sdp();
        let sol = solve_sdp_with(&sdp, settings)?;
        Ok(self.extract(sol))
    }

    fn extract(&self, sol: SdpSolution) -> SosSolution {
        let mut out = SosSolution {
            status: sol.status,
            free: sol.x_free.clone(),
            blocks: sol.x.clone(),
            certificates: Vec::new(),
            sdp: sol,
        };
        let mut certs = Vec::new();
        for blk in &self.sos {
            let p = out.eval_poly(&blk.expr);
            let mut q = out.blocks[blk.block].clone();
            if q.nrows() != blk.basis.len() {
                q = DMatrix::zeros(blk.basis.len(), blk.basis.len());
            }
            if let Some(t) = blk.margin {
                for i in 0..q.nrows() {
                    q[(i, i)] += out.free[t];
                }
            }
            certs.push((blk.name.clone(), p, GramCertificate { basis: blk.basis.clone(), q }));
        }
        out.certificates = certs;
        out
    }
}

/// Box-filtered basis from the structural support of `expr`.
pub fn default_basis(expr: &AffinePoly) -> Vec<Monomial> {
    let support = expr.support();
    if support.is_empty() {
        return Vec::new();
    }
    let dmax = support.iter().map(Monomial::degree).max().unwrap_or(0);
    let dmin = support.iter().map(Monomial::degree).min().unwrap_or(0);
    let cand = monomials_in_range(expr.nvars(), dmin.div_ceil(2), dmax / 2);
    prune_diagonal(&support, &newton_box_filter(&support, &cand))
}

/// Drops basis monomials `m` whose square `m²` is absent from `support` and
/// cannot be produced by any other pair of basis monomials: the matching
/// Gram diagonal entry is forced to zero, so its row and column vanish.
/// Repeats until no monomial is removed.
pub fn prune_diagonal(support: &[Monomial], basis: &[Monomial]) -> Vec<Monomial> {
    let supp: BTreeSet<&Monomial> = support.iter().collect();
    let mut keep: Vec<Monomial> = basis.to_vec();
    loop {
        let mut cross: BTreeSet<Monomial> = BTreeSet::new();
        for i in 0..keep.len() {
            for j in i + 1..keep.len() {
                cross.insert(keep[i].mul(&keep[j]));
            }
        }
        let before = keep.len();
        keep.retain(|m| {
            let sq = m.mul(m);
            supp.contains(&sq) || cross.contains(&sq)
        });
        if keep.len() == before {
            return keep;
        }
    }
}
