//! Sparse multivariate polynomials with real coefficients.
//!
//! Terms are stored keyed by exponent vector in graded-lexicographic order,
//! which makes serialization and iteration deterministic. Coefficients whose
//! magnitude falls below [`PRUNE_TOL`] are dropped after every arithmetic
//! operation.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Coefficients with smaller magnitude are removed after arithmetic.
pub const PRUNE_TOL: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolyError {
    #[error("dimension mismatch: expected {expected} variables, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid term: {0}")]
    InvalidTerm(String),
}

/// Exponent vector of a monomial.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Monomial(Vec<u32>);

impl Monomial {
    pub fn new(exps: Vec<u32>) -> Self {
        Monomial(exps)
    }

    pub fn one(nvars: usize) -> Self {
        Monomial(vec![0; nvars])
    }

    /// The monomial `x_i`.
    pub fn var(nvars: usize, i: usize) -> Self {
        let mut e = vec![0; nvars];
        e[i] = 1;
        Monomial(e)
    }

    pub fn exps(&self) -> &[u32] {
        &self.0
    }

    pub fn nvars(&self) -> usize {
        self.0.len()
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        debug_assert_eq!(self.0.len(), other.0.len());
        Monomial(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// Product `Π x_i^{α_i}`.
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(x)
            .filter(|(e, _)| **e > 0)
            .map(|(&e, &xi)| xi.powi(e as i32))
            .product()
    }

    /// True if every exponent is even.
    pub fn is_even(&self) -> bool {
        self.0.iter().all(|e| e % 2 == 0)
    }
}

impl Ord for Monomial {
    /// Graded lexicographic: lower total degree first; within a degree the
    /// monomial with the larger leading exponent comes first, so that
    /// `1 < x1 < x2 < x1^2 < x1 x2 < x2^2`.
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| other.0.cmp(&self.0))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.degree() == 0 {
            return write!(f, "1");
        }
        let mut first = true;
        for (i, &e) in self.0.iter().enumerate() {
            if e == 0 {
                continue;
            }
            if !first {
                write!(f, "*")?;
            }
            first = false;
            if e == 1 {
                write!(f, "x{}", i + 1)?;
            } else {
                write!(f, "x{}^{}", i + 1, e)?;
            }
        }
        Ok(())
    }
}

/// A polynomial in `nvars` real variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    nvars: usize,
    terms: BTreeMap<Monomial, f64>,
}

impl Polynomial {
    pub fn zero(nvars: usize) -> Self {
        Polynomial {
            nvars,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        let mut p = Self::zero(nvars);
        p.insert(Monomial::one(nvars), c);
        p
    }

    /// The coordinate polynomial `x_i`.
    pub fn var(nvars: usize, i: usize) -> Self {
        assert!(i < nvars, "variable index {i} out of range for {nvars} variables");
        let mut p = Self::zero(nvars);
        p.insert(Monomial::var(nvars, i), 1.0);
        p
    }

    pub fn monomial(m: Monomial, c: f64) -> Self {
        let mut p = Self::zero(m.nvars());
        p.insert(m, c);
        p
    }

    /// Builds a polynomial from `(exponents, coefficient)` pairs, summing
    /// repeated monomials.
    pub fn from_terms<I>(nvars: usize, terms: I) -> Result<Self, PolyError>
    where
        I: IntoIterator<Item = (Vec<u32>, f64)>,
    {
        let mut p = Self::zero(nvars);
        for (exps, c) in terms {
            if exps.len() != nvars {
                return Err(PolyError::DimensionMismatch {
                    expected: nvars,
                    got: exps.len(),
                });
            }
            if !c.is_finite() {
                return Err(PolyError::InvalidTerm(format!("non-finite coefficient {c}")));
            }
            *p.terms.entry(Monomial(exps)).or_insert(0.0) += c;
        }
        p.prune();
        Ok(p)
    }

    /// `Σ c_i x_i`.
    pub fn linear(coeffs: &[f64]) -> Self {
        let n = coeffs.len();
        let mut p = Self::zero(n);
        for (i, &c) in coeffs.iter().enumerate() {
            p.insert(Monomial::var(n, i), c);
        }
        p
    }

    /// `xᵀ P x` for a square row-major matrix `P` (symmetrized).
    pub fn quadratic_form(p: &nalgebra::DMatrix<f64>) -> Self {
        let n = p.nrows();
        assert_eq!(n, p.ncols(), "quadratic form needs a square matrix");
        let mut q = Self::zero(n);
        for i in 0..n {
            for j in 0..n {
                let c = 0.5 * (p[(i, j)] + p[(j, i)]);
                let mut e = vec![0; n];
                e[i] += 1;
                e[j] += 1;
                *q.terms.entry(Monomial(e)).or_insert(0.0) += c;
            }
        }
        q.prune();
        q
    }

    /// `Σ x_i²`.
    pub fn sum_of_squares_of_vars(nvars: usize) -> Self {
        let mut p = Self::zero(nvars);
        for i in 0..nvars {
            let mut e = vec![0; nvars];
            e[i] = 2;
            p.insert(Monomial(e), 1.0);
        }
        p
    }

    fn insert(&mut self, m: Monomial, c: f64) {
        if c.abs() >= PRUNE_TOL {
            self.terms.insert(m, c);
        }
    }

    fn prune(&mut self) {
        self.terms.retain(|_, c| c.abs() >= PRUNE_TOL);
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    /// Terms in canonical (graded-lex) order.
    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, f64)> {
        self.terms.iter().map(|(m, c)| (m, *c))
    }

    pub fn coeff(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    /// Total degree; the zero polynomial has degree 0.
    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    /// Smallest total degree among stored terms.
    pub fn min_degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).min().unwrap_or(0)
    }

    fn check_dim(&self, other: usize) -> Result<(), PolyError> {
        if self.nvars != other {
            Err(PolyError::DimensionMismatch {
                expected: self.nvars,
                got: other,
            })
        } else {
            Ok(())
        }
    }

    /// Evaluates `Σ c_α Π x_i^{α_i}`.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64, PolyError> {
        self.check_dim(x.len())?;
        Ok(self.eval_unchecked(x))
    }

    /// Evaluation without the dimension check; panics on short input.
    pub fn eval_unchecked(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(m, c)| c * m.evaluate(x)).sum()
    }

    /// Partial derivative with respect to `x_i`.
    pub fn derivative(&self, i: usize) -> Polynomial {
        assert!(i < self.nvars);
        let mut out = Self::zero(self.nvars);
        for (m, &c) in &self.terms {
            let e = m.0[i];
            if e == 0 {
                continue;
            }
            let mut exps = m.0.clone();
            exps[i] -= 1;
            *out.terms.entry(Monomial(exps)).or_insert(0.0) += c * e as f64;
        }
        out.prune();
        out
    }

    pub fn gradient(&self) -> Vec<Polynomial> {
        (0..self.nvars).map(|i| self.derivative(i)).collect()
    }

    pub fn checked_add(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check_dim(other.nvars)?;
        Ok(self.axpy(1.0, other))
    }

    pub fn checked_sub(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check_dim(other.nvars)?;
        Ok(self.axpy(-1.0, other))
    }

    pub fn checked_mul(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check_dim(other.nvars)?;
        let mut out = Self::zero(self.nvars);
        for (ma, &ca) in &self.terms {
            for (mb, &cb) in &other.terms {
                *out.terms.entry(ma.mul(mb)).or_insert(0.0) += ca * cb;
            }
        }
        out.prune();
        Ok(out)
    }

    /// `self + a · other`.
    pub fn axpy(&self, a: f64, other: &Polynomial) -> Polynomial {
        assert_eq!(self.nvars, other.nvars, "polynomial dimension mismatch");
        let mut out = self.clone();
        for (m, &c) in &other.terms {
            *out.terms.entry(m.clone()).or_insert(0.0) += a * c;
        }
        out.prune();
        out
    }

    pub fn scale(&self, a: f64) -> Polynomial {
        let mut out = Self::zero(self.nvars);
        for (m, &c) in &self.terms {
            out.insert(m.clone(), a * c);
        }
        out
    }

    /// `p(d_1 x_1, …, d_n x_n)`: linear rescaling of the variables.
    pub fn scale_vars(&self, d: &[f64]) -> Polynomial {
        assert_eq!(d.len(), self.nvars);
        let mut out = Self::zero(self.nvars);
        for (m, &c) in &self.terms {
            out.insert(m.clone(), c * m.evaluate(d));
        }
        out
    }

    /// Squared Euclidean norm of the coefficient vector.
    pub fn coeff_norm_sq(&self) -> f64 {
        self.terms.values().map(|c| c * c).sum()
    }

    /// Squared Euclidean distance between coefficient vectors over the union
    /// of monomials.
    pub fn coeff_distance_sq(&self, other: &Polynomial) -> Result<f64, PolyError> {
        self.check_dim(other.nvars)?;
        let mut acc = 0.0;
        for (m, &c) in &self.terms {
            let d = c - other.coeff(m);
            acc += d * d;
        }
        for (m, &c) in &other.terms {
            if !self.terms.contains_key(m) {
                acc += c * c;
            }
        }
        Ok(acc)
    }

    /// Largest coefficient magnitude.
    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.values().fold(0.0, |a, c| a.max(c.abs()))
    }

    /// Embeds the polynomial into a space with more variables; variable `i`
    /// becomes variable `map[i]`.
    pub fn embed(&self, nvars: usize, map: &[usize]) -> Polynomial {
        assert_eq!(map.len(), self.nvars);
        let mut out = Self::zero(nvars);
        for (m, &c) in &self.terms {
            let mut e = vec![0; nvars];
            for (i, &k) in map.iter().enumerate() {
                e[k] += m.0[i];
            }
            *out.terms.entry(Monomial(e)).or_insert(0.0) += c;
        }
        out.prune();
        out
    }

    /// Substitutes polynomials `subs[i]` (all in a common variable space) for
    /// each variable `x_i`.
    pub fn compose(&self, subs: &[Polynomial]) -> Result<Polynomial, PolyError> {
        self.check_dim(subs.len())?;
        let target = subs.first().map(|p| p.nvars).unwrap_or(0);
        for s in subs {
            if s.nvars != target {
                return Err(PolyError::DimensionMismatch {
                    expected: target,
                    got: s.nvars,
                });
            }
        }
        let mut out = Polynomial::zero(target);
        // Cache of powers per variable.
        let maxdeg = self.degree() as usize;
        let mut powers: Vec<Vec<Polynomial>> = Vec::with_capacity(subs.len());
        for s in subs {
            let mut pw = vec![Polynomial::constant(target, 1.0)];
            for k in 1..=maxdeg {
                let next = pw[k - 1].checked_mul(s)?;
                pw.push(next);
            }
            powers.push(pw);
        }
        for (m, &c) in &self.terms {
            let mut term = Polynomial::constant(target, c);
            for (i, &e) in m.0.iter().enumerate() {
                if e > 0 {
                    term = term.checked_mul(&powers[i][e as usize])?;
                }
            }
            out = out.axpy(1.0, &term);
        }
        Ok(out)
    }

    /// Drops every term of total degree above `max_deg`.
    pub fn truncate(&self, max_deg: u32) -> Polynomial {
        let mut out = self.clone();
        out.terms.retain(|m, _| m.degree() <= max_deg);
        out
    }

    /// Precomputes a flat evaluation layout for hot loops.
    pub fn compile(&self) -> CompiledPoly {
        CompiledPoly::new(self)
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (k, (m, c)) in self.terms.iter().enumerate() {
            if k > 0 {
                write!(f, " + ")?;
            }
            write!(f, "{c}*{m}")?;
        }
        Ok(())
    }
}

impl Add for &Polynomial {
    type Output = Polynomial;
    fn add(self, rhs: &Polynomial) -> Polynomial {
        self.axpy(1.0, rhs)
    }
}

impl Sub for &Polynomial {
    type Output = Polynomial;
    fn sub(self, rhs: &Polynomial) -> Polynomial {
        self.axpy(-1.0, rhs)
    }
}

impl Mul for &Polynomial {
    type Output = Polynomial;
    fn mul(self, rhs: &Polynomial) -> Polynomial {
        self.checked_mul(rhs).expect("polynomial dimension mismatch")
    }
}

impl Neg for &Polynomial {
    type Output = Polynomial;
    fn neg(self) -> Polynomial {
        self.scale(-1.0)
    }
}

impl Add for Polynomial {
    type Output = Polynomial;
    fn add(self, rhs: Polynomial) -> Polynomial {
        &self + &rhs
    }
}

impl Sub for Polynomial {
    type Output = Polynomial;
    fn sub(self, rhs: Polynomial) -> Polynomial {
        &self - &rhs
    }
}

impl Mul for Polynomial {
    type Output = Polynomial;
    fn mul(self, rhs: Polynomial) -> Polynomial {
        &self * &rhs
    }
}

/// Flat, allocation-free evaluator for a fixed polynomial.
#[derive(Debug, Clone)]
pub struct CompiledPoly {
    nvars: usize,
    max_exp: usize,
    // (coefficient, offset into `exps`)
    coefs: Vec<f64>,
    exps: Vec<u8>,
}

impl CompiledPoly {
    fn new(p: &Polynomial) -> Self {
        let mut coefs = Vec::with_capacity(p.terms.len());
        let mut exps = Vec::with_capacity(p.terms.len() * p.nvars);
        let mut max_exp = 0;
        for (m, &c) in &p.terms {
            coefs.push(c);
            for &e in &m.0 {
                max_exp = max_exp.max(e as usize);
                exps.push(u8::try_from(e).expect("exponent too large for compiled evaluation"));
            }
        }
        CompiledPoly {
            nvars: p.nvars,
            max_exp,
            coefs,
            exps,
        }
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.nvars);
        let n = self.nvars;
        let mut acc = 0.0;
        for (k, &c) in self.coefs.iter().enumerate() {
            let row = &self.exps[k * n..(k + 1) * n];
            let mut t = c;
            for (i, &e) in row.iter().enumerate() {
                match e {
                    0 => {}
                    1 => t *= x[i],
                    2 => t *= x[i] * x[i],
                    _ => t *= x[i].powi(e as i32),
                }
            }
            acc += t;
        }
        acc
    }

    pub fn max_exponent(&self) -> usize {
        self.max_exp
    }
}

#[derive(Serialize, Deserialize)]
struct TermRepr {
    exp: Vec<u32>,
    coef: f64,
}

#[derive(Serialize, Deserialize)]
struct PolyRepr {
    nvars: usize,
    terms: Vec<TermRepr>,
}

impl Serialize for Polynomial {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PolyRepr {
            nvars: self.nvars,
            terms: self
                .terms
                .iter()
                .map(|(m, &c)| TermRepr {
                    exp: m.0.clone(),
                    coef: c,
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Polynomial {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = PolyRepr::deserialize(d)?;
        Polynomial::from_terms(repr.nvars, repr.terms.into_iter().map(|t| (t.exp, t.coef)))
            .map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn x(n: usize, i: usize) -> Polynomial {
        Polynomial::var(n, i)
    }

    #[test]
    fn zero_polynomial_evaluates_to_zero() {
        let p = Polynomial::zero(3);
        assert_eq!(p.evaluate(&[1.0, -2.0, 7.5]).unwrap(), 0.0);
    }

    #[test]
    fn evaluate_hand_example() {
        // x1^2 + 2 x2 at (2, 3): 4 + 6
        let p = &(&x(2, 0) * &x(2, 0)) + &x(2, 1).scale(2.0);
        assert_eq!(p.evaluate(&[2.0, 3.0]).unwrap(), 10.0);
    }

    #[test]
    fn evaluate_rejects_wrong_dimension() {
        let p = x(2, 0);
        assert!(matches!(
            p.evaluate(&[1.0]),
            Err(PolyError::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn commutator_vanishes() {
        let p = &(&x(2, 0) * &x(2, 1)) - &(&x(2, 1) * &x(2, 0));
        assert!(p.is_zero());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let pt = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            assert_eq!(p.evaluate(&pt).unwrap(), 0.0);
        }
    }

    #[test]
    fn gradient_examples() {
        let p = &x(1, 0) * &x(1, 0);
        let g = p.gradient();
        assert_eq!(g[0], x(1, 0).scale(2.0));

        let p = &(&x(2, 0) * &x(2, 0)) * &x(2, 1);
        let g = p.gradient();
        assert_eq!(g[0], (&x(2, 0) * &x(2, 1)).scale(2.0));
        assert_eq!(g[1], &x(2, 0) * &x(2, 0));
    }

    #[test]
    fn difference_of_squares() {
        let one = Polynomial::constant(1, 1.0);
        let p = &(&x(1, 0) + &one) * &(&x(1, 0) - &one);
        let expected = &(&x(1, 0) * &x(1, 0)) - &one;
        assert_eq!(p, expected);
    }

    #[test]
    fn scale_by_zero_stores_nothing() {
        let p = &x(2, 0) + &Polynomial::constant(2, 3.0);
        let z = p.scale(0.0);
        assert!(z.is_zero());
        assert_eq!(z.num_terms(), 0);
    }

    #[test]
    fn coeff_distance_examples() {
        let p = &x(2, 0).scale(2.0) + &(&x(2, 1) * &x(2, 1));
        let q = &x(2, 1) * &x(2, 1);
        assert_eq!(p.coeff_distance_sq(&p).unwrap(), 0.0);
        assert_eq!(x(2, 0).coeff_distance_sq(&Polynomial::zero(2)).unwrap(), 1.0);
        assert_eq!(p.coeff_distance_sq(&q).unwrap(), 4.0);
    }

    #[test]
    fn mismatched_dimensions_error() {
        let a = x(2, 0);
        let b = x(3, 0);
        assert!(a.checked_add(&b).is_err());
        assert!(a.checked_mul(&b).is_err());
        assert!(a.coeff_distance_sq(&b).is_err());
    }

    #[test]
    fn graded_lex_order() {
        let mut ms = [
            Monomial::new(vec![0, 2]),
            Monomial::new(vec![1, 0]),
            Monomial::new(vec![1, 1]),
            Monomial::new(vec![0, 0]),
            Monomial::new(vec![2, 0]),
            Monomial::new(vec![0, 1]),
        ];
        ms.sort();
        let exps: Vec<_> = ms.iter().map(|m| m.exps().to_vec()).collect();
        assert_eq!(
            exps,
            vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![2, 0], vec![1, 1], vec![0, 2]]
        );
    }

    #[test]
    fn json_layout_is_canonical() {
        let p = &(&x(2, 1) * &x(2, 1)) + &x(2, 0).scale(2.0);
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(
            s,
            r#"{"nvars":2,"terms":[{"exp":[1,0],"coef":2.0},{"exp":[0,2],"coef":1.0}]}"#
        );
        let back: Polynomial = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn json_rejects_ragged_exponents() {
        let bad = r#"{"nvars":2,"terms":[{"exp":[1],"coef":1.0}]}"#;
        assert!(serde_json::from_str::<Polynomial>(bad).is_err());
    }

    #[test]
    fn compose_and_scale_vars_agree() {
        let p = &(&x(2, 0) * &x(2, 1)) + &(&x(2, 1) * &x(2, 1)).scale(3.0);
        let d = [2.0, -0.5];
        let subs = vec![x(2, 0).scale(d[0]), x(2, 1).scale(d[1])];
        let a = p.scale_vars(&d);
        let b = p.compose(&subs).unwrap();
        assert!(a.coeff_distance_sq(&b).unwrap() < 1e-24);
    }

    #[test]
    fn compiled_matches_interpreted() {
        let p = &(&(&x(3, 0) * &x(3, 0)) * &x(3, 2)).scale(1.5) + &x(3, 1).scale(-2.0);
        let c = p.compile();
        let pt = [0.3, -1.2, 2.5];
        assert!((c.eval(&pt) - p.evaluate(&pt).unwrap()).abs() < 1e-14);
    }
}
