//! Generators and oracles shared by the integration suites.
#![allow(dead_code, clippy::needless_range_loop)]

use std::path::PathBuf;

use dmpc::poly::Polynomial;
use dmpc::qp::QpProblem;
use dmpc::sdp::{SdpProblem, SymEntry};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Exhaustive enumeration: solve the equality-constrained problem on every
/// working set of size ≤ m and keep the best feasible point with λ ≥ 0.
pub fn enumerate(p: &QpProblem) -> Option<f64> {
    let m = p.nvars();
    let k = p.ncons();
    let mut best: Option<f64> = None;
    for mask in 0u32..(1 << k) {
        let set: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
        if set.len() > m {
            continue;
        }
        let w = set.len();
        let mut kkt = DMatrix::zeros(m + w, m + w);
        kkt.view_mut((0, 0), (m, m)).copy_from(&p.h);
        let mut rhs = DVector::zeros(m + w);
        rhs.rows_mut(0, m).copy_from(&(-&p.c));
        for (r, &i) in set.iter().enumerate() {
            for j in 0..m {
                kkt[(m + r, j)] = p.a[(i, j)];
                kkt[(j, m + r)] = p.a[(i, j)];
            }
            rhs[m + r] = p.b[i];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let u = sol.rows(0, m).into_owned();
        if p.max_violation(&u) > 1e-9 || sol.rows(m, w).iter().any(|l| *l < -1e-9) {
            continue;
        }
        let f = p.objective(&u);
        best = Some(best.map_or(f, |b: f64| b.min(f)));
    }
    best
}

pub fn random_qp(rng: &mut ChaCha8Rng) -> QpProblem {
    let m = rng.gen_range(1..=5);
    let k = rng.gen_range(0..=12);
    let mm = DMatrix::from_fn(m, m, |_, _| rng.gen_range(-1.0..1.0));
    let h = mm.transpose() * &mm + DMatrix::identity(m, m);
    let c = DVector::from_fn(m, |_, _| rng.gen_range(-3.0..3.0));
    let a = DMatrix::from_fn(k, m, |_, _| rng.gen_range(-1.0..1.0));
    let u0 = DVector::from_fn(m, |_, _| rng.gen_range(-2.0..2.0));
    let b = &a * &u0 + DVector::from_fn(k, |_, _| rng.gen_range(0.0..1.0));
    QpProblem::new(h, c, a, b).unwrap()
}

pub fn random_pd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    m.transpose() * &m + DMatrix::identity(n, n) * 0.5
}

pub fn entries_of(block: usize, m: &DMatrix<f64>) -> Vec<SymEntry> {
    let mut out = Vec::new();
    for i in 0..m.nrows() {
        for j in i..m.ncols() {
            if m[(i, j)] != 0.0 {
                out.push(SymEntry::new(block, i, j, m[(i, j)]));
            }
        }
    }
    out
}

/// Primal and dual strictly feasible by construction: b = 𝒜(X0), C = 𝒜*(y0) + Z0.
pub fn random_sdp(rng: &mut ChaCha8Rng) -> SdpProblem {
    let nb = rng.gen_range(1..=3);
    let blocks: Vec<usize> = (0..nb).map(|_| rng.gen_range(1..=15)).collect();
    let svec: usize = blocks.iter().map(|n| n * (n + 1) / 2).sum();
    let m = rng.gen_range(1..=40usize.min(svec));
    let x0: Vec<DMatrix<f64>> = blocks.iter().map(|&n| random_pd(rng, n)).collect();
    let z0: Vec<DMatrix<f64>> = blocks.iter().map(|&n| random_pd(rng, n)).collect();
    let y0: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut p = SdpProblem::new(blocks.clone());
    let mut cdense: Vec<DMatrix<f64>> = z0.clone();
    for i in 0..m {
        let mut ents = Vec::new();
        let mut bi = 0.0;
        for (k, &n) in blocks.iter().enumerate() {
            let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let a = (&a + a.transpose()) * 0.5;
            bi += a.dot(&x0[k]);
            cdense[k] += &a * y0[i];
            ents.extend(entries_of(k, &a));
        }
        p.add_constraint(ents, vec![], bi);
    }
    for (k, c) in cdense.iter().enumerate() {
        p.c.extend(entries_of(k, c));
    }
    p
}

pub fn min_eig(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

pub fn motzkin() -> Polynomial {
    let x = Polynomial::var(2, 0);
    let y = Polynomial::var(2, 1);
    let x2 = &x * &x;
    let y2 = &y * &y;
    let x4y2 = &(&x2 * &x2) * &y2;
    let x2y4 = &(&x2 * &y2) * &y2;
    let x2y2 = (&x2 * &y2).scale(3.0);
    &(&(&x4y2 + &x2y4) - &x2y2) + &Polynomial::constant(2, 1.0)
}

