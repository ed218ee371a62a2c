//! Sampling-based verification of a certificate pair: seeded sublevel-set
//! sampling with boundary enrichment and worst-margin reports for the
//! terminal conditions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{CertificatePair, StageCost};
use crate::dynamics::{ConstraintSet, ControlAffineModel};
use crate::poly::{CompiledPoly, Polynomial};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CertifyError {
    #[error("sampling box does not enclose the safe set: ĥ({point:?}) = {value:.3e} ≤ 0 on the boundary")]
    BoxTooSmall { point: Vec<f64>, value: f64 },
    #[error("acceptance rate {rate:.2e} below 1e-4: box too loose or safe set empty")]
    BoxTooLoose { rate: f64 },
    #[error("certificate has no feedback κ̂")]
    MissingFeedback,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

pub const DEFAULT_SAMPLES: usize = 100_000;
pub const DEFAULT_TOLERANCE: f64 = 1e-7;
const MIN_ACCEPTANCE: f64 = 1e-4;
const BAND: f64 = 0.02;

/// Axis-aligned sampling box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl SampleBox {
    pub fn symmetric(half_widths: &[f64]) -> Self {
        SampleBox {
            lower: half_widths.iter().map(|h| -h).collect(),
            upper: half_widths.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| l + (u - l) * rng.gen::<f64>())
            .collect()
    }
}

/// Tightens `outer` around `{ĥ ≤ 0}` by scanning seeded rays from the origin
/// and padding the largest extent per coordinate by 10%. The result still
/// has to pass the enclosure probe inside [`sample_sublevel`].
pub fn fit_sample_box(h_hat: &Polynomial, outer: &SampleBox, seed: u64) -> SampleBox {
    let h = h_hat.compile();
    let n = outer.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x2545_f491_4f6c_dd1d);
    let mut reach = vec![0.0f64; n];
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for i in 0..n {
        for sgn in [1.0, -1.0] {
            let mut d = vec![0.0; n];
            d[i] = sgn;
            dirs.push(d);
        }
    }
    for _ in 0..4000 {
        let d: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        dirs.push(d);
    }
    for d in dirs {
        // largest t keeping t·d inside the outer box
        let tmax = (0..n)
            .filter(|&i| d[i] != 0.0)
            .map(|i| if d[i] > 0.0 { outer.upper[i] / d[i] } else { outer.lower[i] / d[i] })
            .fold(f64::INFINITY, f64::min);
        if !tmax.is_finite() || tmax <= 0.0 {
            continue;
        }
        let at = |t: f64| -> Vec<f64> { d.iter().map(|v| v * t).collect() };
        let steps = 64;
        let mut last_in = None;
        for k in 1..=steps {
            let t = tmax * k as f64 / steps as f64;
            if h.eval(&at(t)) <= 0.0 {
                last_in = Some(k);
            }
        }
        let t_in = match last_in {
            Some(k) if k == steps => tmax,
            Some(k) => {
                let (mut lo, mut hi) = (tmax * k as f64 / steps as f64, tmax * (k + 1) as f64 / steps as f64);
                for _ in 0..40 {
                    let mid = 0.5 * (lo + hi);
                    if h.eval(&at(mid)) <= 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                hi
            }
            None => tmax / steps as f64,
        };
        for i in 0..n {
            reach[i] = reach[i].max((d[i] * t_in).abs());
        }
    }
    SampleBox {
        lower: (0..n).map(|i| (-1.1 * reach[i]).max(outer.lower[i])).collect(),
        upper: (0..n).map(|i| (1.1 * reach[i]).min(outer.upper[i])).collect(),
    }
}

/// Seeded sample set with the band membership of each state.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub states: Vec<Vec<f64>>,
    pub boundary_count: usize,
    pub seed: u64,
}

fn probe_box(h: &CompiledPoly, bx: &SampleBox, seed: u64) -> Result<(), CertifyError> {
    let n = bx.dim();
    let check = |x: Vec<f64>| {
        let v = h.eval(&x);
        if v <= 0.0 {
            Err(CertifyError::BoxTooSmall { point: x, value: v })
        } else {
            Ok(())
        }
    };
    for i in 0..n {
        for b in [bx.lower[i], bx.upper[i]] {
            let mut x = vec![0.0; n];
            x[i] = b;
            check(x)?;
        }
    }
    // random points on the faces
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    for k in 0..2000 * n {
        let mut x = bx.draw(&mut rng);
        let i = k % n;
        x[i] = if rng.gen::<bool>() { bx.upper[i] } else { bx.lower[i] };
        check(x)?;
    }
    Ok(())
}

/// Draws `n` states with `ĥ ≤ 0` by seeded rejection sampling from `bx`.
/// Every tenth state is pushed along its ray from the origin into the band
/// `−0.02·range ≤ ĥ ≤ 0`; sample sets are prefix-stable in `n`.
pub fn sample_sublevel(h_hat: &Polynomial, bx: &SampleBox, n: usize, seed: u64) -> Result<SampleSet, CertifyError> {
    if h_hat.nvars() != bx.dim() {
        return Err(CertifyError::Dimension("box and ĥ dimensions differ".into()));
    }
    if bx.lower.iter().zip(&bx.upper).any(|(l, u)| !(l < u)) {
        return Err(CertifyError::Dimension("empty sampling box".into()));
    }
    let h = h_hat.compile();
    probe_box(&h, bx, seed)?;
    let dim = bx.dim();
    let h0 = h.eval(&vec![0.0; dim]);
    // pilot for the value range of ĥ on the safe set
    let mut pilot = ChaCha8Rng::seed_from_u64(seed ^ 0x5851_f42d_4c95_7f2d);
    let mut hmin = h0.min(0.0);
    for _ in 0..10_000 {
        let v = h.eval(&bx.draw(&mut pilot));
        if v <= 0.0 {
            hmin = hmin.min(v);
        }
    }
    let range = -hmin;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = Vec::with_capacity(n);
    let mut draws: u64 = 0;
    let mut accepted: u64 = 0;
    let mut boundary_count = 0;
    while states.len() < n {
        let x = bx.draw(&mut rng);
        draws += 1;
        let v = h.eval(&x);
        if v > 0.0 {
            if draws >= 1_000_000 && (accepted as f64) < MIN_ACCEPTANCE * draws as f64 {
                return Err(CertifyError::BoxTooLoose {
                    rate: accepted as f64 / draws as f64,
                });
            }
            continue;
        }
        accepted += 1;
        if states.len() % 10 == 9 && range > 0.0 {
            if let Some(xb) = push_to_band(&h, &x, range) {
                states.push(xb);
                boundary_count += 1;
                continue;
            }
        }
        if v >= -BAND * range {
            boundary_count += 1;
        }
        states.push(x);
    }
    Ok(SampleSet {
        states,
        boundary_count,
        seed,
    })
}

/// Moves `x` outward along its ray until `−0.02·range ≤ ĥ ≤ 0`.
fn push_to_band(h: &CompiledPoly, x: &[f64], range: f64) -> Option<Vec<f64>> {
    let at = |s: f64| -> Vec<f64> { x.iter().map(|v| v * s).collect() };
    let mut lo = 1.0;
    let mut hi = 2.0;
    let mut steps = 0;
    while h.eval(&at(hi)) <= 0.0 {
        lo = hi;
        hi *= 2.0;
        steps += 1;
        if steps > 60 {
            return None;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let v = h.eval(&at(mid));
        if v > 0.0 {
            hi = mid;
        } else {
            lo = mid;
            if v >= -BAND * range * 0.5 {
                return Some(at(mid));
            }
        }
    }
    let v = h.eval(&at(lo));
    (v <= 0.0 && v >= -BAND * range).then(|| at(lo))
}

/// Worst value of one condition over the sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub name: String,
    pub worst_margin: f64,
    pub witness: Vec<f64>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    pub conditions: Vec<ConditionReport>,
    pub sample_count: usize,
    pub boundary_samples: usize,
    pub seed: u64,
    pub tolerance: f64,
    /// `"sampling"`: necessary-condition check only.
    pub assurance: String,
    pub passed: bool,
}

impl CertificationReport {
    pub fn condition(&self, name: &str) -> Option<&ConditionReport> {
        self.conditions.iter().find(|c| c.name == name)
    }

    pub fn max_margin(&self) -> f64 {
        self.conditions.iter().map(|c| c.worst_margin).fold(f64::NEG_INFINITY, f64::max)
    }
}

pub const CONDITION_NAMES: [&str; 5] = ["state_constraints", "barrier", "input", "dissipation", "positivity"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertifyOptions {
    pub epsilon: f64,
    pub tolerance: f64,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        CertifyOptions {
            epsilon: 1e-6,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

struct Evaluator {
    g: Vec<CompiledPoly>,
    hu: Vec<Vec<f64>>,
    h: CompiledPoly,
    v: CompiledPoly,
    grad_h: Vec<CompiledPoly>,
    grad_v: Vec<CompiledPoly>,
    kappa: Vec<CompiledPoly>,
    model: crate::dynamics::CompiledModel,
    stage: StageCost,
    a: f64,
    eps: f64,
}

impl Evaluator {
    fn margins(&self, x: &[f64]) -> [f64; 5] {
        let u: Vec<f64> = self.kappa.iter().map(|k| k.eval(x)).collect();
        let f = self.model.eval(x, &u);
        let dot = |g: &[CompiledPoly]| -> f64 { g.iter().zip(&f).map(|(gi, fi)| gi.eval(x) * fi).sum() };
        let state = self.g.iter().map(|g| g.eval(x)).fold(f64::NEG_INFINITY, f64::max);
        let barrier = dot(&self.grad_h) - self.a * (-self.h.eval(x));
        let input = self
            .hu
            .iter()
            .map(|row| row.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>() - 1.0)
            .fold(f64::NEG_INFINITY, f64::max);
        let tau = dot(&self.grad_v) + self.stage.eval(x, &u);
        let xx: f64 = x.iter().map(|v| v * v).sum();
        let pos = self.eps * xx - self.v.eval(x);
        [state, barrier, input, tau, pos]
    }
}

type Worst = [(f64, usize); 5];

fn merge(a: Worst, b: Worst) -> Worst {
    let mut out = a;
    for k in 0..5 {
        // ties resolved by the smaller sample index so the reduction is order-independent
        if b[k].0 > out[k].0 || (b[k].0 == out[k].0 && b[k].1 < out[k].1) {
            out[k] = b[k];
        }
    }
    out
}

/// Evaluates conditions (i)–(v) over `samples` and reports worst margins.
pub fn check_terminal_conditions(
    cert: &CertificatePair,
    model: &ControlAffineModel,
    constraints: &ConstraintSet,
    stage: &StageCost,
    samples: &SampleSet,
    opts: &CertifyOptions,
) -> Result<CertificationReport, CertifyError> {
    let kappa = cert.kappa_hat.as_ref().ok_or(CertifyError::MissingFeedback)?;
    let n = model.nx();
    if cert.nx() != n || kappa.len() != model.nu() || constraints.nu() != model.nu() {
        return Err(CertifyError::Dimension("certificate, model and constraints disagree".into()));
    }
    if samples.states.iter().any(|x| x.len() != n) {
        return Err(CertifyError::Dimension("sample dimension".into()));
    }
    let ev = Evaluator {
        g: constraints.state_polys.iter().map(Polynomial::compile).collect(),
        hu: constraints.input_hu.clone(),
        h: cert.h_hat.compile(),
        v: cert.v_hat.compile(),
        grad_h: cert.h_hat.gradient().iter().map(Polynomial::compile).collect(),
        grad_v: cert.v_hat.gradient().iter().map(Polynomial::compile).collect(),
        kappa: kappa.iter().map(Polynomial::compile).collect(),
        model: model.compile(),
        stage: stage.clone(),
        a: cert.a,
        eps: opts.epsilon,
    };
    let init: Worst = [(f64::NEG_INFINITY, usize::MAX); 5];
    let worst = samples
        .states
        .par_iter()
        .enumerate()
        .fold(
            || init,
            |acc, (i, x)| {
                let m = ev.margins(x);
                let mut w = init;
                for k in 0..5 {
                    w[k] = (m[k], i);
                }
                merge(acc, w)
            },
        )
        .reduce(|| init, merge);
    let conditions: Vec<ConditionReport> = CONDITION_NAMES
        .iter()
        .zip(worst.iter())
        .map(|(name, (m, i))| ConditionReport {
            name: name.to_string(),
            worst_margin: *m,
            witness: samples.states.get(*i).cloned().unwrap_or_default(),
            passed: *m <= opts.tolerance,
        })
        .collect();
    let passed = !samples.states.is_empty() && conditions.iter().all(|c| c.passed);
    Ok(CertificationReport {
        conditions,
        sample_count: samples.states.len(),
        boundary_samples: samples.boundary_count,
        seed: samples.seed,
        tolerance: opts.tolerance,
        assurance: "sampling".into(),
        passed,
    })
}
