//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails. Criteria run sequentially so runtime and
//! per-step timing are not distorted by other tests in this binary.

mod common;

use std::io::Write;
use std::time::Instant;

use common::{configs, enumerate, min_eig, motzkin, random_qp, random_sdp};
use dmpc::control::CertificatePair;
use dmpc::dynamics::ControlAffineModel;
use dmpc::poly::Polynomial;
use dmpc::qp::solve_qp;
use dmpc::scenario::Scenario;
use dmpc::sdp::{solve_sdp, SdpProblem, SdpStatus, SymEntry};
use dmpc::sim::{integral_stage_cost, rk4_step, ControllerKind, Termination, TrajectoryLog};
use dmpc::sos::{gram_transcribe, monomial_basis};
use dmpc::synth::SynthesisStatus;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Written straight to stderr so the lines show up without `--nocapture`.
fn report(id: usize, name: &str, pass: bool, detail: &str) {
    let line = format!("criterion {id:>2} {} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn qp_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_gap = 0.0f64;
    let mut worst_viol = 0.0f64;
    for n in 0..1000 {
        let p = random_qp(&mut rng);
        let s = solve_qp(&p).map_err(|e| format!("problem {n}: {e}"))?;
        let oracle = enumerate(&p).ok_or(format!("problem {n}: oracle empty"))?;
        worst_gap = worst_gap.max((s.objective - oracle).abs() / (1.0 + oracle.abs()));
        worst_viol = worst_viol.max(p.max_violation(&s.u_star));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst_gap <= 1e-8, || format!("objective gap {worst_gap:.2e}"))?;
    ensure(worst_viol <= 1e-9, || format!("violation {worst_viol:.2e}"))?;
    ensure(secs <= 10.0, || format!("{secs:.1} s"))?;
    Ok(format!("1000 problems, worst gap {worst_gap:.1e}, worst violation {worst_viol:.1e}, {secs:.2} s"))
}

fn sdp_suite() -> Outcome {
    let start = Instant::now();
    // min ⟨C, X⟩ s.t. tr X = 1 equals λ_min(C)
    let c = DMatrix::from_row_slice(3, 3, &[2.0, -1.0, 0.5, -1.0, 3.0, 0.0, 0.5, 0.0, 1.0]);
    let lam = min_eig(&c);
    let mut p = SdpProblem::new(vec![3]);
    for i in 0..3 {
        for j in i..3 {
            if c[(i, j)] != 0.0 {
                p.c.push(SymEntry::new(0, i, j, c[(i, j)]));
            }
        }
    }
    p.add_constraint((0..3).map(|i| SymEntry::new(0, i, i, 1.0)).collect(), vec![], 1.0);
    // min X₁₁ + X₂₂ s.t. X₁₂ = 1: optimum 2 at X = [[1, 1], [1, 1]]; an
    // off-diagonal entry covers both positions, hence the 1/2
    let mut q = SdpProblem::new(vec![2]);
    q.c.push(SymEntry::new(0, 0, 0, 1.0));
    q.c.push(SymEntry::new(0, 1, 1, 1.0));
    q.add_constraint(vec![SymEntry::new(0, 0, 1, 0.5)], vec![], 1.0);
    for (prob, want) in [(p, lam), (q, 2.0)] {
        let s = solve_sdp(&prob).map_err(|e| e.to_string())?;
        ensure(s.status == SdpStatus::Optimal, || format!("analytic case {:?}", s.status))?;
        ensure(s.duality_gap <= 1e-7, || format!("analytic gap {:.2e}", s.duality_gap))?;
        ensure((s.primal_obj - want).abs() <= 1e-7, || format!("objective {} vs {want}", s.primal_obj))?;
    }
    let m = solve_sdp(&gram_transcribe(&motzkin(), &monomial_basis(2, 3)).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    ensure(m.status == SdpStatus::PrimalInfeasible, || format!("Motzkin reported {:?}", m.status))?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0;
    for n in 0..200 {
        let s = solve_sdp(&random_sdp(&mut rng)).map_err(|e| e.to_string())?;
        ensure(s.status == SdpStatus::Optimal, || format!("random {n}: {:?}", s.status))?;
        worst = worst.max(s.iterations);
    }
    ensure(worst <= 50, || format!("{worst} iterations"))?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs <= 60.0, || format!("{secs:.1} s"))?;
    Ok(format!("analytic cases exact, Motzkin infeasible, 200 random in ≤ {worst} iterations, {secs:.2} s"))
}

fn toy_pipeline() -> Outcome {
    let start = Instant::now();
    let (sc, _) = Scenario::from_file(&configs().join("toy2d.toml")).map_err(|e| e.to_string())?;
    let out = sc.synthesize().map_err(|e| e.to_string())?;
    let log = out.log.ok_or("synthesis stopped early")?;
    ensure(log.status == SynthesisStatus::Converged, || format!("{:?}", log.status))?;
    let bad: Vec<_> = log.gram_checks.iter().filter(|g| !g.valid).map(|g| g.block.clone()).collect();
    ensure(bad.is_empty() && !log.gram_checks.is_empty(), || format!("Gram blocks failing: {bad:?}"))?;
    let rep = sc.certify(&out.certificate, 100_000, 1).map_err(|e| e.to_string())?;
    ensure(rep.sample_count == 100_000, || "sample count".into())?;
    let worst = rep.max_margin();
    ensure(rep.passed && worst <= rep.tolerance, || format!("worst margin {worst:.2e}"))?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs <= 300.0, || format!("{secs:.1} s"))?;
    Ok(format!(
        "{} Gram blocks valid at 1e-6, worst margin {worst:.2e} over 1e5 samples, {secs:.2} s",
        log.gram_checks.len()
    ))
}

struct StudyRun {
    slew: u32,
    dmpc: TrajectoryLog,
    dmpc_secs: f64,
    poly: TrajectoryLog,
    cost_dmpc: f64,
    cost_poly: f64,
    scenario: Scenario,
}

fn study1_runs() -> Result<Vec<StudyRun>, String> {
    let mut out = Vec::new();
    for slew in [75u32, 90, 110] {
        let (sc, _) = Scenario::from_file(&configs().join(format!("study1_slew{slew}.toml"))).map_err(|e| e.to_string())?;
        let cert = sc.load_certificate().map_err(|e| e.to_string())?;
        let t = Instant::now();
        let dmpc = sc.simulate(&cert, ControllerKind::Dmpc).map_err(|e| e.to_string())?;
        let dmpc_secs = t.elapsed().as_secs_f64();
        let poly = sc.simulate(&cert, ControllerKind::Poly).map_err(|e| e.to_string())?;
        out.push(StudyRun {
            slew,
            cost_dmpc: integral_stage_cost(&dmpc, &sc.stage),
            cost_poly: integral_stage_cost(&poly, &sc.stage),
            dmpc,
            dmpc_secs,
            poly,
            scenario: sc,
        });
    }
    Ok(out)
}

fn closed_loop_properties(runs: &[StudyRun]) -> Outcome {
    let mut parts = Vec::new();
    for r in runs {
        let log = &r.dmpc;
        let tag = format!("{}°", r.slew);
        ensure(log.status == Termination::Converged, || format!("{tag}: {:?} {:?}", log.status, log.message))?;
        let t_conv = log.convergence_time.unwrap_or(f64::INFINITY);
        ensure(t_conv < 5000.0, || format!("{tag}: converged at {t_conv}"))?;
        let k_conv = log.convergence_index();
        for k in 1..=k_conv.min(log.len() - 1) {
            ensure(log.v_hat[k] < log.v_hat[k - 1], || {
                format!("{tag}: V̂ not decreasing at t = {}", log.times[k])
            })?;
        }
        ensure(log.max_h() <= 1e-9, || format!("{tag}: max ĥ {:.2e}", log.max_h()))?;
        let bounds = &r.scenario.state_bounds;
        for (x, u) in log.states.iter().zip(&log.inputs) {
            ensure(u.iter().all(|v| v.abs() <= 1.2 + 1e-9), || format!("{tag}: torque {u:?}"))?;
            ensure((0..3).all(|i| x[i].abs() <= bounds[i] * (1.0 + 1e-9)), || format!("{tag}: rate {x:?}"))?;
        }
        ensure(r.dmpc_secs <= 120.0, || format!("{tag}: {:.1} s", r.dmpc_secs))?;
        parts.push(format!("{tag} converged at {t_conv:.1} s ({:.2} s wall)", r.dmpc_secs));
    }
    Ok(parts.join(", "))
}

fn cost_ordering(runs: &[StudyRun]) -> Outcome {
    let mut parts = Vec::new();
    for r in runs {
        ensure(r.cost_dmpc < r.cost_poly, || {
            format!("{}°: ∂MPC {:.3} vs κ̂ {:.3}", r.slew, r.cost_dmpc, r.cost_poly)
        })?;
        parts.push(format!(
            "{}°: {:.2} < {:.2} (κ̂ {:?})",
            r.slew, r.cost_dmpc, r.cost_poly, r.poly.status
        ));
    }
    Ok(parts.join(", "))
}

struct Campaign2 {
    logs: Vec<TrajectoryLog>,
    safety_rate: f64,
    convergence_rate: f64,
    secs: f64,
}

fn study2_campaign() -> Result<Campaign2, String> {
    let (sc, _) = Scenario::from_file(&configs().join("study2_keepout.toml")).map_err(|e| e.to_string())?;
    let cert = sc.load_certificate().map_err(|e| e.to_string())?;
    let t = Instant::now();
    let res = sc
        .monte_carlo(&cert, ControllerKind::Dmpc, 100, sc.config.seed, 8)
        .map_err(|e| e.to_string())?;
    Ok(Campaign2 {
        safety_rate: res.summary.safety_rate,
        convergence_rate: res.summary.convergence_rate,
        logs: res.logs,
        secs: t.elapsed().as_secs_f64(),
    })
}

fn keep_out_campaign(c: &Campaign2) -> Outcome {
    ensure(c.logs.len() == 100, || format!("{} runs", c.logs.len()))?;
    for (i, l) in c.logs.iter().enumerate() {
        ensure(l.max_h() <= 1e-9 && l.max_state_constraint <= 1e-9, || {
            format!("run {i}: max ĥ {:.2e}, max constraint {:.2e}", l.max_h(), l.max_state_constraint)
        })?;
        let h0 = l.h_hat[0];
        ensure(h0 <= 0.0 && l.states[0][..3].iter().all(|w| *w == 0.0), || format!("run {i}: bad start"))?;
    }
    ensure(c.safety_rate == 1.0, || format!("safety rate {}", c.safety_rate))?;
    ensure(c.convergence_rate >= 0.95, || format!("convergence rate {}", c.convergence_rate))?;
    ensure(c.secs <= 1800.0, || format!("{:.0} s", c.secs))?;
    Ok(format!(
        "safety 100%, convergence {:.0}%, {:.1} s with 8 workers",
        100.0 * c.convergence_rate,
        c.secs
    ))
}

fn dissipation_trace(runs: &[StudyRun], c: &Campaign2) -> Outcome {
    let worst = runs
        .iter()
        .map(|r| &r.dmpc)
        .chain(&c.logs)
        .map(TrajectoryLog::max_tau)
        .fold(f64::NEG_INFINITY, f64::max);
    ensure(worst <= 1e-6, || format!("max τ {worst:.3e}"))?;
    Ok(format!("max τ {worst:.3e} over 3 slews and 100 campaign runs"))
}

fn step_time(runs: &[StudyRun], c: &Campaign2) -> Outcome {
    let walls: Vec<f64> = runs.iter().map(|r| &r.dmpc).chain(&c.logs).flat_map(|l| l.wall_ms.iter().copied()).collect();
    let mean = walls.iter().sum::<f64>() / walls.len() as f64;
    let worst = walls.iter().copied().fold(0.0, f64::max);
    ensure(mean <= 1.0, || format!("mean {mean:.4} ms"))?;
    Ok(format!("mean {mean:.4} ms, worst {worst:.3} ms over {} steps", walls.len()))
}

fn rk4_order() -> Outcome {
    let x = |i| Polynomial::var(2, i);
    let model = ControlAffineModel::new(
        vec![x(1), &x(0).scale(-1.0) - &x(1).scale(0.2)],
        vec![vec![Polynomial::zero(2)], vec![Polynomial::constant(2, 1.0)]],
    )
    .map_err(|e| e.to_string())?;
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.2]);
    let cm = model.compile();
    let horizon = 10.0;
    let exact = (a * horizon).exp() * DVector::from_row_slice(&[1.0, 0.0]);
    let err = |h: f64| -> Result<f64, String> {
        let mut s = vec![1.0, 0.0];
        for _ in 0..(horizon / h).round() as usize {
            s = rk4_step(&cm, &s, &[0.0], h).map_err(|e| e.to_string())?;
        }
        Ok(((s[0] - exact[0]).powi(2) + (s[1] - exact[1]).powi(2)).sqrt())
    };
    let errs = [err(0.2)?, err(0.1)?, err(0.05)?, err(0.025)?];
    let ratios: Vec<f64> = errs.windows(2).map(|w| w[0] / w[1]).collect();
    ensure(ratios.iter().all(|r| (12.0..=20.0).contains(r)), || format!("ratios {ratios:?}"))?;
    Ok(format!("error ratios {:.2}, {:.2}, {:.2}", ratios[0], ratios[1], ratios[2]))
}

fn cert_fingerprint(c: &CertificatePair) -> String {
    serde_json::to_string(c).expect("certificate JSON")
}

fn determinism(runs: &[StudyRun]) -> Outcome {
    // synthesis, certification, single runs and campaigns replayed
    let (toy, _) = Scenario::from_file(&configs().join("toy2d.toml")).map_err(|e| e.to_string())?;
    let s1 = toy.synthesize().map_err(|e| e.to_string())?;
    let s2 = toy.synthesize().map_err(|e| e.to_string())?;
    ensure(cert_fingerprint(&s1.certificate) == cert_fingerprint(&s2.certificate), || "toy synthesis differs".into())?;
    let r1 = toy.certify(&s1.certificate, 20_000, 3).map_err(|e| e.to_string())?;
    let r2 = toy.certify(&s2.certificate, 20_000, 3).map_err(|e| e.to_string())?;
    ensure(r1 == r2, || "certification reports differ".into())?;
    let m1 = toy.monte_carlo(&s1.certificate, ControllerKind::Dmpc, 16, 4, 4).map_err(|e| e.to_string())?;
    let m2 = toy.monte_carlo(&s1.certificate, ControllerKind::Dmpc, 16, 4, 3).map_err(|e| e.to_string())?;
    ensure(m1.summary.runs == m2.summary.runs, || "campaign summaries differ".into())?;
    ensure(m1.logs.iter().zip(&m2.logs).all(|(a, b)| a.to_csv() == b.to_csv()), || "campaign CSVs differ".into())?;
    let r = &runs[0];
    let cert = r.scenario.load_certificate().map_err(|e| e.to_string())?;
    let again = r.scenario.simulate(&cert, ControllerKind::Dmpc).map_err(|e| e.to_string())?;
    ensure(again.to_csv() == r.dmpc.to_csv(), || "study-1 trajectory differs".into())?;
    Ok("toy synthesis, certification, campaign and a study-1 trajectory replay identically".into())
}

#[test]
fn acceptance() {
    let mut failed = Vec::new();
    let mut record = |id: usize, name: &str, o: Outcome| {
        match &o {
            Ok(d) => report(id, name, true, d),
            Err(d) => {
                report(id, name, false, d);
                failed.push(id);
            }
        }
    };
    record(1, "QP oracle suite", qp_suite());
    record(2, "SDP suite", sdp_suite());
    record(3, "toy certificate pipeline", toy_pipeline());
    let runs = study1_runs();
    let campaign = study2_campaign();
    match &runs {
        Ok(runs) => {
            record(4, "study-1 closed-loop properties", closed_loop_properties(runs));
            record(5, "integral cost ordering", cost_ordering(runs));
        }
        Err(e) => {
            record(4, "study-1 closed-loop properties", Err(e.clone()));
            record(5, "integral cost ordering", Err(e.clone()));
        }
    }
    match (&runs, &campaign) {
        (Ok(r), Ok(c)) => {
            record(6, "dissipation trace", dissipation_trace(r, c));
            record(7, "keep-out campaign", keep_out_campaign(c));
            record(8, "per-step evaluation time", step_time(r, c));
        }
        (Err(e), _) | (_, Err(e)) => {
            for (id, name) in [(6, "dissipation trace"), (7, "keep-out campaign"), (8, "per-step evaluation time")] {
                record(id, name, Err(e.clone()));
            }
        }
    }
    record(9, "RK4 order", rk4_order());
    match &runs {
        Ok(r) => record(10, "determinism", determinism(r)),
        Err(e) => record(10, "determinism", Err(e.clone())),
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
