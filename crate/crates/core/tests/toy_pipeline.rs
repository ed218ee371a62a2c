use std::path::PathBuf;
use std::time::Instant;

use dmpc::certify::{check_terminal_conditions, sample_sublevel, CertifyOptions, SampleBox};
use dmpc::control::CertificatePair;
use dmpc::poly::Polynomial;
use dmpc::scenario::{CertificateArtifact, Scenario};
use dmpc::synth::{riccati_init, SynthesisStatus};

fn config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy2d.toml")
}

#[test]
fn synthesized_toy_certificate_passes_sampling_and_gram_checks() {
    let start = Instant::now();
    let (sc, _) = Scenario::from_file(&config()).unwrap();
    let out = sc.synthesize().unwrap();
    let log = out.log.expect("toy synthesis runs to completion");
    assert_eq!(log.status, SynthesisStatus::Converged);
    assert!(log.final_objective < log.initial_objective);
    assert!(!log.gram_checks.is_empty());
    for g in &log.gram_checks {
        assert!(g.valid, "{} min eig {} residual {}", g.block, g.min_eig, g.residual);
    }
    let report = sc.certify(&out.certificate, 100_000, 1).unwrap();
    assert_eq!(report.sample_count, 100_000);
    for c in &report.conditions {
        assert!(c.passed && c.worst_margin <= report.tolerance, "{} margin {}", c.name, c.worst_margin);
    }
    assert!(start.elapsed().as_secs() < 300);
}

#[test]
fn shipped_fixture_matches_fresh_synthesis() {
    let (sc, _) = Scenario::from_file(&config()).unwrap();
    let fresh = sc.synthesize().unwrap().certificate;
    let text = std::fs::read_to_string(sc.certificate_path().unwrap()).unwrap();
    let stored: CertificateArtifact = serde_json::from_str(&text).unwrap();
    assert_eq!(stored.certificate, fresh);
}

/// With Riccati `V̂ = xᵀPx` and `κ̂ = Kx` on the linear toy, the decrease
/// condition holds with equality: `⟨∇V̂, (A+BK)x⟩ = −xᵀ(Q + KᵀRK)x`.
#[test]
fn riccati_pair_on_small_ellipse_certifies_with_zero_dissipation_margin() {
    let (sc, _) = Scenario::from_file(&config()).unwrap();
    let (a, b) = sc.model.linearize();
    let (p, k) = riccati_init(&a, &b, &sc.stage.q, &sc.stage.r).unwrap();
    let v = Polynomial::quadratic_form(&p);
    let gamma = 0.05;
    let cert = CertificatePair {
        v_hat: v.clone(),
        h_hat: v.scale(1.0 / gamma).axpy(1.0, &Polynomial::constant(2, -1.0)),
        kappa_hat: Some(vec![Polynomial::linear(&[k[(0, 0)], k[(0, 1)]])]),
        a: 0.1,
    };
    let set = sample_sublevel(&cert.h_hat, &SampleBox::symmetric(&[1.0, 1.0]), 100_000, 4).unwrap();
    let opts = CertifyOptions::default();
    let r = check_terminal_conditions(&cert, &sc.model, &sc.constraints, &sc.stage, &set, &opts).unwrap();
    assert!(r.passed, "{r:?}");
    let d = r.condition("dissipation").unwrap();
    assert!(d.worst_margin.abs() <= 1e-9, "dissipation margin {}", d.worst_margin);
}
