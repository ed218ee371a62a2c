use std::path::{Path, PathBuf};
use std::process::Command;

use dmpc::sdp::SdpProblem;
use serde_json::Value;

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn dmpc(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_dmpc")).args(args).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

fn run_in(sub: &str, config: &Path, out: &Path, extra: &[&str]) -> (i32, String) {
    let mut args = vec![sub, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    dmpc(&args)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Copy of the toy config with `edit` applied, written next to a copy of
/// the toy certificate so the relative certificate path still resolves.
fn toy_variant(dir: &Path, edit: impl Fn(String) -> String) -> PathBuf {
    let text = std::fs::read_to_string(configs().join("toy2d.toml")).unwrap();
    std::fs::create_dir_all(dir.join("fixtures")).unwrap();
    std::fs::copy(
        configs().join("fixtures/toy2d_certificate.json"),
        dir.join("fixtures/toy2d_certificate.json"),
    )
    .unwrap();
    let p = dir.join("toy.toml");
    std::fs::write(&p, edit(text)).unwrap();
    p
}

#[test]
fn certify_shipped_toy_fixture_exits_zero_with_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, text) = run_in("certify", &configs().join("toy2d.toml"), tmp.path(), &["--samples", "20000"]);
    assert_eq!(code, 0, "{text}");
    let v = json(&tmp.path().join("certification.json"));
    assert_eq!(v["seed"], 7);
    assert_eq!(v["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(v["report"]["passed"], true);
    for c in v["report"]["conditions"].as_array().unwrap() {
        assert!(c["worst_margin"].as_f64().unwrap() <= 1e-7);
    }
}

#[test]
fn failing_certificate_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_variant(tmp.path(), |t| t);
    // enlarge the safe set far beyond the state box
    let cert_path = tmp.path().join("fixtures/toy2d_certificate.json");
    let mut v = json(&cert_path);
    for term in v["certificate"]["h_hat"]["terms"].as_array_mut().unwrap() {
        let e: Vec<u64> = term["exp"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect();
        if e.iter().sum::<u64>() > 0 {
            term["coef"] = Value::from(term["coef"].as_f64().unwrap() * 0.01);
        }
    }
    std::fs::write(&cert_path, v.to_string()).unwrap();
    let (code, text) = run_in("certify", &cfg, &tmp.path().join("out"), &["--samples", "5000"]);
    assert_eq!(code, 2, "{text}");
}

#[test]
fn config_errors_exit_four() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_variant(tmp.path(), |t| t.replace("input_bound", "input_bund"));
    let (code, text) = run_in("certify", &cfg, &tmp.path().join("out"), &[]);
    assert_eq!(code, 4);
    assert!(text.contains("input_bund"), "{text}");
    let (code, _) = run_in("certify", &tmp.path().join("missing.toml"), &tmp.path().join("out"), &[]);
    assert_eq!(code, 4);
    let (code, _) = dmpc(&["certify", "--bogus"]);
    assert_eq!(code, 4);
    let cfg = toy_variant(tmp.path(), |t| t.replace("dt_s = 0.1", "dt_s = -0.1"));
    let (code, text) = run_in("simulate", &cfg, &tmp.path().join("out"), &[]);
    assert_eq!(code, 4);
    assert!(text.contains("simulation.dt_s"), "{text}");
}

#[test]
fn unsafe_start_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_variant(tmp.path(), |t| t.replace("x0 = [0.3, 0.0]", "x0 = [0.99, 0.99]"));
    let (code, text) = run_in("simulate", &cfg, &tmp.path().join("out"), &[]);
    assert_eq!(code, 3, "{text}");
}

#[test]
fn simulate_from_origin_converges_at_start() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_variant(tmp.path(), |t| t.replace("x0 = [0.3, 0.0]", "x0 = [0.0, 0.0]"));
    let out = tmp.path().join("out");
    let (code, text) = run_in("simulate", &cfg, &out, &[]);
    assert_eq!(code, 0, "{text}");
    let v = json(&out.join("summary.json"));
    assert_eq!(v["summary"]["status"], "converged");
    assert_eq!(v["summary"]["convergence_time"], 0.0);
    assert_eq!(v["summary"]["integral_cost"], 0.0);
}

#[test]
fn simulate_writes_documented_csv_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, text) = run_in("simulate", &configs().join("toy2d.toml"), tmp.path(), &["--substeps", "4"]);
    assert_eq!(code, 0, "{text}");
    let csv = std::fs::read_to_string(tmp.path().join("trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash="));
    assert_eq!(lines.next().unwrap(), "t,x1,x2,u1,V_hat,h_hat,tau,L,cum_cost");
}

/// Everything except wall-time fields must be byte-identical across runs.
fn strip_wall_time(mut v: Value) -> Value {
    if let Some(m) = v.as_object_mut() {
        m.remove("timing");
        m.remove("wall_time_s");
        for (_, child) in m.iter_mut() {
            *child = strip_wall_time(child.take());
        }
    }
    v
}

#[test]
fn repeated_runs_are_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = configs().join("toy2d.toml");
    for dir in [a.path(), b.path()] {
        assert_eq!(run_in("montecarlo", &cfg, dir, &["--samples", "12", "--workers", "3", "--seed", "9"]).0, 0);
        assert_eq!(run_in("simulate", &cfg, dir, &["--seed", "9"]).0, 0);
    }
    let read = |d: &Path, f: &str| std::fs::read_to_string(d.join(f)).unwrap();
    assert_eq!(read(a.path(), "trajectory.csv"), read(b.path(), "trajectory.csv"));
    for i in 0..12 {
        let f = format!("runs/run_{i:03}.csv");
        assert_eq!(read(a.path(), &f), read(b.path(), &f));
    }
    let ca = strip_wall_time(json(&a.path().join("campaign.json")));
    let cb = strip_wall_time(json(&b.path().join("campaign.json")));
    assert_eq!(ca, cb);
    assert_eq!(ca["seed"], 9);
    assert_eq!(ca["campaign"]["safety_rate"], 1.0);
}

#[test]
fn transcribe_dumps_a_solvable_sdp() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("toy2d.toml");
    let (code, text) = run_in("transcribe", &cfg, tmp.path(), &[]);
    assert_eq!(code, 0);
    assert!(text.lines().any(|l| l == "dissipation"), "{text}");
    let (code, _) = run_in("transcribe", &cfg, tmp.path(), &["--block", "dissipation"]);
    assert_eq!(code, 0);
    let v = json(&tmp.path().join("block_dissipation.json"));
    assert!(v["config_hash"].is_string());
    let sdp: SdpProblem = serde_json::from_value(v["sdp"].clone()).unwrap();
    let sol = dmpc::sdp::solve_sdp(&sdp).unwrap();
    assert_eq!(sol.status, dmpc::sdp::SdpStatus::Optimal);
    let (code, _) = run_in("transcribe", &cfg, tmp.path(), &["--block", "nonsense"]);
    assert_eq!(code, 4);
}
