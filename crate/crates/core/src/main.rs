//! Command-line driver: synthesize, certify, simulate, montecarlo and
//! transcribe scenarios described by TOML configs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use dmpc::scenario::{Scenario, ScenarioError};
use dmpc::sim::{RunSummary, Termination, Timing};

const EXIT_RUNTIME: u8 = 1;
const EXIT_CERTIFY: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_CONFIG: u8 = 4;

#[derive(Parser)]
#[command(name = "dmpc", version, about = "Certificate synthesis, certification and simulation for infinitesimal-horizon MPC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a certificate pair and write it with its log.
    Synthesize {
        #[command(flatten)]
        common: Common,
    },
    /// Check the terminal conditions of the configured certificate by sampling.
    Certify {
        #[command(flatten)]
        common: Common,
        /// Sample count, overriding `certify.samples`
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Simulate one closed-loop run from the configured initial state.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// RK4 substeps per control step
        #[arg(long)]
        substeps: Option<usize>,
    },
    /// Seeded campaign from initial states inside the safe set.
    Montecarlo {
        #[command(flatten)]
        common: Common,
        /// Number of runs, overriding `montecarlo.samples`
        #[arg(long)]
        samples: Option<usize>,
        /// Worker threads; results do not depend on this
        #[arg(long)]
        workers: Option<usize>,
        /// RK4 substeps per control step
        #[arg(long)]
        substeps: Option<usize>,
    },
    /// Dump one SOS block of the certificate as SDP JSON.
    Transcribe {
        #[command(flatten)]
        common: Common,
        /// Block name; lists the available blocks when omitted.
        #[arg(long)]
        block: Option<String>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        let code = match e {
            ScenarioError::Config(_) | ScenarioError::Io { .. } => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        };
        Failure { code, message: e.to_string() }
    }
}

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: EXIT_RUNTIME,
        message: format!("{}: {e}", path.display()),
    }
}

/// Loaded scenario plus provenance and output directory.
struct Ctx {
    scenario: Scenario,
    hash: String,
    seed: u64,
    out: PathBuf,
}

impl Ctx {
    fn open(c: &Common) -> Result<Ctx, Failure> {
        let (scenario, hash) = Scenario::from_file(&c.config)?;
        std::fs::create_dir_all(&c.out).map_err(|e| io_fail(&c.out, e))?;
        let seed = c.seed.unwrap_or(scenario.config.seed);
        Ok(Ctx {
            scenario,
            hash,
            seed,
            out: c.out.clone(),
        })
    }

    fn provenance(&self) -> Value {
        json!({ "config_hash": self.hash, "seed": self.seed, "scenario": self.scenario.config.name })
    }

    fn write(&self, name: &str, text: &str) -> Result<PathBuf, Failure> {
        let p = self.out.join(name);
        std::fs::write(&p, text).map_err(|e| io_fail(&p, e))?;
        Ok(p)
    }

    fn write_json(&self, name: &str, body: impl Serialize) -> Result<PathBuf, Failure> {
        let mut v = self.provenance();
        if let (Value::Object(m), Ok(Value::Object(b))) = (&mut v, serde_json::to_value(body)) {
            m.extend(b);
        }
        self.write(name, &(serde_json::to_string_pretty(&v).expect("JSON value") + "\n"))
    }

    /// CSV with a leading provenance comment line.
    fn write_csv(&self, name: &str, csv: &str) -> Result<PathBuf, Failure> {
        self.write(name, &format!("# config_hash={} seed={}\n{csv}", self.hash, self.seed))
    }
}

fn set_substeps(ctx: &mut Ctx, substeps: Option<usize>) -> Result<(), Failure> {
    if let Some(s) = substeps {
        if s == 0 {
            return Err(Failure {
                code: EXIT_CONFIG,
                message: "--substeps must be at least 1".into(),
            });
        }
        ctx.scenario.config.simulation.substeps = s;
    }
    Ok(())
}

fn run(cmd: Command) -> Result<u8, Failure> {
    match cmd {
        Command::Synthesize { common } => {
            let ctx = Ctx::open(&common)?;
            let outcome = ctx.scenario.synthesize()?;
            let artifact = ctx.scenario.artifact(&outcome, &ctx.hash, ctx.seed);
            let p = ctx.write(
                "certificate.json",
                &(serde_json::to_string_pretty(&artifact).expect("certificate JSON") + "\n"),
            )?;
            ctx.write_json(
                "synthesis_log.json",
                json!({ "log": outcome.log, "stop_reason": outcome.stop_reason, "wall_time_s": outcome.wall_time_s }),
            )?;
            match &outcome.stop_reason {
                Some(r) => eprintln!("synthesis stopped early ({r}); kept last verified iterate"),
                None => eprintln!("synthesis finished in {:.1} s", outcome.wall_time_s),
            }
            println!("{}", p.display());
            Ok(0)
        }
        Command::Certify { common, samples } => {
            let ctx = Ctx::open(&common)?;
            let cert = ctx.scenario.load_certificate()?;
            let n = samples.unwrap_or(ctx.scenario.config.certify.samples);
            let report = ctx.scenario.certify(&cert, n, ctx.seed)?;
            ctx.write_json("certification.json", json!({ "report": report }))?;
            for c in &report.conditions {
                println!(
                    "{:<18} {} worst margin {:.3e}",
                    c.name,
                    if c.passed { "pass" } else { "FAIL" },
                    c.worst_margin
                );
            }
            Ok(if report.passed { 0 } else { EXIT_CERTIFY })
        }
        Command::Simulate { common, substeps } => {
            let mut ctx = Ctx::open(&common)?;
            set_substeps(&mut ctx, substeps)?;
            let cert = ctx.scenario.load_certificate()?;
            let kind = ctx.scenario.config.controller.kind();
            let log = ctx.scenario.simulate(&cert, kind)?;
            ctx.write_csv("trajectory.csv", &log.to_csv())?;
            let summary = RunSummary::from_log(0, &log, &ctx.scenario.stage);
            let wall = &log.wall_ms;
            let timing = Timing {
                mean_step_ms: wall.iter().sum::<f64>() / wall.len().max(1) as f64,
                worst_step_ms: wall.iter().copied().fold(0.0, f64::max),
            };
            ctx.write_json("summary.json", json!({ "controller": kind, "summary": summary, "timing": timing }))?;
            println!(
                "{:?} convergence {:?} s, integral cost {:.4}",
                summary.status, summary.convergence_time, summary.integral_cost
            );
            Ok(match log.status {
                Termination::ControllerError => EXIT_INFEASIBLE,
                _ => 0,
            })
        }
        Command::Montecarlo {
            common,
            samples,
            workers,
            substeps,
        } => {
            let mut ctx = Ctx::open(&common)?;
            set_substeps(&mut ctx, substeps)?;
            let cert = ctx.scenario.load_certificate()?;
            let mc = &ctx.scenario.config.montecarlo;
            let n = samples.unwrap_or(mc.samples);
            let w = workers.unwrap_or(mc.workers);
            let kind = ctx.scenario.config.controller.kind();
            let res = ctx.scenario.monte_carlo(&cert, kind, n, ctx.seed, w)?;
            let runs = ctx.out.join("runs");
            std::fs::create_dir_all(&runs).map_err(|e| io_fail(&runs, e))?;
            for (i, log) in res.logs.iter().enumerate() {
                ctx.write_csv(&format!("runs/run_{i:03}.csv"), &log.to_csv())?;
            }
            ctx.write_json("campaign.json", json!({ "controller": kind, "campaign": res.summary }))?;
            let s = &res.summary;
            println!(
                "{} runs: safety rate {:.3}, convergence rate {:.3}, mean step {:.4} ms",
                s.samples, s.safety_rate, s.convergence_rate, s.timing.mean_step_ms
            );
            let infeasible = s.runs.iter().any(|r| r.status == Termination::ControllerError);
            Ok(if infeasible { EXIT_INFEASIBLE } else { 0 })
        }
        Command::Transcribe { common, block } => {
            let ctx = Ctx::open(&common)?;
            let cert = ctx.scenario.load_certificate()?;
            let names = {
                let cfg = ctx.scenario.config.synthesis.as_ref().map(|s| s.solver.clone()).unwrap_or_default();
                dmpc::synth::block_names(
                    &ctx.scenario.model,
                    &ctx.scenario.constraints,
                    &ctx.scenario.stage,
                    &cfg,
                    &cert,
                )
            };
            let Some(block) = block else {
                println!("{}", names.join("\n"));
                return Ok(0);
            };
            if !names.contains(&block) {
                return Err(Failure {
                    code: EXIT_CONFIG,
                    message: format!("unknown block {block}; available: {}", names.join(", ")),
                });
            }
            let prog = ctx.scenario.block_program(&cert, &block)?;
            let p = ctx.write_json(&format!("block_{block}.json"), json!({ "block": block, "sdp": prog.to_sdp() }))?;
            println!("{}", p.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    // usage errors share the config-error code; help and version exit 0
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
