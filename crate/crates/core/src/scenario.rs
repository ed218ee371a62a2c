//! Scenario configuration in physical units (degrees, deg/s, N·m, seconds)
//! and the glue that turns it into synthesis, certification, simulation
//! and campaign runs.
//!
//! Synthesis runs in scaled coordinates `x = D x̃`, `u = E ũ` in which every
//! box bound is one; certificates are stored and used in physical units.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::certify::{
    check_terminal_conditions, fit_sample_box, sample_sublevel, CertificationReport, CertifyError, CertifyOptions,
    ConditionReport, SampleBox,
};
use crate::control::{CertificatePair, ControlError, StageCost, DEFAULT_A_B, DEFAULT_A_V};
use crate::dynamics::{
    coordinate_bound_poly, double_integrator_model, keep_out_cone_poly, mrp_norm_poly, spacecraft_model,
    ConstraintSet, ControlAffineModel, DynamicsError, SpacecraftParams,
};
use crate::poly::Polynomial;
use crate::sim::{
    build_controller, monte_carlo, restrict_to, simulate_closed_loop, Campaign, CampaignResult, ControllerKind,
    ConvergenceRule, Monitor, SimError, SimOptions, TrajectoryLog,
};
use crate::sos::SosProgram;
use crate::synth::{
    block_program, fit_initial_barrier, inner_approx_sos, inner_hyperellipsoid, lq_initial_value,
    synthesize_certificate, SynthError, SynthesisConfig, SynthesisLog,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("synthesis: {0}")]
    Synth(#[from] SynthError),
    #[error("certification: {0}")]
    Certify(#[from] CertifyError),
    #[error("simulation: {0}")]
    Sim(#[from] SimError),
    #[error("model: {0}")]
    Dynamics(#[from] DynamicsError),
    #[error("certificate: {0}")]
    Control(#[from] ControlError),
}

fn bad<T>(msg: impl Into<String>) -> Result<T, ScenarioError> {
    Err(ScenarioError::Config(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub stage: StageConfig,
    /// Stored certificate, resolved relative to the config file.
    #[serde(default)]
    pub certificate: Option<CertificateSource>,
    #[serde(default)]
    pub synthesis: Option<SynthesisSetup>,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub certify: CertifyConfig,
    #[serde(default)]
    pub montecarlo: MonteCarloConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// State `(ω [rad/s], σ)`, torque input.
    Spacecraft {
        inertia_kg_m2: [f64; 3],
        rate_bounds_deg_s: [f64; 3],
        mrp_norm_sq_max: f64,
        torque_max_nm: f64,
        #[serde(default)]
        keep_out: Vec<KeepOutConfig>,
    },
    /// `ẋ₁ = x₂`, `ẋ₂ = u` with box bounds.
    DoubleIntegrator {
        position_bound: f64,
        velocity_bound: f64,
        input_bound: f64,
    },
}

/// Instrument boresight `b` (body frame) must stay outside the cone of
/// half-angle `half_angle_deg` around the inertial direction `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeepOutConfig {
    pub inertial_direction: [f64; 3],
    pub boresight: [f64; 3],
    pub half_angle_deg: f64,
}

/// Diagonal weights of `L = xᵀQx + uᵀRu` in SI units; identity if absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub q_diag: Option<Vec<f64>>,
    pub r_diag: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateSource {
    pub path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetShape {
    /// `Σ (x̃ᵢ/bᵢ)^{2k} − 1` over the scaled bounding box.
    Hyperellipsoid,
    /// Largest scaling of that hyperellipsoid certified inside all state
    /// constraints by SOS.
    SosInnerApprox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisSetup {
    /// Input weight multiplier of the LQ starting gain.
    pub input_weight_scale: f64,
    /// Relative inflation of the LQ cost-to-go used as the initial V̂.
    pub value_margin: f64,
    pub target: TargetShape,
    pub target_order: u32,
    pub solver: SynthesisConfig,
}

impl Default for SynthesisSetup {
    fn default() -> Self {
        SynthesisSetup {
            input_weight_scale: 1.0,
            value_margin: 0.1,
            target: TargetShape::Hyperellipsoid,
            target_order: 2,
            solver: SynthesisConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerChoice {
    #[default]
    Dmpc,
    Cbfclf,
    Poly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub kind: ControllerChoice,
    pub a_v: f64,
    pub a_b: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            kind: ControllerChoice::Dmpc,
            a_v: DEFAULT_A_V,
            a_b: DEFAULT_A_B,
        }
    }
}

impl ControllerConfig {
    pub fn kind(&self) -> ControllerKind {
        match self.kind {
            ControllerChoice::Dmpc => ControllerKind::Dmpc,
            ControllerChoice::Cbfclf => ControllerKind::CbfClf { a_v: self.a_v, a_b: self.a_b },
            ControllerChoice::Poly => ControllerKind::Poly,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub dt_s: f64,
    pub t_max_s: f64,
    pub substeps: usize,
    pub debounce_steps: usize,
    /// Rest-to-rest single-axis slew start: `σ₀ = tan(χ/4)·e`.
    pub slew_deg: Option<f64>,
    pub slew_axis: [f64; 3],
    /// Explicit initial state in SI units; overrides the slew.
    pub x0: Option<Vec<f64>>,
    pub convergence: ConvergenceConfig,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            dt_s: 0.1,
            t_max_s: 5000.0,
            substeps: 1,
            debounce_steps: 10,
            slew_deg: None,
            slew_axis: [1.0, 0.0, 0.0],
            x0: None,
            convergence: ConvergenceConfig::default(),
        }
    }
}

/// Attitude models use the rate, angle and input thresholds; the others
/// use the state and input thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub rate_tol_deg_s: f64,
    pub angle_tol_deg: f64,
    pub input_tol: f64,
    pub state_tol: f64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig {
            rate_tol_deg_s: 0.001,
            angle_tol_deg: 0.3,
            input_tol: 0.001,
            state_tol: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifyConfig {
    pub samples: usize,
    pub epsilon: f64,
    pub tolerance: f64,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        let o = CertifyOptions::default();
        CertifyConfig {
            samples: crate::certify::DEFAULT_SAMPLES,
            epsilon: o.epsilon,
            tolerance: o.tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub samples: usize,
    pub workers: usize,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        MonteCarloConfig { samples: 100, workers: 8 }
    }
}

/// Hex SHA-256 of the raw config text.
pub fn config_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Stored certificate with provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificateArtifact {
    pub config_hash: String,
    pub seed: u64,
    pub certificate: CertificatePair,
    pub state_scale: Vec<f64>,
    pub input_scale: Vec<f64>,
    #[serde(default)]
    pub synthesis: Option<SynthesisLog>,
    /// Set when the alternation stopped early and the last verified
    /// iterate was kept.
    #[serde(default)]
    pub stop_reason: Option<String>,
    #[serde(default)]
    pub wall_time_s: f64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CertificateFile {
    Artifact(Box<CertificateArtifact>),
    Bare(CertificatePair),
}

/// Outcome of [`Scenario::synthesize`].
#[derive(Debug, Clone)]
pub struct SynthesisOutcome {
    pub certificate: CertificatePair,
    pub scaled: CertificatePair,
    pub log: Option<SynthesisLog>,
    pub stop_reason: Option<String>,
    pub wall_time_s: f64,
}

/// A validated configuration with its physical and scaled problem data.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    /// Directory relative paths in the config resolve against.
    pub base_dir: PathBuf,
    pub model: ControlAffineModel,
    pub constraints: ConstraintSet,
    pub stage: StageCost,
    /// `D` and `E` of the scaled coordinates.
    pub state_scale: Vec<f64>,
    pub input_scale: Vec<f64>,
    /// Half-widths of a box containing the state constraint set.
    pub state_bounds: Vec<f64>,
    /// Coordinates drawn by campaigns; the rest start at zero.
    pub free: Vec<usize>,
}

fn positive(name: &str, v: f64) -> Result<(), ScenarioError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        bad(format!("{name} must be positive and finite, got {v}"))
    }
}

impl Scenario {
    /// Reads, hashes and builds a TOML scenario file.
    pub fn from_file(path: &Path) -> Result<(Scenario, String), ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: ScenarioConfig = toml::from_str(&text).map_err(|e| ScenarioError::Config(e.to_string()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((Scenario::build(cfg, base)?, config_hash(&text)))
    }

    pub fn build(config: ScenarioConfig, base_dir: PathBuf) -> Result<Scenario, ScenarioError> {
        let (model, state_polys, input_bounds, state_scale, state_bounds, free) = match &config.model {
            ModelConfig::Spacecraft {
                inertia_kg_m2,
                rate_bounds_deg_s,
                mrp_norm_sq_max,
                torque_max_nm,
                keep_out,
            } => {
                for (i, w) in rate_bounds_deg_s.iter().enumerate() {
                    positive(&format!("model.rate_bounds_deg_s[{i}]"), *w)?;
                }
                positive("model.mrp_norm_sq_max", *mrp_norm_sq_max)?;
                positive("model.torque_max_nm", *torque_max_nm)?;
                let model = spacecraft_model(&SpacecraftParams {
                    inertia_diag: *inertia_kg_m2,
                })?;
                let w: Vec<f64> = rate_bounds_deg_s.iter().map(|d| d.to_radians()).collect();
                let mut polys: Vec<Polynomial> = (0..3).map(|i| coordinate_bound_poly(6, i, w[i])).collect();
                polys.push(mrp_norm_poly(*mrp_norm_sq_max));
                for (k, c) in keep_out.iter().enumerate() {
                    if !(c.half_angle_deg > 0.0 && c.half_angle_deg < 180.0) {
                        return bad(format!("model.keep_out[{k}].half_angle_deg outside (0, 180)"));
                    }
                    polys.push(
                        keep_out_cone_poly(c.inertial_direction, c.boresight, c.half_angle_deg.to_radians())
                            .map_err(|e| ScenarioError::Config(format!("model.keep_out[{k}]: {e}")))?,
                    );
                }
                let s = mrp_norm_sq_max.sqrt();
                (
                    model,
                    polys,
                    vec![*torque_max_nm; 3],
                    vec![w[0], w[1], w[2], 1.0, 1.0, 1.0],
                    vec![w[0], w[1], w[2], s, s, s],
                    vec![3, 4, 5],
                )
            }
            ModelConfig::DoubleIntegrator {
                position_bound,
                velocity_bound,
                input_bound,
            } => {
                positive("model.position_bound", *position_bound)?;
                positive("model.velocity_bound", *velocity_bound)?;
                positive("model.input_bound", *input_bound)?;
                let b = vec![*position_bound, *velocity_bound];
                (
                    double_integrator_model(),
                    vec![coordinate_bound_poly(2, 0, b[0]), coordinate_bound_poly(2, 1, b[1])],
                    vec![*input_bound],
                    b.clone(),
                    b,
                    vec![0, 1],
                )
            }
        };
        let (nx, nu) = (model.nx(), model.nu());
        let diag = |name: &str, v: &Option<Vec<f64>>, n: usize| -> Result<DMatrix<f64>, ScenarioError> {
            match v {
                None => Ok(DMatrix::identity(n, n)),
                Some(d) if d.len() == n => Ok(DMatrix::from_diagonal(&DVector::from_row_slice(d))),
                Some(d) => bad(format!("stage.{name} has {} entries, expected {n}", d.len())),
            }
        };
        let stage = StageCost::new(
            diag("q_diag", &config.stage.q_diag, nx)?,
            diag("r_diag", &config.stage.r_diag, nu)?,
        )?;
        let constraints = ConstraintSet::new(state_polys, ConstraintSet::input_box(&input_bounds))?;
        let sim = &config.simulation;
        positive("simulation.dt_s", sim.dt_s)?;
        positive("simulation.t_max_s", sim.t_max_s)?;
        if sim.substeps == 0 {
            return bad("simulation.substeps must be at least 1");
        }
        if let Some(x0) = &sim.x0 {
            if x0.len() != nx {
                return bad(format!("simulation.x0 has {} entries, expected {nx}", x0.len()));
            }
        }
        if sim.slew_deg.is_some() && nx != 6 {
            return bad("simulation.slew_deg needs the spacecraft model");
        }
        if config.certify.samples == 0 || config.montecarlo.samples == 0 {
            return bad("sample counts must be positive");
        }
        if let Some(s) = &config.synthesis {
            positive("synthesis.input_weight_scale", s.input_weight_scale)?;
            if !(s.value_margin >= 0.0) {
                return bad("synthesis.value_margin must be nonnegative");
            }
            if s.target_order == 0 {
                return bad("synthesis.target_order must be positive");
            }
            s.solver
                .validate()
                .map_err(|e| ScenarioError::Config(format!("synthesis.solver: {e}")))?;
        }
        Ok(Scenario {
            config,
            base_dir,
            model,
            constraints,
            stage,
            state_scale,
            input_scale: input_bounds,
            state_bounds,
            free,
        })
    }

    /// Model, constraints and stage cost in scaled coordinates. Constraint
    /// polynomials are renormalized to unit largest coefficient.
    pub fn scaled_problem(&self) -> Result<(ControlAffineModel, ConstraintSet, StageCost), ScenarioError> {
        let (ds, es) = (&self.state_scale, &self.input_scale);
        let model = self.model.scaled(ds, es);
        let polys = self
            .constraints
            .state_polys
            .iter()
            .map(|g| {
                let p = g.scale_vars(ds);
                p.scale(1.0 / p.max_abs_coeff())
            })
            .collect();
        let hu = self
            .constraints
            .input_hu
            .iter()
            .map(|row| row.iter().zip(es).map(|(h, e)| h * e).collect())
            .collect();
        let d = DMatrix::from_diagonal(&DVector::from_row_slice(ds));
        let e = DMatrix::from_diagonal(&DVector::from_row_slice(es));
        let stage = StageCost::new(&d * &self.stage.q * &d, &e * &self.stage.r * &e)?;
        Ok((model, ConstraintSet::new(polys, hu)?, stage))
    }

    pub fn sim_options(&self) -> SimOptions {
        let s = &self.config.simulation;
        let c = &s.convergence;
        let convergence = match self.config.model {
            ModelConfig::Spacecraft { .. } => ConvergenceRule::Attitude {
                rate_tol_rad: c.rate_tol_deg_s.to_radians(),
                angle_tol_rad: c.angle_tol_deg.to_radians(),
                input_tol: c.input_tol,
            },
            ModelConfig::DoubleIntegrator { .. } => ConvergenceRule::Norm {
                state_tol: c.state_tol,
                input_tol: c.input_tol,
            },
        };
        SimOptions {
            dt: s.dt_s,
            t_max: s.t_max_s,
            substeps: s.substeps,
            debounce: s.debounce_steps,
            convergence,
        }
    }

    pub fn initial_state(&self) -> Result<Vec<f64>, ScenarioError> {
        let s = &self.config.simulation;
        if let Some(x0) = &s.x0 {
            return Ok(x0.clone());
        }
        let mut x = vec![0.0; self.model.nx()];
        if let Some(chi) = s.slew_deg {
            let norm = s.slew_axis.iter().map(|a| a * a).sum::<f64>().sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                return bad("simulation.slew_axis must be a nonzero vector");
            }
            let t = (chi.to_radians() / 4.0).tan();
            for i in 0..3 {
                x[3 + i] = t * s.slew_axis[i] / norm;
            }
        }
        Ok(x)
    }

    /// Initial pair, alternating synthesis in scaled coordinates, and the
    /// conversion back to physical units. An early stop keeps the last
    /// verified iterate and records the reason.
    pub fn synthesize(&self) -> Result<SynthesisOutcome, ScenarioError> {
        let Some(setup) = &self.config.synthesis else {
            return bad("missing [synthesis] section");
        };
        let start = Instant::now();
        let (model, cs, stage) = self.scaled_problem()?;
        let cfg = &setup.solver;
        let (v, k, _) = lq_initial_value(&model, &stage, setup.input_weight_scale, setup.value_margin)?;
        let init = fit_initial_barrier(&model, &cs, &stage, cfg, &v, &k)?;
        let half: Vec<f64> = self.state_bounds.iter().zip(&self.state_scale).map(|(b, d)| b / d).collect();
        let shape = inner_hyperellipsoid(&half, setup.target_order)?;
        let target = match setup.target {
            TargetShape::Hyperellipsoid => shape,
            TargetShape::SosInnerApprox => inner_approx_sos(&cs.state_polys, &shape)?.g,
        };
        let (scaled, log, stop_reason) = match synthesize_certificate(&model, &cs, &stage, cfg, &init, &target) {
            Ok(r) => (r.certificate, Some(r.log), None),
            Err(e) => {
                let reason = e.to_string();
                match e {
                    SynthError::InfeasibleSubproblem { iterate, .. } | SynthError::Stalled { iterate, .. }
                        if *iterate != CertificatePair { a: cfg.a, ..init.clone() } =>
                    {
                        (*iterate, None, Some(reason))
                    }
                    other => return Err(other.into()),
                }
            }
        };
        let inv = |v: &[f64]| v.iter().map(|s| 1.0 / s).collect::<Vec<_>>();
        let certificate = scaled.rescaled(&inv(&self.state_scale), &inv(&self.input_scale));
        Ok(SynthesisOutcome {
            certificate,
            scaled,
            log,
            stop_reason,
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    }

    pub fn artifact(&self, outcome: &SynthesisOutcome, config_hash: &str, seed: u64) -> CertificateArtifact {
        CertificateArtifact {
            config_hash: config_hash.to_string(),
            seed,
            certificate: outcome.certificate.clone(),
            state_scale: self.state_scale.clone(),
            input_scale: self.input_scale.clone(),
            synthesis: outcome.log.clone(),
            stop_reason: outcome.stop_reason.clone(),
            wall_time_s: outcome.wall_time_s,
        }
    }

    pub fn certificate_path(&self) -> Option<PathBuf> {
        self.config.certificate.as_ref().map(|c| self.base_dir.join(&c.path))
    }

    /// Loads the configured certificate, either a synthesis artifact or a
    /// bare certificate pair.
    pub fn load_certificate(&self) -> Result<CertificatePair, ScenarioError> {
        let Some(path) = self.certificate_path() else {
            return bad("missing [certificate] path");
        };
        let text = std::fs::read_to_string(&path).map_err(|source| ScenarioError::Io { path: path.clone(), source })?;
        let cert = match serde_json::from_str::<CertificateFile>(&text) {
            Ok(CertificateFile::Artifact(a)) => a.certificate,
            Ok(CertificateFile::Bare(c)) => c,
            Err(e) => return bad(format!("{}: {e}", path.display())),
        };
        if cert.nx() != self.model.nx() {
            return bad(format!(
                "certificate has {} states, model has {}",
                cert.nx(),
                self.model.nx()
            ));
        }
        cert.validate()?;
        Ok(cert)
    }

    /// Sampling certification over `{ĥ ≤ 0}`. The sampling box is fitted
    /// to the set, falling back to the constraint bounding box widened up to
    /// eightfold. A set that escapes even that box fails the state
    /// constraints at the escaping point.
    pub fn certify(&self, cert: &CertificatePair, samples: usize, seed: u64) -> Result<CertificationReport, ScenarioError> {
        let opts = CertifyOptions {
            epsilon: self.config.certify.epsilon,
            tolerance: self.config.certify.tolerance,
        };
        let outer = SampleBox::symmetric(&self.state_bounds);
        let mut boxes = vec![fit_sample_box(&cert.h_hat, &outer, seed)];
        for f in [1.0, 2.0, 4.0, 8.0] {
            boxes.push(SampleBox::symmetric(&self.state_bounds.iter().map(|b| b * f).collect::<Vec<_>>()));
        }
        let mut escape = None;
        for bx in &boxes {
            match sample_sublevel(&cert.h_hat, bx, samples, seed) {
                Ok(set) => {
                    return Ok(check_terminal_conditions(
                        cert,
                        &self.model,
                        &self.constraints,
                        &self.stage,
                        &set,
                        &opts,
                    )?)
                }
                Err(CertifyError::BoxTooSmall { point, .. }) => escape = Some(point),
                Err(e) => return Err(e.into()),
            }
        }
        let point = escape.expect("at least one box was tried");
        Ok(CertificationReport {
            conditions: vec![ConditionReport {
                name: "state_constraints".into(),
                worst_margin: self.constraints.max_state_violation(&point),
                witness: point,
                passed: false,
            }],
            sample_count: 0,
            boundary_samples: 0,
            seed,
            tolerance: opts.tolerance,
            assurance: "sampling".into(),
            passed: false,
        })
    }

    pub fn simulate(&self, cert: &CertificatePair, kind: ControllerKind) -> Result<TrajectoryLog, ScenarioError> {
        let x0 = self.initial_state()?;
        let mut ctl = build_controller(kind, cert, &self.model, &self.stage, &self.constraints)?;
        let monitor = Monitor::new(Some(cert), &self.stage, Some(&self.constraints));
        Ok(simulate_closed_loop(
            &self.model,
            ctl.as_mut(),
            &x0,
            &self.sim_options(),
            &monitor,
        )?)
    }

    /// Campaign over the free coordinates with the others at zero.
    pub fn campaign(&self, cert: &CertificatePair, kind: ControllerKind, seed: u64) -> Result<Campaign, ScenarioError> {
        let slice = restrict_to(&cert.h_hat, &self.free)?;
        let outer = SampleBox::symmetric(&self.free.iter().map(|&i| self.state_bounds[i]).collect::<Vec<_>>());
        let fitted = fit_sample_box(&slice, &outer, seed);
        let sample_box = match sample_sublevel(&slice, &fitted, 1, seed) {
            Ok(_) => fitted,
            Err(CertifyError::BoxTooSmall { .. }) => outer,
            Err(e) => return Err(e.into()),
        };
        Ok(Campaign {
            model: self.model.clone(),
            cert: cert.clone(),
            stage: self.stage.clone(),
            constraints: self.constraints.clone(),
            controller: kind,
            sim: self.sim_options(),
            free: self.free.clone(),
            sample_box,
        })
    }

    pub fn monte_carlo(
        &self,
        cert: &CertificatePair,
        kind: ControllerKind,
        samples: usize,
        seed: u64,
        workers: usize,
    ) -> Result<CampaignResult, ScenarioError> {
        let c = self.campaign(cert, kind, seed)?;
        Ok(monte_carlo(&c, samples, seed, workers)?)
    }

    /// SOS program of the named block in physical coordinates.
    pub fn block_program(&self, cert: &CertificatePair, block: &str) -> Result<SosProgram, ScenarioError> {
        let cfg = self.config.synthesis.as_ref().map(|s| s.solver.clone()).unwrap_or_default();
        let cfg = SynthesisConfig { a: cert.a, ..cfg };
        Ok(block_program(&self.model, &self.constraints, &self.stage, &cfg, cert, block)?)
    }
}
