//! Command-line pipeline: simulate, identify, analyze, synthesize and run
//! the closed loop, exchanging JSON and CSV files between stages.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{
    poles_are_stable, synthesize, ControlError, ControllerFile, ControllerSpec, GainSource, ReferenceSignal,
};
use crate::data::Dataset;
use crate::dictionary::LibrarySpec;
use crate::dynamics::{
    chain_integrator, integrate, simulate_closed_loop, vdp_system, ControlAffineSystem, DynamicsError, Excitation,
    InputSignal,
};
use crate::lie::{normal_form, relative_degree, render_normal_form, LieChain};
use crate::regression::{identify, RegressionConfig, RegressionError, SparseModel};
use crate::symexpr::Expression;
use crate::Error as LibError;

/// Ground-truth plant used for data generation and closed-loop runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemConfig {
    Vdp {
        theta: f64,
        sigma: f64,
        mu: f64,
    },
    Chain {
        n: usize,
    },
    /// Expressions in the text grammar, e.g. `"-x1 + 2*x2"`.
    Custom {
        f: Vec<String>,
        g: Vec<String>,
        c: String,
    },
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig::Vdp { theta: 1.0, sigma: 1.0, mu: 1.0 }
    }
}

impl SystemConfig {
    pub fn build(&self) -> Result<ControlAffineSystem, CliError> {
        let cfg = |m: String| CliError::config("system", m);
        match self {
            SystemConfig::Vdp { theta, sigma, mu } => {
                if ![theta, sigma, mu].iter().all(|v| v.is_finite()) {
                    return Err(cfg("vdp parameters must be finite".into()));
                }
                Ok(vdp_system(*theta, *sigma, *mu))
            }
            SystemConfig::Chain { n } => {
                if *n == 0 {
                    return Err(cfg("chain needs n >= 1".into()));
                }
                Ok(chain_integrator(*n))
            }
            SystemConfig::Custom { f, g, c } => {
                let n = f.len();
                if n == 0 || g.len() != n {
                    return Err(cfg(format!(
                        "custom system needs equal, non-empty f and g (got {} and {})",
                        n,
                        g.len()
                    )));
                }
                let parse = |s: &String| Expression::parse(s, n).map_err(|e| cfg(format!("{s:?}: {e}")));
                let f = f.iter().map(parse).collect::<Result<Vec<_>, _>>()?;
                let g = g.iter().map(parse).collect::<Result<Vec<_>, _>>()?;
                let c = parse(c)?;
                ControlAffineSystem::new(f, g, c).map_err(|e| cfg(e.to_string()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// Error-dynamics coefficients `[a_0, ..., a_{r-1}]`.
    pub gains: Option<Vec<f64>>,
    /// Closed-loop poles as `[re, im]` pairs; used when `gains` is absent.
    pub poles: Option<Vec<[f64; 2]>>,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig { gains: Some(vec![5.0, 4.0]), poles: None }
    }
}

impl ControllerConfig {
    pub fn source(&self) -> Result<GainSource, CliError> {
        match (&self.gains, &self.poles) {
            (Some(_), Some(_)) => Err(CliError::config("controller", "give either gains or poles, not both")),
            (Some(g), None) => Ok(GainSource::Gains(g.clone())),
            (None, Some(p)) => Ok(GainSource::Poles(p.iter().map(|[re, im]| Complex64::new(*re, *im)).collect())),
            (None, None) => Err(CliError::config("controller", "no gains or poles given")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub reference: ReferenceSignal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClosedLoopConfig {
    /// Initial state; the identification `x0` when absent.
    pub x0: Option<Vec<f64>>,
    pub dt: f64,
    pub steps: usize,
    pub scenarios: Vec<Scenario>,
}

impl Default for ClosedLoopConfig {
    fn default() -> Self {
        ClosedLoopConfig {
            x0: None,
            dt: 0.01,
            steps: 2000,
            scenarios: vec![
                Scenario { name: "stabilization".into(), reference: ReferenceSignal::Zero },
                Scenario { name: "tracking".into(), reference: ReferenceSignal::sine() },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub system: SystemConfig,
    pub excitation: Excitation,
    pub dt: f64,
    /// Integration steps; the dataset has `steps + 1` rows.
    pub steps: usize,
    pub x0: Vec<f64>,
    /// When set, sinusoid phases of the excitation are drawn from this seed.
    pub seed: Option<u64>,
    pub library: LibrarySpec,
    pub regression: RegressionConfig,
    /// Zero tolerance for Lie-derivative coefficients.
    pub lie_tol: f64,
    pub controller: ControllerConfig,
    pub closed_loop: ClosedLoopConfig,
    pub output_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            system: SystemConfig::default(),
            excitation: Excitation::default(),
            dt: 0.01,
            steps: 99,
            x0: vec![2.0, 0.0],
            seed: None,
            library: LibrarySpec::default(),
            regression: RegressionConfig::default(),
            lie_tol: 1e-8,
            controller: ControllerConfig::default(),
            closed_loop: ClosedLoopConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CliError::io("config", path, e))?;
        let cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| CliError::config("config", format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<ControlAffineSystem, CliError> {
        let sys = self.system.build()?;
        let n = sys.n_states();
        let bad = |m: String| Err(CliError::config("config", m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.steps < 2 {
            return bad(format!("steps must be >= 2, got {}", self.steps));
        }
        if self.x0.len() != n {
            return bad(format!("x0 has {} entries, system has {n} states", self.x0.len()));
        }
        if !(self.lie_tol >= 0.0 && self.lie_tol.is_finite()) {
            return bad("lie_tol must be finite and >= 0".into());
        }
        self.library.validate(n).map_err(|e| CliError::config("config", e.to_string()))?;
        self.regression.validate().map_err(|e| CliError::config("config", e.to_string()))?;
        self.controller.source()?;
        let cl = &self.closed_loop;
        if !(cl.dt > 0.0 && cl.dt.is_finite()) || cl.steps < 2 {
            return bad("closed_loop needs dt > 0 and steps >= 2".into());
        }
        if cl.x0.as_ref().is_some_and(|x| x.len() != n) {
            return bad(format!("closed_loop.x0 must have {n} entries"));
        }
        let mut names: Vec<&str> = cl.scenarios.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != cl.scenarios.len() || names.iter().any(|s| s.is_empty() || s.contains(['/', '\\'])) {
            return bad("scenario names must be unique, non-empty and path-safe".into());
        }
        Ok(sys)
    }

    /// The configured excitation, with sinusoid phases redrawn when a seed is set.
    pub fn excitation(&self) -> Excitation {
        match (&self.excitation, self.seed) {
            (Excitation::SineSum { components }, Some(seed)) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut components = components.clone();
                for c in &mut components {
                    c.phase = rng.random_range(0.0..std::f64::consts::TAU);
                }
                Excitation::SineSum { components }
            }
            (e, _) => e.clone(),
        }
    }

    pub fn closed_loop_x0(&self) -> Vec<f64> {
        self.closed_loop.x0.clone().unwrap_or_else(|| self.x0.clone())
    }
}

#[derive(Debug, Error)]
pub enum Failure {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Lib(#[from] LibError),
}

/// A failure tagged with the pipeline stage that raised it.
#[derive(Debug, Error)]
#[error("{stage} stage failed: {failure}")]
pub struct CliError {
    pub stage: &'static str,
    pub failure: Failure,
}

impl CliError {
    pub fn config(stage: &'static str, msg: impl Into<String>) -> Self {
        CliError { stage, failure: Failure::Config(msg.into()) }
    }

    pub fn io(stage: &'static str, path: &Path, source: std::io::Error) -> Self {
        CliError { stage, failure: Failure::Io { path: path.to_path_buf(), source } }
    }

    pub fn lib(stage: &'static str, e: impl Into<LibError>) -> Self {
        CliError { stage, failure: Failure::Lib(e.into()) }
    }

    /// 0 success, 1 io or other, 2 config or malformed input, 3 infeasible identification,
    /// 4 divergence, 5 relative-degree failure.
    pub fn exit_code(&self) -> i32 {
        match &self.failure {
            Failure::Config(_) => 2,
            Failure::Io { .. } => 1,
            Failure::Lib(e) => match e {
                LibError::Regression(r) => match r {
                    RegressionError::Infeasible { .. }
                    | RegressionError::ConstraintViolation { .. }
                    | RegressionError::NonConvergence { .. } => 3,
                    RegressionError::InvalidConfig(_)
                    | RegressionError::OrderTooLarge { .. }
                    | RegressionError::Malformed(_)
                    | RegressionError::Json(_)
                    | RegressionError::Expr(_)
                    | RegressionError::Dictionary(_) => 2,
                    RegressionError::Dynamics(_) => 5,
                    _ => 1,
                },
                LibError::Dynamics(DynamicsError::Divergence { .. } | DynamicsError::Input { .. }) => 4,
                LibError::Dynamics(DynamicsError::InvalidSetup(_) | DynamicsError::InvalidSystem(_)) => 2,
                LibError::Data(_) => 2,
                LibError::Lie(_) => 5,
                LibError::Control(ControlError::Lie(_) | ControlError::BetaZero) => 5,
                LibError::Control(
                    ControlError::GainCount { .. } | ControlError::NoPoles | ControlError::Conjugation(_),
                ) => 2,
                _ => 1,
            },
        }
    }
}

fn write_file(stage: &'static str, path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(stage, path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn csv_string(header: &[String], rows: impl Iterator<Item = Vec<f64>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string())).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8")
}

/// Simulates the configured plant under the configured excitation.
pub fn simulate_stage(cfg: &PipelineConfig) -> Result<Dataset, CliError> {
    let sys = cfg.validate()?;
    if cfg.excitation.is_zero() && cfg.regression.constraint_mode != crate::regression::ConstraintMode::Off {
        log::warn!("zero excitation: the relative-degree constraint will be vacuous downstream");
        eprintln!("warning: zero excitation makes the relative-degree constraint vacuous");
    }
    let input = InputSignal::Open(cfg.excitation());
    integrate(&sys, &cfg.x0, &input, cfg.dt, cfg.steps).map_err(|e| CliError::lib("simulate", e))
}

pub fn identify_stage(d: &Dataset, cfg: &PipelineConfig) -> Result<SparseModel, CliError> {
    identify(d, &cfg.library, &cfg.regression).map_err(|e| CliError::lib("identify", e))
}

pub fn lie_stage(model: &SparseModel, tol: f64) -> Result<LieChain, CliError> {
    let sys = model.system().map_err(|e| CliError::lib("lie", e))?;
    let chain = relative_degree(&sys, tol, sys.n_states()).map_err(|e| CliError::lib("lie", e))?;
    chain.require_degree().map_err(|e| CliError::lib("lie", e))?;
    Ok(chain)
}

pub fn synthesize_stage(chain: &LieChain, source: &GainSource) -> Result<ControllerSpec, CliError> {
    let spec = synthesize(chain, source).map_err(|e| CliError::lib("synthesize", e))?;
    if !spec.gains.iter().all(|&a| a > 0.0) {
        eprintln!("warning: gains {:?} do not give a stable error polynomial", spec.gains);
    }
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioSummary {
    pub name: String,
    pub final_time: f64,
    pub final_state_norm: f64,
    pub state_norm_at_10s: Option<f64>,
    pub max_abs_input: f64,
    /// `max |y - r|` over `t >= 5`.
    pub max_output_error_after_5s: Option<f64>,
}

pub fn closed_loop_stage(
    plant: &ControlAffineSystem,
    controller: &ControllerSpec,
    cfg: &PipelineConfig,
) -> Result<Vec<(Scenario, Dataset, ScenarioSummary)>, CliError> {
    let cl = &cfg.closed_loop;
    let x0 = cfg.closed_loop_x0();
    let mut out = Vec::new();
    for sc in &cl.scenarios {
        let d = simulate_closed_loop(plant, controller, &sc.reference, &x0, cl.dt, cl.steps)
            .map_err(|e| CliError::lib("closedloop", e))?;
        let summary = summarize(sc, &d);
        out.push((sc.clone(), d, summary));
    }
    Ok(out)
}

fn summarize(sc: &Scenario, d: &Dataset) -> ScenarioSummary {
    let norm = |i: usize| d.state(i).iter().map(|v| v * v).sum::<f64>().sqrt();
    let m = d.len();
    let t = d.times();
    let at10 = t.iter().position(|&s| (s - 10.0).abs() < 0.5 * d.dt()).map(norm);
    let errs: Vec<f64> = (0..m)
        .filter(|&i| t[i] >= 5.0 - 1e-9)
        .map(|i| (d.output()[i] - sc.reference.derivative(0, t[i])).abs())
        .collect();
    ScenarioSummary {
        name: sc.name.clone(),
        final_time: t[m - 1],
        final_state_norm: norm(m - 1),
        state_norm_at_10s: at10,
        max_abs_input: d.input().iter().fold(0.0, |a, u| a.max(u.abs())),
        max_output_error_after_5s: errs.iter().copied().reduce(f64::max),
    }
}

fn trajectory_csv(sc: &Scenario, d: &Dataset) -> String {
    let r: Vec<f64> = d.times().iter().map(|&t| sc.reference.derivative(0, t)).collect();
    let mut buf = Vec::new();
    d.write_csv(&mut buf, &[("r", &r)]).expect("in-memory write");
    String::from_utf8(buf).expect("utf8")
}

/// True and identified models driven from the same state and input.
pub fn overlay_csv(plant: &ControlAffineSystem, model: &SparseModel, cfg: &PipelineConfig) -> Result<String, CliError> {
    let input = InputSignal::Open(cfg.excitation());
    let truth = integrate(plant, &cfg.x0, &input, cfg.dt, cfg.steps).map_err(|e| CliError::lib("overlay", e))?;
    let sys = model.system().map_err(|e| CliError::lib("overlay", e))?;
    let ident = integrate(&sys, &cfg.x0, &input, cfg.dt, cfg.steps).map_err(|e| CliError::lib("overlay", e))?;
    let n = plant.n_states();
    let mut header = vec!["t".to_string(), "u".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}_true")));
    header.extend((1..=n).map(|i| format!("x{i}_model")));
    let rows = (0..truth.len()).map(|i| {
        let mut r = vec![truth.times()[i], truth.input()[i]];
        r.extend(truth.state(i));
        r.extend(ident.state(i));
        r
    });
    Ok(csv_string(&header, rows))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineSummary {
    pub equations: Vec<String>,
    /// Largest coefficient deviation from the true plant, per drift component.
    pub drift_errors: Vec<f64>,
    pub input_field_errors: Vec<f64>,
    pub output_error: f64,
    pub max_coefficient_error: f64,
    pub constraint_residual: f64,
    pub relative_degree: usize,
    pub gains: Vec<f64>,
    pub control_law: String,
    pub scenarios: Vec<ScenarioSummary>,
}

impl PipelineSummary {
    pub fn render(&self) -> String {
        let mut s = String::from("identified equations\n");
        for e in &self.equations {
            let _ = writeln!(s, "  {e}");
        }
        let _ = writeln!(s, "max coefficient error vs true plant: {:.3e}", self.max_coefficient_error);
        let _ = writeln!(s, "  drift: {:?}", self.drift_errors);
        let _ = writeln!(s, "  input field: {:?}", self.input_field_errors);
        let _ = writeln!(s, "  output map: {:.3e}", self.output_error);
        let _ = writeln!(s, "constraint residual: {:.3e}", self.constraint_residual);
        let _ = writeln!(s, "relative degree: {}", self.relative_degree);
        let _ = writeln!(s, "gains: {:?}", self.gains);
        let _ = writeln!(s, "u = {}", self.control_law);
        for sc in &self.scenarios {
            let _ = writeln!(
                s,
                "{}: |x(T)| = {:.3e}, |x(10)| = {}, max|u| = {:.3}, max|y-r| (t>=5) = {}",
                sc.name,
                sc.final_state_norm,
                sc.state_norm_at_10s.map_or("n/a".into(), |v| format!("{v:.3e}")),
                sc.max_abs_input,
                sc.max_output_error_after_5s.map_or("n/a".into(), |v| format!("{v:.3e}")),
            );
        }
        s
    }
}

fn coefficient_errors(plant: &ControlAffineSystem, model: &SparseModel) -> Result<(Vec<f64>, Vec<f64>, f64), CliError> {
    let dist = |a: &Expression, b: &Expression| a.max_coefficient_distance(b).map_err(|e| CliError::lib("summary", e));
    let f = plant.f().iter().zip(&model.f).map(|(a, b)| dist(a, b)).collect::<Result<Vec<_>, _>>()?;
    let g = plant.g().iter().zip(&model.g).map(|(a, b)| dist(a, b)).collect::<Result<Vec<_>, _>>()?;
    let c = dist(plant.c(), &model.c)?;
    Ok((f, g, c))
}

/// Runs every stage, writing artifacts into `out`.
pub fn pipeline(cfg: &PipelineConfig, out: &Path) -> Result<PipelineSummary, CliError> {
    let plant = cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| CliError::io("pipeline", out, e))?;
    let d = simulate_stage(cfg)?;
    let ds_path = out.join("dataset.csv");
    d.save_csv(&ds_path).map_err(|e| CliError::lib("simulate", e))?;

    // re-read so every later stage consumes the file it would in a split run
    let d = Dataset::load_csv(&ds_path).map_err(|e| CliError::lib("identify", e))?;
    let model = identify_stage(&d, cfg)?;
    write_model(&model, out)?;

    let model = SparseModel::load_json(out.join("model.json")).map_err(|e| CliError::lib("lie", e))?;
    let chain = lie_stage(&model, cfg.lie_tol)?;
    write_lie(&model, &chain, out)?;

    let controller = synthesize_stage(&chain, &cfg.controller.source()?)?;
    write_file("synthesize", &out.join("controller.json"), &to_json(&controller.to_file()))?;

    match overlay_csv(&plant, &model, cfg) {
        Ok(s) => write_file("overlay", &out.join("overlay.csv"), &s)?,
        Err(e) => eprintln!("warning: {e}"),
    }

    let runs = closed_loop_stage(&plant, &controller, cfg)?;
    write_trajectories(&runs, out)?;

    let (drift_errors, input_field_errors, output_error) = coefficient_errors(&plant, &model)?;
    let max_coefficient_error = drift_errors.iter().chain(&input_field_errors).copied().fold(output_error, f64::max);
    let summary = PipelineSummary {
        equations: model.equations().lines().map(String::from).collect(),
        drift_errors,
        input_field_errors,
        output_error,
        max_coefficient_error,
        constraint_residual: model.diagnostics.constraint_residual,
        relative_degree: controller.relative_degree,
        gains: controller.gains.clone(),
        control_law: controller.display_law(),
        scenarios: runs.into_iter().map(|(_, _, s)| s).collect(),
    };
    write_file("summary", &out.join("summary.json"), &to_json(&summary))?;
    write_file("summary", &out.join("summary.txt"), &summary.render())?;
    Ok(summary)
}

fn write_model(model: &SparseModel, out: &Path) -> Result<(), CliError> {
    write_file("identify", &out.join("model.json"), &to_json(&model.to_file()))?;
    write_file("identify", &out.join("coefficients.csv"), &model.coefficient_table_csv())?;
    let mut report = String::from("discovered equations\n");
    report.push_str(&model.equations());
    report.push_str("\ncoefficients\n");
    report.push_str(&model.coefficient_table_text());
    let d = &model.diagnostics;
    let _ = writeln!(report, "\nconstraint residual: {:e}", d.constraint_residual);
    let _ = writeln!(report, "alternations: {} (converged: {})", d.alt_iterations, d.converged);
    if d.derivatives_estimated {
        report.push_str("derivatives estimated by finite differences\n");
    }
    for w in &d.warnings {
        let _ = writeln!(report, "warning: {w}");
    }
    write_file("identify", &out.join("identify_report.txt"), &report)
}

fn write_lie(model: &SparseModel, chain: &LieChain, out: &Path) -> Result<(), CliError> {
    write_file("lie", &out.join("lie.json"), &to_json(&chain.report()))?;
    let mut text = chain.render();
    if chain.relative_degree == Some(model.n_states()) {
        let sys = model.system().map_err(|e| CliError::lib("lie", e))?;
        let coords = normal_form(&sys, chain).map_err(|e| CliError::lib("lie", e))?;
        text.push_str(&render_normal_form(chain, &coords));
    }
    write_file("lie", &out.join("lie.txt"), &text)
}

fn write_trajectories(runs: &[(Scenario, Dataset, ScenarioSummary)], out: &Path) -> Result<(), CliError> {
    for (sc, d, _) in runs {
        write_file("closedloop", &out.join(format!("trajectory_{}.csv", sc.name)), &trajectory_csv(sc, d))?;
    }
    Ok(())
}

#[derive(Debug, Parser)]
#[command(name = "fbsindy", version, about = "Constrained sparse identification and feedback-linearizing control")]
pub struct Cli {
    /// JSON pipeline config; defaults are used for missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for the excitation phases.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Sparsity threshold.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Comma-separated closed-loop poles, e.g. `-2,-6` or `-1+2i,-1-2i`.
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub poles: Option<String>,
    /// Comma-separated gains a_0,...,a_{r-1}.
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub gains: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the plant and write dataset.csv.
    Simulate,
    /// Identify a model from a dataset CSV.
    Identify { dataset: PathBuf },
    /// Lie chain and relative degree of a model.
    Lie {
        model: PathBuf,
        /// Also require normal-form coordinates (fails with internal dynamics).
        #[arg(long)]
        normal_form: bool,
    },
    /// Synthesize a controller from a model.
    Synthesize { model: PathBuf },
    /// Run the closed-loop scenarios with a controller.
    Closedloop { controller: PathBuf },
    /// Run every stage.
    Pipeline,
    /// Print the default config.
    Defaults,
}

fn parse_list<T: FromStr>(what: &'static str, s: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|t| t.trim().parse::<T>().map_err(|e| CliError::config("args", format!("bad {what} entry {t:?}: {e}"))))
        .collect()
}

impl Cli {
    /// Loads the config and applies command-line overrides.
    pub fn resolve_config(&self) -> Result<PipelineConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        if let Some(l) = self.lambda {
            cfg.regression.lambda = l;
        }
        match (&self.gains, &self.poles) {
            (Some(_), Some(_)) => return Err(CliError::config("args", "give either --gains or --poles, not both")),
            (Some(g), None) => cfg.controller = ControllerConfig { gains: Some(parse_list("gain", g)?), poles: None },
            (None, Some(p)) => {
                let poles: Vec<Complex64> = parse_list("pole", p)?;
                cfg.controller =
                    ControllerConfig { gains: None, poles: Some(poles.iter().map(|c| [c.re, c.im]).collect()) };
            }
            (None, None) => {}
        }
        Ok(cfg)
    }
}

fn out_dir(cfg: &PipelineConfig) -> Result<PathBuf, CliError> {
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| CliError::io("output", &out, e))?;
    Ok(out)
}

fn load_model(path: &Path) -> Result<SparseModel, CliError> {
    SparseModel::load_json(path).map_err(|e| match e {
        RegressionError::Io(io) => CliError::io("load model", path, io),
        other => CliError::lib("load model", other),
    })
}

/// Executes one command, printing a short report to stdout.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    if let Command::Defaults = cli.command {
        print!("{}", to_json(&PipelineConfig::default()));
        return Ok(());
    }
    let cfg = cli.resolve_config()?;
    match &cli.command {
        Command::Defaults => unreachable!(),
        Command::Simulate => {
            let d = simulate_stage(&cfg)?;
            let path = out_dir(&cfg)?.join("dataset.csv");
            d.save_csv(&path).map_err(|e| CliError::lib("simulate", e))?;
            println!("wrote {} ({} rows)", path.display(), d.len());
        }
        Command::Identify { dataset } => {
            cfg.validate()?;
            let d = Dataset::load_csv(dataset).map_err(|e| CliError::lib("load dataset", e))?;
            let model = match identify_stage(&d, &cfg) {
                Ok(m) => m,
                Err(e) => {
                    if let Failure::Lib(LibError::Regression(RegressionError::Infeasible { model, .. })) = &e.failure {
                        eprintln!("partial model:\n{}", model.equations());
                        eprintln!("diagnostics: {}", serde_json::to_string(&model.diagnostics).expect("serializable"));
                    }
                    return Err(e);
                }
            };
            let out = out_dir(&cfg)?;
            write_model(&model, &out)?;
            print!("{}", model.equations());
            if model.diagnostics.derivatives_estimated {
                println!("note: derivatives estimated by finite differences");
            }
            println!("constraint residual: {:e}", model.diagnostics.constraint_residual);
        }
        Command::Lie { model, normal_form: nf } => {
            let model = load_model(model)?;
            let sys = model.system().map_err(|e| CliError::lib("lie", e))?;
            let chain = relative_degree(&sys, cfg.lie_tol, sys.n_states()).map_err(|e| CliError::lib("lie", e))?;
            print!("{}", chain.render());
            let out = out_dir(&cfg)?;
            write_file("lie", &out.join("lie.json"), &to_json(&chain.report()))?;
            chain.require_degree().map_err(|e| CliError::lib("lie", e))?;
            if *nf {
                let coords = normal_form(&sys, &chain).map_err(|e| CliError::lib("lie", e))?;
                print!("{}", render_normal_form(&chain, &coords));
            }
            write_lie(&model, &chain, &out)?;
        }
        Command::Synthesize { model } => {
            let model = load_model(model)?;
            let chain = lie_stage(&model, cfg.lie_tol)?;
            let spec = synthesize_stage(&chain, &cfg.controller.source()?)?;
            let path = out_dir(&cfg)?.join("controller.json");
            write_file("synthesize", &path, &to_json(&spec.to_file()))?;
            println!("u = {}", spec.display_law());
            println!("  = {}", spec.law);
        }
        Command::Closedloop { controller } => {
            let plant = cfg.validate()?;
            let text = fs::read_to_string(controller).map_err(|e| CliError::io("load controller", controller, e))?;
            let file: ControllerFile =
                serde_json::from_str(&text).map_err(|e| CliError::config("load controller", e.to_string()))?;
            let spec = ControllerSpec::from_file(&file).map_err(|e| CliError::lib("load controller", e))?;
            if spec.gains.iter().any(|&a| a <= 0.0) || spec.poles.as_ref().is_some_and(|p| !poles_are_stable(p)) {
                eprintln!("warning: controller gains {:?} are not stabilizing; simulating anyway", spec.gains);
            }
            let runs = closed_loop_stage(&plant, &spec, &cfg)?;
            let out = out_dir(&cfg)?;
            write_trajectories(&runs, &out)?;
            for (_, _, s) in &runs {
                println!(
                    "{}: |x(T)| = {:.3e}, max|y-r| (t>=5) = {}",
                    s.name,
                    s.final_state_norm,
                    s.max_output_error_after_5s.map_or("n/a".into(), |v| format!("{v:.3e}"))
                );
            }
        }
        Command::Pipeline => {
            let out = out_dir(&cfg)?;
            let summary = pipeline(&cfg, &out)?;
            print!("{}", summary.render());
        }
    }
    Ok(())
}

/// Parses process arguments, runs, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let cfg = PipelineConfig::default();
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&s).unwrap(), cfg);
        assert_eq!(serde_json::from_str::<PipelineConfig>("{}").unwrap(), cfg);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"bogus": 1}"#).is_err());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"regression": {"lamda": 0.1}}"#).is_err());
    }

    #[test]
    fn validation_errors_are_config_errors() {
        for cfg in [
            PipelineConfig { steps: 1, ..Default::default() },
            PipelineConfig { dt: 0.0, ..Default::default() },
            PipelineConfig { x0: vec![1.0], ..Default::default() },
            PipelineConfig { controller: ControllerConfig { gains: None, poles: None }, ..Default::default() },
        ] {
            assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
        }
    }

    #[test]
    fn seeded_excitation_is_deterministic() {
        let cfg = PipelineConfig { seed: Some(7), ..Default::default() };
        assert_eq!(cfg.excitation(), cfg.excitation());
        let other = PipelineConfig { seed: Some(8), ..Default::default() };
        assert_ne!(cfg.excitation(), other.excitation());
        assert_eq!(PipelineConfig::default().excitation(), Excitation::default());
    }

    #[test]
    fn custom_system_parses() {
        let s = SystemConfig::Custom {
            f: vec!["x2".into(), "-x1".into()],
            g: vec!["0".into(), "1".into()],
            c: "x1".into(),
        };
        assert_eq!(s.build().unwrap().n_states(), 2);
        let bad = SystemConfig::Custom { f: vec!["x9".into()], g: vec!["1".into()], c: "x1".into() };
        assert_eq!(bad.build().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn cli_overrides() {
        let cli =
            Cli::try_parse_from(["fbsindy", "pipeline", "--lambda", "0.1", "--poles=-2,-6", "--seed", "3"]).unwrap();
        let cfg = cli.resolve_config().unwrap();
        assert_eq!(cfg.regression.lambda, 0.1);
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.controller.poles, Some(vec![[-2.0, 0.0], [-6.0, 0.0]]));
        let cli = Cli::try_parse_from(["fbsindy", "pipeline", "--gains", "1,x"]).unwrap();
        assert_eq!(cli.resolve_config().unwrap_err().exit_code(), 2);
    }
}
