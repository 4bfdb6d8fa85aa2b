//! Config-driven experiment orchestration.
//!
//! One TOML file describes the model, the run parameters, and per-subcommand
//! sections; every stochastic task derives its per-path streams from the
//! single master seed as `stream(master, path_index, role)`, so outputs are
//! byte-identical regardless of execution order and worker count. A run
//! writes CSVs plus a manifest echoing the config and the SHA-256 digest of
//! every output file.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bismut::{
    finite_difference_gradient, gradient_estimate, pathwise_gradient, strong_feller_probe,
    BismutError, GradientEstimate, TestFunctional,
};
use crate::chain::{simulate_chain, ChainMethod};
use crate::density::{
    kernel_density, negative_moment_estimate, nondegeneracy_sample, small_ball_probe, Bandwidth,
    DensityError,
};
use crate::hormander::{uhc_check, BracketVariant, HormanderError, SamplingDomain};
use crate::malliavin::FlowBundle;
use crate::model::{check_derivative_oracles, validate_model, zoo, SwitchingModel};
use crate::paths::{make_grid, simulate_path, PathError};
use crate::rng::{SeedStream, StreamRole};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Chain(#[from] crate::chain::ChainError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Malliavin(#[from] crate::malliavin::MalliavinError),
    #[error(transparent)]
    Bismut(#[from] BismutError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Hormander(#[from] HormanderError),
}

/// Model selection: a built-in fixture plus its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    #[serde(default)]
    pub params: zoo::BuiltinParams,
}

/// Shared run parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub t: f64,
    pub dt: f64,
    pub seed: u64,
    pub x0: Vec<f64>,
    #[serde(default)]
    pub alpha0: usize,
    /// Worker threads; absent = one per logical core.
    #[serde(default)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSpec {
    #[serde(default = "one")]
    pub n_paths: usize,
    /// `holding-times` or `prm`.
    #[serde(default = "default_chain_method")]
    pub method: String,
}

fn one() -> usize {
    1
}

fn default_chain_method() -> String {
    "holding-times".into()
}

/// Test functional by registry name: `constant`, `linear`, `tanh`, `square`,
/// `indicator`, `smoothed-indicator`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionalSpec {
    pub name: String,
    /// Meaning per functional: `constant` value; `linear` weight vector;
    /// `indicator` threshold; `smoothed-indicator` threshold, width.
    #[serde(default)]
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientSpec {
    pub f: FunctionalSpec,
    /// Direction; absent = loop over all canonical axes.
    #[serde(default)]
    pub xi: Option<Vec<f64>>,
    pub n_paths: usize,
    #[serde(default = "default_bump")]
    pub bump: f64,
}

fn default_bump() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrongFellerSpec {
    pub f: FunctionalSpec,
    pub offsets: Vec<f64>,
    pub n_paths: usize,
    #[serde(default)]
    pub direction: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NondegeneracySpec {
    pub n_paths: usize,
    #[serde(default)]
    pub eps_list: Vec<f64>,
    #[serde(default)]
    pub p_list: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HormanderSpec {
    pub j0: usize,
    /// `sigma` or `sigma-prime` (default).
    #[serde(default = "default_variant")]
    pub variant: String,
    pub box_min: Vec<f64>,
    pub box_max: Vec<f64>,
    pub samples: usize,
    pub threshold: f64,
    #[serde(default)]
    pub domain_seed: u64,
}

fn default_variant() -> String {
    "sigma-prime".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensitySpec {
    pub n_paths: usize,
    pub eval_min: f64,
    pub eval_max: f64,
    pub eval_count: usize,
    /// Fixed bandwidth; absent = Silverman rule.
    #[serde(default)]
    pub bandwidth: Option<f64>,
}

/// Full experiment description (one TOML file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub run: RunSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradient: Option<GradientSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strong_feller: Option<StrongFellerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nondegeneracy: Option<NondegeneracySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hormander: Option<HormanderSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<DensitySpec>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, RunnerError> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| RunnerError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Builds the model and checks every statically checkable precondition.
    pub fn validate(&self) -> Result<SwitchingModel, RunnerError> {
        let model = zoo::builtin_model(&self.model.name, &self.model.params)?;
        let violations = validate_model(&model);
        if !violations.is_empty() {
            let msgs: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(RunnerError::BadConfig(msgs.join("; ")));
        }
        if !(self.run.t > 0.0) {
            return Err(RunnerError::BadConfig(format!("t must be positive, got {}", self.run.t)));
        }
        if !(self.run.dt > 0.0 && self.run.dt <= self.run.t) {
            return Err(RunnerError::BadConfig(format!(
                "dt must satisfy 0 < dt <= t, got {}",
                self.run.dt
            )));
        }
        if self.run.x0.len() != model.n() {
            return Err(RunnerError::BadConfig(format!(
                "x0 has length {}, model needs {}",
                self.run.x0.len(),
                model.n()
            )));
        }
        if self.run.alpha0 >= model.m0() {
            return Err(RunnerError::BadConfig(format!(
                "alpha0 = {} out of range (m0 = {})",
                self.run.alpha0,
                model.m0()
            )));
        }
        if let Some(g) = &self.gradient {
            functional_from_spec(&g.f, model.n())?;
            if let Some(xi) = &g.xi {
                if xi.len() != model.n() {
                    return Err(RunnerError::BadConfig("xi has wrong dimension".into()));
                }
            }
            if !(g.bump > 0.0) {
                return Err(RunnerError::BadConfig("bump must be positive".into()));
            }
        }
        if let Some(s) = &self.strong_feller {
            functional_from_spec(&s.f, model.n())?;
            if s.offsets.is_empty() || s.offsets.iter().any(|&o| o <= 0.0) {
                return Err(RunnerError::BadConfig("offsets must be positive".into()));
            }
        }
        if let Some(h) = &self.hormander {
            bracket_variant(&h.variant)?;
            if h.box_min.len() != model.n() || h.box_max.len() != model.n() {
                return Err(RunnerError::BadConfig("hormander box has wrong dimension".into()));
            }
        }
        if let Some(s) = &self.simulate {
            chain_method(&s.method)?;
        }
        Ok(model)
    }

    fn x0(&self) -> DVector<f64> {
        DVector::from_vec(self.run.x0.clone())
    }
}

fn chain_method(name: &str) -> Result<ChainMethod, RunnerError> {
    match name {
        "holding-times" => Ok(ChainMethod::HoldingTimes),
        "prm" => Ok(ChainMethod::Prm),
        other => Err(RunnerError::BadConfig(format!("unknown chain method `{other}`"))),
    }
}

fn bracket_variant(name: &str) -> Result<BracketVariant, RunnerError> {
    match name {
        "sigma" => Ok(BracketVariant::Sigma),
        "sigma-prime" => Ok(BracketVariant::SigmaPrime),
        other => Err(RunnerError::BadConfig(format!("unknown bracket variant `{other}`"))),
    }
}

/// Builds a functional from its registry entry.
pub fn functional_from_spec(spec: &FunctionalSpec, n: usize) -> Result<TestFunctional, RunnerError> {
    let p = &spec.params;
    let arg = |i: usize, default: f64| p.get(i).copied().unwrap_or(default);
    match spec.name.as_str() {
        "constant" => Ok(TestFunctional::constant(arg(0, 1.0))),
        "linear" => {
            let w = if p.is_empty() {
                DVector::from_element(n, 1.0)
            } else if p.len() == n {
                DVector::from_vec(p.clone())
            } else {
                return Err(RunnerError::BadConfig(format!(
                    "linear functional needs {n} weights, got {}",
                    p.len()
                )));
            };
            Ok(TestFunctional::linear(w))
        }
        "tanh" => Ok(TestFunctional::tanh_first()),
        "square" => Ok(TestFunctional::square_first()),
        "indicator" => Ok(TestFunctional::indicator_first(arg(0, 0.0))),
        "smoothed-indicator" => Ok(TestFunctional::smoothed_indicator(arg(0, 0.0), arg(1, 0.1))),
        other => Err(RunnerError::BadConfig(format!("unknown functional `{other}`"))),
    }
}

/// Subcommands understood by [`run_experiment`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Simulate,
    Flows,
    Hormander,
    Gradient,
    StrongFeller,
    Nondegeneracy,
    Density,
    ValidateAll,
}

impl Subcommand {
    pub fn name(&self) -> &'static str {
        match self {
            Subcommand::Simulate => "simulate",
            Subcommand::Flows => "flows",
            Subcommand::Hormander => "hormander",
            Subcommand::Gradient => "gradient",
            Subcommand::StrongFeller => "strong-feller",
            Subcommand::Nondegeneracy => "nondegeneracy",
            Subcommand::Density => "density",
            Subcommand::ValidateAll => "validate-all",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputDigest {
    pub file: String,
    pub sha256: String,
}

/// Record of one run: config echo, code version, seeds, wall clock, and
/// content digests of every output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub master_seed: u64,
    /// Per-path streams are `stream(master_seed, path_index, role)`.
    pub seed_rule: String,
    pub wall_clock_secs: f64,
    pub outputs: Vec<OutputDigest>,
    /// Failed checks (validate-all only; 0 otherwise).
    pub failures: usize,
    pub config: String,
}

fn write_output(
    out_dir: &Path,
    name: &str,
    content: &str,
    outputs: &mut Vec<OutputDigest>,
) -> Result<(), RunnerError> {
    let path = out_dir.join(name);
    std::fs::write(&path, content).map_err(|source| RunnerError::Io {
        path: path.clone(),
        source,
    })?;
    let digest = Sha256::digest(content.as_bytes());
    outputs.push(OutputDigest {
        file: name.to_string(),
        sha256: format!("{digest:x}"),
    });
    Ok(())
}

fn gradient_csv_header() -> &'static str {
    "estimator,component,value,stderr,n_paths,rejected,seed\n"
}

fn gradient_csv_row(est: &GradientEstimate, component: usize) -> String {
    format!(
        "{},{},{},{},{},{},{}\n",
        est.tag, component, est.value, est.stderr, est.n_paths, est.rejected, est.seed
    )
}

/// Executes `cmd` for `config`, writing CSVs and a `manifest.toml` into
/// `out_dir` (created if missing).
pub fn run_experiment(
    config: &ExperimentConfig,
    cmd: Subcommand,
    out_dir: &Path,
) -> Result<RunManifest, RunnerError> {
    let started = Instant::now();
    let model = config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|source| RunnerError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let workers = config
        .run
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| RunnerError::BadConfig(format!("worker pool: {e}")))?;
    let mut outputs = Vec::new();
    let mut failures = 0usize;
    pool.install(|| -> Result<(), RunnerError> {
        match cmd {
            Subcommand::Simulate => run_simulate(config, &model, out_dir, &mut outputs),
            Subcommand::Flows => run_flows(config, &model, out_dir, &mut outputs),
            Subcommand::Hormander => run_hormander(config, &model, out_dir, &mut outputs),
            Subcommand::Gradient => run_gradient(config, &model, out_dir, &mut outputs),
            Subcommand::StrongFeller => run_strong_feller(config, &model, out_dir, &mut outputs),
            Subcommand::Nondegeneracy => run_nondegeneracy(config, &model, out_dir, &mut outputs),
            Subcommand::Density => run_density(config, &model, out_dir, &mut outputs),
            Subcommand::ValidateAll => {
                failures = run_validate_all(config, out_dir, &mut outputs)?;
                Ok(())
            }
        }
    })?;
    let manifest = RunManifest {
        subcommand: cmd.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        master_seed: config.run.seed,
        seed_rule: "chacha12 stream(master_seed, 2*path_index + role)".to_string(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        outputs,
        failures,
        config: config.to_toml(),
    };
    let manifest_text = toml::to_string_pretty(&manifest).expect("manifest serializes");
    let manifest_path = out_dir.join("manifest.toml");
    std::fs::write(&manifest_path, manifest_text).map_err(|source| RunnerError::Io {
        path: manifest_path,
        source,
    })?;
    Ok(manifest)
}

fn seeds_of(config: &ExperimentConfig) -> SeedStream {
    SeedStream::new(config.run.seed)
}

fn run_simulate(
    config: &ExperimentConfig,
    model: &SwitchingModel,
    out_dir: &Path,
    outputs: &mut Vec<OutputDigest>,
) -> Result<(), RunnerError> {
    let spec = config.simulate.clone().unwrap_or(SimulateSpec {
        n_paths: 1,
        method: default_chain_method(),
    });
    let method = chain_method(&spec.method)?;
    let seeds = seeds_of(config);
    for p in 0..spec.n_paths as u64 {
        let mut crng = seeds.rng(p, StreamRole::Chain);
        let mut nrng = seeds.rng(p, StreamRole::Noise);
        let chain = simulate_chain(model.generator(), config.run.alpha0, config.run.t, &mut crng, method)?;
        let grid = make_grid(config.run.t, config.run.dt, &chain)?;
        let path = simulate_path(model, &grid, &config.x0(), &mut nrng)?;
        write_output(out_dir, &format!("chain_{p}.csv"), &chain.to_csv(), outputs)?;
        write_output(out_dir, &format!("path_{p}.csv"), &path.to_csv(), outputs)?;
    }
    Ok(())
}

fn run_flows(
    config: &ExperimentConfig,
    model: &SwitchingModel,
    out_dir: &Path,
    outputs: &mut Vec<OutputDigest>,
) -> Result<(), RunnerError> {
    let seeds = seeds_of(config);
    let mut crng = seeds.rng(0, StreamRole::Chain);
    let mut nrng = seeds.rng(0, StreamRole::Noise);
    let chain = simulate_chain(
        model.generator(),
        config.run.alpha0,
        config.run.t,
        &mut crng,
        ChainMethod::HoldingTimes,
    )?;
    let grid = make_grid(config.run.t, config.run.dt, &chain)?;
    let path = simulate_path(model, &grid, &config.x0(), &mut nrng)?;
    let flows = FlowBundle::compute(model, &path);
    let mut csv = String::from("t,j,jinv\n");
    for (k, t) in grid.nodes.iter().enumerate() {
        let j: Vec<String> = flows.j[k].iter().map(|v| v.to_string()).collect();
        let jinv: Vec<String> = flows.jinv[k].iter().map(|v| v.to_string()).collect();
        csv.push_str(&format!("{t},{},{}\n", j.join(";"), jinv.join(";")));
    }
    csv.push_str(&format!("# max product defect: {}\n", flows.max_product_defect()));
    write_output(out_dir, "flows.csv", &csv, outputs)
}

fn run_hormander(
    config: &ExperimentConfig,
    model: &SwitchingModel,
    out_dir: &Path,
    outputs: &mut Vec<OutputDigest>,
) -> Result<(), RunnerError> {
    let spec = config
        .hormander
        .as_ref()
        .ok_or_else(|| RunnerError::BadConfig("missing [hormander] section".into()))?;
    let domain = SamplingDomain::Box {
        min: spec.box_min.clone(),
        max: spec.box_max.clone(),
        count: spec.samples,
        seed: spec.domain_seed,
    };
    let report = uhc_check(model, spec.j0, bracket_variant(&spec.variant)?, &domain, spec.threshold)?;
    write_output(out_dir, "uhc.csv", &report.to_csv(), outputs)
}

fn run_gradient(
    config: &ExperimentConfig,
    model: &SwitchingModel,
    out_dir: &Path,
    outputs: &mut Vec<OutputDigest>,
) -> Result<(), RunnerError> {
    let spec = config
        .gradient
        .as_ref()
        .ok_or_else(|| RunnerError::BadConfig("missing [gradient] section".into()))?;
    let f = functional_from_spec(&spec.f, model.n())?;
    let seeds = seeds_of(config);
    let x0 = config.x0();
    let directions: Vec<DVector<f64>> = match &spec.xi {
        Some(v) => {
            let mut xi = DVector::from_vec(v.clone());
            let norm = xi.norm();
            if norm == 0.0 {
                return Err(RunnerError::BadConfig("xi must be nonzero".into()));
            }
            xi /= norm;
            vec![xi]
        }
        None => (0..model.n())
            .map(|i| {
                let mut e = DVector::zeros(model.n());
                e[i] = 1.0;
                e
            })
            .collect(),
    };
    let mut csv = String::from(gradient_csv_header());
    for (component, xi) in directions.iter().enumerate() {
        let bis = gradient_estimate(
            model, &x0, config.run.alpha0, config.run.t, &f, xi, spec.n_paths, config.run.dt, seeds,
        )?;
        csv.push_str(&gradient_csv_row(&bis, component));
        if f.grad.is_some() {
            let pw = pathwise_gradient(
                model, &x0, config.run.alpha0, config.run.t, &f, xi, spec.n_paths, config.run.dt,
                seeds,
            )?;
            csv.push_str(&gradient_csv_row(&pw, component));
        }
        let fd = finite_difference_gradient(
            model,
            &x0,
            config.run.alpha0,
            config.run.t,
            &f,
            xi,
            spec.bump,
            spec.n_paths,
            config.run.dt,
            seeds,
        )?;
        csv.push_str(&gradient_csv_row(&fd, component));
    }
    write_output(out_dir, "gradient.csv", &csv, outputs)
}

fn run_strong_feller(
    config: &ExperimentConfig,
    model: &SwitchingModel,
    out_dir: &Path,
    outputs: &mut Vec<OutputDigest>,
) -> Result<(), RunnerError> {
    let spec = config
        .strong_feller
        .as_ref()
        .ok_or_else(|| RunnerError::BadConfig("missing [strong_feller] section".into()))?;
    let f = functional_from_spec(&spec.f, model.n())?;
    let direction = match &spec.direction {
        Some(v) => DVector::from_vec(v.clone()),
        None => {
            let mut e = DVector::zeros(model.n());
            e[0] = 1.0;
            e
        }
    };
    let table = strong_feller_probe(
        model,
        &config.x0(),
        config.run.alpha0,
        config.run.t,
        &f,
        &direction,
        &spec.offsets,
        spec.n_paths,
        config.run.dt,
        seeds_of(config),
    )?;
    let mut csv = String::from("offset,abs_difference,stderr\n");
    for row in &table.rows {
        csv.push_str(&format!("{},{},{}\n", row.offset, row.diff, row.stderr));
    }
    csv.push_str(&format!("# least-squares slope through origin: {}\n", table.slope));
    write_output(out_dir, "strong_feller.csv", &csv, outputs)
}

fn run_nondegeneracy(
    config: &ExperimentConfig,
    model: &SwitchingModel,
    out_dir: &Path,
    outputs: &mut Vec<OutputDigest>,
) -> Result<(), RunnerError> {
    let spec = config
        .nondegeneracy
        .as_ref()
        .ok_or_else(|| RunnerError::BadConfig("missing [nondegeneracy] section".into()))?;
    let sample = nondegeneracy_sample(
        model,
        &config.x0(),
        config.run.alpha0,
        config.run.t,
        spec.n_paths,
        config.run.dt,
        seeds_of(config),
    )?;
    let header = format!(
        "# model={} t={} dt={} n_paths={} seed={}\n",
        config.model.name, config.run.t, config.run.dt, spec.n_paths, config.run.seed
    );
    let mut csv = header.clone();
    csv.push_str("path,lambda_min_c,det_c,lambda_min_m,trace_c\n");
    for p in 0..sample.n_paths {
        csv.push_str(&format!(
            "{p},{},{},{},{}\n",
            sample.lambda_min_c[p], sample.det_c[p], sample.lambda_min_m[p], sample.trace_c[p]
        ));
    }
    write_output(out_dir, "nondegeneracy.csv", &csv, outputs)?;
    if !spec.eps_list.is_empty() {
        let rows = small_ball_probe(&sample, &spec.eps_list)?;
        let mut csv = header.clone();
        csv.push_str("epsilon,probability,stderr\n");
        for r in &rows {
            csv.push_str(&format!("{},{},{}\n", r.epsilon, r.probability, r.stderr));
        }
        write_output(out_dir, "small_ball.csv", &csv, outputs)?;
    }
    if !spec.p_list.is_empty() {
        let rows = negative_moment_estimate(&sample, &spec.p_list)?;
        let mut csv = header;
        csv.push_str("p,value,tail_dominated\n");
        for r in &rows {
            csv.push_str(&format!("{},{},{}\n", r.p, r.value, r.tail_dominated));
        }
        write_output(out_dir, "negative_moments.csv", &csv, outputs)?;
    }
    Ok(())
}

fn run_density(
    config: &ExperimentConfig,
    model: &SwitchingModel,
    out_dir: &Path,
    outputs: &mut Vec<OutputDigest>,
) -> Result<(), RunnerError> {
    let spec = config
        .density
        .as_ref()
        .ok_or_else(|| RunnerError::BadConfig("missing [density] section".into()))?;
    let seeds = seeds_of(config);
    let x0 = config.x0();
    // terminal first-coordinate samples (marginal KDE for n > 1)
    let samples: Vec<DVector<f64>> = (0..spec.n_paths as u64)
        .map(|p| -> Result<DVector<f64>, RunnerError> {
            let mut crng = seeds.rng(p, StreamRole::Chain);
            let mut nrng = seeds.rng(p, StreamRole::Noise);
            let chain = simulate_chain(
                model.generator(),
                config.run.alpha0,
                config.run.t,
                &mut crng,
                ChainMethod::HoldingTimes,
            )?;
            let grid = make_grid(config.run.t, config.run.dt, &chain)?;
            let path = simulate_path(model, &grid, &x0, &mut nrng)?;
            Ok(DVector::from_element(1, path.terminal()[0]))
        })
        .collect::<Result<_, _>>()?;
    let eval: Vec<DVector<f64>> = (0..spec.eval_count)
        .map(|i| {
            let frac = if spec.eval_count > 1 {
                i as f64 / (spec.eval_count - 1) as f64
            } else {
                0.5
            };
            DVector::from_element(1, spec.eval_min + frac * (spec.eval_max - spec.eval_min))
        })
        .collect();
    let bandwidth = match spec.bandwidth {
        Some(h) => Bandwidth::Fixed(h),
        None => Bandwidth::Silverman,
    };
    let dens = kernel_density(&samples, bandwidth, &eval)?;
    let mut csv = format!(
        "# model={} t={} dt={} n_paths={} seed={}\n",
        config.model.name, config.run.t, config.run.dt, spec.n_paths, config.run.seed
    );
    csv.push_str("x,density\n");
    for (z, d) in eval.iter().zip(&dens) {
        csv.push_str(&format!("{},{}\n", z[0], d));
    }
    write_output(out_dir, "density.csv", &csv, outputs)
}

/// Runs the cross-module invariant suite over the built-in zoo; returns the
/// number of failed checks.
fn run_validate_all(
    config: &ExperimentConfig,
    out_dir: &Path,
    outputs: &mut Vec<OutputDigest>,
) -> Result<usize, RunnerError> {
    use rand::Rng;
    let mut rows: Vec<(String, String, bool)> = Vec::new();
    let seeds = seeds_of(config);
    for name in zoo::ALL_BUILTINS {
        let model = zoo::builtin_model(name, &zoo::BuiltinParams::default())?;
        rows.push((
            name.to_string(),
            "model-invariants".into(),
            validate_model(&model).is_empty(),
        ));
        let mut rng = seeds.rng(0, StreamRole::Noise);
        let probes: Vec<(DVector<f64>, usize)> = (0..50)
            .map(|_| {
                let x = DVector::from_fn(model.n(), |_, _| rng.random_range(-2.0..2.0));
                let a = rng.random_range(0..model.m0());
                (x, a)
            })
            .collect();
        let oracle_ok = check_derivative_oracles(&model, &probes, 1e-6)
            .iter()
            .all(|c| c.max_rel_error <= 1e-5);
        rows.push((name.to_string(), "derivative-oracles".into(), oracle_ok));
        // flow product defect on a handful of paths
        let mut defect_ok = true;
        for p in 0..5u64 {
            let mut crng = seeds.rng(p, StreamRole::Chain);
            let mut nrng = seeds.rng(p, StreamRole::Noise);
            let chain =
                simulate_chain(model.generator(), 0, 1.0, &mut crng, ChainMethod::HoldingTimes)?;
            let grid = make_grid(1.0, 1e-3, &chain)?;
            let path = simulate_path(&model, &grid, &DVector::from_element(model.n(), 1.0), &mut nrng)?;
            let flows = FlowBundle::compute(&model, &path);
            defect_ok &= flows.max_product_defect() <= 0.05;
        }
        rows.push((name.to_string(), "flow-product-defect".into(), defect_ok));
        // UHC expectations per fixture
        let domain = SamplingDomain::Box {
            min: vec![-2.0; model.n()],
            max: vec![2.0; model.n()],
            count: 25,
            seed: 1,
        };
        let expected_pass = match name {
            "degenerate-2d" => false,
            _ => true,
        };
        let j0 = if name == "hypoelliptic-2d" { 1 } else { 0 };
        let threshold = 1e-9;
        let report = uhc_check(&model, j0, BracketVariant::SigmaPrime, &domain, threshold)?;
        rows.push((
            name.to_string(),
            format!("uhc-j0-{j0}"),
            report.pass == expected_pass,
        ));
    }
    let mut csv = String::from("model,check,pass\n");
    let mut failures = 0usize;
    for (model, check, pass) in &rows {
        if !pass {
            failures += 1;
        }
        csv.push_str(&format!("{model},{check},{pass}\n"));
    }
    write_output(out_dir, "validate.csv", &csv, outputs)?;
    Ok(failures)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_config() -> String {
        r#"
[model]
name = "switching-ou"

[run]
t = 1.0
dt = 0.01
seed = 42
x0 = [1.0]
alpha0 = 0
workers = 2

[simulate]
n_paths = 1
"#
        .to_string()
    }

    #[test]
    fn config_round_trip_is_identity() {
        let c1 = ExperimentConfig::from_toml(&minimal_config()).unwrap();
        let c2 = ExperimentConfig::from_toml(&c1.to_toml()).unwrap();
        assert_eq!(c1, c2);
    }

    #[test]
    fn unknown_key_names_the_key() {
        let bad = minimal_config().replace("[simulate]", "[simulate]\nbogus_key = 1");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }

    #[test]
    fn bad_dt_is_rejected_at_parse_time() {
        let bad = minimal_config().replace("dt = 0.01", "dt = -0.5");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn wrong_x0_dimension_is_rejected() {
        let bad = minimal_config().replace("x0 = [1.0]", "x0 = [1.0, 2.0]");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn unknown_functional_is_rejected() {
        let bad = minimal_config()
            + r#"
[gradient]
n_paths = 10
[gradient.f]
name = "no-such-f"
"#;
        let err = ExperimentConfig::from_toml(&bad).unwrap_err();
        assert!(err.to_string().contains("no-such-f"), "{err}");
    }

    #[test]
    fn simulate_run_is_reproducible_byte_for_byte() {
        let config = ExperimentConfig::from_toml(&minimal_config()).unwrap();
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let m1 = run_experiment(&config, Subcommand::Simulate, dir1.path()).unwrap();
        let m2 = run_experiment(&config, Subcommand::Simulate, dir2.path()).unwrap();
        assert_eq!(m1.outputs, m2.outputs);
        assert!(!m1.outputs.is_empty());
        for out in &m1.outputs {
            let b1 = std::fs::read(dir1.path().join(&out.file)).unwrap();
            let b2 = std::fs::read(dir2.path().join(&out.file)).unwrap();
            assert_eq!(b1, b2, "{}", out.file);
        }
    }

    #[test]
    fn gradient_outputs_do_not_depend_on_worker_count() {
        let base = minimal_config()
            + r#"
[gradient]
n_paths = 200
xi = [1.0]
[gradient.f]
name = "tanh"
"#;
        let run = |workers: &str| {
            let text = base.replace("workers = 2", workers);
            let config = ExperimentConfig::from_toml(&text).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let manifest = run_experiment(&config, Subcommand::Gradient, dir.path()).unwrap();
            manifest.outputs
        };
        assert_eq!(run("workers = 1"), run("workers = 4"));
    }

    #[test]
    fn validate_all_passes_on_the_zoo() {
        let config = ExperimentConfig::from_toml(&minimal_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = run_experiment(&config, Subcommand::ValidateAll, dir.path()).unwrap();
        assert_eq!(manifest.failures, 0);
    }

    #[test]
    fn hormander_subcommand_writes_report() {
        let text = minimal_config().replace("name = \"switching-ou\"", "name = \"hypoelliptic-2d\"")
            .replace("x0 = [1.0]", "x0 = [1.0, 0.0]")
            + r#"
[hormander]
j0 = 1
box_min = [-2.0, -2.0]
box_max = [2.0, 2.0]
samples = 10
threshold = 1e-6
"#;
        let config = ExperimentConfig::from_toml(&text).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = run_experiment(&config, Subcommand::Hormander, dir.path()).unwrap();
        assert!(manifest.outputs.iter().any(|o| o.file == "uhc.csv"));
        let csv = std::fs::read_to_string(dir.path().join("uhc.csv")).unwrap();
        assert!(csv.contains("passes on sampled domain"), "{csv}");
    }
}
