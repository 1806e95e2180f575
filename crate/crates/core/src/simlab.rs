//! Declarative Monte-Carlo scenarios: bias, RMSE and interval coverage of the
//! MHDE and the weighted MLE under the supported designs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::designs::{
    calibrate, draw_sample, normal_scores, simulate_population_with_scores, DesignKind, DesignSpec, SurveySample,
};
use crate::error::{Error, Result};
use crate::families::{Family, Theta};
use crate::inference::{confint, mle_covariance, sandwich, wald_interval, PlugIn};
use crate::kde::{BandwidthRule, Kernel, KernelKind};
use crate::mhde::{fit, InitStrategy, MhdeOptions};
use crate::robustness::{contaminate, ContaminationSpec, Leverage, LeverageRule, Mechanism};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable bounding the replicate thread pool (0 or unset: all cores).
pub const THREADS_ENV: &str = "SURVEY_MHDE_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Mhde,
    Mle,
}

impl Estimator {
    pub fn id(&self) -> &'static str {
        match self {
            Estimator::Mhde => "mhde",
            Estimator::Mle => "mle",
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mhde" => Ok(Estimator::Mhde),
            "mle" => Ok(Estimator::Mle),
            other => Err(Error::InvalidInput(format!("unknown estimator `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub theta: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    pub kind: DesignKind,
    pub alpha: f64,
    #[serde(default)]
    pub rho_yz: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_truncation_cap: Option<f64>,
    pub n_grid: Vec<usize>,
    /// Population sizes used with `--full`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_n_grid: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContaminationConfig {
    pub epsilon: f64,
    #[serde(default)]
    pub mechanism: Mechanism,
    /// Contamination location; give this or `quantile`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<f64>,
    /// Location as the model quantile G⁻¹(p).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantile: Option<f64>,
    #[serde(default)]
    pub leverage: Leverage,
    #[serde(default)]
    pub leverage_rule: LeverageRule,
}

/// `"auto"` (the estimator default), `"silverman"`, or a positive number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BandwidthSetting {
    Named(String),
    Value(f64),
}

impl Default for BandwidthSetting {
    fn default() -> Self {
        BandwidthSetting::Named("auto".into())
    }
}

impl BandwidthSetting {
    pub fn rule(&self) -> Result<BandwidthRule> {
        match self {
            BandwidthSetting::Named(s) if s == "auto" => Ok(BandwidthRule::Undersmoothed),
            BandwidthSetting::Named(s) if s == "silverman" => Ok(BandwidthRule::Silverman),
            BandwidthSetting::Value(h) if *h > 0.0 && h.is_finite() => Ok(BandwidthRule::Fixed(*h)),
            other => Err(Error::Config {
                key: "kde.bandwidth".into(),
                message: format!("expected \"auto\", \"silverman\" or a positive number, got {other:?}"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct KdeConfig {
    #[serde(default)]
    pub kernel: KernelKind,
    #[serde(default)]
    pub bandwidth: BandwidthSetting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadConfig {
    #[serde(default = "default_subdivisions")]
    pub subdivisions: usize,
    /// Gaussian kernel support radius in bandwidths.
    #[serde(default = "default_padding")]
    pub support_padding: f64,
}

fn default_subdivisions() -> usize {
    200
}

fn default_padding() -> f64 {
    8.0
}

impl Default for QuadConfig {
    fn default() -> Self {
        QuadConfig {
            subdivisions: default_subdivisions(),
            support_padding: default_padding(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MhdeConfig {
    pub nm_tol: f64,
    pub nm_max_iter: usize,
    pub restarts: usize,
    pub init: InitStrategy,
    pub polish: bool,
}

impl Default for MhdeConfig {
    fn default() -> Self {
        let d = MhdeOptions::default();
        MhdeConfig {
            nm_tol: d.nm_tol,
            nm_max_iter: d.nm_max_iter,
            restarts: d.restarts,
            init: d.init,
            polish: d.polish,
        }
    }
}

/// A simulation scenario; the TOML schema mirrors this struct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub replications: usize,
    pub base_seed: u64,
    #[serde(default = "default_level")]
    pub ci_level: f64,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<Estimator>,
    /// Five-cluster ratio calibration on the size variable.
    #[serde(default)]
    pub calibration: bool,
    #[serde(default)]
    pub keep_replicates: bool,
    pub model: ModelConfig,
    pub design: DesignConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contamination: Option<ContaminationConfig>,
    #[serde(default)]
    pub kde: KdeConfig,
    #[serde(default)]
    pub quad: QuadConfig,
    #[serde(default)]
    pub mhde: MhdeConfig,
}

fn default_level() -> f64 {
    0.95
}

fn default_estimators() -> Vec<Estimator> {
    vec![Estimator::Mhde, Estimator::Mle]
}

fn config_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config {
                key: if path == "." { "<root>".into() } else { path },
                message: e.into_inner().message().trim().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Fully resolved TOML, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Swap in the full population grid when requested.
    pub fn resolved(&self, full: bool) -> Result<Self> {
        let mut out = self.clone();
        if full {
            out.design.n_grid = self
                .design
                .full_n_grid
                .clone()
                .ok_or_else(|| config_err("design.full_n_grid", "`--full` needs a full grid"))?;
            out.validate()?;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config_err(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        if self.replications < 2 {
            return Err(config_err("replications", "need at least 2"));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(config_err("ci_level", "must lie in (0, 1)"));
        }
        if self.estimators.is_empty() {
            return Err(config_err("estimators", "list at least one estimator"));
        }
        let mut seen = self.estimators.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.estimators.len() {
            return Err(config_err("estimators", "duplicate estimator"));
        }
        self.theta0()?;
        let d = &self.design;
        if d.n_grid.is_empty() || d.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err("design.n_grid", "must be non-empty and strictly ascending"));
        }
        if let Some(g) = &d.full_n_grid {
            if g.is_empty() || g.windows(2).any(|w| w[0] >= w[1]) {
                return Err(config_err(
                    "design.full_n_grid",
                    "must be non-empty and strictly ascending",
                ));
            }
        }
        for &n in &d.n_grid {
            self.design_spec(n)
                .validate()
                .map_err(|e| config_err("design", e.to_string()))?;
        }
        if let Some(c) = &self.contamination {
            if c.location.is_some() == c.quantile.is_some() {
                return Err(config_err(
                    "contamination",
                    "give exactly one of `location` and `quantile`",
                ));
            }
            if let Some(p) = c.quantile {
                if !(p > 0.0 && p < 1.0) {
                    return Err(config_err("contamination.quantile", "must lie in (0, 1)"));
                }
            }
            self.contamination_spec()?
                .expect("present")
                .validate()
                .map_err(|e| config_err("contamination", e.to_string()))?;
            if c.leverage == Leverage::HighLeverage && d.kind != DesignKind::PoissonPps {
                // SRS samples carry π too, but constant π makes leverage meaningless.
                return Err(config_err("contamination.leverage", "high leverage needs a PPS design"));
            }
        }
        self.kde.bandwidth.rule()?;
        if self.quad.subdivisions == 0 {
            return Err(config_err("quad.subdivisions", "must be at least 1"));
        }
        if !(self.quad.support_padding >= 1.0) {
            return Err(config_err("quad.support_padding", "must be at least 1"));
        }
        self.mhde_options().validate()?;
        Ok(())
    }

    pub fn theta0(&self) -> Result<Theta> {
        Theta::new(self.model.family, self.model.theta).map_err(|e| config_err("model.theta", e.to_string()))
    }

    pub fn design_spec(&self, population_size: usize) -> DesignSpec {
        DesignSpec {
            kind: self.design.kind,
            population_size,
            sampling_fraction: self.design.alpha,
            rho_yz: self.design.rho_yz,
            weight_truncation_cap: self.design.weight_truncation_cap,
        }
    }

    pub fn contamination_spec(&self) -> Result<Option<ContaminationSpec>> {
        let Some(c) = &self.contamination else { return Ok(None) };
        let theta = self.theta0()?;
        let location = match (c.location, c.quantile) {
            (Some(z), _) => z,
            (None, Some(p)) => self.model.family.quantile(&theta, p),
            (None, None) => return Err(config_err("contamination", "missing location")),
        };
        Ok(Some(ContaminationSpec {
            epsilon: c.epsilon,
            mechanism: c.mechanism,
            location,
            leverage: c.leverage,
            leverage_rule: c.leverage_rule,
        }))
    }

    pub fn mhde_options(&self) -> MhdeOptions {
        let mut kernel = Kernel::of(self.kde.kernel);
        if self.kde.kernel == KernelKind::Gaussian {
            kernel.effective_radius = self.quad.support_padding;
        }
        MhdeOptions {
            grid_subdivisions: self.quad.subdivisions,
            nm_tol: self.mhde.nm_tol,
            nm_max_iter: self.mhde.nm_max_iter,
            restarts: self.mhde.restarts,
            init: self.mhde.init,
            kernel,
            bandwidth: self.kde.bandwidth.rule().unwrap_or_default(),
            polish: self.mhde.polish,
            ..MhdeOptions::default()
        }
    }
}

/// Random-stream stages within a replicate.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stage {
    Population = 0,
    Sample = 1,
    Contamination = 2,
    Clusters = 3,
}

/// Independent ChaCha stream for (base seed, population-grid index,
/// replicate, stage).
pub fn stream(base_seed: u64, grid_index: usize, replicate: usize, stage: Stage) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&base_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&(grid_index as u64).to_le_bytes());
    seed[16..24].copy_from_slice(&(replicate as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stage as u64);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub population_size: usize,
    pub replicate: usize,
    pub estimator: Estimator,
    pub sample_size: usize,
    pub theta: Option<[f64; 2]>,
    pub lower: Option<[f64; 2]>,
    pub upper: Option<[f64; 2]>,
    pub error: Option<String>,
}

/// One (population size, estimator, parameter) summary row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub scenario: String,
    pub design: DesignKind,
    pub population_size: usize,
    pub sample_size: usize,
    pub estimator: Estimator,
    pub parameter: String,
    pub theta0: f64,
    pub replicates: usize,
    pub failures: usize,
    pub rel_bias: f64,
    pub rel_rmse: f64,
    pub coverage: Option<f64>,
    pub avg_rel_ci_width: Option<f64>,
    /// More than 10% of fits failed.
    pub unreliable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SimResult {
    pub cells: Vec<Cell>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub records: Vec<ReplicateRecord>,
}

impl SimResult {
    pub fn cell(&self, population_size: usize, estimator: Estimator, parameter: usize) -> Option<&Cell> {
        self.cells
            .iter()
            .filter(|c| c.population_size == population_size && c.estimator == estimator)
            .nth(parameter)
    }
}

/// Summaries per the relative bias and RMSE definitions:
/// RelBias = mean(θ̂ − θ₀)/θ₀, RelRMSE = √mean((θ̂ − θ₀)²)/θ₀ over
/// successful replicates.
#[allow(clippy::too_many_arguments)]
pub fn aggregate(
    scenario: &str,
    design: DesignKind,
    family: Family,
    theta0: &Theta,
    population_size: usize,
    sample_size: usize,
    estimator: Estimator,
    records: &[ReplicateRecord],
) -> Vec<Cell> {
    let names = family.param_names();
    let ok: Vec<&ReplicateRecord> = records.iter().filter(|r| r.theta.is_some()).collect();
    let failures = records.len() - ok.len();
    (0..2)
        .map(|j| {
            let t0 = theta0[j];
            let n = ok.len() as f64;
            let errs: Vec<f64> = ok.iter().map(|r| r.theta.expect("filtered")[j] - t0).collect();
            let bias = errs.iter().sum::<f64>() / n / t0;
            let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / n).sqrt() / t0.abs();
            let with_ci: Vec<&&ReplicateRecord> = ok.iter().filter(|r| r.lower.is_some()).collect();
            let (coverage, width) = if with_ci.is_empty() {
                (None, None)
            } else {
                let m = with_ci.len() as f64;
                let hits = with_ci
                    .iter()
                    .filter(|r| r.lower.expect("ci")[j] <= t0 && t0 <= r.upper.expect("ci")[j])
                    .count();
                let w = with_ci
                    .iter()
                    .map(|r| (r.upper.expect("ci")[j] - r.lower.expect("ci")[j]) / r.theta.expect("ok")[j].abs())
                    .sum::<f64>()
                    / m;
                (Some(hits as f64 / m), Some(w))
            };
            Cell {
                scenario: scenario.to_string(),
                design,
                population_size,
                sample_size,
                estimator,
                parameter: names[j].to_string(),
                theta0: t0,
                replicates: ok.len(),
                failures,
                rel_bias: bias,
                rel_rmse: rmse,
                coverage,
                avg_rel_ci_width: width,
                unreliable: failures * 10 > records.len(),
            }
        })
        .collect()
}

struct Plan {
    family: Family,
    theta0: Theta,
    opts: MhdeOptions,
    contamination: Option<ContaminationSpec>,
}

fn draw_replicate_sample(
    cfg: &ScenarioConfig,
    plan: &Plan,
    grid_index: usize,
    population_size: usize,
    replicate: usize,
    scores: Option<&[f64]>,
) -> Result<SurveySample> {
    let seed = cfg.base_seed;
    let design = cfg.design_spec(population_size);
    let mut rng = stream(seed, grid_index, replicate, Stage::Population);
    let mut pop = simulate_population_with_scores(
        plan.family,
        &plan.theta0,
        population_size,
        design.rho_yz,
        scores,
        &mut rng,
    )?;
    if cfg.calibration {
        pop.assign_clusters(5, &mut stream(seed, grid_index, replicate, Stage::Clusters));
    }
    let mut sample = draw_sample(&pop, &design, &mut stream(seed, grid_index, replicate, Stage::Sample))?;
    if let Some(spec) = &plan.contamination {
        let mut rng = stream(seed, grid_index, replicate, Stage::Contamination);
        sample = contaminate(&sample, spec, plan.family, &plan.theta0, &mut rng)?;
    }
    if cfg.calibration {
        let totals = pop.cluster_totals().expect("clusters assigned");
        let x = sample.x.clone().expect("size variable carried");
        let c = sample.cluster.clone().expect("clusters carried");
        sample = calibrate(&sample, &totals, &x, &c)?;
    }
    Ok(sample)
}

fn fit_one(
    estimator: Estimator,
    sample: &SurveySample,
    plan: &Plan,
    level: f64,
) -> Result<(Theta, [f64; 2], [f64; 2])> {
    match estimator {
        Estimator::Mhde => {
            let f = fit(sample, plan.family, &plan.opts)?;
            let parts = sandwich(&f, sample, PlugIn::Kde)?;
            let ci = confint(&f, &parts, level)?;
            Ok((f.theta_hat, ci.lower, ci.upper))
        }
        Estimator::Mle => {
            let th = sample.weighted_mle(plan.family)?;
            let cov = mle_covariance(plan.family, &th, sample)?;
            let ci = wald_interval(&th, &cov, level)?;
            Ok((th, ci.lower, ci.upper))
        }
    }
}

fn run_replicate(
    cfg: &ScenarioConfig,
    plan: &Plan,
    grid_index: usize,
    population_size: usize,
    replicate: usize,
    scores: Option<&[f64]>,
) -> Vec<ReplicateRecord> {
    let sample = draw_replicate_sample(cfg, plan, grid_index, population_size, replicate, scores);
    cfg.estimators
        .iter()
        .map(|&est| {
            let base = ReplicateRecord {
                population_size,
                replicate,
                estimator: est,
                sample_size: sample.as_ref().map_or(0, |s| s.len()),
                theta: None,
                lower: None,
                upper: None,
                error: None,
            };
            let outcome = sample
                .as_ref()
                .map_err(|e| e.clone())
                .and_then(|s| fit_one(est, s, plan, cfg.ci_level));
            match outcome {
                Ok((th, lo, hi)) => ReplicateRecord {
                    theta: Some(th.values()),
                    lower: Some(lo),
                    upper: Some(hi),
                    ..base
                },
                Err(e) => ReplicateRecord {
                    error: Some(e.to_string()),
                    ..base
                },
            }
        })
        .collect()
}

/// Thread pool sized by [`THREADS_ENV`].
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))
}

/// Run every replicate at every population size. Replicates run in parallel;
/// results are collected in replicate order, so the output does not depend
/// on scheduling.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<SimResult> {
    run_scenario_in(cfg, &thread_pool()?)
}

pub fn run_scenario_in(cfg: &ScenarioConfig, pool: &rayon::ThreadPool) -> Result<SimResult> {
    cfg.validate()?;
    let plan = Plan {
        family: cfg.model.family,
        theta0: cfg.theta0()?,
        opts: cfg.mhde_options(),
        contamination: cfg.contamination_spec()?,
    };
    let mut result = SimResult::default();
    for (gi, &big_n) in cfg.design.n_grid.iter().enumerate() {
        // Rank scores are shared by all replicates at this population size.
        let scores = (cfg.design.rho_yz > 0.0 && big_n <= 20_000_000).then(|| normal_scores(big_n));
        let records: Vec<ReplicateRecord> = pool.install(|| {
            (0..cfg.replications)
                .into_par_iter()
                .map(|r| run_replicate(cfg, &plan, gi, big_n, r, scores.as_deref()))
                .collect::<Vec<_>>()
                .into_iter()
                .flatten()
                .collect()
        });
        let n = cfg.design_spec(big_n).sample_size();
        for &est in &cfg.estimators {
            let mine: Vec<ReplicateRecord> = records.iter().filter(|r| r.estimator == est).cloned().collect();
            result.cells.extend(aggregate(
                &cfg.name,
                cfg.design.kind,
                plan.family,
                &plan.theta0,
                big_n,
                n,
                est,
                &mine,
            ));
        }
        if cfg.keep_replicates {
            result.records.extend(records);
        }
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub scheme: String,
    pub population_size: usize,
    pub sample_size: usize,
    pub parameter: String,
    pub coverage: f64,
    pub avg_rel_ci_width: f64,
    pub replicates: usize,
}

/// MHDE interval coverage per population size and parameter.
pub fn coverage_study(cfg: &ScenarioConfig) -> Result<(SimResult, Vec<CoverageRow>)> {
    let mut c = cfg.clone();
    c.estimators = vec![Estimator::Mhde];
    let result = run_scenario(&c)?;
    let rows = coverage_rows(&result);
    Ok((result, rows))
}

pub fn coverage_rows(result: &SimResult) -> Vec<CoverageRow> {
    result
        .cells
        .iter()
        .filter(|c| c.estimator == Estimator::Mhde && c.coverage.is_some())
        .map(|c| CoverageRow {
            scheme: c.design.label().to_string(),
            population_size: c.population_size,
            sample_size: c.sample_size,
            parameter: c.parameter.clone(),
            coverage: c.coverage.expect("filtered"),
            avg_rel_ci_width: c.avg_rel_ci_width.expect("with coverage"),
            replicates: c.replicates,
        })
        .collect()
}

pub const CSV_COLUMNS: [&str; 14] = [
    "scenario",
    "design",
    "population_size",
    "sample_size",
    "estimator",
    "parameter",
    "theta0",
    "replicates",
    "failures",
    "rel_bias",
    "rel_rmse",
    "coverage",
    "avg_rel_ci_width",
    "unreliable",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Long-format CSV; `comments` become leading `# ` lines.
pub fn write_csv(result: &SimResult, comments: &str, out: &mut impl std::io::Write) -> Result<()> {
    for line in comments.lines() {
        writeln!(out, "# {line}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(CSV_COLUMNS).map_err(io)?;
    for c in &result.cells {
        w.write_record([
            c.scenario.clone(),
            c.design.id().to_string(),
            c.population_size.to_string(),
            c.sample_size.to_string(),
            c.estimator.id().to_string(),
            c.parameter.clone(),
            c.theta0.to_string(),
            c.replicates.to_string(),
            c.failures.to_string(),
            c.rel_bias.to_string(),
            c.rel_rmse.to_string(),
            opt(c.coverage),
            opt(c.avg_rel_ci_width),
            c.unreliable.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Parse a CSV written by [`write_csv`]; comment lines are skipped.
pub fn read_csv(text: &str) -> Result<SimResult> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if header.iter().collect::<Vec<_>>() != CSV_COLUMNS {
        return Err(Error::Schema(format!(
            "unexpected columns {:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    let mut cells = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let perr = |col: &str, m: String| Error::Parse {
            line,
            message: format!("column `{col}`: {m}"),
        };
        let num = |i: usize| -> Result<f64> { rec[i].parse::<f64>().map_err(|e| perr(CSV_COLUMNS[i], e.to_string())) };
        let int =
            |i: usize| -> Result<usize> { rec[i].parse::<usize>().map_err(|e| perr(CSV_COLUMNS[i], e.to_string())) };
        let optn = |i: usize| -> Result<Option<f64>> {
            if rec[i].is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        cells.push(Cell {
            scenario: rec[0].to_string(),
            design: rec[1].parse().map_err(|e: Error| perr("design", e.to_string()))?,
            population_size: int(2)?,
            sample_size: int(3)?,
            estimator: rec[4].parse().map_err(|e: Error| perr("estimator", e.to_string()))?,
            parameter: rec[5].to_string(),
            theta0: num(6)?,
            replicates: int(7)?,
            failures: int(8)?,
            rel_bias: num(9)?,
            rel_rmse: num(10)?,
            coverage: optn(11)?,
            avg_rel_ci_width: optn(12)?,
            unreliable: rec[13]
                .parse()
                .map_err(|e: std::str::ParseBoolError| perr("unreliable", e.to_string()))?,
        });
    }
    Ok(SimResult {
        cells,
        records: Vec::new(),
    })
}

/// Aligned text table laid out like a coverage table: scheme, sizes,
/// estimator, parameter, bias, RMSE, coverage and interval width.
pub fn text_table(result: &SimResult) -> String {
    let head = [
        "Scheme",
        "N",
        "n",
        "Estimator",
        "Parameter",
        "RelBias",
        "RelRMSE",
        "Coverage",
        "Avg. width",
        "Failures",
    ];
    let rows: Vec<[String; 10]> = result
        .cells
        .iter()
        .map(|c| {
            [
                c.design.label().to_string(),
                c.population_size.to_string(),
                c.sample_size.to_string(),
                c.estimator.id().to_uppercase(),
                c.parameter.clone(),
                format!("{:+.4}", c.rel_bias),
                format!("{:.4}", c.rel_rmse),
                c.coverage
                    .map(|v| format!("{:.1}%", 100.0 * v))
                    .unwrap_or_else(|| "-".into()),
                c.avg_rel_ci_width
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "-".into()),
                format!("{}{}", c.failures, if c.unreliable { " (unreliable)" } else { "" }),
            ]
        })
        .collect();
    let mut widths = head.map(str::len);
    for r in &rows {
        for (w, v) in widths.iter_mut().zip(r) {
            *w = (*w).max(v.len());
        }
    }
    let mut out = String::new();
    let line = |cols: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cols.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(head.to_vec(), &mut out);
    for r in &rows {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

/// Replicate-level CSV for plotting.
pub fn write_records_csv(records: &[ReplicateRecord], comments: &str, out: &mut impl std::io::Write) -> Result<()> {
    for line in comments.lines() {
        writeln!(out, "# {line}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record([
        "population_size",
        "replicate",
        "estimator",
        "sample_size",
        "theta_1",
        "theta_2",
        "lower_1",
        "lower_2",
        "upper_1",
        "upper_2",
        "error",
    ])
    .map_err(io)?;
    for r in records {
        let pick = |v: Option<[f64; 2]>, j: usize| v.map(|a| a[j].to_string()).unwrap_or_default();
        w.write_record([
            r.population_size.to_string(),
            r.replicate.to_string(),
            r.estimator.id().to_string(),
            r.sample_size.to_string(),
            pick(r.theta, 0),
            pick(r.theta, 1),
            pick(r.lower, 0),
            pick(r.lower, 1),
            pick(r.upper, 0),
            pick(r.upper, 1),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Write `<stem>.csv`, `<stem>.txt`, `<stem>.json` (and
/// `<stem>_replicates.csv` when records were kept) into `dir`. `header`
/// (resolved config and seed) is embedded in every file.
pub fn emit_tables(result: &SimResult, header: &str, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let csv_path = dir.join(format!("{stem}.csv"));
    let mut buf = Vec::new();
    write_csv(result, header, &mut buf)?;
    std::fs::write(&csv_path, buf)?;
    written.push(csv_path);

    let txt_path = dir.join(format!("{stem}.txt"));
    let mut txt = String::new();
    for l in header.lines() {
        let _ = writeln!(txt, "# {l}");
    }
    txt.push('\n');
    txt.push_str(&text_table(result));
    std::fs::write(&txt_path, txt)?;
    written.push(txt_path);

    let json_path = dir.join(format!("{stem}.json"));
    let doc = serde_json::json!({ "header": header, "result": result });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(&json_path, text + "\n")?;
    written.push(json_path);

    if !result.records.is_empty() {
        let rec_path = dir.join(format!("{stem}_replicates.csv"));
        let mut buf = Vec::new();
        write_records_csv(&result.records, header, &mut buf)?;
        std::fs::write(&rec_path, buf)?;
        written.push(rec_path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMOKE: &str = r#"
schema_version = 1
name = "smoke"
replications = 4
base_seed = 7
estimators = ["mhde", "mle"]

[model]
family = "gamma"
theta = [2.0, 35000.0]

[design]
kind = "srs_wor"
alpha = 0.01
n_grid = [20000]
full_n_grid = [20000, 40000]
"#;

    fn record(theta: [f64; 2], lo: [f64; 2], hi: [f64; 2]) -> ReplicateRecord {
        ReplicateRecord {
            population_size: 10,
            replicate: 0,
            estimator: Estimator::Mhde,
            sample_size: 5,
            theta: Some(theta),
            lower: Some(lo),
            upper: Some(hi),
            error: None,
        }
    }

    #[test]
    fn aggregate_definitions() {
        let th = Family::Gamma.theta(2.0, 100.0).unwrap();
        let exact: Vec<_> = (0..3)
            .map(|_| record([2.0, 100.0], [1.9, 90.0], [2.1, 110.0]))
            .collect();
        let c = aggregate(
            "t",
            DesignKind::SrsWor,
            Family::Gamma,
            &th,
            10,
            5,
            Estimator::Mhde,
            &exact,
        );
        assert_eq!((c[0].rel_bias, c[0].rel_rmse, c[0].coverage), (0.0, 0.0, Some(1.0)));
        let d = 0.1;
        let pm = vec![
            record([2.0 * (1.0 + d), 100.0 * (1.0 + d)], [0.0; 2], [1.0; 2]),
            record([2.0 * (1.0 - d), 100.0 * (1.0 - d)], [0.0; 2], [1.0; 2]),
        ];
        let c = aggregate("t", DesignKind::SrsWor, Family::Gamma, &th, 10, 5, Estimator::Mhde, &pm);
        for cell in &c {
            assert!(cell.rel_bias.abs() < 1e-15);
            assert!((cell.rel_rmse - d).abs() < 1e-15);
            assert_eq!(cell.coverage, Some(0.0));
        }
        let mut failed = pm.clone();
        failed.push(ReplicateRecord {
            theta: None,
            lower: None,
            upper: None,
            error: Some("x".into()),
            ..pm[0].clone()
        });
        let c = aggregate(
            "t",
            DesignKind::SrsWor,
            Family::Gamma,
            &th,
            10,
            5,
            Estimator::Mhde,
            &failed,
        );
        assert_eq!((c[0].failures, c[0].replicates, c[0].unreliable), (1, 2, true));
    }

    #[test]
    fn config_defaults_and_errors() {
        let cfg = ScenarioConfig::from_toml_str(SMOKE).unwrap();
        assert_eq!(cfg.ci_level, 0.95);
        assert_eq!(cfg.quad.subdivisions, 200);
        assert_eq!(cfg.mhde_options().bandwidth, BandwidthRule::Undersmoothed);
        let echoed = ScenarioConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(echoed, cfg);
        assert_eq!(cfg.resolved(true).unwrap().design.n_grid, vec![20000, 40000]);

        let bad = SMOKE.replace("alpha = 0.01", "alpha = \"x\"");
        match ScenarioConfig::from_toml_str(&bad) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "design.alpha"),
            other => panic!("{other:?}"),
        }
        let unknown = SMOKE.replace("kind = \"srs_wor\"", "kind = \"srs_wor\"\nfoo = 1");
        assert!(
            matches!(ScenarioConfig::from_toml_str(&unknown), Err(Error::Config { key, .. }) if key.starts_with("design"))
        );
        let version = SMOKE.replace("schema_version = 1", "schema_version = 9");
        assert!(
            matches!(ScenarioConfig::from_toml_str(&version), Err(Error::Config { key, .. }) if key == "schema_version")
        );
        let unsorted = SMOKE.replace("n_grid = [20000]", "n_grid = [30000, 20000]");
        assert!(ScenarioConfig::from_toml_str(&unsorted).is_err());
        let bw = format!("{SMOKE}\n[kde]\nbandwidth = \"wide\"\n");
        assert!(matches!(ScenarioConfig::from_toml_str(&bw), Err(Error::Config { key, .. }) if key == "kde.bandwidth"));
    }

    #[test]
    fn streams_are_distinct_and_reproducible() {
        use rand::Rng;
        let a: u64 = stream(1, 0, 0, Stage::Sample).gen();
        assert_eq!(a, stream(1, 0, 0, Stage::Sample).gen::<u64>());
        assert_ne!(a, stream(1, 0, 0, Stage::Population).gen::<u64>());
        assert_ne!(a, stream(1, 0, 1, Stage::Sample).gen::<u64>());
        assert_ne!(a, stream(1, 1, 0, Stage::Sample).gen::<u64>());
        assert_ne!(a, stream(2, 0, 0, Stage::Sample).gen::<u64>());
    }

    #[test]
    fn smoke_run_is_deterministic_and_round_trips() {
        let cfg = ScenarioConfig::from_toml_str(SMOKE).unwrap();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = run_scenario_in(&cfg, &one).unwrap();
        let b = run_scenario_in(&cfg, &four).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cells.len(), 4);
        for c in &a.cells {
            assert!(c.rel_rmse >= c.rel_bias.abs());
            assert_eq!(c.failures, 0);
        }
        let mut buf = Vec::new();
        write_csv(&a, "config line\nseed: 7", &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# config line\n# seed: 7\n"));
        assert_eq!(read_csv(&text).unwrap().cells, a.cells);
        let table = text_table(&a);
        for col in ["Scheme", "Parameter", "Coverage", "Avg. width"] {
            assert!(table.contains(col));
        }
    }

    #[test]
    fn empty_result_is_header_only() {
        let mut buf = Vec::new();
        write_csv(&SimResult::default(), "", &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.trim_end(), CSV_COLUMNS.join(","));
        assert!(read_csv(&text).unwrap().cells.is_empty());
    }

    #[test]
    fn malformed_csv_reports_line() {
        let text = format!(
            "# c\n{}\nsmoke,srs_wor,x,1,mhde,shape,2,1,0,0,0,,,false\n",
            CSV_COLUMNS.join(",")
        );
        match read_csv(&text) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("population_size"));
            }
            other => panic!("{other:?}"),
        }
    }
}
