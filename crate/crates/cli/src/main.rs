//! `survey-mhde`: fit survey data, run simulation scenarios, compute
//! influence diagnostics and render result tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use survey_mhde::designs::{kish_neff, read_sample_csv};
use survey_mhde::inference::{
    confint, mle_covariance, population_stats, sandwich, variance_size, wald_interval, ConfInterval, PlugIn,
    PopulationStats,
};
use survey_mhde::kde::{Kernel, KernelKind};
use survey_mhde::mhde::{fit, MhdeOptions};
use survey_mhde::robustness::{
    alpha_curve, analytic_influence, empirical_influence, empirical_influence_mle, linear_regime_epsilon, ContamDensity,
};
use survey_mhde::simlab::{self, coverage_rows, emit_tables, read_csv, text_table, BandwidthSetting, ScenarioConfig};
use survey_mhde::{Error, Family, Theta};

/// Exit codes: 0 success, 2 usage, 3 schema or input, 4 convergence, 5 I/O.
mod exit {
    pub const INPUT: u8 = 3;
    pub const CONVERGENCE: u8 = 4;
    pub const IO: u8 = 5;
}

#[derive(Parser, Debug)]
#[command(
    name = "survey-mhde",
    version,
    about = "Minimum Hellinger distance estimation for survey data"
)]
struct Cli {
    /// Worker threads for simulations (default: $SURVEY_MHDE_THREADS, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a family to a weighted sample (CSV with `y` and `weight` or `pi`).
    Fit(FitArgs),
    /// Run a simulation scenario and write bias/RMSE/coverage tables.
    Simulate(SimArgs),
    /// Run a scenario for MHDE interval coverage only.
    Coverage(SimArgs),
    /// Influence functions or α-curves under point-mass contamination.
    Influence(InfluenceArgs),
    /// Print a result CSV as an aligned table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct FitArgs {
    input: PathBuf,
    #[arg(long, default_value = "gamma")]
    family: Family,
    #[arg(long, default_value_t = 0.95)]
    ci_level: f64,
    /// Parameter draws for the population mean/median intervals.
    #[arg(long, default_value_t = 10_000)]
    mc_draws: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = KernelArg::Gaussian)]
    kernel: KernelArg,
    /// "auto", "silverman" or a positive number.
    #[arg(long, default_value = "auto")]
    bandwidth: String,
    #[arg(long, default_value_t = 200)]
    subdivisions: usize,
    #[arg(long, value_enum, default_value_t = PlugInArg::Kde)]
    plug_in: PlugInArg,
    /// Also write `<stem>.csv` and `<stem>.json`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum KernelArg {
    Gaussian,
    Epanechnikov,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum PlugInArg {
    Kde,
    Model,
}

#[derive(Args, Debug)]
struct SimArgs {
    /// Scenario config (TOML).
    config: PathBuf,
    /// Use the config's full population grid.
    #[arg(long)]
    full: bool,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Output file stem (default: scenario name).
    #[arg(long)]
    stem: Option<String>,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Copy, Clone, Debug, ValueEnum, PartialEq)]
enum InfluenceMode {
    /// T(G_ε) along an ε grid.
    Curve,
    /// Influence at a list of quantiles.
    Function,
}

#[derive(Args, Debug)]
struct InfluenceArgs {
    #[arg(long, default_value = "gamma")]
    family: Family,
    /// θ₀ as two comma-separated numbers.
    #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [2.0, 35000.0])]
    theta: Vec<f64>,
    #[arg(long, value_enum, default_value_t = InfluenceMode::Curve)]
    mode: InfluenceMode,
    /// Contamination location.
    #[arg(long, conflicts_with = "p")]
    z: Option<f64>,
    /// Contamination location as the model quantile G⁻¹(p).
    #[arg(long)]
    p: Option<f64>,
    /// ε grid for `curve`.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3])]
    eps: Vec<f64>,
    /// Quantiles for `function`.
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.9, 0.99, 0.999, 0.9999, 0.99999, 0.999999, 0.9999999])]
    quantiles: Vec<f64>,
    /// Contamination share for the difference quotient in `function` mode
    /// (default: small enough for the linear regime at each z).
    #[arg(long)]
    if_eps: Option<f64>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    format: ReportFormat,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ReportFormat {
    Text,
    Json,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<Error>() {
        return match e {
            Error::Convergence { .. } | Error::DegenerateCurvature(_) | Error::Unstable { .. } => exit::CONVERGENCE,
            Error::Io(_) => exit::IO,
            _ => exit::INPUT,
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return exit::IO;
    }
    exit::INPUT
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let pool = match cli.threads {
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build()?,
        None => simlab::thread_pool()?,
    };
    match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Simulate(a) => cmd_simulate(a, &pool, false),
        Command::Coverage(a) => cmd_simulate(a, &pool, true),
        Command::Influence(a) => cmd_influence(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
        .map_err(Into::into)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())).into())
}

fn comment(header: &str) -> String {
    header.lines().map(|l| format!("# {l}\n")).collect()
}

#[derive(Serialize)]
struct EstimatorReport {
    theta: [f64; 2],
    ci: ConfInterval,
    population: PopulationStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    hellinger_sq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bandwidth: Option<f64>,
}

#[derive(Serialize)]
struct FitReport {
    input: String,
    family: Family,
    parameters: [&'static str; 2],
    n: usize,
    kish_neff: f64,
    n_v_eff: f64,
    fpc: f64,
    mhde: EstimatorReport,
    mle: EstimatorReport,
}

fn cmd_fit(a: FitArgs) -> Result<()> {
    let text = read_text(&a.input)?;
    let sample = read_sample_csv(&text).with_context(|| format!("reading {}", a.input.display()))?;
    let bandwidth = match a.bandwidth.parse::<f64>() {
        Ok(h) => BandwidthSetting::Value(h),
        Err(_) => BandwidthSetting::Named(a.bandwidth.clone()),
    }
    .rule()?;
    let kind = match a.kernel {
        KernelArg::Gaussian => KernelKind::Gaussian,
        KernelArg::Epanechnikov => KernelKind::Epanechnikov,
    };
    let opts = MhdeOptions {
        grid_subdivisions: a.subdivisions,
        kernel: Kernel::of(kind),
        bandwidth,
        ..MhdeOptions::default()
    };
    let plug = match a.plug_in {
        PlugInArg::Kde => PlugIn::Kde,
        PlugInArg::Model => PlugIn::Model,
    };
    let family = a.family;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);

    let f = fit(&sample, family, &opts).context("MHDE fit")?;
    let parts = sandwich(&f, &sample, plug)?;
    let ci = confint(&f, &parts, a.ci_level)?;
    let cov = parts.covariance()?;
    let pop = population_stats(family, &f.theta_hat, &cov, a.mc_draws, a.ci_level, &mut rng)?;

    let mle: Theta = sample.weighted_mle(family).context("weighted MLE")?;
    let mle_cov = mle_covariance(family, &mle, &sample)?;
    let mle_ci = wald_interval(&mle, &mle_cov, a.ci_level)?;
    let mle_pop = population_stats(family, &mle, &mle_cov, a.mc_draws, a.ci_level, &mut rng)?;
    let (n_v_eff, fpc) = variance_size(&sample)?;

    let report = FitReport {
        input: a.input.display().to_string(),
        family,
        parameters: family.param_names(),
        n: sample.len(),
        kish_neff: kish_neff(&sample.weight),
        n_v_eff,
        fpc,
        mhde: EstimatorReport {
            theta: f.theta_hat.values(),
            ci,
            population: pop,
            hellinger_sq: Some(f.hellinger_sq),
            bandwidth: Some(f.kde.bandwidth()),
        },
        mle: EstimatorReport {
            theta: mle.values(),
            ci: mle_ci,
            population: mle_pop,
            hellinger_sq: None,
            bandwidth: None,
        },
    };
    print!("{}", fit_text(&report));
    if let Some(stem) = &a.output {
        let header = format!(
            "survey-mhde fit\ninput = {}\nfamily = {}\nci_level = {}\nmc_draws = {}\nseed = {}\nkernel = {:?}\nbandwidth = {}\nsubdivisions = {}\nplug_in = {:?}",
            report.input, family, a.ci_level, a.mc_draws, a.seed, a.kernel, a.bandwidth, a.subdivisions, a.plug_in
        );
        write_text(&stem.with_extension("csv"), &(comment(&header) + &fit_csv(&report)))?;
        let doc = serde_json::json!({ "header": header, "report": report });
        write_text(
            &stem.with_extension("json"),
            &(serde_json::to_string_pretty(&doc)? + "\n"),
        )?;
    }
    Ok(())
}

fn fit_csv(r: &FitReport) -> String {
    let mut out = String::from("estimator,quantity,estimate,se,lower,upper\n");
    for (tag, e) in [("mhde", &r.mhde), ("mle", &r.mle)] {
        for j in 0..2 {
            let _ = writeln!(
                out,
                "{tag},{},{},{},{},{}",
                r.parameters[j], e.theta[j], e.ci.se[j], e.ci.lower[j], e.ci.upper[j]
            );
        }
        for (name, s) in [("mean", e.population.mean), ("median", e.population.median)] {
            let _ = writeln!(out, "{tag},{name},{},,{},{}", s.estimate, s.lower, s.upper);
        }
        if let Some(h) = e.hellinger_sq {
            let _ = writeln!(out, "{tag},hellinger_sq,{h},,,");
        }
    }
    out
}

fn fit_text(r: &FitReport) -> String {
    let mut s = String::new();
    let level = 100.0 * r.mhde.ci.level;
    let _ = writeln!(s, "{} fit to {} (n = {})", r.family, r.input, r.n);
    let _ = writeln!(
        s,
        "Kish n_eff = {:.1}, variance size = {:.1}, fpc = {:.4}",
        r.kish_neff, r.n_v_eff, r.fpc
    );
    if let (Some(h2), Some(bw)) = (r.mhde.hellinger_sq, r.mhde.bandwidth) {
        let _ = writeln!(s, "MHDE: H² = {h2:.6}, bandwidth = {bw:.6}");
    }
    let _ = writeln!(
        s,
        "\n{:<10}{:<10}{:>16}{:>14}{:>32}",
        "",
        "",
        "estimate",
        "SE",
        format!("{level:.0}% CI")
    );
    for (tag, e) in [("MHDE", &r.mhde), ("MLE", &r.mle)] {
        for j in 0..2 {
            let _ = writeln!(
                s,
                "{:<10}{:<10}{:>16.6}{:>14.6}{:>32}",
                tag,
                r.parameters[j],
                e.theta[j],
                e.ci.se[j],
                format!("[{:.6}, {:.6}]", e.ci.lower[j], e.ci.upper[j])
            );
        }
        for (name, st) in [("mean", e.population.mean), ("median", e.population.median)] {
            let _ = writeln!(
                s,
                "{:<10}{:<10}{:>16.6}{:>14}{:>32}",
                tag,
                name,
                st.estimate,
                "",
                format!("[{:.6}, {:.6}]", st.lower, st.upper)
            );
        }
    }
    s
}

fn cmd_simulate(a: SimArgs, pool: &rayon::ThreadPool, coverage_only: bool) -> Result<()> {
    let text = read_text(&a.config)?;
    let mut cfg = ScenarioConfig::from_toml_str(&text).with_context(|| format!("config {}", a.config.display()))?;
    if let Some(r) = a.replications {
        cfg.replications = r;
    }
    if let Some(s) = a.seed {
        cfg.base_seed = s;
    }
    if coverage_only {
        cfg.estimators = vec![simlab::Estimator::Mhde];
    }
    let cfg = cfg.resolved(a.full)?;
    cfg.validate()?;
    let resolved = cfg.to_toml();
    println!("# resolved configuration\n{resolved}");
    let result = simlab::run_scenario_in(&cfg, pool)?;
    let command = if coverage_only { "coverage" } else { "simulate" };
    let header = format!(
        "survey-mhde {command}\nbase_seed = {}\n--- config ---\n{}",
        cfg.base_seed,
        resolved.trim_end()
    );
    let stem = a.stem.clone().unwrap_or_else(|| {
        if cfg.name.is_empty() {
            command.to_string()
        } else {
            cfg.name.clone()
        }
    });
    let files = emit_tables(&result, &header, &a.out_dir, &stem)?;
    if coverage_only {
        println!(
            "{:<10}{:>10}{:>8}  {:<10}{:>10}{:>12}",
            "Scheme", "N", "n", "Parameter", "Coverage", "Avg. width"
        );
        for r in coverage_rows(&result) {
            println!(
                "{:<10}{:>10}{:>8}  {:<10}{:>9.1}%{:>12.4}",
                r.scheme,
                r.population_size,
                r.sample_size,
                r.parameter,
                100.0 * r.coverage,
                r.avg_rel_ci_width
            );
        }
    } else {
        print!("{}", text_table(&result));
    }
    for f in files {
        eprintln!("wrote {}", f.display());
    }
    Ok(())
}

fn resolve_z(family: Family, theta: &Theta, z: Option<f64>, p: Option<f64>) -> Result<f64> {
    match (z, p) {
        (Some(z), None) if z > 0.0 => Ok(z),
        (None, Some(p)) if p > 0.0 && p < 1.0 => Ok(family.quantile(theta, p)),
        (None, None) => Err(Error::InvalidInput("give --z or --p".into()).into()),
        _ => Err(Error::InvalidInput("--z must be positive and --p in (0, 1)".into()).into()),
    }
}

fn cmd_influence(a: InfluenceArgs) -> Result<()> {
    let family = a.family;
    let theta = Theta::new(family, [a.theta[0], a.theta[1]])?;
    let [n1, n2] = family.param_names();
    let opts = MhdeOptions::default();
    let mut header = format!(
        "survey-mhde influence\nfamily = {family}\ntheta = [{}, {}]\nmode = {:?}",
        theta[0], theta[1], a.mode
    );
    let mut csv = String::new();
    let mut rows = Vec::new();
    match a.mode {
        InfluenceMode::Curve => {
            let z = resolve_z(family, &theta, a.z, a.p)?;
            let _ = write!(
                header,
                "\nz = {z}\neps = {:?}\ncontamination = point mass (normal, sd = 1e-3 z)",
                a.eps
            );
            let curve = alpha_curve(family, &theta, ContamDensity::point_mass(z), &a.eps, &opts)?;
            let _ = writeln!(
                csv,
                "epsilon,mhde_{n1},mhde_{n2},mle_{n1},mle_{n2},mhde_rel_bias_{n1},mhde_rel_bias_{n2},mle_rel_bias_{n1},mle_rel_bias_{n2},mhde_converged"
            );
            for p in &curve {
                let (rb, lrb) = p.relative_bias(&theta);
                let m = p.mle.map(|v| [v[0].to_string(), v[1].to_string()]).unwrap_or_default();
                let mr = lrb.map(|v| [v[0].to_string(), v[1].to_string()]).unwrap_or_default();
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{},{},{}",
                    p.epsilon, p.mhde[0], p.mhde[1], m[0], m[1], rb[0], rb[1], mr[0], mr[1], p.mhde_converged
                );
            }
            println!("resolved z = {z}");
            rows = curve
                .iter()
                .map(|p| serde_json::to_value(p).expect("serializable"))
                .collect();
        }
        InfluenceMode::Function => {
            let eps_label = a.if_eps.map_or("linear regime".to_string(), |e| e.to_string());
            let _ = write!(header, "\nquantiles = {:?}\nif_eps = {eps_label}", a.quantiles);
            let _ = writeln!(
                csv,
                "p,z,epsilon,mhde_if_{n1},mhde_if_{n2},analytic_if_{n1},analytic_if_{n2},mle_if_{n1},mle_if_{n2}"
            );
            for &p in &a.quantiles {
                let z = resolve_z(family, &theta, None, Some(p))?;
                let h = ContamDensity::point_mass(z);
                let eps = a.if_eps.unwrap_or_else(|| linear_regime_epsilon(family, &theta, &h));
                let e = empirical_influence(family, &theta, h, eps, &opts)?;
                let an = analytic_influence(family, &theta, z)?;
                let m = empirical_influence_mle(family, &theta, h, eps)?;
                let _ = writeln!(
                    csv,
                    "{p},{z},{eps},{},{},{},{},{},{}",
                    e[0], e[1], an[0], an[1], m[0], m[1]
                );
                rows.push(
                    serde_json::json!({"p": p, "z": z, "epsilon": eps, "mhde_if": e, "analytic_if": an, "mle_if": m}),
                );
            }
        }
    }
    write_text(&a.output, &(comment(&header) + &csv))?;
    let doc = serde_json::json!({ "header": header, "rows": rows });
    write_text(
        &a.output.with_extension("json"),
        &(serde_json::to_string_pretty(&doc)? + "\n"),
    )?;
    print!("{csv}");
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let text = read_text(&a.input)?;
    let result = read_csv(&text)?;
    match a.format {
        ReportFormat::Text => print!("{}", text_table(&result)),
        ReportFormat::Json => println!("{}", serde_json::to_string_pretty(&result)?),
    }
    Ok(())
}
