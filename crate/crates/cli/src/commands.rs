//! Argument definitions and subcommand implementations.
//!
//! Every output file is written atomically through a temporary sibling.
//! Commands return [`Outcome::Incomplete`] when they ran to the end but
//! some requested work failed (a fit that did not converge, a failed CV
//! fold, a failed replication); the binary maps this to a nonzero exit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cholgauss::estimate::{
    fit_mcmc_from, fit_pml, weather_specs, FitOptions, FitState, McmcOptions, ModelSpec,
};
use cholgauss::likelihood::Family;
use cholgauss::predict_score::{
    dss, log_density, paired_differences, predict, row_seed, variogram_score, CvOptions, GroupBy,
    ScoreOptions, ScorePanel, ScoreSummary, VS_DRAWS, VS_POWER,
};
use cholgauss::simgen::{
    generate, generate_weather_analog, truth_table, SimConfig, ALPHA_GRID, SUPPORTED_DIMS,
    WEATHER_ROWS,
};
use cholgauss::table::{format_number, write_atomic, Table};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::experiments::{self, Comparison, RmseStudy};

#[derive(Debug, Parser)]
#[command(
    name = "cholgauss",
    version,
    about = "Multivariate Gaussian regression with Cholesky-parameterized covariances"
)]
pub struct Cli {
    /// Worker threads for folds and replications (default: number of cores).
    #[arg(long, global = true, env = "CHOLGAUSS_WORKERS")]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the trivariate design (or its higher-dimensional repeats).
    Simulate(SimulateArgs),
    /// Fit a model by penalized maximum likelihood, optionally followed by MCMC.
    Fit(FitArgs),
    /// Predicted means and covariances for new data.
    Predict(PredictArgs),
    /// Per-row scores of a fitted model.
    Score(ScoreArgs),
    /// K-fold cross-validation of one or more models.
    Cv(CvArgs),
    /// Run a simulation or model-comparison experiment.
    Experiment(ExperimentArgs),
    /// Covariance-parameter accounting of model specs.
    Describe(DescribeArgs),
}

/// Where a model spec comes from.
#[derive(Debug, Args, Clone)]
pub struct ModelArgs {
    /// JSON model-spec document.
    #[arg(long, conflicts_with_all = ["builtin", "family"])]
    pub spec: Option<PathBuf>,
    /// One of the six built-in weather models, by name.
    #[arg(long)]
    pub builtin: Option<String>,
    /// Family of an intercept-only model (with --k).
    #[arg(long, value_parser = parse_family)]
    pub family: Option<Family>,
    /// Response dimension of an intercept-only model.
    #[arg(long)]
    pub k: Option<usize>,
    /// Antedependence order.
    #[arg(long)]
    pub ad_order: Option<usize>,
    /// Response column template of an intercept-only model.
    #[arg(long, default_value = "y[i]")]
    pub response: String,
}

fn parse_family(s: &str) -> std::result::Result<Family, String> {
    s.parse().map_err(|e: cholgauss::Error| e.to_string())
}

impl ModelArgs {
    pub fn resolve(&self) -> Result<(String, ModelSpec)> {
        let (name, mut spec) = if let Some(path) = &self.spec {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading spec {}", path.display()))?;
            let spec = ModelSpec::from_json(&text)
                .with_context(|| format!("parsing spec {}", path.display()))?;
            (file_stem(path), spec)
        } else if let Some(name) = &self.builtin {
            let dim = self.k.unwrap_or(cholgauss::simgen::WEATHER_DIM);
            let (_, spec) = weather_specs(dim)
                .into_iter()
                .find(|(n, _)| n == name)
                .with_context(|| {
                    format!("unknown built-in model `{name}`; see `describe --builtin weather`")
                })?;
            (name.clone(), spec)
        } else if let Some(family) = self.family {
            let k = self.k.context("--family needs --k")?;
            (
                family.name().to_string(),
                ModelSpec::new(family, k).with_response(&self.response),
            )
        } else {
            bail!("give a model with --spec, --builtin or --family/--k");
        };
        if self.spec.is_none() {
            if let Some(r) = self.ad_order {
                spec = spec.with_ad_order(r);
            }
        }
        spec.validate()?;
        Ok((name, spec))
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

/// Smoothing options shared by fitting commands.
#[derive(Debug, Args, Clone)]
pub struct SmoothingArgs {
    /// Fixed smoothing parameter for every spline term (default: AIC grid search).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Maximum outer iterations.
    #[arg(long, default_value_t = 200)]
    pub max_iter: usize,
}

impl SmoothingArgs {
    pub fn options(&self) -> FitOptions {
        let base = match self.lambda {
            Some(l) => FitOptions::fixed(l),
            None => FitOptions::default(),
        };
        FitOptions {
            max_iter: self.max_iter,
            ..base
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Nonlinearity of the quadratic effects.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Points of the truth grid over [-1, 1].
    #[arg(long, default_value_t = 201)]
    pub grid: usize,
    /// Generate the 10-dimensional weather analog instead (n defaults to 1798).
    #[arg(long)]
    pub weather: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub smoothing: SmoothingArgs,
    #[arg(long)]
    pub input: PathBuf,
    /// Fit artifact (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Run the MCMC sampler from the PML fit and write the chain here.
    #[arg(long)]
    pub chain: Option<PathBuf>,
    #[arg(long, default_value_t = 12_000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 2_000)]
    pub burn_in: usize,
    #[arg(long, default_value_t = 10)]
    pub thin: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// CSV with `row`, `mu_i` and `sigma_i_j` columns.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct ScoringArgs {
    #[arg(long, default_value_t = VS_POWER)]
    pub vs_power: f64,
    #[arg(long, default_value_t = VS_DRAWS)]
    pub vs_draws: usize,
    /// Grouping of rows: `year_month`, `none`, or a column name (default: year_month when available).
    #[arg(long)]
    pub group: Option<String>,
}

impl ScoringArgs {
    fn options(&self, seed: u64) -> ScoreOptions {
        ScoreOptions {
            vs_power: self.vs_power,
            vs_draws: self.vs_draws,
            seed,
        }
    }

    fn group(&self) -> Option<GroupBy> {
        self.group.as_deref().map(|g| match g {
            "year_month" => GroupBy::YearMonth,
            "none" => GroupBy::None,
            name => GroupBy::Column {
                name: name.to_string(),
            },
        })
    }
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output directory for `scores.csv` and `summary.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    /// Model-spec documents; the model name is the file stem.
    #[arg(long = "spec")]
    pub specs: Vec<PathBuf>,
    /// `weather` for the six built-in weather models, or a single built-in name.
    #[arg(long)]
    pub builtin: Option<String>,
    /// Input CSV (default with --builtin: the synthetic weather analog).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Reference model for paired differences (default: the first model).
    #[arg(long)]
    pub reference: Option<String>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Contiguous folds instead of a seeded random assignment.
    #[arg(long)]
    pub contiguous: bool,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub smoothing: SmoothingArgs,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Experiment {
    RmseVsN,
    MisspecAlpha,
    DimSweep,
    ModelCompare,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(value_enum)]
    pub name: Experiment,
    /// Replications per setting.
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    /// Paper-scale protocol: 100 replications and the full sample-size grid.
    #[arg(long)]
    pub paper_scale: bool,
    #[arg(long = "n")]
    pub ns: Vec<usize>,
    #[arg(long = "k")]
    pub ks: Vec<usize>,
    #[arg(long = "alpha")]
    pub alphas: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[command(flatten)]
    pub smoothing: SmoothingArgs,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DescribeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Emit JSON instead of CSV.
    #[arg(long)]
    pub json: bool,
}

/// How a command finished.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Complete,
    /// Ran to the end, but some requested work failed.
    Incomplete {
        reason: String,
        details: Vec<String>,
    },
}

pub fn run(cli: Cli) -> Result<Outcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers.unwrap_or(0))
        .build()
        .context("building worker pool")?;
    pool.install(|| match cli.command {
        Command::Simulate(a) => simulate(&a),
        Command::Fit(a) => fit(&a),
        Command::Predict(a) => predict_cmd(&a),
        Command::Score(a) => score(&a),
        Command::Cv(a) => cv(&a),
        Command::Experiment(a) => experiment(&a),
        Command::Describe(a) => describe(&a),
    })
}

fn read_table(path: &Path) -> Result<Table> {
    Table::read_csv(path).with_context(|| format!("reading {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

/// Quotes a CSV field when needed.
fn field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn summary_fields(s: &ScoreSummary) -> String {
    format!(
        "{},{},{},{}",
        s.count,
        format_number(s.dss),
        format_number(s.vs),
        format_number(s.loglik)
    )
}

pub fn simulate(a: &SimulateArgs) -> Result<Outcome> {
    if a.weather {
        let n = if a.n == 500 { WEATHER_ROWS } else { a.n };
        let data = generate_weather_analog(n, a.seed)?;
        data.write_csv(a.out.join("data.csv"))?;
        log::info!("wrote {} weather-analog rows to {}", n, a.out.display());
        return Ok(Outcome::Complete);
    }
    let cfg = SimConfig::new(a.n, a.k, a.alpha, a.seed)?;
    if a.grid < 2 {
        bail!("--grid needs at least 2 points");
    }
    let data = generate(&cfg)?;
    let xs: Vec<f64> = (0..a.grid)
        .map(|g| -1.0 + 2.0 * g as f64 / (a.grid - 1) as f64)
        .collect();
    let truth = truth_table(&xs, a.k, a.alpha)?;
    data.write_csv(a.out.join("data.csv"))?;
    truth.write_csv(a.out.join("truth.csv"))?;
    log::info!("wrote {} rows (k = {}) to {}", a.n, a.k, a.out.display());
    Ok(Outcome::Complete)
}

pub fn fit(a: &FitArgs) -> Result<Outcome> {
    let (_, spec) = a.model.resolve()?;
    let data = read_table(&a.input)?;
    let state = fit_pml(&spec, &data, &a.smoothing.options())?;
    state
        .save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    for w in &state.warnings {
        log::warn!("{w}");
    }
    if !state.converged {
        return Ok(Outcome::Incomplete {
            reason: format!("fit did not converge after {} iterations", state.iterations),
            details: state.warnings.clone(),
        });
    }
    if let Some(chain_path) = &a.chain {
        let opts = McmcOptions {
            iterations: a.iterations,
            burn_in: a.burn_in,
            thin: a.thin,
            seed: a.seed,
            ..McmcOptions::default()
        };
        let chain = fit_mcmc_from(&state, &data, &opts)?;
        chain
            .save(chain_path)
            .with_context(|| format!("writing {}", chain_path.display()))?;
        for w in &chain.warnings {
            log::warn!("{w}");
        }
    }
    Ok(Outcome::Complete)
}

fn load_fit(path: &Path) -> Result<FitState> {
    FitState::load(path).with_context(|| format!("reading fit {}", path.display()))
}

pub fn predict_cmd(a: &PredictArgs) -> Result<Outcome> {
    let fit = load_fit(&a.fit)?;
    let data = read_table(&a.input)?;
    let pred = predict(&fit, &data)?;
    for w in &pred.warnings {
        log::warn!("{w}");
    }
    let k = fit.spec.dim;
    let mut t = Table::new();
    t.insert("row", (0..data.nrows()).map(|r| r as f64).collect())?;
    for i in 0..k {
        t.insert(
            format!("mu_{}", i + 1),
            pred.rows.iter().map(|d| d.mu[i]).collect(),
        )?;
    }
    for j in 0..k {
        for i in 0..k {
            t.insert(
                format!("sigma_{}_{}", i + 1, j + 1),
                pred.rows.iter().map(|d| d.sigma.get(i, j)).collect(),
            )?;
        }
    }
    t.write_csv(&a.out)?;
    Ok(Outcome::Complete)
}

#[derive(Debug, Serialize)]
struct ScoreReport {
    overall: ScoreSummary,
    by_group: BTreeMap<String, ScoreSummary>,
    warnings: Vec<String>,
}

pub fn score(a: &ScoreArgs) -> Result<Outcome> {
    let fit = load_fit(&a.fit)?;
    let data = read_table(&a.input)?;
    let k = fit.spec.dim;
    let response: Vec<&[f64]> = fit
        .spec
        .response_columns()
        .iter()
        .map(|c| data.column(c))
        .collect::<cholgauss::Result<_>>()?;
    let group = a.scoring.group().unwrap_or_else(|| GroupBy::detect(&data));
    let labels = group.labels(&data)?;
    let opts = a.scoring.options(a.seed);
    let pred = predict(&fit, &data)?;

    let mut header = vec!["row".to_string(), "group".to_string()];
    header.extend((1..=k).map(|i| format!("mu_{i}")));
    for j in 1..=k {
        header.extend((1..=k).map(|i| format!("sigma_{i}_{j}")));
    }
    header.extend(["dss", "vs", "loglik"].map(String::from));
    let mut csv = header.join(",");
    csv.push('\n');
    let mut rows = Vec::with_capacity(data.nrows());
    for dist in &pred.rows {
        let r = dist.row;
        let y: Vec<f64> = response.iter().map(|c| c[r]).collect();
        let row = cholgauss::predict_score::ScoreRow {
            row: r,
            fold: 0,
            group: labels[r].clone(),
            dss: dss(dist, &y)?,
            vs: variogram_score(
                dist,
                &y,
                opts.vs_power,
                opts.vs_draws,
                row_seed(opts.seed, r),
            )?,
            loglik: log_density(dist, &y)?,
        };
        let _ = write!(csv, "{},{}", r, field(&row.group));
        for m in &dist.mu {
            let _ = write!(csv, ",{}", format_number(*m));
        }
        for v in dist.sigma.matrix().iter() {
            let _ = write!(csv, ",{}", format_number(*v));
        }
        let _ = writeln!(
            csv,
            ",{},{},{}",
            format_number(row.dss),
            format_number(row.vs),
            format_number(row.loglik)
        );
        rows.push(row);
    }
    let panel = ScorePanel {
        dim: k,
        rows,
        folds: Vec::new(),
    };
    write_text(&a.out.join("scores.csv"), &csv)?;
    write_json(
        &a.out.join("summary.json"),
        &ScoreReport {
            overall: panel.overall(),
            by_group: panel.by_group(),
            warnings: pred.warnings,
        },
    )?;
    Ok(Outcome::Complete)
}

fn cv_models(a: &CvArgs) -> Result<Vec<(String, ModelSpec)>> {
    let mut models = Vec::new();
    match a.builtin.as_deref() {
        Some("weather") => models.extend(
            weather_specs(cholgauss::simgen::WEATHER_DIM)
                .into_iter()
                .map(|(n, s)| (n.to_string(), s)),
        ),
        Some(name) => {
            let args = ModelArgs {
                spec: None,
                builtin: Some(name.to_string()),
                family: None,
                k: None,
                ad_order: None,
                response: "y[i]".into(),
            };
            models.push(args.resolve()?);
        }
        None => {}
    }
    for path in &a.specs {
        let args = ModelArgs {
            spec: Some(path.clone()),
            builtin: None,
            family: None,
            k: None,
            ad_order: None,
            response: String::new(),
        };
        models.push(args.resolve()?);
    }
    if models.is_empty() {
        bail!("give at least one --spec or --builtin");
    }
    let mut seen = std::collections::BTreeSet::new();
    for (name, _) in &models {
        if !seen.insert(name) {
            bail!("duplicate model name `{name}`");
        }
    }
    Ok(models)
}

/// Writes per-model scores, fold and group aggregates and paired
/// differences against the reference; returns the failed folds.
pub fn write_comparison(cmp: &Comparison, out: &Path) -> Result<Vec<String>> {
    let mut folds = String::from("model,fold,n_train,n_test,ok,error,count,dss,vs,loglik\n");
    let mut groups = String::from("model,group,count,dss,vs,loglik\n");
    let mut diffs = String::from("model,reference,group,count,dss,vs,loglik\n");
    let mut overall = String::from("model,count,dss,vs,loglik\n");
    let mut failed = Vec::new();
    let reference = cmp
        .panel(&cmp.reference)
        .context("reference panel missing")?;
    for (name, panel) in &cmp.models {
        write_text(
            &out.join(format!("scores_{name}.csv")),
            &panel.to_csv_string(),
        )?;
        let by_fold = panel.by_fold();
        for f in &panel.folds {
            let summary = by_fold.get(&f.fold).copied().unwrap_or(ScoreSummary {
                count: 0,
                dss: f64::NAN,
                vs: f64::NAN,
                loglik: f64::NAN,
            });
            let _ = writeln!(
                folds,
                "{name},{},{},{},{},{},{}",
                f.fold,
                f.n_train,
                f.n_test,
                f.ok,
                field(f.error.as_deref().unwrap_or("")),
                summary_fields(&summary)
            );
            if !f.ok {
                failed.push(format!(
                    "{name} fold {}: {}",
                    f.fold,
                    f.error.as_deref().unwrap_or("unknown error")
                ));
            }
        }
        for (g, s) in panel.by_group() {
            let _ = writeln!(groups, "{name},{},{}", field(&g), summary_fields(&s));
        }
        let _ = writeln!(overall, "{name},{}", summary_fields(&panel.overall()));
        let diff_panel = ScorePanel {
            dim: panel.dim,
            rows: paired_differences(panel, reference),
            folds: Vec::new(),
        };
        for (g, s) in diff_panel.by_group() {
            let _ = writeln!(
                diffs,
                "{name},{},{},{}",
                cmp.reference,
                field(&g),
                summary_fields(&s)
            );
        }
    }
    write_text(&out.join("folds.csv"), &folds)?;
    write_text(&out.join("groups.csv"), &groups)?;
    write_text(&out.join("differences.csv"), &diffs)?;
    write_text(&out.join("overall.csv"), &overall)?;
    Ok(failed)
}

pub fn cv(a: &CvArgs) -> Result<Outcome> {
    let models = cv_models(a)?;
    let data = match &a.input {
        Some(path) => read_table(path)?,
        None if a.builtin.is_some() => generate_weather_analog(WEATHER_ROWS, a.seed)?,
        None => bail!("--input is required unless --builtin is given"),
    };
    let reference = a.reference.clone().unwrap_or_else(|| models[0].0.clone());
    let opts = CvOptions {
        folds: a.folds,
        seed: a.seed,
        contiguous: a.contiguous,
        fit: a.smoothing.options(),
        score: a.scoring.options(a.seed),
        group: a.scoring.group(),
    };
    let cmp = experiments::compare_models(&models, &data, &reference, &opts)?;
    let failed = write_comparison(&cmp, &a.out)?;
    Ok(if failed.is_empty() {
        Outcome::Complete
    } else {
        Outcome::Incomplete {
            reason: format!("{} cross-validation folds failed", failed.len()),
            details: failed,
        }
    })
}

fn rmse_csv(study: &RmseStudy) -> String {
    let mut out = String::from("rep,n,k,alpha,predictor,param,rmse\n");
    for r in &study.records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.rep,
            r.n,
            r.k,
            format_number(r.alpha),
            r.predictor.name(),
            field(&r.param),
            format_number(r.rmse)
        );
    }
    out
}

fn summary_csv(study: &RmseStudy) -> String {
    let mut out = String::from("n,k,alpha,predictor,param,reps,median,mean\n");
    for s in study.summarize() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.n,
            s.k,
            format_number(s.alpha),
            s.predictor.name(),
            field(&s.param),
            s.reps,
            format_number(s.median),
            format_number(s.mean)
        );
    }
    out
}

fn write_study(study: &RmseStudy, out: &Path) -> Result<Outcome> {
    write_text(&out.join("rmse.csv"), &rmse_csv(study))?;
    write_text(&out.join("summary.csv"), &summary_csv(study))?;
    write_json(&out.join("failures.json"), &study.failures)?;
    Ok(if study.failures.is_empty() {
        Outcome::Complete
    } else {
        Outcome::Incomplete {
            reason: format!("{} replications failed", study.failures.len()),
            details: study
                .failures
                .iter()
                .map(|f| format!("rep {} ({}): {}", f.rep, f.setting, f.error))
                .collect(),
        }
    })
}

pub fn experiment(a: &ExperimentArgs) -> Result<Outcome> {
    let reps = if a.paper_scale { 100 } else { a.reps };
    if reps == 0 {
        bail!("--reps must be positive");
    }
    let opts = a.smoothing.options();
    let pick = |given: &[usize], desk: &[usize], full: &[usize]| -> Vec<usize> {
        if !given.is_empty() {
            given.to_vec()
        } else if a.paper_scale {
            full.to_vec()
        } else {
            desk.to_vec()
        }
    };
    let single_n = |default: usize| -> Result<usize> {
        match a.ns.as_slice() {
            [] => Ok(default),
            [n] => Ok(*n),
            _ => bail!("this experiment takes a single --n"),
        }
    };
    let single_alpha = || -> Result<f64> {
        match a.alphas.as_slice() {
            [] => Ok(1.0),
            [x] => Ok(*x),
            _ => bail!("this experiment takes a single --alpha"),
        }
    };
    match a.name {
        Experiment::RmseVsN => {
            let ns = pick(&a.ns, &[500, 5000], &[100, 500, 1000, 5000, 10_000]);
            write_study(
                &experiments::rmse_vs_n(&ns, reps, single_alpha()?, a.seed, &opts),
                &a.out,
            )
        }
        Experiment::MisspecAlpha => {
            let alphas = if a.alphas.is_empty() {
                ALPHA_GRID.to_vec()
            } else {
                a.alphas.clone()
            };
            write_study(
                &experiments::misspec_alpha(&alphas, single_n(5000)?, reps, a.seed, &opts),
                &a.out,
            )
        }
        Experiment::DimSweep => {
            let ks = pick(&a.ks, &SUPPORTED_DIMS, &SUPPORTED_DIMS);
            write_study(
                &experiments::dim_sweep(&ks, single_n(5000)?, reps, single_alpha()?, a.seed, &opts),
                &a.out,
            )
        }
        Experiment::ModelCompare => {
            let cv = CvOptions {
                folds: a.folds,
                seed: a.seed,
                contiguous: false,
                fit: opts,
                score: a.scoring.options(a.seed),
                group: a.scoring.group(),
            };
            let cmp = experiments::model_compare(single_n(WEATHER_ROWS)?, a.seed, &cv)?;
            let failed = write_comparison(&cmp, &a.out)?;
            Ok(if failed.is_empty() {
                Outcome::Complete
            } else {
                Outcome::Incomplete {
                    reason: format!("{} cross-validation folds failed", failed.len()),
                    details: failed,
                }
            })
        }
    }
}

#[derive(Debug, Serialize)]
struct Accounting {
    model: String,
    flexible: usize,
    intercept: usize,
    zero: usize,
}

pub fn describe(a: &DescribeArgs) -> Result<Outcome> {
    let models: Vec<(String, ModelSpec)> = if a.model.builtin.as_deref() == Some("weather") {
        let dim = a.model.k.unwrap_or(cholgauss::simgen::WEATHER_DIM);
        weather_specs(dim)
            .into_iter()
            .map(|(n, s)| (n.to_string(), s))
            .collect()
    } else {
        vec![a.model.resolve()?]
    };
    let rows = models
        .iter()
        .map(|(name, spec)| {
            let c = spec.param_counts()?;
            Ok(Accounting {
                model: name.clone(),
                flexible: c.flexible,
                intercept: c.intercept,
                zero: c.zero,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&rows)?);
    } else {
        println!("model,flexible,intercept,zero");
        for r in rows {
            println!("{},{},{},{}", r.model, r.flexible, r.intercept, r.zero);
        }
    }
    Ok(Outcome::Complete)
}
