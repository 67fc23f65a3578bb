//! Prediction, simulation, scoring and cross-validation.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covparam::{modified_from_sigma, CovarianceMatrix};
use crate::error::{Error, Result};
use crate::estimate::{fit_pml, FitOptions, FitState, ModelSpec};
use crate::likelihood::loglik_generic;
use crate::simgen::{draw_gaussian, TrueParams};
use crate::table::Table;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Default variogram order and Monte Carlo size.
pub const VS_POWER: f64 = 0.5;
pub const VS_DRAWS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictedDistribution {
    pub row: usize,
    pub mu: Vec<f64>,
    pub sigma: CovarianceMatrix,
}

impl PredictedDistribution {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

#[derive(Debug, Clone)]
pub struct Predictions {
    pub rows: Vec<PredictedDistribution>,
    pub warnings: Vec<String>,
}

/// Predicted mean and covariance at every row of `data`.
pub fn predict(fit: &FitState, data: &Table) -> Result<Predictions> {
    let layout = fit.layout()?;
    let (eta, warnings) = fit.predictors(data)?;
    let np = layout.len();
    let k = layout.dim();
    let rows = (0..data.nrows())
        .map(|r| {
            let e = &eta[r * np..(r + 1) * np];
            let sigma = layout
                .covariance(e)
                .map_err(|err| Error::NumericalFailure(format!("row {r}: {err}")))?;
            Ok(PredictedDistribution {
                row: r,
                mu: e[..k].to_vec(),
                sigma,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Predictions { rows, warnings })
}

/// `m` draws `μ + Lε`; deterministic under `seed`.
pub fn simulate(dist: &PredictedDistribution, m: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    let l = dist.sigma.cholesky_lower()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..m)
        .map(|_| draw_gaussian(&dist.mu, &l, &mut rng))
        .collect())
}

fn check_y(dist: &PredictedDistribution, y: &[f64]) -> Result<()> {
    if y.len() != dist.dim() {
        return Err(Error::InvalidParameter(format!(
            "observation has length {}, expected {}",
            y.len(),
            dist.dim()
        )));
    }
    Ok(())
}

/// Dawid-Sebastiani score `log det Σ + (y-μ)ᵀΣ⁻¹(y-μ)`.
pub fn dss(dist: &PredictedDistribution, y: &[f64]) -> Result<f64> {
    check_y(dist, y)?;
    let l = dist.sigma.cholesky_lower()?;
    let k = dist.dim();
    let mut w = DVector::from_iterator(k, y.iter().zip(&dist.mu).map(|(y, m)| y - m));
    l.solve_lower_triangular_mut(&mut w);
    let logdet: f64 = 2.0 * (0..k).map(|i| l[(i, i)].ln()).sum::<f64>();
    Ok(logdet + w.norm_squared())
}

pub fn log_density(dist: &PredictedDistribution, y: &[f64]) -> Result<f64> {
    check_y(dist, y)?;
    loglik_generic(&dist.mu, &dist.sigma, y)
}

/// Variogram score with unit weights,
/// `Σ_{i<j} (|y_i - y_j|^p - Ê|Y_i - Y_j|^p)²`, the expectation taken over
/// `m` seeded draws from `dist`.
pub fn variogram_score(
    dist: &PredictedDistribution,
    y: &[f64],
    p: f64,
    m: usize,
    seed: u64,
) -> Result<f64> {
    check_y(dist, y)?;
    if !(p > 0.0) || m == 0 {
        return Err(Error::InvalidParameter(format!(
            "variogram needs p > 0 and m ≥ 1 (got p = {p}, m = {m})"
        )));
    }
    let k = dist.dim();
    let draws = simulate(dist, m, seed)?;
    let mut score = 0.0;
    for j in 1..k {
        for i in 0..j {
            let expected = draws
                .iter()
                .map(|d| (d[i] - d[j]).abs().powf(p))
                .sum::<f64>()
                / m as f64;
            let observed = (y[i] - y[j]).abs().powf(p);
            score += (observed - expected).powi(2);
        }
    }
    Ok(score)
}

/// Per-row seed for Monte Carlo scores.
pub fn row_seed(seed: u64, row: usize) -> u64 {
    seed ^ (row as u64)
        .wrapping_add(1)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// RMSE between true and fitted parameters (`μ_i`, `ψ_i`, `φ_ij`) over the
/// rows of `eval`, whose covariate column is passed to `truth`.
pub fn rmse_params<F>(
    fit: &FitState,
    eval: &Table,
    covariate: &str,
    truth: F,
) -> Result<Vec<(String, f64)>>
where
    F: Fn(f64) -> TrueParams,
{
    let x = eval.column(covariate)?;
    let pred = predict(fit, eval)?;
    let k = fit.spec.dim;
    let labels = crate::simgen::param_labels(k);
    let mut sq = vec![0.0; labels.len()];
    for (dist, &xv) in pred.rows.iter().zip(x) {
        let t = truth(xv);
        let est = modified_from_sigma(&dist.sigma)?;
        let t_psi = t.psi();
        let mut idx = 0;
        for i in 0..k {
            sq[idx] += (dist.mu[i] - t.mu[i]).powi(2);
            idx += 1;
        }
        for i in 0..k {
            sq[idx] += (est.psi()[i] - t_psi[i]).powi(2);
            idx += 1;
        }
        for (e, tv) in est.phi().iter().zip(&t.phi) {
            sq[idx] += (e - tv).powi(2);
            idx += 1;
        }
    }
    let n = x.len().max(1) as f64;
    Ok(labels
        .into_iter()
        .zip(sq)
        .map(|(l, s)| (l, (s / n).sqrt()))
        .collect())
}

/// How rows are grouped for score aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GroupBy {
    /// Year-month cells from `date` and `yday` columns.
    YearMonth,
    /// Values of a column, formatted as labels.
    Column {
        name: String,
    },
    None,
}

impl GroupBy {
    /// `YearMonth` when the data carries `date` and `yday`, else `None`.
    pub fn detect(data: &Table) -> Self {
        if data.has("date") && data.has("yday") {
            GroupBy::YearMonth
        } else {
            GroupBy::None
        }
    }

    pub fn labels(&self, data: &Table) -> Result<Vec<String>> {
        Ok(match self {
            GroupBy::YearMonth => {
                let date = data.column("date")?;
                let yday = data.column("yday")?;
                date.iter()
                    .zip(yday)
                    .map(|(d, y)| crate::simgen::year_month(*d, *y))
                    .collect()
            }
            GroupBy::Column { name } => data
                .column(name)?
                .iter()
                .map(|v| crate::table::format_number(*v))
                .collect(),
            GroupBy::None => vec!["all".to_string(); data.nrows()],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub row: usize,
    pub fold: usize,
    pub group: String,
    pub dss: f64,
    pub vs: f64,
    pub loglik: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldStatus {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub ok: bool,
    pub error: Option<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub count: usize,
    pub dss: f64,
    pub vs: f64,
    pub loglik: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePanel {
    pub dim: usize,
    pub rows: Vec<ScoreRow>,
    pub folds: Vec<FoldStatus>,
}

fn summarize<'a>(rows: impl Iterator<Item = &'a ScoreRow>) -> ScoreSummary {
    let mut s = ScoreSummary {
        count: 0,
        dss: 0.0,
        vs: 0.0,
        loglik: 0.0,
    };
    for r in rows {
        s.count += 1;
        s.dss += r.dss;
        s.vs += r.vs;
        s.loglik += r.loglik;
    }
    let c = s.count.max(1) as f64;
    ScoreSummary {
        dss: s.dss / c,
        vs: s.vs / c,
        loglik: s.loglik / c,
        ..s
    }
}

impl ScorePanel {
    pub fn all_ok(&self) -> bool {
        self.folds.iter().all(|f| f.ok)
    }

    pub fn overall(&self) -> ScoreSummary {
        summarize(self.rows.iter())
    }

    /// Mean scores per group label.
    pub fn by_group(&self) -> BTreeMap<String, ScoreSummary> {
        let mut groups: BTreeMap<String, Vec<&ScoreRow>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry(r.group.clone()).or_default().push(r);
        }
        groups
            .into_iter()
            .map(|(g, rows)| (g, summarize(rows.into_iter())))
            .collect()
    }

    /// Mean scores per fold.
    pub fn by_fold(&self) -> BTreeMap<usize, ScoreSummary> {
        let mut folds: BTreeMap<usize, Vec<&ScoreRow>> = BTreeMap::new();
        for r in &self.rows {
            folds.entry(r.fold).or_default().push(r);
        }
        folds
            .into_iter()
            .map(|(f, rows)| (f, summarize(rows.into_iter())))
            .collect()
    }

    /// Per-row CSV with header `row,fold,group,dss,vs,loglik`.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("row,fold,group,dss,vs,loglik\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.row,
                r.fold,
                r.group,
                crate::table::format_number(r.dss),
                crate::table::format_number(r.vs),
                crate::table::format_number(r.loglik)
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreOptions {
    pub vs_power: f64,
    pub vs_draws: usize,
    pub seed: u64,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            vs_power: VS_POWER,
            vs_draws: VS_DRAWS,
            seed: 1,
        }
    }
}

/// Scores of a fitted model on the rows of `data`; `ids` are the row
/// identifiers reported in the panel.
pub fn score_rows(
    fit: &FitState,
    data: &Table,
    ids: &[usize],
    groups: &[String],
    fold: usize,
    opts: &ScoreOptions,
) -> Result<Vec<ScoreRow>> {
    let pred = predict(fit, data)?;
    let response: Vec<&[f64]> = fit
        .spec
        .response_columns()
        .iter()
        .map(|c| data.column(c))
        .collect::<Result<_>>()?;
    pred.rows
        .iter()
        .map(|dist| {
            let r = dist.row;
            let y: Vec<f64> = response.iter().map(|c| c[r]).collect();
            Ok(ScoreRow {
                row: ids[r],
                fold,
                group: groups[r].clone(),
                dss: dss(dist, &y)?,
                vs: variogram_score(
                    dist,
                    &y,
                    opts.vs_power,
                    opts.vs_draws,
                    row_seed(opts.seed, ids[r]),
                )?,
                loglik: log_density(dist, &y)?,
            })
        })
        .collect()
}

/// Score a fit on its own data as a single-fold panel.
pub fn score_fit(
    fit: &FitState,
    data: &Table,
    group: &GroupBy,
    opts: &ScoreOptions,
) -> Result<ScorePanel> {
    let ids: Vec<usize> = (0..data.nrows()).collect();
    let labels = group.labels(data)?;
    let rows = score_rows(fit, data, &ids, &labels, 0, opts)?;
    let k = fit.spec.dim;
    Ok(ScorePanel {
        dim: k,
        rows,
        folds: vec![FoldStatus {
            fold: 0,
            n_train: fit.n_obs,
            n_test: data.nrows(),
            ok: true,
            error: None,
            warnings: Vec::new(),
        }],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    pub folds: usize,
    pub seed: u64,
    /// Contiguous blocks instead of a seeded random assignment.
    pub contiguous: bool,
    pub fit: FitOptions,
    pub score: ScoreOptions,
    pub group: Option<GroupBy>,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: 1,
            contiguous: false,
            fit: FitOptions::default(),
            score: ScoreOptions::default(),
            group: None,
        }
    }
}

/// Fold label of every row.
pub fn fold_assignment(n: usize, folds: usize, seed: u64, contiguous: bool) -> Vec<usize> {
    if contiguous {
        return (0..n).map(|r| r * folds / n.max(1)).collect();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut labels = vec![0; n];
    for (pos, &r) in order.iter().enumerate() {
        labels[r] = pos % folds;
    }
    labels
}

/// K-fold cross-validation: fit on all folds but one, score the held-out
/// fold. Folds run in parallel; a failing fold is recorded and skipped.
pub fn kfold_cv(spec: &ModelSpec, data: &Table, opts: &CvOptions) -> Result<ScorePanel> {
    if opts.folds < 2 || opts.folds > data.nrows() {
        return Err(Error::InvalidParameter(format!(
            "need 2 ≤ folds ≤ rows, got {} folds for {} rows",
            opts.folds,
            data.nrows()
        )));
    }
    spec.validate()?;
    let group = opts.group.clone().unwrap_or_else(|| GroupBy::detect(data));
    let labels = group.labels(data)?;
    let assignment = fold_assignment(data.nrows(), opts.folds, opts.seed, opts.contiguous);
    let results: Vec<(FoldStatus, Vec<ScoreRow>)> = (0..opts.folds)
        .into_par_iter()
        .map(|fold| {
            let train: Vec<usize> = (0..data.nrows())
                .filter(|&r| assignment[r] != fold)
                .collect();
            let test: Vec<usize> = (0..data.nrows())
                .filter(|&r| assignment[r] == fold)
                .collect();
            let outcome = fit_pml(spec, &data.select_rows(&train), &opts.fit).and_then(|fit| {
                let test_labels: Vec<String> = test.iter().map(|&r| labels[r].clone()).collect();
                let rows = score_rows(
                    &fit,
                    &data.select_rows(&test),
                    &test,
                    &test_labels,
                    fold,
                    &opts.score,
                )?;
                Ok((fit.warnings, rows))
            });
            let mut status = FoldStatus {
                fold,
                n_train: train.len(),
                n_test: test.len(),
                ok: true,
                error: None,
                warnings: Vec::new(),
            };
            match outcome {
                Ok((warnings, rows)) => {
                    status.warnings = warnings;
                    (status, rows)
                }
                Err(e) => {
                    log::warn!("fold {fold} failed: {e}");
                    status.ok = false;
                    status.error = Some(e.to_string());
                    (status, Vec::new())
                }
            }
        })
        .collect();
    let mut rows = Vec::with_capacity(data.nrows());
    let mut folds = Vec::with_capacity(opts.folds);
    for (status, r) in results {
        folds.push(status);
        rows.extend(r);
    }
    rows.sort_by_key(|r| r.row);
    Ok(ScorePanel {
        dim: spec.dim,
        rows,
        folds,
    })
}

/// Paired per-row differences `model - reference` over the rows scored in
/// both panels.
pub fn paired_differences(model: &ScorePanel, reference: &ScorePanel) -> Vec<ScoreRow> {
    let lookup: BTreeMap<usize, &ScoreRow> = reference.rows.iter().map(|r| (r.row, r)).collect();
    model
        .rows
        .iter()
        .filter_map(|r| {
            lookup.get(&r.row).map(|b| ScoreRow {
                row: r.row,
                fold: r.fold,
                group: r.group.clone(),
                dss: r.dss - b.dss,
                vs: r.vs - b.vs,
                loglik: r.loglik - b.loglik,
            })
        })
        .collect()
}

/// `dss + 2·loglik + k·log(2π)`, zero up to rounding.
pub fn dss_identity_residual(row: &ScoreRow, k: usize) -> f64 {
    row.dss + 2.0 * row.loglik + k as f64 * LN_2PI
}
