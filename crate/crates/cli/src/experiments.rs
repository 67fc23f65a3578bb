//! Simulation-study and model-comparison drivers.
//!
//! Replications run in parallel on the current rayon pool. Every
//! replication draws its data from a seed derived from the base seed and
//! its coordinates, so results do not depend on scheduling.

use std::collections::BTreeMap;

use cholgauss::estimate::{fit_pml, weather_specs, FitOptions, ModelSpec};
use cholgauss::likelihood::Family;
use cholgauss::predict_score::{kfold_cv, paired_differences, rmse_params, CvOptions, ScorePanel};
use cholgauss::simgen::{generate, generate_weather_analog, true_params, SimConfig};
use cholgauss::table::Table;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Random evaluation points for RMSE.
pub const EVAL_POINTS: usize = 10_000;

/// Predictor specification used in the simulation studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictor {
    Spline,
    Linear,
}

impl Predictor {
    pub fn name(self) -> &'static str {
        match self {
            Predictor::Spline => "spline",
            Predictor::Linear => "linear",
        }
    }

    fn term(self) -> &'static str {
        match self {
            Predictor::Spline => "s(x)",
            Predictor::Linear => "x",
        }
    }
}

/// Modified Cholesky model in which every parameter depends on `x`.
pub fn simulation_spec(k: usize, predictor: Predictor) -> ModelSpec {
    let term = predictor.term();
    ModelSpec::new(Family::ModifiedChol, k)
        .with_formula("mu[i]", term)
        .with_formula("psi[i]", term)
        .with_formula("phi[i,j]", term)
}

/// SplitMix64 mixing of a base seed with coordinates.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(p.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

fn eval_points(seed: u64) -> Table {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Table::new();
    t.insert(
        "x",
        (0..EVAL_POINTS)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .expect("fresh table");
    t
}

/// One replication-parameter RMSE value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseRecord {
    pub rep: usize,
    pub n: usize,
    pub k: usize,
    pub alpha: f64,
    pub predictor: Predictor,
    pub param: String,
    pub rmse: f64,
}

/// A replication that could not be completed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub rep: usize,
    pub setting: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RmseStudy {
    pub records: Vec<RmseRecord>,
    pub failures: Vec<Failure>,
}

#[derive(Debug, Clone, Copy)]
struct Setting {
    n: usize,
    k: usize,
    alpha: f64,
    predictor: Predictor,
}

fn run_setting(
    setting: Setting,
    rep: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<Vec<RmseRecord>, Failure> {
    let Setting {
        n,
        k,
        alpha,
        predictor,
    } = setting;
    let label = format!("n={n} k={k} alpha={alpha} {}", predictor.name());
    let fail = |e: cholgauss::Error| Failure {
        rep,
        setting: label.clone(),
        error: e.to_string(),
    };
    let data_seed = derive_seed(seed, &[n as u64, k as u64, alpha.to_bits(), rep as u64]);
    let data = generate(&SimConfig::new(n, k, alpha, data_seed).map_err(fail)?).map_err(fail)?;
    let fit = fit_pml(&simulation_spec(k, predictor), &data, opts).map_err(fail)?;
    let eval = eval_points(derive_seed(data_seed, &[1]));
    let rmse = rmse_params(&fit, &eval, "x", |x| true_params(x, k, alpha)).map_err(fail)?;
    Ok(rmse
        .into_iter()
        .map(|(param, rmse)| RmseRecord {
            rep,
            n,
            k,
            alpha,
            predictor,
            param,
            rmse,
        })
        .collect())
}

fn run_study(settings: &[Setting], reps: usize, seed: u64, opts: &FitOptions) -> RmseStudy {
    let jobs: Vec<(Setting, usize)> = settings
        .iter()
        .flat_map(|s| (0..reps).map(move |r| (*s, r)))
        .collect();
    let results: Vec<Result<Vec<RmseRecord>, Failure>> = jobs
        .par_iter()
        .map(|(s, rep)| run_setting(*s, *rep, seed, opts))
        .collect();
    let mut study = RmseStudy::default();
    for r in results {
        match r {
            Ok(records) => study.records.extend(records),
            Err(f) => {
                log::warn!("replication {} ({}) failed: {}", f.rep, f.setting, f.error);
                study.failures.push(f);
            }
        }
    }
    study
}

/// RMSE against sample size for the trivariate spline model.
pub fn rmse_vs_n(ns: &[usize], reps: usize, alpha: f64, seed: u64, opts: &FitOptions) -> RmseStudy {
    let settings: Vec<Setting> = ns
        .iter()
        .map(|&n| Setting {
            n,
            k: 3,
            alpha,
            predictor: Predictor::Spline,
        })
        .collect();
    run_study(&settings, reps, seed, opts)
}

/// Spline against linear predictors across nonlinearity levels.
pub fn misspec_alpha(
    alphas: &[f64],
    n: usize,
    reps: usize,
    seed: u64,
    opts: &FitOptions,
) -> RmseStudy {
    let settings: Vec<Setting> = alphas
        .iter()
        .flat_map(|&alpha| {
            [Predictor::Spline, Predictor::Linear].map(|predictor| Setting {
                n,
                k: 3,
                alpha,
                predictor,
            })
        })
        .collect();
    run_study(&settings, reps, seed, opts)
}

/// Spline model across response dimensions.
pub fn dim_sweep(
    ks: &[usize],
    n: usize,
    reps: usize,
    alpha: f64,
    seed: u64,
    opts: &FitOptions,
) -> RmseStudy {
    let settings: Vec<Setting> = ks
        .iter()
        .map(|&k| Setting {
            n,
            k,
            alpha,
            predictor: Predictor::Spline,
        })
        .collect();
    run_study(&settings, reps, seed, opts)
}

/// Median RMSE per setting and parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseSummary {
    pub n: usize,
    pub k: usize,
    pub alpha: f64,
    pub predictor: Predictor,
    pub param: String,
    pub reps: usize,
    pub median: f64,
    pub mean: f64,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let m = values.len();
    if m == 0 {
        f64::NAN
    } else if m % 2 == 1 {
        values[m / 2]
    } else {
        0.5 * (values[m / 2 - 1] + values[m / 2])
    }
}

impl RmseStudy {
    pub fn summarize(&self) -> Vec<RmseSummary> {
        let mut order: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &self.records {
            let next = order.len();
            order.entry(r.param.as_str()).or_insert(next);
        }
        let mut groups: BTreeMap<(usize, usize, u64, Predictor, usize, String), Vec<f64>> =
            BTreeMap::new();
        for r in &self.records {
            groups
                .entry((
                    r.n,
                    r.k,
                    r.alpha.to_bits(),
                    r.predictor,
                    order[r.param.as_str()],
                    r.param.clone(),
                ))
                .or_default()
                .push(r.rmse);
        }
        groups
            .into_iter()
            .map(|((n, k, alpha, predictor, _, param), mut values)| {
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                RmseSummary {
                    n,
                    k,
                    alpha: f64::from_bits(alpha),
                    predictor,
                    param,
                    reps: values.len(),
                    median: median(&mut values),
                    mean,
                }
            })
            .collect()
    }

    pub fn median_of(
        &self,
        n: usize,
        k: usize,
        alpha: f64,
        predictor: Predictor,
        param: &str,
    ) -> Option<f64> {
        let mut values: Vec<f64> = self
            .records
            .iter()
            .filter(|r| {
                r.n == n
                    && r.k == k
                    && r.alpha == alpha
                    && r.predictor == predictor
                    && r.param == param
            })
            .map(|r| r.rmse)
            .collect();
        (!values.is_empty()).then(|| median(&mut values))
    }
}

/// Cross-validated score panels of several models on one data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub reference: String,
    pub models: Vec<(String, ScorePanel)>,
}

impl Comparison {
    pub fn panel(&self, name: &str) -> Option<&ScorePanel> {
        self.models.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    /// Per-group mean of `model - reference` DSS differences.
    pub fn group_dss_differences(&self, model: &str) -> BTreeMap<String, f64> {
        let (Some(m), Some(r)) = (self.panel(model), self.panel(&self.reference)) else {
            return BTreeMap::new();
        };
        let diffs = paired_differences(m, r);
        let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for d in diffs {
            let e = acc.entry(d.group).or_default();
            e.0 += d.dss;
            e.1 += 1;
        }
        acc.into_iter()
            .map(|(g, (s, c))| (g, s / c as f64))
            .collect()
    }
}

/// Cross-validate several named specs on the same data.
pub fn compare_models(
    specs: &[(String, ModelSpec)],
    data: &Table,
    reference: &str,
    opts: &CvOptions,
) -> cholgauss::Result<Comparison> {
    if !specs.iter().any(|(n, _)| n == reference) {
        return Err(cholgauss::Error::InvalidParameter(format!(
            "reference model `{reference}` is not among the models"
        )));
    }
    let mut models = Vec::with_capacity(specs.len());
    for (name, spec) in specs {
        log::info!("cross-validating {name}");
        models.push((name.clone(), kfold_cv(spec, data, opts)?));
    }
    Ok(Comparison {
        reference: reference.to_string(),
        models,
    })
}

/// The six weather models on the synthetic analog, referenced to the
/// constant-correlation model.
pub fn model_compare(n: usize, seed: u64, opts: &CvOptions) -> cholgauss::Result<Comparison> {
    let data = generate_weather_analog(n, seed)?;
    let specs: Vec<(String, ModelSpec)> = weather_specs(cholgauss::simgen::WEATHER_DIM)
        .into_iter()
        .map(|(n, s)| (n.to_string(), s))
        .collect();
    compare_models(&specs, &data, "const_corr", opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_depend_on_every_part() {
        let a = derive_seed(1, &[2, 3]);
        assert_ne!(a, derive_seed(1, &[3, 2]));
        assert_ne!(a, derive_seed(2, &[2, 3]));
        assert_eq!(a, derive_seed(1, &[2, 3]));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }

    #[test]
    fn small_rmse_study_has_expected_shape() {
        let study = rmse_vs_n(&[100, 200], 2, 1.0, 3, &FitOptions::fixed(10.0));
        assert!(study.failures.is_empty());
        assert_eq!(study.records.len(), 2 * 2 * 9);
        let summary = study.summarize();
        assert_eq!(summary.len(), 2 * 9);
        assert_eq!(summary[0].param, "mu[1]");
        assert_eq!(summary[0].reps, 2);
    }
}
