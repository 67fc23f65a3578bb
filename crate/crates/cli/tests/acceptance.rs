//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs without the libtest harness so the report is always printed. The
//! process fails when a criterion fails unexpectedly, or when a criterion
//! listed in [`KNOWN_FAILURES`] unexpectedly passes.

use std::process::{Command, ExitCode};
use std::time::Instant;

use cholgauss::covparam::correlation_from_sigma;
use cholgauss::estimate::{autocorrelation, fit_mcmc, fit_pml, FitOptions, McmcOptions};
use cholgauss::likelihood::{
    derivatives, loglik_basic, loglik_generic, loglik_modified, Family, Layout, ParamId,
    PredictorBundle,
};
use cholgauss::predict_score::{
    dss_identity_residual, kfold_cv, score_fit, CvOptions, GroupBy, ScoreOptions,
};
use cholgauss::simgen::{generate, shape_of, true_params, SimConfig};
use cholgauss::Table;
use cholgauss_cli::experiments::{self, simulation_spec, Predictor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Criteria that cannot hold as stated, with the reason printed alongside.
const KNOWN_FAILURES: &[(usize, &str)] = &[
    (
        4,
        "basic-Cholesky diagonal coordinate has second derivative -2a^2 - a(z - a), positive when a(z - a) < -2a^2",
    ),
    (
        6,
        "phi RMSEs of the three shapes lie within replication noise of each other, so their order depends on the seed",
    ),
];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn normal(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    sd * rng.sample::<f64, _>(StandardNormal)
}

/// A random predictor vector with a response drawn from the model.
/// Correlation predictors are kept small and redrawn until they form a
/// valid correlation matrix.
fn random_instance(layout: &Layout, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let k = layout.dim();
    let (eta, sigma) = loop {
        let eta: Vec<f64> = (0..layout.len())
            .map(|s| match layout.params()[s] {
                ParamId::Mu { .. } => normal(rng, 1.0),
                ParamId::RhoPair { .. } => normal(rng, 0.1),
                _ => normal(rng, 0.5),
            })
            .collect();
        if let Ok(sigma) = layout.covariance(&eta) {
            break (eta, sigma);
        }
    };
    let chol = sigma.cholesky_lower().expect("cholesky");
    let eps: Vec<f64> = (0..k).map(|_| normal(rng, 1.0)).collect();
    let y: Vec<f64> = (0..k)
        .map(|i| eta[i] + (0..=i).map(|m| chol[(i, m)] * eps[m]).sum::<f64>())
        .collect();
    (eta, y)
}

/// Central difference with one Richardson level.
fn richardson(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    let d = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    (4.0 * d(0.5 * h) - d(h)) / 3.0
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

const DIMS: [usize; 5] = [1, 2, 3, 5, 10];
const CHOLESKY: [Family; 2] = [Family::BasicChol, Family::ModifiedChol];

fn criterion_1() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_g, mut worst_h) = (0.0f64, 0.0f64);
    let h = 1e-4;
    for family in CHOLESKY {
        for k in DIMS {
            let layout = Layout::new(family, k, None).unwrap();
            for _ in 0..200 {
                let (eta, y) = random_instance(&layout, &mut rng);
                let d = derivatives(&layout, &eta, &y).unwrap();
                for s in 0..layout.len() {
                    let shifted = |delta: f64| {
                        let mut e = eta.clone();
                        e[s] += delta;
                        e
                    };
                    let g = richardson(
                        |dl| cholgauss::likelihood::loglik(&layout, &shifted(dl), &y).unwrap(),
                        h,
                    );
                    let hh = richardson(
                        |dl| derivatives(&layout, &shifted(dl), &y).unwrap().first[s],
                        h,
                    );
                    worst_g = worst_g.max(rel_err(d.first[s], g));
                    worst_h = worst_h.max(rel_err(d.second[s], hh));
                }
            }
        }
    }
    verdict(
        worst_g < 1e-6 && worst_h < 1e-5,
        format!("max rel. error gradient {worst_g:.2e} (< 1e-6), second derivative {worst_h:.2e} (< 1e-5)"),
    )
}

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for n in 0..1000 {
        let k = DIMS[n % DIMS.len()];
        let layout = Layout::new(Family::BasicChol, k, None).unwrap();
        let (eta, y) = random_instance(&layout, &mut rng);
        let basic = PredictorBundle::new(layout.clone(), eta.clone()).unwrap();
        let modified = basic.convert().unwrap();
        let lb = loglik_basic(&basic, &y).unwrap();
        let lm = loglik_modified(&modified, &y).unwrap();
        let lg = loglik_generic(&eta[..k], &layout.covariance(&eta).unwrap(), &y).unwrap();
        worst = worst.max((lb - lm).abs()).max((lb - lg).abs());
    }
    verdict(
        worst < 1e-10,
        format!("max |difference| {worst:.2e} over 1000 instances (< 1e-10)"),
    )
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut min_eig = f64::INFINITY;
    let mut bad = 0;
    for family in CHOLESKY {
        for n in 0..1000 {
            let k = DIMS[n % DIMS.len()];
            let layout = Layout::new(family, k, None).unwrap();
            let eta: Vec<f64> = (0..layout.len()).map(|_| normal(&mut rng, 1.0)).collect();
            match layout.covariance(&eta) {
                Ok(sigma) => {
                    let e = sigma.min_eigenvalue();
                    min_eig = min_eig.min(e);
                    if e <= 0.0 {
                        bad += 1;
                    }
                }
                Err(_) => bad += 1,
            }
        }
    }
    verdict(
        bad == 0,
        format!("{bad} of 2000 bundles not PD; smallest eigenvalue {min_eig:.2e}"),
    )
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut total = 0;
    let mut cases = Vec::new();
    for family in CHOLESKY {
        let mut positive = 0;
        let mut first = None;
        for n in 0..200 {
            let k = DIMS[n % DIMS.len()];
            let layout = Layout::new(family, k, None).unwrap();
            let (eta, y) = random_instance(&layout, &mut rng);
            let d = derivatives(&layout, &eta, &y).unwrap();
            for (s, &h) in d.second.iter().enumerate() {
                total += 1;
                if h > 0.0 {
                    positive += 1;
                    first.get_or_insert_with(|| {
                        format!("{} = {h:.3} at k={k}", layout.params()[s].label())
                    });
                }
            }
        }
        if let Some(at) = first {
            cases.push(format!("{} {positive} positive, e.g. {at}", family.name()));
        }
    }
    let detail = if cases.is_empty() {
        format!("all {total} second derivatives non-positive")
    } else {
        format!(
            "positive second derivatives among {total} checked: {}",
            cases.join("; ")
        )
    };
    verdict(cases.is_empty(), detail)
}

fn criterion_5() -> Verdict {
    let mut worst = 0.0f64;
    for g in 0..=1000 {
        let x = -1.0 + 2.0 * g as f64 / 1000.0;
        let sigma = true_params(x, 3, 1.0).sigma().unwrap();
        let (_, corr) = correlation_from_sigma(&sigma);
        worst = worst.max((corr[(0, 2)] - corr[(0, 1)] * corr[(1, 2)]).abs());
    }
    verdict(
        worst < 1e-12,
        format!("max |rho13 - rho12*rho23| {worst:.2e} on 1001 x values (< 1e-12)"),
    )
}

const PARAMS: [&str; 9] = [
    "mu[1]", "mu[2]", "mu[3]", "psi[1]", "psi[2]", "psi[3]", "phi[1,2]", "phi[1,3]", "phi[2,3]",
];

fn criterion_6() -> Verdict {
    let study = experiments::rmse_vs_n(&[500, 5000], 10, 1.0, 606, &FitOptions::default());
    if !study.failures.is_empty() {
        return verdict(
            false,
            format!("{} replications failed", study.failures.len()),
        );
    }
    let med = |n: usize, p: &str| study.median_of(n, 3, 1.0, Predictor::Spline, p).unwrap();
    let mut problems = Vec::new();
    for p in PARAMS {
        if med(5000, p) >= med(500, p) {
            problems.push(format!(
                "{p} not decreasing ({:.4} -> {:.4})",
                med(500, p),
                med(5000, p)
            ));
        }
    }
    for kind in ["mu", "psi", "phi"] {
        let by_shape = |shape: &str| {
            let p = PARAMS
                .iter()
                .find(|p| shape_of(p) == Some((kind, shape)))
                .unwrap();
            (*p, med(5000, p))
        };
        let (c, l, q) = (
            by_shape("constant"),
            by_shape("linear"),
            by_shape("quadratic"),
        );
        if !(c.1 <= l.1 && l.1 <= q.1) {
            problems.push(format!(
                "{kind} ordering {}={:.4}, {}={:.4}, {}={:.4}",
                c.0, c.1, l.0, l.1, q.0, q.1
            ));
        }
    }
    let summary: Vec<String> = PARAMS
        .iter()
        .map(|p| format!("{p} {:.3}->{:.3}", med(500, p), med(5000, p)))
        .collect();
    if problems.is_empty() {
        verdict(
            true,
            format!("median RMSE n=500 -> 5000: {}", summary.join(", ")),
        )
    } else {
        verdict(false, problems.join("; "))
    }
}

fn criterion_7() -> Verdict {
    let study = experiments::misspec_alpha(&[0.0, 1.0], 5000, 10, 707, &FitOptions::default());
    if !study.failures.is_empty() {
        return verdict(
            false,
            format!("{} replications failed", study.failures.len()),
        );
    }
    let med =
        |alpha: f64, pred: Predictor, p: &str| study.median_of(5000, 3, alpha, pred, p).unwrap();
    let ratio = med(1.0, Predictor::Linear, "mu[3]") / med(1.0, Predictor::Spline, "mu[3]");
    let mut problems = Vec::new();
    if ratio < 2.0 {
        problems.push(format!("alpha=1 mu[3] linear/spline ratio {ratio:.2} < 2"));
    }
    for p in PARAMS {
        let (lin, spl) = (
            med(0.0, Predictor::Linear, p),
            med(0.0, Predictor::Spline, p),
        );
        if lin > spl {
            problems.push(format!("alpha=0 {p} linear {lin:.4} > spline {spl:.4}"));
        }
    }
    if problems.is_empty() {
        verdict(true, format!("alpha=1 mu[3] linear/spline ratio {ratio:.2}; alpha=0 linear <= spline for all nine"))
    } else {
        verdict(false, problems.join("; "))
    }
}

fn criterion_8() -> Verdict {
    let study = experiments::dim_sweep(&[3, 10], 5000, 5, 1.0, 808, &FitOptions::default());
    if !study.failures.is_empty() {
        return verdict(
            false,
            format!("{} replications failed", study.failures.len()),
        );
    }
    let mut worst = (0.0f64, "");
    let mut parts = Vec::new();
    for p in &PARAMS[..6] {
        let a = study.median_of(5000, 3, 1.0, Predictor::Spline, p).unwrap();
        let b = study
            .median_of(5000, 10, 1.0, Predictor::Spline, p)
            .unwrap();
        let rel = (b - a).abs() / a;
        parts.push(format!("{p} {a:.4}/{b:.4}"));
        if rel > worst.0 {
            worst = (rel, p);
        }
    }
    verdict(
        worst.0 <= 0.25,
        format!(
            "largest relative change {:.1}% at {} (<= 25%); k=3/k=10: {}",
            100.0 * worst.0,
            worst.1,
            parts.join(", ")
        ),
    )
}

fn criterion_9() -> Verdict {
    let opts = CvOptions {
        seed: 909,
        ..CvOptions::default()
    };
    let cmp = match experiments::model_compare(cholgauss::simgen::WEATHER_ROWS, 909, &opts) {
        Ok(c) => c,
        Err(e) => return verdict(false, format!("comparison failed: {e}")),
    };
    if let Some((name, _)) = cmp.models.iter().find(|(_, p)| !p.all_ok()) {
        return verdict(false, format!("cross-validation folds failed for {name}"));
    }
    let share = |model: &str| {
        let diffs = cmp.group_dss_differences(model);
        diffs.values().filter(|d| **d < 0.0).count() as f64 / diffs.len() as f64
    };
    let (basic, modified) = (share("basic_chol"), share("modified_chol"));
    let overall: Vec<(String, f64)> = cmp
        .models
        .iter()
        .map(|(n, p)| (n.clone(), p.overall().dss))
        .collect();
    let worst = overall.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let means: Vec<String> = overall.iter().map(|(n, d)| format!("{n} {d:.3}")).collect();
    verdict(
        basic >= 0.7 && modified >= 0.7 && worst.0 == "ar1",
        format!(
            "cells beating const_corr: basic {:.0}%, modified {:.0}% (>= 70%); worst overall {}; mean DSS: {}",
            100.0 * basic,
            100.0 * modified,
            worst.0,
            means.join(", ")
        ),
    )
}

fn criterion_10() -> Verdict {
    let data = generate(&SimConfig::new(400, 3, 1.0, 1010).unwrap()).unwrap();
    let mut worst = 0.0f64;
    let mut rows = 0;
    let score = ScoreOptions {
        vs_draws: 100,
        ..ScoreOptions::default()
    };
    for family in [
        Family::BasicChol,
        Family::ModifiedChol,
        Family::Ar1,
        Family::ConstCorr,
    ] {
        let spec = cholgauss::estimate::ModelSpec::new(family, 3).with_formula("mu[i]", "s(x)");
        let fit = fit_pml(&spec, &data, &FitOptions::fixed(10.0)).unwrap();
        let in_sample = score_fit(&fit, &data, &GroupBy::None, &score).unwrap();
        let cv = kfold_cv(
            &spec,
            &data,
            &CvOptions {
                fit: FitOptions::fixed(10.0),
                score: score.clone(),
                ..CvOptions::default()
            },
        )
        .unwrap();
        for r in in_sample.rows.iter().chain(&cv.rows) {
            worst = worst.max(dss_identity_residual(r, 3).abs());
            rows += 1;
        }
    }
    verdict(
        worst < 1e-10,
        format!("max |dss + 2 loglik + k log 2pi| {worst:.2e} over {rows} scored rows (< 1e-10)"),
    )
}

fn criterion_11() -> Verdict {
    let data = generate(&SimConfig::new(5000, 3, 1.0, 1111).unwrap()).unwrap();
    let spec = simulation_spec(3, Predictor::Spline);
    let chain = match fit_mcmc(
        &spec,
        &data,
        &McmcOptions {
            seed: 1111,
            ..McmcOptions::default()
        },
    ) {
        Ok(c) => c,
        Err(e) => return verdict(false, format!("sampler failed: {e}")),
    };
    let grid_x: Vec<f64> = (0..=100).map(|g| -1.0 + 2.0 * g as f64 / 100.0).collect();
    let mut grid = Table::new();
    grid.insert("x", grid_x.clone()).unwrap();
    let params: Vec<ParamId> = chain.start.params.iter().map(|p| p.param).collect();
    let mut coverages = Vec::new();
    for param in &params {
        let bands = chain.credible_bands(*param, &grid, 0.95).unwrap();
        let covered = bands
            .iter()
            .zip(&grid_x)
            .filter(|(b, &x)| {
                let t = true_params(x, 3, 1.0);
                let truth = match *param {
                    ParamId::Mu { i } => t.mu[i],
                    ParamId::Psi { i } => t.psi()[i],
                    ParamId::Phi { i, j } => t.phi_at(i, j),
                    _ => unreachable!("modified Cholesky model"),
                };
                b.lower <= truth && truth <= b.upper
            })
            .count();
        coverages.push(covered as f64 / grid_x.len() as f64);
    }
    let coverage = coverages.iter().sum::<f64>() / coverages.len() as f64;
    let idx = chain.coefficient_index(ParamId::Mu { i: 0 }, 0, 0).unwrap();
    let acf = autocorrelation(&chain.trace(idx), 20);
    verdict(
        coverage >= 0.85 && acf < 0.3,
        format!("mean 95% band coverage {:.1}% (>= 85%); lag-20 acf of mu[1] intercept {acf:.3} (< 0.3)", 100.0 * coverage),
    )
}

fn criterion_12() -> Verdict {
    let out = Command::new(env!("CARGO_BIN_EXE_cholgauss"))
        .args(["describe", "--builtin", "weather"])
        .output();
    let out = match out {
        Ok(o) if o.status.success() => String::from_utf8_lossy(&o.stdout).into_owned(),
        Ok(o) => return verdict(false, format!("describe exited with {}", o.status)),
        Err(e) => return verdict(false, format!("could not run the binary: {e}")),
    };
    let expected = [
        ("basic_chol", "55,0,0"),
        ("modified_chol", "55,0,0"),
        ("basic_chol_ad5", "45,0,10"),
        ("modified_chol_ad5", "45,0,10"),
        ("ar1", "11,0,44"),
        ("const_corr", "10,45,0"),
    ];
    let lines: Vec<&str> = out.lines().skip(1).collect();
    let ok = lines.len() == expected.len()
        && lines
            .iter()
            .zip(expected)
            .all(|(line, (name, counts))| *line == format!("{name},{counts}"));
    verdict(ok, format!("CLI reported {}", lines.join(" | ")))
}

fn main() -> ExitCode {
    let criteria: [(usize, &str, fn() -> Verdict); 12] = [
        (1, "derivative correctness", criterion_1),
        (2, "likelihood equivalence", criterion_2),
        (3, "unconstrained positive definiteness", criterion_3),
        (4, "concavity in coordinates", criterion_4),
        (5, "AD-1 correlation identity", criterion_5),
        (6, "simulation recovery", criterion_6),
        (7, "misspecification", criterion_7),
        (8, "dimension robustness", criterion_8),
        (9, "model comparison on the weather analog", criterion_9),
        (10, "DSS affine identity", criterion_10),
        (11, "MCMC sanity", criterion_11),
        (12, "parameter accounting", criterion_12),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let mut unexpected = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let v = run();
        let secs = start.elapsed().as_secs_f64();
        let known = KNOWN_FAILURES.iter().find(|(k, _)| *k == id);
        let status = match (v.pass, known) {
            (true, None) => "PASS".to_string(),
            (false, Some((_, why))) => format!("FAIL (known: {why})"),
            (false, None) => {
                unexpected += 1;
                "FAIL".to_string()
            }
            (true, Some(_)) => {
                unexpected += 1;
                "PASS (listed as a known failure)".to_string()
            }
        };
        println!(
            "criterion {id:>2} [{name}] {status}: {} ({secs:.1}s)",
            v.detail
        );
    }
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{unexpected} criteria did not match their expected outcome");
        ExitCode::FAILURE
    }
}
