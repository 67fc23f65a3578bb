//! Synthetic data generators with known truth.
//!
//! # Trivariate design and its extension
//!
//! With covariate `x ∈ (-1, 1)` and nonlinearity `α ≥ 0`, the three-dimensional
//! pattern is
//!
//! ```text
//! μ     = (1, 1 + x, 1 + αx²)
//! log ψ = (-2, -2 + x, -2 + αx²)
//! φ12 = (1 + αx²)/4,  φ13 = 0,  φ23 = (3 + x)/4
//! ```
//!
//! For `k > 3` the pattern repeats with period three: `μ_{i+3} = μ_i`,
//! `log ψ_{i+3} = log ψ_i`, `φ_{i+2,i+3} = φ_{i,i+1}` and every lag above one
//! is zero. Responses are drawn as `y = μ + Lε` where `LLᵀ = Σ(x)`.
//!
//! # Weather analog
//!
//! Ten lead times `i = 1..10`, six hours apart, observed on `n` distinct days
//! drawn without replacement from a run of consecutive days (1826 days for
//! `n = 1798`). With `s = 2π·yday/365.25` and the diurnal phase
//! `d_i = sin(2π i/4)`, and the fall weight `f = ((1 - sin s)/2)³`:
//!
//! ```text
//! climate    c_i   = 8 - 7 cos s + 2 d_i (1 + 0.5 cos s)
//! anomaly    u     ~ N(0, U),  U_ij = 9 · 0.8^|i-j|
//! ens. mean  mean_i = c_i + u_i
//! error      a     ~ N(0, Σ(yday)) through the modified Cholesky form
//!   log ψ_i       = -0.6 + 0.05 i + 0.3 cos s + 0.25 d_i
//!   φ_{i-1,i}     = 0.55 + 0.15 cos s + (0.1 + 0.4 f) d_i
//!   φ_{i-4,i}     = 0.2 + 0.2 f
//!   other φ       = 0
//! bias       b_i   = 0.5 sin s
//! observation obs_i = mean_i + b_i + a_i
//! spread     logsd_i = 0.3 + 0.1 · ½ log ψ_i + N(0, 0.25²)
//! ```
//!
//! Columns: `date` (day index), `yday`, `mean_1..10`, `logsd_1..10`,
//! `obs_1..10`.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::covparam::{
    offdiag_index, offdiag_len, sigma_from_modified, CovarianceMatrix, ModifiedCholParams,
};
use crate::error::{Error, Result};
use crate::table::Table;

/// Dimensions supported by the repeating trivariate pattern.
pub const SUPPORTED_DIMS: [usize; 4] = [3, 5, 10, 15];

/// Default nonlinearity sweep.
pub const ALPHA_GRID: [f64; 6] = [0.0, 0.1, 0.25, 0.5, 1.0, 2.0];

pub const WEATHER_DIM: usize = 10;
pub const WEATHER_ROWS: usize = 1798;
const WEATHER_DAYS: usize = 1826;
const YEAR: f64 = 365.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub k: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(n: usize, k: usize, alpha: f64, seed: u64) -> Result<Self> {
        let cfg = Self { n, k, alpha, seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_DIMS.contains(&self.k) {
            return Err(Error::InvalidParameter(format!(
                "dimension {} is not supported; use one of {SUPPORTED_DIMS:?}",
                self.k
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "nonlinearity {} must be finite and non-negative",
                self.alpha
            )));
        }
        if self.n == 0 {
            return Err(Error::InvalidParameter("n must be at least 1".into()));
        }
        Ok(())
    }
}

/// True distributional parameters at one covariate value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueParams {
    pub mu: Vec<f64>,
    pub log_psi: Vec<f64>,
    /// Off-diagonal autoregressive parameters in `offdiag_index` order.
    pub phi: Vec<f64>,
}

impl TrueParams {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn psi(&self) -> Vec<f64> {
        self.log_psi.iter().map(|v| v.exp()).collect()
    }

    pub fn phi_at(&self, i: usize, j: usize) -> f64 {
        self.phi[offdiag_index(i, j)]
    }

    pub fn modified(&self) -> Result<ModifiedCholParams> {
        ModifiedCholParams::new(self.psi(), self.phi.clone())
    }

    pub fn sigma(&self) -> Result<CovarianceMatrix> {
        sigma_from_modified(&self.modified()?)
    }
}

/// Truth of the trivariate pattern at `x` for dimension `k`.
pub fn true_params(x: f64, k: usize, alpha: f64) -> TrueParams {
    let quad = alpha * x * x;
    let mu3 = [1.0, 1.0 + x, 1.0 + quad];
    let lpsi3 = [-2.0, -2.0 + x, -2.0 + quad];
    let lag1 = [(1.0 + quad) / 4.0, (3.0 + x) / 4.0];
    let mu = (0..k).map(|i| mu3[i % 3]).collect();
    let log_psi = (0..k).map(|i| lpsi3[i % 3]).collect();
    let mut phi = vec![0.0; offdiag_len(k)];
    for j in 1..k {
        phi[offdiag_index(j - 1, j)] = lag1[(j - 1) % 2];
    }
    TrueParams { mu, log_psi, phi }
}

/// Draw `x ~ U(-1, 1)` and `y | x` from the trivariate pattern.
pub fn generate(cfg: &SimConfig) -> Result<Table> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.k;
    let mut x = Vec::with_capacity(cfg.n);
    let mut ys = vec![Vec::with_capacity(cfg.n); k];
    for _ in 0..cfg.n {
        let xv: f64 = rng.random_range(-1.0..1.0);
        let truth = true_params(xv, k, cfg.alpha);
        let chol = truth.sigma()?.cholesky_lower()?;
        let draw = draw_gaussian(&truth.mu, &chol, &mut rng);
        x.push(xv);
        for (col, v) in ys.iter_mut().zip(draw.iter()) {
            col.push(*v);
        }
    }
    let mut table = Table::new();
    table.insert("x", x)?;
    for (i, col) in ys.into_iter().enumerate() {
        table.insert(format!("y_{}", i + 1), col)?;
    }
    Ok(table)
}

/// `μ + Lε` with standard normal `ε`.
pub fn draw_gaussian<R: Rng>(mu: &[f64], chol_lower: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let eps = DVector::from_iterator(
        mu.len(),
        (0..mu.len()).map(|_| rng.sample::<f64, _>(StandardNormal)),
    );
    DVector::from_column_slice(mu) + chol_lower * eps
}

/// Parameter labels of the trivariate pattern in reporting order.
pub fn param_labels(k: usize) -> Vec<String> {
    let mut out: Vec<String> = (1..=k).map(|i| format!("mu[{i}]")).collect();
    out.extend((1..=k).map(|i| format!("psi[{i}]")));
    for j in 1..k {
        for i in 0..j {
            out.push(format!("phi[{},{}]", i + 1, j + 1));
        }
    }
    out
}

/// Whether a trivariate-pattern parameter is constant, linear or quadratic
/// in `x` (for `α > 0`).
pub fn shape_of(label: &str) -> Option<(&'static str, &'static str)> {
    Some(match label {
        "mu[1]" => ("mu", "constant"),
        "mu[2]" => ("mu", "linear"),
        "mu[3]" => ("mu", "quadratic"),
        "psi[1]" => ("psi", "constant"),
        "psi[2]" => ("psi", "linear"),
        "psi[3]" => ("psi", "quadratic"),
        "phi[1,3]" => ("phi", "constant"),
        "phi[2,3]" => ("phi", "linear"),
        "phi[1,2]" => ("phi", "quadratic"),
        _ => return None,
    })
}

/// Truth on an `x` grid as a table: `x`, `mu_i`, `psi_i`, `phi_i_j`.
pub fn truth_table(xs: &[f64], k: usize, alpha: f64) -> Result<Table> {
    let truths: Vec<TrueParams> = xs.iter().map(|&x| true_params(x, k, alpha)).collect();
    let mut t = Table::new();
    t.insert("x", xs.to_vec())?;
    for i in 0..k {
        t.insert(
            format!("mu_{}", i + 1),
            truths.iter().map(|p| p.mu[i]).collect(),
        )?;
    }
    for i in 0..k {
        t.insert(
            format!("psi_{}", i + 1),
            truths.iter().map(|p| p.log_psi[i].exp()).collect(),
        )?;
    }
    for j in 1..k {
        for i in 0..j {
            t.insert(
                format!("phi_{}_{}", i + 1, j + 1),
                truths.iter().map(|p| p.phi_at(i, j)).collect(),
            )?;
        }
    }
    Ok(t)
}

/// Error-covariance parameters of the weather analog on day-of-year `yday`.
pub fn weather_error_params(yday: f64) -> TrueParams {
    let k = WEATHER_DIM;
    let s = 2.0 * std::f64::consts::PI * yday / YEAR;
    let diurnal = |i: usize| (2.0 * std::f64::consts::PI * i as f64 / 4.0).sin();
    let fall = ((1.0 - s.sin()) / 2.0).powi(3);
    let log_psi = (1..=k)
        .map(|i| -0.6 + 0.05 * i as f64 + 0.3 * s.cos() + 0.25 * diurnal(i))
        .collect();
    let mut phi = vec![0.0; offdiag_len(k)];
    for j in 1..k {
        phi[offdiag_index(j - 1, j)] = 0.55 + 0.15 * s.cos() + (0.1 + 0.4 * fall) * diurnal(j + 1);
        if j >= 4 {
            phi[offdiag_index(j - 4, j)] = 0.2 + 0.2 * fall;
        }
    }
    TrueParams {
        mu: vec![0.0; k],
        log_psi,
        phi,
    }
}

fn weather_climate(yday: f64, i: usize) -> f64 {
    let s = 2.0 * std::f64::consts::PI * yday / YEAR;
    let d = (2.0 * std::f64::consts::PI * i as f64 / 4.0).sin();
    8.0 - 7.0 * s.cos() + 2.0 * d * (1.0 + 0.5 * s.cos())
}

/// Ten-lead-time forecast/observation analog; see the module docs.
pub fn generate_weather_analog(n: usize, seed: u64) -> Result<Table> {
    if n == 0 {
        return Err(Error::InvalidParameter("n must be at least 1".into()));
    }
    let k = WEATHER_DIM;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = (n * WEATHER_DAYS).div_ceil(WEATHER_ROWS).max(n);
    let mut days: Vec<usize> = sample(&mut rng, span, n).into_vec();
    days.sort_unstable();

    let anomaly = DMatrix::from_fn(k, k, |i, j| 9.0 * 0.8f64.powi((i as i32 - j as i32).abs()));
    let anomaly_chol = anomaly
        .cholesky()
        .expect("anomaly covariance is positive definite")
        .l();
    let noise = Normal::new(0.0, 0.25).expect("valid normal");

    let mut date = Vec::with_capacity(n);
    let mut yday = Vec::with_capacity(n);
    let mut mean = vec![Vec::with_capacity(n); k];
    let mut logsd = vec![Vec::with_capacity(n); k];
    let mut obs = vec![Vec::with_capacity(n); k];
    let zeros = vec![0.0; k];
    for &day in &days {
        let t = day as f64;
        let yd = (t - YEAR * (t / YEAR).floor()).floor();
        let s = 2.0 * std::f64::consts::PI * yd / YEAR;
        let params = weather_error_params(yd);
        let err_chol = params.sigma()?.cholesky_lower()?;
        let u = draw_gaussian(&zeros, &anomaly_chol, &mut rng);
        let a = draw_gaussian(&zeros, &err_chol, &mut rng);
        date.push(t);
        yday.push(yd);
        for i in 0..k {
            let m = weather_climate(yd, i + 1) + u[i];
            mean[i].push(m);
            obs[i].push(m + 0.5 * s.sin() + a[i]);
            logsd[i].push(0.3 + 0.05 * params.log_psi[i] + noise.sample(&mut rng));
        }
    }
    let mut table = Table::new();
    table.insert("date", date)?;
    table.insert("yday", yday)?;
    for (i, col) in mean.into_iter().enumerate() {
        table.insert(format!("mean_{}", i + 1), col)?;
    }
    for (i, col) in logsd.into_iter().enumerate() {
        table.insert(format!("logsd_{}", i + 1), col)?;
    }
    for (i, col) in obs.into_iter().enumerate() {
        table.insert(format!("obs_{}", i + 1), col)?;
    }
    Ok(table)
}

/// Year-month cell of a weather-analog row, e.g. `y2-m07`.
pub fn year_month(date: f64, yday: f64) -> String {
    let year = (date / YEAR).floor() as i64 + 1;
    let month = ((yday / (YEAR / 12.0)).floor() as i64).clamp(0, 11) + 1;
    format!("y{year}-m{month:02}")
}
