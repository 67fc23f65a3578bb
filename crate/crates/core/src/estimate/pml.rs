//! Penalized maximum likelihood by blockwise Newton iterations.
//!
//! Each sweep visits the distributional parameters in layout order. For
//! parameter `p` with design `X`, per-row scores `g` and working weights
//! `w = max(-∂²ℓ/∂η², floor)` the step is
//!
//! `Δβ = (XᵀWX + S_λ)⁻¹ (Xᵀg - S_λ β)`
//!
//! followed by step halving until the penalized log-likelihood
//! `ℓ(β) - ½ Σ λ βᵀSβ` does not decrease. Correlation parameters of the
//! constant-correlation family are stepped jointly with a shared step
//! length. Smoothing parameters are either fixed or picked term by term
//! from a grid by AIC with `edf = tr((XᵀWX + S_λ)⁻¹ XᵀWX)`.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::problem::{solve_spd, sum_rows, Problem};
use super::spec::ModelSpec;
use super::state::FitState;
use crate::basis::BasisInfo;
use crate::error::{Error, Result};
use crate::likelihood::{Family, ParamId};
use crate::table::Table;

/// Default AIC grid `10^-2, ..., 10^6`.
pub fn default_lambda_grid() -> Vec<f64> {
    (-2..=6).map(|e| 10f64.powi(e)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Smoothing {
    /// The same smoothing parameter for every penalized term.
    Fixed { lambda: f64 },
    /// Term-by-term AIC minimization over a grid.
    AicGrid { grid: Vec<f64> },
}

impl Default for Smoothing {
    fn default() -> Self {
        Smoothing::AicGrid {
            grid: default_lambda_grid(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub smoothing: Smoothing,
    /// Smoothing parameter used before grid selection.
    pub initial_lambda: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub max_halvings: usize,
    /// Newton steps per grid candidate during selection.
    pub inner_steps: usize,
    pub weight_floor: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            smoothing: Smoothing::default(),
            initial_lambda: 10.0,
            max_iter: 200,
            tol: 1e-8,
            max_halvings: 30,
            inner_steps: 3,
            weight_floor: 1e-10,
        }
    }
}

impl FitOptions {
    pub fn fixed(lambda: f64) -> Self {
        Self {
            smoothing: Smoothing::Fixed { lambda },
            initial_lambda: lambda,
            ..Self::default()
        }
    }
}

pub(crate) struct Fitter<'a> {
    pub problem: Problem,
    opts: &'a FitOptions,
    /// Effective degrees of freedom per parameter and term.
    pub term_edf: Vec<Vec<f64>>,
    ridge_warned: bool,
}

impl<'a> Fitter<'a> {
    pub fn new(mut problem: Problem, opts: &'a FitOptions) -> Result<Self> {
        problem.rows_ll = problem.compute_rows_ll().ok_or_else(|| {
            Error::NumericalFailure("log-likelihood is not finite at the starting values".into())
        })?;
        let term_edf = problem
            .params
            .iter()
            .map(|pm| vec![0.0; pm.blocks.len()])
            .collect();
        Ok(Self {
            problem,
            opts,
            term_edf,
            ridge_warned: false,
        })
    }

    /// Update groups in sweep order.
    fn groups(&self) -> Vec<Vec<usize>> {
        let params = self.problem.layout.params();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut rho = Vec::new();
        for (p, id) in params.iter().enumerate() {
            if self.problem.params[p].ncols() == 0 {
                continue;
            }
            if self.problem.layout.family() == Family::ConstCorr
                && matches!(id, ParamId::RhoPair { .. })
            {
                rho.push(p);
            } else {
                groups.push(vec![p]);
            }
        }
        if !rho.is_empty() {
            groups.push(rho);
        }
        groups
    }

    /// Newton direction for parameter `p`, recording its edf.
    fn direction(&mut self, p: usize) -> Result<DVector<f64>> {
        let (g, h) = self.problem.coord_derivatives(p)?;
        let pm = &self.problem.params[p];
        let (xtwx, xtg) =
            self.problem
                .working_system(p, 0..pm.ncols(), &g, &h, self.opts.weight_floor);
        let s = pm.penalty_matrix();
        let lhs = &xtwx + &s;
        let rhs = xtg - &s * &pm.beta;
        let (delta, chol, ridged) = solve_spd(&lhs, &rhs).ok_or_else(|| {
            Error::NumericalFailure(format!(
                "normal equations for {} could not be solved",
                pm.id.label()
            ))
        })?;
        if ridged && !self.ridge_warned {
            let msg = format!("{}: singular normal equations, ridge added", pm.id.label());
            log::warn!("{msg}");
            self.problem.warnings.push(msg);
            self.ridge_warned = true;
        }
        let influence = chol.solve(&xtwx);
        self.term_edf[p] = (0..pm.blocks.len())
            .map(|b| pm.block_range(b).map(|c| influence[(c, c)]).sum())
            .collect();
        Ok(delta)
    }

    /// One damped Newton step for a group of parameters; returns the new
    /// penalized log-likelihood.
    pub fn step(&mut self, group: &[usize]) -> Result<f64> {
        let start = self.problem.penalized_loglik();
        let mut deltas = Vec::with_capacity(group.len());
        for &p in group {
            deltas.push(self.direction(p)?);
        }
        let old: Vec<DVector<f64>> = group
            .iter()
            .map(|&p| self.problem.params[p].beta.clone())
            .collect();
        let mut t = 1.0;
        let mut any_finite = false;
        for _ in 0..=self.opts.max_halvings {
            for ((&p, b0), d) in group.iter().zip(&old).zip(&deltas) {
                self.problem.params[p].beta = b0 + d * t;
                self.problem.refresh_eta(p);
            }
            if let Some(rows) = self.problem.compute_rows_ll() {
                any_finite = true;
                let value = sum_rows(&rows) - 0.5 * self.problem.total_penalty();
                if value >= start {
                    self.problem.rows_ll = rows;
                    return Ok(value);
                }
            }
            t *= 0.5;
        }
        for (&p, b0) in group.iter().zip(&old) {
            self.problem.params[p].beta = b0.clone();
            self.problem.refresh_eta(p);
        }
        if !any_finite {
            let labels: Vec<String> = group
                .iter()
                .map(|&p| self.problem.params[p].id.label())
                .collect();
            return Err(Error::ConvergenceFailure {
                iterations: self.opts.max_halvings,
                reason: format!(
                    "log-likelihood not finite along the step for {}",
                    labels.join(", ")
                ),
            });
        }
        Ok(start)
    }

    pub fn sweep(&mut self) -> Result<f64> {
        let mut value = self.problem.penalized_loglik();
        for group in self.groups() {
            value = self.step(&group)?;
        }
        Ok(value)
    }

    /// Sweeps until the relative change in penalized log-likelihood drops
    /// below the tolerance. Returns the number of sweeps and whether the
    /// tolerance was met.
    pub fn iterate(&mut self, budget: usize, history: &mut Vec<f64>) -> Result<(usize, bool)> {
        let mut previous = self.problem.penalized_loglik();
        for it in 1..=budget {
            let value = self.sweep()?;
            history.push(value);
            if (value - previous).abs() / (previous.abs() + 0.1) < self.opts.tol {
                return Ok((it, true));
            }
            previous = value;
        }
        Ok((budget, false))
    }

    /// Recompute edf at the current coefficients without stepping.
    pub fn refresh_edf(&mut self) -> Result<()> {
        for p in 0..self.problem.np() {
            if self.problem.params[p].ncols() > 0 {
                self.direction(p)?;
            }
        }
        Ok(())
    }

    fn aic(&self) -> f64 {
        let edf: f64 = self.term_edf.iter().flatten().sum();
        -2.0 * self.problem.loglik() + 2.0 * edf
    }

    /// Pick each term's smoothing parameter from `grid` by AIC, holding
    /// the other terms at their current values.
    pub fn select(&mut self, grid: &[f64]) -> Result<()> {
        self.refresh_edf()?;
        for p in 0..self.problem.np() {
            for b in 0..self.problem.params[p].blocks.len() {
                if !self.problem.params[p].blocks[b].is_penalized() {
                    continue;
                }
                let saved_beta = self.problem.params[p].beta.clone();
                let saved_rows = self.problem.rows_ll.clone();
                let saved_edf = self.term_edf[p].clone();
                let mut best: Option<(f64, f64, DVector<f64>)> = None;
                for &lambda in grid {
                    self.problem.params[p].beta = saved_beta.clone();
                    self.problem.refresh_eta(p);
                    self.problem.rows_ll = saved_rows.clone();
                    self.problem.params[p].lambdas[b] = lambda;
                    let mut ok = true;
                    for _ in 0..self.opts.inner_steps {
                        if self.step(&[p]).is_err() {
                            ok = false;
                            break;
                        }
                    }
                    if !ok || self.direction(p).is_err() {
                        continue;
                    }
                    let aic = self.aic();
                    if aic.is_finite() && best.as_ref().is_none_or(|(a, _, _)| aic < *a) {
                        best = Some((aic, lambda, self.problem.params[p].beta.clone()));
                    }
                }
                match best {
                    Some((_, lambda, beta)) => {
                        self.problem.params[p].lambdas[b] = lambda;
                        self.problem.params[p].beta = beta;
                    }
                    None => {
                        self.problem.params[p].beta = saved_beta;
                        self.term_edf[p] = saved_edf;
                    }
                }
                self.problem.refresh_eta(p);
                self.problem.rows_ll = self.problem.compute_rows_ll().ok_or_else(|| {
                    Error::NumericalFailure("log-likelihood not finite after selection".into())
                })?;
                self.direction(p)?;
            }
        }
        Ok(())
    }
}

/// Fit a model by penalized maximum likelihood.
pub fn fit_pml(spec: &ModelSpec, data: &Table, opts: &FitOptions) -> Result<FitState> {
    let initial = match &opts.smoothing {
        Smoothing::Fixed { lambda } => *lambda,
        Smoothing::AicGrid { grid } if grid.len() == 1 => grid[0],
        Smoothing::AicGrid { .. } => opts.initial_lambda,
    };
    check_lambda(initial)?;
    let problem = Problem::new(spec, data, initial)?;
    let mut fitter = Fitter::new(problem, opts)?;
    let mut history = Vec::new();
    let (mut iterations, mut converged) = fitter.iterate(opts.max_iter, &mut history)?;
    if let Smoothing::AicGrid { grid } = &opts.smoothing {
        if grid.len() > 1 {
            for &l in grid {
                check_lambda(l)?;
            }
            fitter.select(grid)?;
            history.clear();
            let remaining = opts.max_iter.saturating_sub(iterations).max(1);
            let (more, ok) = fitter.iterate(remaining, &mut history)?;
            iterations += more;
            converged = ok;
        }
    }
    if !converged {
        let msg = format!("stopped after {iterations} sweeps without meeting the tolerance");
        log::warn!("{msg}");
        fitter.problem.warnings.push(msg);
    }
    fitter.refresh_edf()?;
    Ok(FitState::from_problem(
        spec,
        &fitter.problem,
        "pml",
        &fitter.term_edf,
        iterations,
        converged,
        history,
    ))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "smoothing parameter {lambda} must be finite and non-negative"
        )))
    }
}

/// Smoothing parameters chosen by AIC over `grid`, keyed by `param/term`.
pub fn select_smoothing(
    spec: &ModelSpec,
    data: &Table,
    grid: &[f64],
) -> Result<BTreeMap<String, f64>> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("empty smoothing grid".into()));
    }
    let opts = FitOptions {
        smoothing: Smoothing::AicGrid {
            grid: grid.to_vec(),
        },
        ..FitOptions::default()
    };
    let fit = fit_pml(spec, data, &opts)?;
    let mut out = BTreeMap::new();
    for p in &fit.params {
        for t in &p.terms {
            if matches!(t.info, BasisInfo::Spline { .. }) {
                out.insert(format!("{}/{}", p.label, t.label), t.lambda);
            }
        }
    }
    Ok(out)
}
