//! Metropolis-Hastings within Gibbs sampling with IWLS proposals.
//!
//! Coefficients are updated one (parameter, term) block at a time. Given
//! the current state, the proposal is
//!
//! `β* ~ N(β + P⁻¹(Xᵀg - Sβ/τ²), P⁻¹)`, `P = XᵀWX + S/τ²`,
//!
//! and the acceptance ratio uses the proposal built at `β*` for the reverse
//! move. Penalized terms carry a Gaussian prior with precision `S/τ²`;
//! `τ²` is drawn from its inverse-gamma full conditional.

use std::path::{Path, PathBuf};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use super::pml::{fit_pml, FitOptions};
use super::problem::{solve_spd, sum_rows, Problem};
use super::spec::ModelSpec;
use super::state::FitState;
use crate::error::{Error, Result};
use crate::likelihood::ParamId;
use crate::table::{write_atomic, Table};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcOptions {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Inverse-gamma shape and rate of the `τ²` prior.
    pub prior_a: f64,
    pub prior_b: f64,
    pub weight_floor: f64,
}

impl Default for McmcOptions {
    fn default() -> Self {
        Self {
            iterations: 12_000,
            burn_in: 2_000,
            thin: 10,
            seed: 1,
            prior_a: 1e-4,
            prior_b: 1e-4,
            weight_floor: 1e-10,
        }
    }
}

impl McmcOptions {
    fn validate(&self) -> Result<()> {
        if self.thin == 0 || self.burn_in >= self.iterations {
            return Err(Error::InvalidParameter(format!(
                "need thin > 0 and burn-in ({}) below iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        if !(self.prior_a > 0.0 && self.prior_b > 0.0) {
            return Err(Error::InvalidParameter(
                "inverse-gamma prior parameters must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn saved_draws(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockAcceptance {
    pub label: String,
    /// Acceptance rate over the burn-in.
    pub burn_in: f64,
    /// Acceptance rate after the burn-in.
    pub sampling: f64,
}

/// Saved draws of a sampler run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    /// Starting fit; carries the term layout needed for prediction.
    pub start: FitState,
    pub options: McmcOptions,
    /// Coefficient vectors in parameter/term order, one per saved draw.
    #[serde(skip)]
    pub samples: Vec<Vec<f64>>,
    /// Labels of the penalized terms whose `τ²` is sampled.
    pub tau2_labels: Vec<String>,
    #[serde(skip)]
    pub tau2: Vec<Vec<f64>>,
    pub acceptance: Vec<BlockAcceptance>,
    pub warnings: Vec<String>,
}

/// Lower, median and upper pointwise posterior quantiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lower: f64,
    pub median: f64,
    pub upper: f64,
}

struct Block {
    param: usize,
    term: usize,
    label: String,
}

struct Proposal {
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl Proposal {
    fn log_density(&self, x: &DVector<f64>) -> f64 {
        let l = self.chol.l();
        let half_logdet: f64 = l.diagonal().iter().map(|d| d.ln()).sum();
        let v = l.transpose() * (x - &self.mean);
        half_logdet - 0.5 * v.norm_squared()
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let z = DVector::from_iterator(
            self.mean.len(),
            (0..self.mean.len()).map(|_| rng.sample::<f64, _>(StandardNormal)),
        );
        let shift = self
            .chol
            .l()
            .transpose()
            .solve_upper_triangular(&z)
            .expect("Cholesky factor has a positive diagonal");
        &self.mean + shift
    }
}

fn prior_precision(problem: &Problem, block: &Block, tau2: f64) -> DMatrix<f64> {
    let b = &problem.params[block.param].blocks[block.term];
    if b.is_penalized() {
        &b.penalty / tau2
    } else {
        DMatrix::zeros(b.ncols(), b.ncols())
    }
}

fn proposal(problem: &Problem, block: &Block, prec: &DMatrix<f64>, floor: f64) -> Result<Proposal> {
    let pm = &problem.params[block.param];
    let range = pm.block_range(block.term);
    let (g, h) = problem.coord_derivatives(block.param)?;
    let (xtwx, xtg) = problem.working_system(block.param, range.clone(), &g, &h, floor);
    let beta = pm.beta.rows(range.start, range.len()).clone_owned();
    let lhs = &xtwx + prec;
    let rhs = xtg - prec * &beta;
    let (step, chol, _) = solve_spd(&lhs, &rhs).ok_or_else(|| {
        Error::NumericalFailure(format!("proposal for {} is singular", block.label))
    })?;
    Ok(Proposal {
        mean: beta + step,
        chol,
    })
}

fn set_block(problem: &mut Problem, block: &Block, values: &DVector<f64>) {
    let pm = &mut problem.params[block.param];
    let range = pm.block_range(block.term);
    pm.beta.rows_mut(range.start, range.len()).copy_from(values);
    problem.refresh_eta(block.param);
}

fn prior_quad(prec: &DMatrix<f64>, beta: &DVector<f64>) -> f64 {
    (beta.transpose() * prec * beta)[(0, 0)]
}

/// Run the sampler from a fitted starting point.
pub fn fit_mcmc_from(start: &FitState, data: &Table, opts: &McmcOptions) -> Result<ChainState> {
    opts.validate()?;
    let mut problem = Problem::new(&start.spec, data, 1.0)?;
    for (pm, fit) in problem.params.iter_mut().zip(&start.params) {
        if pm.blocks.len() != fit.terms.len() {
            return Err(Error::Spec(format!(
                "starting fit does not match the data for {}",
                fit.label
            )));
        }
        for (b, term) in fit.terms.iter().enumerate() {
            if pm.blocks[b].ncols() != term.coefficients.len() {
                return Err(Error::Spec(format!(
                    "starting fit does not match the data for {}/{}",
                    fit.label, term.label
                )));
            }
            let r = pm.block_range(b);
            pm.beta
                .rows_mut(r.start, r.len())
                .copy_from_slice(&term.coefficients);
            pm.lambdas[b] = term.lambda;
        }
    }
    for p in 0..problem.np() {
        problem.refresh_eta(p);
    }
    problem.rows_ll = problem.compute_rows_ll().ok_or_else(|| {
        Error::NumericalFailure("log-likelihood not finite at the starting fit".into())
    })?;

    let blocks: Vec<Block> = problem
        .params
        .iter()
        .enumerate()
        .flat_map(|(p, pm)| {
            pm.blocks
                .iter()
                .enumerate()
                .filter(|(_, b)| b.ncols() > 0)
                .map(move |(b, block)| Block {
                    param: p,
                    term: b,
                    label: format!("{}/{}", pm.id.label(), block.label),
                })
        })
        .collect();
    let mut tau2: Vec<f64> = blocks
        .iter()
        .map(|blk| {
            let lambda = problem.params[blk.param].lambdas[blk.term];
            if lambda > 0.0 {
                1.0 / lambda
            } else {
                1.0
            }
        })
        .collect();
    let penalized: Vec<usize> = (0..blocks.len())
        .filter(|&i| problem.params[blocks[i].param].blocks[blocks[i].term].is_penalized())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut accepted_burn = vec![0usize; blocks.len()];
    let mut accepted_after = vec![0usize; blocks.len()];
    let mut samples = Vec::with_capacity(opts.saved_draws());
    let mut tau2_draws = Vec::with_capacity(opts.saved_draws());

    for iter in 0..opts.iterations {
        for (bi, block) in blocks.iter().enumerate() {
            let prec = prior_precision(&problem, block, tau2[bi]);
            let range = problem.params[block.param].block_range(block.term);
            let current = problem.params[block.param]
                .beta
                .rows(range.start, range.len())
                .clone_owned();
            let Ok(forward) = proposal(&problem, block, &prec, opts.weight_floor) else {
                continue;
            };
            let candidate = forward.draw(&mut rng);
            let u: f64 = rng.random();
            set_block(&mut problem, block, &candidate);
            let accepted = match problem.compute_rows_ll() {
                Some(rows) => match proposal(&problem, block, &prec, opts.weight_floor) {
                    Ok(backward) => {
                        let new_post = sum_rows(&rows) - 0.5 * prior_quad(&prec, &candidate);
                        let old_post = problem.loglik() - 0.5 * prior_quad(&prec, &current);
                        let log_alpha = new_post - old_post + backward.log_density(&current)
                            - forward.log_density(&candidate);
                        if log_alpha.is_finite() && u.ln() < log_alpha {
                            problem.rows_ll = rows;
                            true
                        } else {
                            false
                        }
                    }
                    Err(_) => false,
                },
                None => false,
            };
            if accepted {
                if iter < opts.burn_in {
                    accepted_burn[bi] += 1;
                } else {
                    accepted_after[bi] += 1;
                }
            } else {
                set_block(&mut problem, block, &current);
            }
        }
        for &bi in &penalized {
            let block = &blocks[bi];
            let pm = &problem.params[block.param];
            let b = &pm.blocks[block.term];
            let range = pm.block_range(block.term);
            let beta = pm.beta.rows(range.start, range.len()).clone_owned();
            let quad = (beta.transpose() * &b.penalty * &beta)[(0, 0)];
            let shape = opts.prior_a + 0.5 * b.penalty_rank as f64;
            let rate = opts.prior_b + 0.5 * quad;
            let gamma =
                Gamma::new(shape, 1.0).map_err(|e| Error::NumericalFailure(e.to_string()))?;
            tau2[bi] = rate / gamma.sample(&mut rng);
        }
        if iter >= opts.burn_in && (iter + 1 - opts.burn_in) % opts.thin == 0 {
            samples.push(problem.coefficients());
            tau2_draws.push(penalized.iter().map(|&bi| tau2[bi]).collect());
        }
    }

    let mut warnings = Vec::new();
    let sampling_iters = (opts.iterations - opts.burn_in) as f64;
    let acceptance: Vec<BlockAcceptance> = blocks
        .iter()
        .enumerate()
        .map(|(bi, block)| {
            let burn_in = if opts.burn_in > 0 {
                accepted_burn[bi] as f64 / opts.burn_in as f64
            } else {
                f64::NAN
            };
            if opts.burn_in > 0 && burn_in < 0.01 {
                let msg = format!(
                    "{}: acceptance rate {:.4} over the burn-in is below 1%",
                    block.label, burn_in
                );
                log::warn!("{msg}");
                warnings.push(msg);
            }
            BlockAcceptance {
                label: block.label.clone(),
                burn_in,
                sampling: accepted_after[bi] as f64 / sampling_iters,
            }
        })
        .collect();
    Ok(ChainState {
        start: start.clone(),
        options: opts.clone(),
        samples,
        tau2_labels: penalized
            .iter()
            .map(|&bi| blocks[bi].label.clone())
            .collect(),
        tau2: tau2_draws,
        acceptance,
        warnings,
    })
}

/// Fit by penalized likelihood, then sample from that starting point.
pub fn fit_mcmc(spec: &ModelSpec, data: &Table, opts: &McmcOptions) -> Result<ChainState> {
    let start = fit_pml(spec, data, &FitOptions::default())?;
    fit_mcmc_from(&start, data, opts)
}

impl ChainState {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Fit whose coefficients are the posterior means.
    pub fn posterior_mean(&self) -> Result<FitState> {
        if self.samples.is_empty() {
            return Err(Error::InvalidParameter("chain has no saved draws".into()));
        }
        let dim = self.samples[0].len();
        let mut mean = vec![0.0; dim];
        for s in &self.samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v / self.samples.len() as f64;
            }
        }
        let mut fit = self.start.with_coefficients(&mean)?;
        fit.method = "mcmc".into();
        Ok(fit)
    }

    /// Position of a coefficient in the flat vector.
    pub fn coefficient_index(&self, param: ParamId, term: usize, column: usize) -> Option<usize> {
        let mut pos = 0;
        for p in &self.start.params {
            for (t, fit) in p.terms.iter().enumerate() {
                if p.param == param && t == term {
                    return (column < fit.coefficients.len()).then_some(pos + column);
                }
                pos += fit.coefficients.len();
            }
        }
        None
    }

    /// Draws of one coefficient.
    pub fn trace(&self, index: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s[index]).collect()
    }

    /// Pointwise `(1-level)/2`, median and `(1+level)/2` quantiles of a
    /// distributional parameter on its natural scale at the rows of `grid`.
    pub fn credible_bands(&self, param: ParamId, grid: &Table, level: f64) -> Result<Vec<Band>> {
        if self.samples.is_empty() {
            return Err(Error::InvalidParameter("chain has no saved draws".into()));
        }
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "credible level {level} must lie in (0, 1)"
            )));
        }
        let (p, fit) = self
            .start
            .params
            .iter()
            .enumerate()
            .find(|(_, f)| f.param == param)
            .ok_or_else(|| {
                Error::InvalidParameter(format!("{} is not part of the model", param.label()))
            })?;
        let offset: usize = self.start.params[..p]
            .iter()
            .flat_map(|f| f.terms.iter())
            .map(|t| t.coefficients.len())
            .sum();
        let mut designs = Vec::with_capacity(fit.terms.len());
        let mut cols = 0;
        for term in &fit.terms {
            designs.push(term.info.design(grid)?.0);
            cols += term.coefficients.len();
        }
        let n = grid.nrows();
        let mut design = DMatrix::zeros(n, cols);
        let mut c = 0;
        for d in designs {
            design.view_mut((0, c), (n, d.ncols())).copy_from(&d);
            c += d.ncols();
        }
        let draws = DMatrix::from_fn(cols, self.samples.len(), |r, s| self.samples[s][offset + r]);
        let eta = design * draws;
        let link = param.link();
        let tail = 0.5 * (1.0 - level);
        Ok((0..n)
            .map(|r| {
                let mut values: Vec<f64> = eta.row(r).iter().map(|e| link.inverse(*e)).collect();
                values.sort_by(f64::total_cmp);
                Band {
                    lower: quantile(&values, tail),
                    median: quantile(&values, 0.5),
                    upper: quantile(&values, 1.0 - tail),
                }
            })
            .collect())
    }

    fn samples_path(path: &Path) -> PathBuf {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "chain".into());
        path.with_file_name(format!("{stem}.samples.csv"))
    }

    /// JSON metadata at `path` with the draws in a side CSV
    /// `<stem>.samples.csv` (coefficients then `τ²` columns).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = serde_json::to_string_pretty(self)?;
        meta.push('\n');
        let dim = self.samples.first().map_or(0, Vec::len);
        let mut table = Table::new();
        for c in 0..dim {
            table.insert(
                format!("beta_{c}"),
                self.samples.iter().map(|s| s[c]).collect(),
            )?;
        }
        for (t, _) in self.tau2_labels.iter().enumerate() {
            table.insert(
                format!("tau2_{t}"),
                self.tau2.iter().map(|s| s[t]).collect(),
            )?;
        }
        table.write_csv(Self::samples_path(path))?;
        write_atomic(path, meta.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut chain: ChainState = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let table = Table::read_csv(Self::samples_path(path))?;
        let dim = chain.start.coefficients().len();
        let rows = table.nrows();
        let beta: Vec<&[f64]> = (0..dim)
            .map(|c| table.column(&format!("beta_{c}")))
            .collect::<Result<_>>()?;
        let tau: Vec<&[f64]> = (0..chain.tau2_labels.len())
            .map(|t| table.column(&format!("tau2_{t}")))
            .collect::<Result<_>>()?;
        chain.samples = (0..rows)
            .map(|r| beta.iter().map(|c| c[r]).collect())
            .collect();
        chain.tau2 = (0..rows)
            .map(|r| tau.iter().map(|c| c[r]).collect())
            .collect();
        Ok(chain)
    }
}

/// Linear-interpolation quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Sample autocorrelation at `lag`.
pub fn autocorrelation(values: &[f64], lag: usize) -> f64 {
    let n = values.len();
    if lag >= n {
        return f64::NAN;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    let cov: f64 = (0..n - lag)
        .map(|t| (values[t] - mean) * (values[t + lag] - mean))
        .sum();
    cov / var
}
