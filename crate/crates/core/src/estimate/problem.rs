//! Working state shared by the penalized-likelihood fitter and the sampler.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::spec::ModelSpec;
use crate::basis::{build_block, BasisBlock};
use crate::error::{Error, Result};
use crate::likelihood::{self, compensated_sum, Layout, ParamId};
use crate::table::Table;

/// Rows below this are processed serially.
const PAR_MIN_ROWS: usize = 4096;

/// Additive predictor of one distributional parameter.
pub(crate) struct ParamModel {
    pub id: ParamId,
    pub blocks: Vec<BasisBlock>,
    pub offsets: Vec<usize>,
    pub x: DMatrix<f64>,
    pub lambdas: Vec<f64>,
    pub beta: DVector<f64>,
}

impl ParamModel {
    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    pub fn block_range(&self, b: usize) -> std::ops::Range<usize> {
        self.offsets[b]..self.offsets[b] + self.blocks[b].ncols()
    }

    /// Block-diagonal `Σ_b λ_b S_b`.
    pub fn penalty_matrix(&self) -> DMatrix<f64> {
        let c = self.ncols();
        let mut s = DMatrix::zeros(c, c);
        for (b, block) in self.blocks.iter().enumerate() {
            if block.is_penalized() {
                let r = self.block_range(b);
                let mut view = s.view_mut((r.start, r.start), (r.len(), r.len()));
                view += &block.penalty * self.lambdas[b];
            }
        }
        s
    }

    /// `Σ_b λ_b β_bᵀ S_b β_b`.
    pub fn penalty_value(&self) -> f64 {
        self.penalty_value_at(&self.beta)
    }

    pub fn penalty_value_at(&self, beta: &DVector<f64>) -> f64 {
        let mut acc = 0.0;
        for (b, block) in self.blocks.iter().enumerate() {
            if block.is_penalized() {
                let r = self.block_range(b);
                let beta_b = beta.rows(r.start, r.len());
                acc += self.lambdas[b] * (beta_b.transpose() * &block.penalty * beta_b)[(0, 0)];
            }
        }
        acc
    }
}

pub(crate) struct Problem {
    pub layout: Layout,
    pub n: usize,
    pub k: usize,
    pub y: Vec<f64>,
    /// Predictor values, row-major `n × P`.
    pub eta: Vec<f64>,
    pub params: Vec<ParamModel>,
    pub rows_ll: Vec<f64>,
    pub warnings: Vec<String>,
}

pub(crate) fn response_matrix(spec: &ModelSpec, data: &Table) -> Result<Vec<f64>> {
    let cols: Vec<&[f64]> = spec
        .response_columns()
        .iter()
        .map(|name| data.column(name))
        .collect::<Result<_>>()?;
    let n = data.nrows();
    let mut y = Vec::with_capacity(n * cols.len());
    for r in 0..n {
        for (c, col) in cols.iter().enumerate() {
            let v = col[r];
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "response `{}` is not finite at row {r}",
                    spec.response_columns()[c]
                )));
            }
            y.push(v);
        }
    }
    Ok(y)
}

impl Problem {
    pub fn new(spec: &ModelSpec, data: &Table, initial_lambda: f64) -> Result<Self> {
        let layout = spec.layout()?;
        let resolved = spec.resolve()?;
        let y = response_matrix(spec, data)?;
        let n = data.nrows();
        let k = spec.dim;
        if n == 0 {
            return Err(Error::Data("no observations".into()));
        }
        let mut warnings = Vec::new();
        let mut params = Vec::with_capacity(resolved.len());
        let mut total_cols = 0;
        for (id, terms) in resolved {
            let mut blocks = Vec::with_capacity(terms.len());
            for term in &terms {
                let block = build_block(term, data)?;
                for w in &block.warnings {
                    warnings.push(format!("{}: {w}", id.label()));
                }
                blocks.push(block);
            }
            let mut offsets = Vec::with_capacity(blocks.len());
            let mut c = 0;
            for block in &blocks {
                offsets.push(c);
                c += block.ncols();
            }
            total_cols += c;
            let mut x = DMatrix::zeros(n, c);
            for (block, &off) in blocks.iter().zip(&offsets) {
                x.view_mut((0, off), (n, block.ncols()))
                    .copy_from(&block.design);
            }
            let lambdas = blocks
                .iter()
                .map(|b| {
                    if b.is_penalized() {
                        initial_lambda
                    } else {
                        0.0
                    }
                })
                .collect();
            params.push(ParamModel {
                id,
                blocks,
                offsets,
                x,
                lambdas,
                beta: DVector::zeros(c),
            });
        }
        if n <= total_cols {
            let msg = format!(
                "{n} observations for {total_cols} coefficients; estimates rely on penalties"
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let p = layout.len();
        let mut problem = Problem {
            layout,
            n,
            k,
            y,
            eta: vec![0.0; n * p],
            params,
            rows_ll: vec![0.0; n],
            warnings,
        };
        problem.init_intercepts();
        Ok(problem)
    }

    pub fn np(&self) -> usize {
        self.layout.len()
    }

    /// Intercepts from marginal moments; everything else zero.
    fn init_intercepts(&mut self) {
        let (n, k) = (self.n as f64, self.k);
        let mut mean = vec![0.0; k];
        for r in 0..self.n {
            for i in 0..k {
                mean[i] += self.y[r * k + i] / n;
            }
        }
        let mut var = vec![0.0; k];
        for r in 0..self.n {
            for i in 0..k {
                let d = self.y[r * k + i] - mean[i];
                var[i] += d * d / n.max(2.0);
            }
        }
        for pm in &mut self.params {
            let v = |i: usize| var[i].max(1e-8);
            let start = match pm.id {
                ParamId::Mu { i } => mean[i],
                ParamId::LambdaDiag { i } => -0.5 * v(i).ln(),
                ParamId::Psi { i } => v(i).ln(),
                ParamId::Sigma { i } => 0.5 * v(i).ln(),
                _ => 0.0,
            };
            pm.beta.fill(0.0);
            if pm.ncols() > 0 {
                pm.beta[0] = start;
            }
        }
        for p in 0..self.np() {
            self.refresh_eta(p);
        }
    }

    pub fn refresh_eta(&mut self, p: usize) {
        let values = &self.params[p].x * &self.params[p].beta;
        let np = self.np();
        for (r, v) in values.iter().enumerate() {
            self.eta[r * np + p] = *v;
        }
    }

    fn map_rows<T: Send, F>(&self, f: F) -> Vec<T>
    where
        F: Fn(&[f64], &[f64]) -> T + Sync + Send,
    {
        let (np, k) = (self.np(), self.k);
        let row = |r: usize| f(&self.eta[r * np..(r + 1) * np], &self.y[r * k..(r + 1) * k]);
        if self.n >= PAR_MIN_ROWS {
            (0..self.n).into_par_iter().map(row).collect()
        } else {
            (0..self.n).map(row).collect()
        }
    }

    /// Per-row log-likelihood; `None` when any row is not evaluable.
    pub fn compute_rows_ll(&self) -> Option<Vec<f64>> {
        let layout = &self.layout;
        let rows = self.map_rows(|eta, y| {
            likelihood::loglik(layout, eta, y)
                .ok()
                .filter(|v| v.is_finite())
        });
        rows.into_iter().collect()
    }

    pub fn loglik(&self) -> f64 {
        sum_rows(&self.rows_ll)
    }

    pub fn total_penalty(&self) -> f64 {
        self.params.iter().map(ParamModel::penalty_value).sum()
    }

    pub fn penalized_loglik(&self) -> f64 {
        self.loglik() - 0.5 * self.total_penalty()
    }

    /// Score and second derivative for predictor `p` at every row.
    pub fn coord_derivatives(&self, p: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let layout = &self.layout;
        let rows = self.map_rows(|eta, y| likelihood::coord_derivatives(layout, eta, y, p));
        let mut g = Vec::with_capacity(self.n);
        let mut h = Vec::with_capacity(self.n);
        for r in rows {
            let (a, b) = r?;
            g.push(a);
            h.push(b);
        }
        Ok((g, h))
    }

    /// `XᵀWX` and `Xᵀg` for the columns `cols` of predictor `p`, with
    /// weights `w = max(-∂²ℓ/∂η², floor)`.
    pub fn working_system(
        &self,
        p: usize,
        cols: std::ops::Range<usize>,
        grad: &[f64],
        hess: &[f64],
        floor: f64,
    ) -> (DMatrix<f64>, DVector<f64>) {
        let x = self.params[p].x.columns(cols.start, cols.len());
        let sqrt_w = DVector::from_iterator(self.n, hess.iter().map(|h| (-h).max(floor).sqrt()));
        let mut xw = x.clone_owned();
        for (r, s) in sqrt_w.iter().enumerate() {
            xw.row_mut(r).scale_mut(*s);
        }
        let xtwx = xw.transpose() * &xw;
        let xtg = x.transpose() * DVector::from_column_slice(grad);
        (xtwx, xtg)
    }

    /// Flat coefficient vector over all parameters.
    pub fn coefficients(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|pm| pm.beta.iter().copied())
            .collect()
    }
}

pub(crate) fn sum_rows(rows: &[f64]) -> f64 {
    if rows.len() > 10_000 {
        compensated_sum(rows.iter().copied())
    } else {
        rows.iter().sum()
    }
}

/// Cholesky solve with an escalating ridge; the flag reports whether a
/// ridge was needed.
pub(crate) fn solve_spd(
    h: &DMatrix<f64>,
    rhs: &DVector<f64>,
) -> Option<(DVector<f64>, nalgebra::Cholesky<f64, nalgebra::Dyn>, bool)> {
    if let Some(chol) = h.clone().cholesky() {
        let x = chol.solve(rhs);
        if x.iter().all(|v| v.is_finite()) {
            return Some((x, chol, false));
        }
    }
    let c = h.nrows();
    let scale = h.diagonal().amax().max(1.0);
    let mut ridge = 1e-8;
    for _ in 0..12 {
        let shifted =
            h + DMatrix::identity(c, c) * (ridge * if ridge > 1e-8 { scale } else { 1.0 });
        if let Some(chol) = shifted.cholesky() {
            let x = chol.solve(rhs);
            if x.iter().all(|v| v.is_finite()) {
                return Some((x, chol, true));
            }
        }
        ridge *= 10.0;
    }
    None
}
