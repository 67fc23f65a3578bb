//! Design matrices and penalties for additive predictor terms.
//!
//! Smooth terms use cubic B-splines on equally spaced knots with a
//! difference penalty on adjacent coefficients. The cyclic variant wraps
//! both the basis and the penalty around a period. A smooth with a `by`
//! covariate is a varying-coefficient term: each basis column is multiplied
//! by the `by` values.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::Table;

pub const DEFAULT_BASIS_SIZE: usize = 10;
pub const DEFAULT_PENALTY_ORDER: usize = 2;
pub const DEFAULT_PERIOD: f64 = 365.25;

const DEGREE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    Intercept,
    Linear,
    Smooth,
    CyclicSmooth,
}

/// One additive term. A `Smooth` or `CyclicSmooth` with `by` set is a
/// varying-coefficient term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermSpec {
    pub kind: TermKind,
    pub covariate: Option<String>,
    pub by: Option<String>,
    pub basis_size: usize,
    pub penalty_order: usize,
    pub period: Option<f64>,
}

impl TermSpec {
    pub fn intercept() -> Self {
        Self {
            kind: TermKind::Intercept,
            covariate: None,
            by: None,
            basis_size: 1,
            penalty_order: 0,
            period: None,
        }
    }

    pub fn linear(covariate: &str) -> Self {
        Self {
            kind: TermKind::Linear,
            covariate: Some(covariate.into()),
            ..Self::intercept()
        }
    }

    pub fn smooth(covariate: &str) -> Self {
        Self {
            kind: TermKind::Smooth,
            covariate: Some(covariate.into()),
            by: None,
            basis_size: DEFAULT_BASIS_SIZE,
            penalty_order: DEFAULT_PENALTY_ORDER,
            period: None,
        }
    }

    pub fn cyclic(covariate: &str, period: f64) -> Self {
        Self {
            kind: TermKind::CyclicSmooth,
            period: Some(period),
            ..Self::smooth(covariate)
        }
    }

    pub fn with_by(mut self, by: &str) -> Self {
        self.by = Some(by.into());
        self
    }

    pub fn with_basis_size(mut self, d: usize) -> Self {
        self.basis_size = d;
        self
    }

    pub fn is_varying(&self) -> bool {
        self.by.is_some()
    }

    pub fn is_smooth(&self) -> bool {
        matches!(self.kind, TermKind::Smooth | TermKind::CyclicSmooth)
    }

    pub fn label(&self) -> String {
        let cov = self.covariate.as_deref().unwrap_or("");
        let base = match self.kind {
            TermKind::Intercept => "(Intercept)".to_string(),
            TermKind::Linear => cov.to_string(),
            TermKind::Smooth => format!("s({cov})"),
            TermKind::CyclicSmooth => format!("cyclic({cov})"),
        };
        match &self.by {
            Some(by) => format!("{base}:{by}"),
            None => base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind != TermKind::Intercept && self.covariate.is_none() {
            return Err(Error::Spec(format!(
                "{:?} term needs a covariate",
                self.kind
            )));
        }
        if self.is_smooth() {
            if self.basis_size < self.penalty_order + 1 || self.basis_size < DEGREE + 1 {
                return Err(Error::Spec(format!(
                    "basis size {} too small for penalty order {} and cubic splines",
                    self.basis_size, self.penalty_order
                )));
            }
            if self.kind == TermKind::CyclicSmooth && !self.period.is_some_and(|p| p > 0.0) {
                return Err(Error::Spec("cyclic smooth needs a positive period".into()));
            }
        }
        Ok(())
    }
}

/// Everything needed to rebuild a term's design at new covariate values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BasisInfo {
    Intercept,
    Linear {
        covariate: String,
        by: Option<String>,
    },
    Spline {
        covariate: String,
        by: Option<String>,
        /// Open splines: `[lower, upper]` spans the training range.
        /// Cyclic splines: `[0, period)`.
        lower: f64,
        upper: f64,
        basis_size: usize,
        cyclic: bool,
        /// Training column means of the raw basis; when present the last
        /// column is dropped and the rest are centered.
        centering: Option<Vec<f64>>,
    },
    /// A term degraded to nothing (absorbed by the intercept).
    Empty,
}

/// Design matrix and penalty of one term.
#[derive(Debug, Clone)]
pub struct BasisBlock {
    pub label: String,
    pub design: DMatrix<f64>,
    pub penalty: DMatrix<f64>,
    pub penalty_rank: usize,
    pub info: BasisInfo,
    pub warnings: Vec<String>,
}

impl BasisBlock {
    pub fn ncols(&self) -> usize {
        self.design.ncols()
    }

    pub fn is_penalized(&self) -> bool {
        self.penalty_rank > 0
    }
}

/// Cardinal cubic B-spline on `[0, 4)` and its first two derivatives.
fn cardinal_cubic(u: f64, deriv: usize) -> f64 {
    if !(0.0..4.0).contains(&u) {
        return 0.0;
    }
    match (u as usize, deriv) {
        (0, 0) => u * u * u / 6.0,
        (0, 1) => u * u / 2.0,
        (0, _) => u,
        (1, 0) => (-3.0 * u * u * u + 12.0 * u * u - 12.0 * u + 4.0) / 6.0,
        (1, 1) => -1.5 * u * u + 4.0 * u - 2.0,
        (1, _) => -3.0 * u + 4.0,
        (2, 0) => (3.0 * u * u * u - 24.0 * u * u + 60.0 * u - 44.0) / 6.0,
        (2, 1) => 1.5 * u * u - 8.0 * u + 10.0,
        (2, _) => 3.0 * u - 8.0,
        (_, 0) => (4.0 - u).powi(3) / 6.0,
        (_, 1) => -(4.0 - u).powi(2) / 2.0,
        (_, _) => 4.0 - u,
    }
}

/// Equally spaced cubic B-spline basis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplineBasis {
    pub lower: f64,
    pub upper: f64,
    pub size: usize,
    pub cyclic: bool,
}

impl SplineBasis {
    fn spacing(&self) -> f64 {
        let segments = if self.cyclic {
            self.size
        } else {
            self.size - DEGREE
        };
        (self.upper - self.lower) / segments as f64
    }

    /// Raw basis (or derivative) row at `x`. Open splines are evaluated
    /// only inside `[lower, upper]`; the caller handles extrapolation.
    pub fn row(&self, x: f64, deriv: usize) -> Vec<f64> {
        let h = self.spacing();
        let scale = h.powi(deriv as i32);
        if self.cyclic {
            let period = self.upper - self.lower;
            (0..self.size)
                .map(|j| {
                    let u = ((x - self.lower - j as f64 * h).rem_euclid(period)) / h;
                    cardinal_cubic(u, deriv) / scale
                })
                .collect()
        } else {
            let t = (x - self.lower) / h;
            (0..self.size)
                .map(|j| cardinal_cubic(t - j as f64 + DEGREE as f64, deriv) / scale)
                .collect()
        }
    }

    /// Row with linear continuation outside `[lower, upper]`.
    pub fn row_extrapolated(&self, x: f64) -> (Vec<f64>, bool) {
        if self.cyclic || (self.lower..=self.upper).contains(&x) {
            return (self.row(x, 0), false);
        }
        let edge = if x < self.lower {
            self.lower
        } else {
            self.upper
        };
        let value = self.row(edge, 0);
        let slope = self.row(edge, 1);
        let row = value
            .iter()
            .zip(&slope)
            .map(|(v, s)| v + (x - edge) * s)
            .collect();
        (row, true)
    }

    pub fn penalty(&self, order: usize) -> DMatrix<f64> {
        let d = self.size;
        let diff = if self.cyclic {
            cyclic_difference(d, order)
        } else {
            difference_matrix(d, order)
        };
        diff.transpose() * diff
    }
}

/// `(d - q) × d` matrix of `q`-th order differences.
pub fn difference_matrix(d: usize, order: usize) -> DMatrix<f64> {
    let mut m = DMatrix::identity(d, d);
    for _ in 0..order {
        let rows = m.nrows();
        m = DMatrix::from_fn(rows - 1, d, |r, c| m[(r + 1, c)] - m[(r, c)]);
    }
    m
}

/// `d × d` circulant `q`-th order differences.
pub fn cyclic_difference(d: usize, order: usize) -> DMatrix<f64> {
    let mut m = DMatrix::identity(d, d);
    for _ in 0..order {
        m = DMatrix::from_fn(d, d, |r, c| m[((r + 1) % d, c)] - m[(r, c)]);
    }
    m
}

fn distinct_count(values: &[f64]) -> usize {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

fn finite_column<'a>(data: &'a Table, name: &str) -> Result<&'a [f64]> {
    let col = data.column(name)?;
    if let Some(r) = col.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!(
            "column `{name}` has a non-finite value at row {r}"
        )));
    }
    Ok(col)
}

/// Builds the design and penalty of a term from training data.
///
/// Smooths without a `by` covariate are centered (sum-to-zero over the
/// training rows) because every predictor carries its own intercept.
pub fn build_block(spec: &TermSpec, data: &Table) -> Result<BasisBlock> {
    spec.validate()?;
    let n = data.nrows();
    let label = spec.label();
    let mut warnings = Vec::new();
    let by = match &spec.by {
        Some(name) => Some(finite_column(data, name)?),
        None => None,
    };
    let block = match spec.kind {
        TermKind::Intercept => BasisBlock {
            label,
            design: DMatrix::from_element(n, 1, 1.0),
            penalty: DMatrix::zeros(1, 1),
            penalty_rank: 0,
            info: BasisInfo::Intercept,
            warnings,
        },
        TermKind::Linear => {
            let cov = spec.covariate.clone().expect("validated");
            let x = finite_column(data, &cov)?;
            let col = DVector::from_iterator(n, (0..n).map(|r| x[r] * by.map_or(1.0, |b| b[r])));
            BasisBlock {
                label,
                design: DMatrix::from_columns(&[col]),
                penalty: DMatrix::zeros(1, 1),
                penalty_rank: 0,
                info: BasisInfo::Linear {
                    covariate: cov,
                    by: spec.by.clone(),
                },
                warnings,
            }
        }
        TermKind::Smooth | TermKind::CyclicSmooth => {
            let cov = spec.covariate.clone().expect("validated");
            let x = finite_column(data, &cov)?;
            let cyclic = spec.kind == TermKind::CyclicSmooth;
            let distinct = distinct_count(x);
            if distinct <= 1 {
                let msg =
                    format!("{label}: covariate `{cov}` is constant; term degraded to intercept");
                log::warn!("{msg}");
                warnings.push(msg);
                return Ok(degraded_block(label, spec, by, n, warnings));
            }
            let mut size = spec.basis_size;
            if distinct < size {
                if distinct < DEGREE + 1 {
                    let msg =
                        format!("{label}: only {distinct} distinct values; term reduced to linear");
                    log::warn!("{msg}");
                    warnings.push(msg);
                    let mut lin = TermSpec::linear(&cov);
                    lin.by = spec.by.clone();
                    let mut block = build_block(&lin, data)?;
                    block.label = label;
                    block.warnings = warnings;
                    return Ok(block);
                }
                let msg = format!(
                    "{label}: only {distinct} distinct values; basis size reduced from {size}"
                );
                log::warn!("{msg}");
                warnings.push(msg);
                size = distinct;
            }
            let (lower, upper) = if cyclic {
                let period = spec.period.expect("validated");
                if x.iter().any(|v| *v < 0.0 || *v >= period) {
                    let msg = format!("{label}: values outside [0, {period}) are wrapped");
                    log::warn!("{msg}");
                    warnings.push(msg);
                }
                (0.0, period)
            } else {
                let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            };
            let basis = SplineBasis {
                lower,
                upper,
                size,
                cyclic,
            };
            let mut raw = DMatrix::zeros(n, size);
            for r in 0..n {
                let row = basis.row(x[r], 0);
                let scale = by.map_or(1.0, |b| b[r]);
                for (c, v) in row.into_iter().enumerate() {
                    raw[(r, c)] = v * scale;
                }
            }
            let penalty = basis.penalty(spec.penalty_order);
            let null_dim = if cyclic { 1 } else { spec.penalty_order };
            if by.is_some() {
                BasisBlock {
                    label,
                    design: raw,
                    penalty,
                    penalty_rank: size - null_dim,
                    info: BasisInfo::Spline {
                        covariate: cov,
                        by: spec.by.clone(),
                        lower,
                        upper,
                        basis_size: size,
                        cyclic,
                        centering: None,
                    },
                    warnings,
                }
            } else {
                let means: Vec<f64> = (0..size).map(|c| raw.column(c).mean()).collect();
                let design = DMatrix::from_fn(n, size - 1, |r, c| raw[(r, c)] - means[c]);
                let reduced = penalty.view((0, 0), (size - 1, size - 1)).into_owned();
                // Dropping one coefficient removes the constant direction.
                let rank = if cyclic {
                    size - 1
                } else {
                    size - spec.penalty_order
                };
                BasisBlock {
                    label,
                    design,
                    penalty: reduced,
                    penalty_rank: rank,
                    info: BasisInfo::Spline {
                        covariate: cov,
                        by: None,
                        lower,
                        upper,
                        basis_size: size,
                        cyclic,
                        centering: Some(means),
                    },
                    warnings,
                }
            }
        }
    };
    Ok(block)
}

fn degraded_block(
    label: String,
    spec: &TermSpec,
    by: Option<&[f64]>,
    n: usize,
    warnings: Vec<String>,
) -> BasisBlock {
    match (by, &spec.by) {
        (Some(b), Some(name)) => BasisBlock {
            label,
            design: DMatrix::from_column_slice(n, 1, b),
            penalty: DMatrix::zeros(1, 1),
            penalty_rank: 0,
            info: BasisInfo::Linear {
                covariate: name.clone(),
                by: None,
            },
            warnings,
        },
        _ => BasisBlock {
            label,
            design: DMatrix::zeros(n, 0),
            penalty: DMatrix::zeros(0, 0),
            penalty_rank: 0,
            info: BasisInfo::Empty,
            warnings,
        },
    }
}

impl BasisInfo {
    pub fn ncols(&self) -> usize {
        match self {
            BasisInfo::Intercept | BasisInfo::Linear { .. } => 1,
            BasisInfo::Spline {
                basis_size,
                centering,
                ..
            } => {
                if centering.is_some() {
                    basis_size - 1
                } else {
                    *basis_size
                }
            }
            BasisInfo::Empty => 0,
        }
    }

    fn spline(&self) -> Option<SplineBasis> {
        match self {
            BasisInfo::Spline {
                lower,
                upper,
                basis_size,
                cyclic,
                ..
            } => Some(SplineBasis {
                lower: *lower,
                upper: *upper,
                size: *basis_size,
                cyclic: *cyclic,
            }),
            _ => None,
        }
    }

    /// Design rows at new covariate values. The second value counts rows
    /// extrapolated linearly beyond the training range.
    pub fn design(&self, data: &Table) -> Result<(DMatrix<f64>, usize)> {
        let n = data.nrows();
        match self {
            BasisInfo::Intercept => Ok((DMatrix::from_element(n, 1, 1.0), 0)),
            BasisInfo::Empty => Ok((DMatrix::zeros(n, 0), 0)),
            BasisInfo::Linear { covariate, by } => {
                let x = data.column(covariate)?;
                let b = by.as_deref().map(|name| data.column(name)).transpose()?;
                Ok((
                    DMatrix::from_fn(n, 1, |r, _| x[r] * b.map_or(1.0, |b| b[r])),
                    0,
                ))
            }
            BasisInfo::Spline {
                covariate,
                by,
                centering,
                ..
            } => {
                let basis = self.spline().expect("spline info");
                let x = data.column(covariate)?;
                let b = by.as_deref().map(|name| data.column(name)).transpose()?;
                let ncols = self.ncols();
                let mut design = DMatrix::zeros(n, ncols);
                let mut outside = 0;
                for r in 0..n {
                    let (row, extrapolated) = basis.row_extrapolated(x[r]);
                    outside += usize::from(extrapolated);
                    let scale = b.map_or(1.0, |b| b[r]);
                    for c in 0..ncols {
                        let shift = centering.as_ref().map_or(0.0, |m| m[c]);
                        design[(r, c)] = (row[c] - shift) * scale;
                    }
                }
                Ok((design, outside))
            }
        }
    }

    /// Derivative of the spline part of the design with respect to the
    /// covariate (`by` scaling and centering excluded, since the latter is
    /// constant).
    pub fn derivative_design(&self, x: &[f64], deriv: usize) -> Option<DMatrix<f64>> {
        let basis = self.spline()?;
        let ncols = self.ncols();
        Some(DMatrix::from_fn(x.len(), ncols, |r, c| {
            basis.row(x[r], deriv)[c]
        }))
    }
}

/// `f(x) = B(x) β` at new covariate values, with a warning when rows fall
/// outside the training range of an open spline.
pub fn evaluate_term(
    info: &BasisInfo,
    data: &Table,
    coefficients: &[f64],
) -> Result<(Vec<f64>, Vec<String>)> {
    if coefficients.len() != info.ncols() {
        return Err(Error::InvalidParameter(format!(
            "term has {} columns but {} coefficients were given",
            info.ncols(),
            coefficients.len()
        )));
    }
    let (design, outside) = info.design(data)?;
    let beta = DVector::from_column_slice(coefficients);
    let values = (&design * beta).iter().copied().collect();
    let mut warnings = Vec::new();
    if outside > 0 {
        let msg = format!("{outside} rows extrapolated linearly beyond the spline range");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok((values, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(cols: &[(&str, Vec<f64>)]) -> Table {
        let mut t = Table::new();
        for (name, values) in cols {
            t.insert(*name, values.clone()).unwrap();
        }
        t
    }

    fn grid(n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect()
    }

    #[test]
    fn linear_term() {
        let t = table(&[("x", vec![1.0, 2.0, 3.0])]);
        let b = build_block(&TermSpec::linear("x"), &t).unwrap();
        assert_eq!(b.design.column(0).as_slice(), &[1.0, 2.0, 3.0]);
        assert_eq!(b.penalty[(0, 0)], 0.0);
        let (f, _) = evaluate_term(&b.info, &t, &[2.0]).unwrap();
        assert_eq!(f, vec![2.0, 4.0, 6.0]);
        let (f, _) = evaluate_term(&b.info, &t, &[0.0]).unwrap();
        assert!(f.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn smooth_has_nine_columns_after_centering() {
        let t = table(&[("x", grid(5000, -1.0, 1.0))]);
        let b = build_block(&TermSpec::smooth("x"), &t).unwrap();
        assert_eq!(b.ncols(), 9);
        assert_eq!(b.info.ncols(), 9);
        for c in 0..9 {
            assert!(b.design.column(c).sum().abs() < 1e-9);
        }
    }

    #[test]
    fn partition_of_unity() {
        let basis = SplineBasis {
            lower: -1.0,
            upper: 2.0,
            size: 10,
            cyclic: false,
        };
        for x in grid(301, -1.0, 2.0) {
            assert!((basis.row(x, 0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let cyc = SplineBasis {
            lower: 0.0,
            upper: 365.25,
            size: 12,
            cyclic: true,
        };
        for x in grid(301, 0.0, 365.0) {
            assert!((cyc.row(x, 0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn penalty_null_space() {
        let basis = SplineBasis {
            lower: 0.0,
            upper: 1.0,
            size: 10,
            cyclic: false,
        };
        let s = basis.penalty(2);
        let constant = DVector::from_element(10, 1.0);
        let linear = DVector::from_fn(10, |i, _| i as f64);
        assert!((&s * constant).amax() < 1e-12);
        assert!((&s * linear).amax() < 1e-12);
        let eig = nalgebra::SymmetricEigen::new(s).eigenvalues;
        assert_eq!(eig.iter().filter(|v| v.abs() > 1e-9).count(), 8);
    }

    #[test]
    fn cyclic_wraps_value_and_derivatives() {
        let t = table(&[("yday", grid(730, 0.0, 364.9))]);
        let b = build_block(&TermSpec::cyclic("yday", 365.25), &t).unwrap();
        let beta: Vec<f64> = (0..b.ncols())
            .map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3)
            .collect();
        let at = table(&[("yday", vec![0.0, 365.25 - 1e-9])]);
        let (f, _) = evaluate_term(&b.info, &at, &beta).unwrap();
        assert!((f[0] - f[1]).abs() < 1e-8);
        for deriv in 1..=2 {
            let d = b
                .info
                .derivative_design(&[0.0, 365.25 - 1e-9], deriv)
                .unwrap();
            let v = &d * DVector::from_column_slice(&beta);
            assert!((v[0] - v[1]).abs() < 1e-8, "derivative {deriv}");
        }
    }

    #[test]
    fn smooth_interpolates_quadratic() {
        let x = grid(2001, -1.0, 1.0);
        let y: Vec<f64> = x.iter().map(|v| v * v).collect();
        let t = table(&[("x", x.clone())]);
        let b = build_block(&TermSpec::smooth("x"), &t).unwrap();
        let mut design = DMatrix::from_element(x.len(), 1, 1.0);
        design = design.insert_columns(1, b.ncols(), 0.0);
        design
            .view_mut((0, 1), (x.len(), b.ncols()))
            .copy_from(&b.design);
        let mut pen = DMatrix::zeros(b.ncols() + 1, b.ncols() + 1);
        pen.view_mut((1, 1), (b.ncols(), b.ncols()))
            .copy_from(&(b.penalty.clone() * 1e-6));
        let lhs = design.transpose() * &design + pen;
        let rhs = design.transpose() * DVector::from_vec(y.clone());
        let beta = lhs.cholesky().unwrap().solve(&rhs);
        let fitted = &design * beta;
        let err = fitted
            .iter()
            .zip(&y)
            .map(|(f, y)| (f - y).abs())
            .fold(0.0, f64::max);
        assert!(err < 0.01, "max error {err}");
    }

    #[test]
    fn constant_covariate_degrades() {
        let t = table(&[("x", vec![2.0; 50]), ("z", grid(50, 0.0, 1.0))]);
        let b = build_block(&TermSpec::smooth("x"), &t).unwrap();
        assert_eq!(b.ncols(), 0);
        assert_eq!(b.warnings.len(), 1);
        let v = build_block(&TermSpec::smooth("x").with_by("z"), &t).unwrap();
        assert_eq!(v.ncols(), 1);
        assert_eq!(
            v.info,
            BasisInfo::Linear {
                covariate: "z".into(),
                by: None
            }
        );
    }

    #[test]
    fn few_distinct_values_reduce_size() {
        let x: Vec<f64> = (0..60).map(|i| (i % 6) as f64).collect();
        let t = table(&[("x", x)]);
        let b = build_block(&TermSpec::smooth("x"), &t).unwrap();
        assert_eq!(b.ncols(), 5);
        assert!(!b.warnings.is_empty());
        let x: Vec<f64> = (0..60).map(|i| (i % 3) as f64).collect();
        let t = table(&[("x", x)]);
        let b = build_block(&TermSpec::smooth("x"), &t).unwrap();
        assert!(matches!(b.info, BasisInfo::Linear { .. }));
    }

    #[test]
    fn varying_coefficient_multiplies_columns() {
        let x = grid(100, 0.0, 1.0);
        let z: Vec<f64> = x.iter().map(|v| 2.0 + v).collect();
        let t = table(&[("x", x.clone()), ("z", z.clone())]);
        let plain = build_block(
            &TermSpec::smooth("x").with_by("z"),
            &table(&[("x", x), ("z", vec![1.0; 100])]),
        )
        .unwrap();
        let vc = build_block(&TermSpec::smooth("x").with_by("z"), &t).unwrap();
        assert_eq!(vc.ncols(), 10);
        for r in 0..100 {
            for c in 0..10 {
                assert!((vc.design[(r, c)] - plain.design[(r, c)] * z[r]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn extrapolation_is_linear_and_flagged() {
        let t = table(&[("x", grid(200, 0.0, 1.0))]);
        let b = build_block(&TermSpec::smooth("x"), &t).unwrap();
        let beta: Vec<f64> = (0..b.ncols()).map(|i| (i as f64).sin()).collect();
        let probe = table(&[("x", vec![1.0, 1.5, 2.0])]);
        let (f, warnings) = evaluate_term(&b.info, &probe, &beta).unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(((f[2] - f[1]) - (f[1] - f[0])).abs() < 1e-10);
    }

    #[test]
    fn missing_covariate_named() {
        let t = table(&[("x", vec![1.0])]);
        let err = build_block(&TermSpec::smooth("yday"), &t).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(ref c) if c == "yday"));
    }

    proptest! {
        #[test]
        fn cyclic_continuity_for_any_coefficients(beta in prop::collection::vec(-5.0f64..5.0, 9)) {
            let t = table(&[("d", grid(400, 0.0, 23.9))]);
            let b = build_block(&TermSpec::cyclic("d", 24.0), &t).unwrap();
            let ends = [0.0, 24.0 - 1e-10];
            let at = table(&[("d", ends.to_vec())]);
            let (f, _) = evaluate_term(&b.info, &at, &beta).unwrap();
            prop_assert!((f[0] - f[1]).abs() < 1e-7);
            let d1 = b.info.derivative_design(&ends, 1).unwrap() * DVector::from_column_slice(&beta);
            prop_assert!((d1[0] - d1[1]).abs() < 1e-7);
        }
    }
}
