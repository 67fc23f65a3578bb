//! Serializable fitted models.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::problem::Problem;
use super::spec::ModelSpec;
use crate::basis::BasisInfo;
use crate::error::{Error, Result};
use crate::likelihood::{Layout, ParamId};
use crate::table::{write_atomic, Table};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermFit {
    pub label: String,
    pub info: BasisInfo,
    pub coefficients: Vec<f64>,
    /// Smoothing parameter; zero for unpenalized terms.
    pub lambda: f64,
    pub edf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamFit {
    pub param: ParamId,
    pub label: String,
    pub terms: Vec<TermFit>,
    pub edf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitState {
    pub spec: ModelSpec,
    pub method: String,
    pub params: Vec<ParamFit>,
    pub n_obs: usize,
    pub loglik: f64,
    pub penalized_loglik: f64,
    pub edf: f64,
    pub aic: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Penalized log-likelihood after each accepted sweep.
    pub history: Vec<f64>,
    pub warnings: Vec<String>,
}

impl FitState {
    pub(crate) fn from_problem(
        spec: &ModelSpec,
        problem: &Problem,
        method: &str,
        term_edf: &[Vec<f64>],
        iterations: usize,
        converged: bool,
        history: Vec<f64>,
    ) -> Self {
        let params: Vec<ParamFit> = problem
            .params
            .iter()
            .zip(term_edf)
            .map(|(pm, edfs)| {
                let terms = pm
                    .blocks
                    .iter()
                    .enumerate()
                    .map(|(b, block)| TermFit {
                        label: block.label.clone(),
                        info: block.info.clone(),
                        coefficients: pm
                            .beta
                            .rows(pm.offsets[b], block.ncols())
                            .iter()
                            .copied()
                            .collect(),
                        lambda: pm.lambdas[b],
                        edf: edfs.get(b).copied().unwrap_or(0.0),
                    })
                    .collect();
                ParamFit {
                    param: pm.id,
                    label: pm.id.label(),
                    terms,
                    edf: edfs.iter().sum(),
                }
            })
            .collect();
        let edf: f64 = params.iter().map(|p| p.edf).sum();
        let loglik = problem.loglik();
        FitState {
            spec: spec.clone(),
            method: method.to_string(),
            params,
            n_obs: problem.n,
            loglik,
            penalized_loglik: problem.penalized_loglik(),
            edf,
            aic: -2.0 * loglik + 2.0 * edf,
            iterations,
            converged,
            history,
            warnings: problem.warnings.clone(),
        }
    }

    pub fn layout(&self) -> Result<Layout> {
        self.spec.layout()
    }

    pub fn param(&self, id: ParamId) -> Option<&ParamFit> {
        self.params.iter().find(|p| p.param == id)
    }

    /// Smoothing parameters keyed by `param/term`.
    pub fn smoothing(&self) -> Vec<(String, f64)> {
        self.params
            .iter()
            .flat_map(|p| {
                p.terms
                    .iter()
                    .filter(|t| t.lambda > 0.0)
                    .map(|t| (format!("{}/{}", p.label, t.label), t.lambda))
            })
            .collect()
    }

    /// Predictor values at new covariates, row-major `n × P`, with any
    /// extrapolation warnings.
    pub fn predictors(&self, data: &Table) -> Result<(Vec<f64>, Vec<String>)> {
        let layout = self.layout()?;
        if layout.len() != self.params.len() {
            return Err(Error::Spec(
                "fit does not match its model specification".into(),
            ));
        }
        let n = data.nrows();
        let np = layout.len();
        let mut eta = vec![0.0; n * np];
        let mut warnings = Vec::new();
        for (p, fit) in self.params.iter().enumerate() {
            for term in &fit.terms {
                if term.coefficients.is_empty() {
                    continue;
                }
                let (design, outside) = term.info.design(data)?;
                if outside > 0 {
                    let msg = format!(
                        "{}/{}: {outside} rows extrapolated beyond the spline range",
                        fit.label, term.label
                    );
                    log::debug!("{msg}");
                    warnings.push(msg);
                }
                let values = design * DVector::from_column_slice(&term.coefficients);
                for (r, v) in values.iter().enumerate() {
                    eta[r * np + p] += v;
                }
            }
        }
        Ok((eta, warnings))
    }

    /// Replace all coefficients from a flat vector in parameter/term order.
    pub fn with_coefficients(&self, coefficients: &[f64]) -> Result<FitState> {
        let mut out = self.clone();
        let mut pos = 0;
        for p in &mut out.params {
            for t in &mut p.terms {
                let c = t.coefficients.len();
                let chunk = coefficients.get(pos..pos + c).ok_or_else(|| {
                    Error::InvalidParameter("coefficient vector too short".into())
                })?;
                t.coefficients.copy_from_slice(chunk);
                pos += c;
            }
        }
        if pos != coefficients.len() {
            return Err(Error::InvalidParameter(
                "coefficient vector too long".into(),
            ));
        }
        Ok(out)
    }

    pub fn coefficients(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.terms.iter().flat_map(|t| t.coefficients.iter().copied()))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
