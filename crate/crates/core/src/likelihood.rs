//! Log-likelihoods and predictor-scale derivatives.
//!
//! A [`Layout`] fixes, for one family, dimension and antedependence order,
//! which distributional parameters carry a predictor and in which order.
//! Per-observation functions take the predictor values `η` in that order.
//!
//! The two Cholesky families have closed-form first and diagonal second
//! derivatives in `O(k²)` per observation. The variance-correlation
//! baselines differentiate [`loglik_generic`] numerically with respect to
//! their standard-deviation and correlation predictors.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covparam::{
    offdiag_index, offdiag_len, offdiag_pairs, sigma_from_ar1, sigma_from_basic,
    sigma_from_modified, ADMask, CovarianceMatrix, InverseCholFactor, ModifiedCholParams,
};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    BasicChol,
    ModifiedChol,
    Ar1,
    ConstCorr,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::BasicChol => "basic_chol",
            Family::ModifiedChol => "modified_chol",
            Family::Ar1 => "ar1",
            Family::ConstCorr => "const_corr",
        }
    }

    pub fn is_cholesky(self) -> bool {
        matches!(self, Family::BasicChol | Family::ModifiedChol)
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic_chol" | "basic" => Ok(Family::BasicChol),
            "modified_chol" | "modified" => Ok(Family::ModifiedChol),
            "ar1" => Ok(Family::Ar1),
            "const_corr" | "constant" => Ok(Family::ConstCorr),
            other => Err(Error::Spec(format!("unknown family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkFunction {
    Identity,
    Log,
    /// `η = ρ / sqrt(1 - ρ²)` on `(-1, 1)`.
    Rho,
}

impl LinkFunction {
    /// Parameter to predictor scale.
    pub fn link(self, theta: f64) -> f64 {
        match self {
            LinkFunction::Identity => theta,
            LinkFunction::Log => theta.ln(),
            LinkFunction::Rho => theta / (1.0 - theta * theta).sqrt(),
        }
    }

    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            LinkFunction::Identity => eta,
            LinkFunction::Log => eta.exp(),
            LinkFunction::Rho => eta / (1.0 + eta * eta).sqrt(),
        }
    }

    /// `dθ/dη`.
    pub fn dtheta_deta(self, eta: f64) -> f64 {
        match self {
            LinkFunction::Identity => 1.0,
            LinkFunction::Log => eta.exp(),
            LinkFunction::Rho => (1.0 + eta * eta).powf(-1.5),
        }
    }
}

/// One distributional parameter. Indices are zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamId {
    Mu {
        i: usize,
    },
    LambdaDiag {
        i: usize,
    },
    Lambda {
        i: usize,
        j: usize,
    },
    Psi {
        i: usize,
    },
    Phi {
        i: usize,
        j: usize,
    },
    Sigma {
        i: usize,
    },
    /// Single AR(1) correlation.
    Rho,
    RhoPair {
        i: usize,
        j: usize,
    },
}

impl ParamId {
    pub fn link(self) -> LinkFunction {
        match self {
            ParamId::Mu { .. } | ParamId::Lambda { .. } | ParamId::Phi { .. } => {
                LinkFunction::Identity
            }
            ParamId::LambdaDiag { .. } | ParamId::Psi { .. } | ParamId::Sigma { .. } => {
                LinkFunction::Log
            }
            ParamId::Rho | ParamId::RhoPair { .. } => LinkFunction::Rho,
        }
    }

    /// Display name with one-based indices, e.g. `phi[1,2]`.
    pub fn label(self) -> String {
        match self {
            ParamId::Mu { i } => format!("mu[{}]", i + 1),
            ParamId::LambdaDiag { i } => format!("lambda[{}]", i + 1),
            ParamId::Lambda { i, j } => format!("lambda[{},{}]", i + 1, j + 1),
            ParamId::Psi { i } => format!("psi[{}]", i + 1),
            ParamId::Phi { i, j } => format!("phi[{},{}]", i + 1, j + 1),
            ParamId::Sigma { i } => format!("sigma[{}]", i + 1),
            ParamId::Rho => "rho".to_string(),
            ParamId::RhoPair { i, j } => format!("rho[{},{}]", i + 1, j + 1),
        }
    }

    pub fn is_mean(self) -> bool {
        matches!(self, ParamId::Mu { .. })
    }
}

/// Ordering of predictor coordinates for one model family.
///
/// Means come first (`0..k`), then the diagonal covariance parameters
/// (`k..2k`), then the active off-diagonal or correlation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    family: Family,
    dim: usize,
    mask: ADMask,
    params: Vec<ParamId>,
    /// Slot of each off-diagonal pair in `params`, in storage order.
    offdiag_slot: Vec<Option<usize>>,
}

impl Layout {
    pub fn new(family: Family, dim: usize, ad_order: Option<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Spec("dimension must be at least 1".into()));
        }
        let mask = match ad_order {
            Some(r) => {
                if !family.is_cholesky() {
                    return Err(Error::Spec(format!(
                        "antedependence order applies to Cholesky families, not {}",
                        family.name()
                    )));
                }
                ADMask::new(dim, r.min(dim - 1))
            }
            None => ADMask::full(dim),
        };
        let mut params: Vec<ParamId> = (0..dim).map(|i| ParamId::Mu { i }).collect();
        let mut offdiag_slot = vec![None; offdiag_len(dim)];
        match family {
            Family::BasicChol | Family::ModifiedChol => {
                let basic = family == Family::BasicChol;
                params.extend((0..dim).map(|i| {
                    if basic {
                        ParamId::LambdaDiag { i }
                    } else {
                        ParamId::Psi { i }
                    }
                }));
                for (idx, (i, j)) in offdiag_pairs(dim).enumerate() {
                    if mask.is_active(i, j) {
                        offdiag_slot[idx] = Some(params.len());
                        params.push(if basic {
                            ParamId::Lambda { i, j }
                        } else {
                            ParamId::Phi { i, j }
                        });
                    }
                }
            }
            Family::Ar1 => {
                params.extend((0..dim).map(|i| ParamId::Sigma { i }));
                if dim > 1 {
                    params.push(ParamId::Rho);
                }
            }
            Family::ConstCorr => {
                params.extend((0..dim).map(|i| ParamId::Sigma { i }));
                for (idx, (i, j)) in offdiag_pairs(dim).enumerate() {
                    offdiag_slot[idx] = Some(params.len());
                    params.push(ParamId::RhoPair { i, j });
                }
            }
        }
        Ok(Self {
            family,
            dim,
            mask,
            params,
            offdiag_slot,
        })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mask(&self) -> ADMask {
        self.mask
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn position(&self, id: ParamId) -> Option<usize> {
        self.params.iter().position(|p| *p == id)
    }

    /// Number of covariance-specifying entries with no predictor
    /// (structurally zero), out of `k(k+1)/2`.
    pub fn structural_zero_count(&self) -> usize {
        self.dim * (self.dim + 1) / 2 - (self.params.len() - self.dim)
    }

    #[inline]
    fn off(&self, eta: &[f64], i: usize, j: usize) -> f64 {
        match self.offdiag_slot[offdiag_index(i, j)] {
            Some(slot) => eta[slot],
            None => 0.0,
        }
    }

    /// Natural-scale parameter values (inverse links applied).
    pub fn natural(&self, eta: &[f64]) -> Vec<f64> {
        self.params
            .iter()
            .zip(eta)
            .map(|(p, e)| p.link().inverse(*e))
            .collect()
    }

    pub fn mean(&self, eta: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(&eta[..self.dim])
    }

    pub fn inverse_factor(&self, eta: &[f64]) -> Result<InverseCholFactor> {
        let k = self.dim;
        match self.family {
            Family::BasicChol => {
                let diag = eta[k..2 * k].iter().map(|e| e.exp()).collect();
                let off = offdiag_pairs(k).map(|(i, j)| self.off(eta, i, j)).collect();
                InverseCholFactor::new(diag, off)?.apply_ad_mask(&self.mask)
            }
            Family::ModifiedChol => Ok(crate::covparam::modified_to_basic(
                &self.modified_params(eta)?,
            )),
            _ => Err(Error::InvalidParameter(format!(
                "{} has no Cholesky factor",
                self.family.name()
            ))),
        }
    }

    pub fn modified_params(&self, eta: &[f64]) -> Result<ModifiedCholParams> {
        let k = self.dim;
        match self.family {
            Family::ModifiedChol => {
                let psi = eta[k..2 * k].iter().map(|e| e.exp()).collect();
                let phi = offdiag_pairs(k).map(|(i, j)| self.off(eta, i, j)).collect();
                ModifiedCholParams::new(psi, phi)?.apply_ad_mask(&self.mask)
            }
            Family::BasicChol => Ok(crate::covparam::basic_to_modified(
                &self.inverse_factor(eta)?,
            )),
            _ => Err(Error::InvalidParameter(format!(
                "{} has no modified Cholesky form",
                self.family.name()
            ))),
        }
    }

    /// Assembles `Σ` from predictor values. Fails only for the
    /// constant-correlation family when the correlations are not PD.
    pub fn covariance(&self, eta: &[f64]) -> Result<CovarianceMatrix> {
        let k = self.dim;
        match self.family {
            Family::BasicChol => sigma_from_basic(&self.inverse_factor(eta)?),
            Family::ModifiedChol => sigma_from_modified(&self.modified_params(eta)?),
            Family::Ar1 => {
                let sds: Vec<f64> = eta[k..2 * k].iter().map(|e| e.exp()).collect();
                let rho = if k > 1 {
                    LinkFunction::Rho.inverse(eta[2 * k])
                } else {
                    0.0
                };
                sigma_from_ar1(&sds, rho)
            }
            Family::ConstCorr => {
                let sds: Vec<f64> = eta[k..2 * k].iter().map(|e| e.exp()).collect();
                let corr = self.correlation(eta);
                crate::covparam::sigma_from_const_corr(&sds, &corr)
            }
        }
    }

    fn correlation(&self, eta: &[f64]) -> DMatrix<f64> {
        let k = self.dim;
        let mut corr = DMatrix::identity(k, k);
        for (i, j) in offdiag_pairs(k) {
            let r = LinkFunction::Rho.inverse(self.off(eta, i, j));
            corr[(i, j)] = r;
            corr[(j, i)] = r;
        }
        corr
    }

    /// Fast covariance for the variance-correlation families without
    /// eigenvalue validation; PD failure surfaces in the Cholesky solve.
    fn reference_sigma(&self, eta: &[f64]) -> DMatrix<f64> {
        let k = self.dim;
        let sds: Vec<f64> = eta[k..2 * k].iter().map(|e| e.exp()).collect();
        match self.family {
            Family::Ar1 => {
                let rho = if k > 1 {
                    LinkFunction::Rho.inverse(eta[2 * k])
                } else {
                    0.0
                };
                DMatrix::from_fn(k, k, |i, j| {
                    sds[i] * sds[j] * rho.powi(i.abs_diff(j) as i32)
                })
            }
            _ => {
                let corr = self.correlation(eta);
                DMatrix::from_fn(k, k, |i, j| sds[i] * sds[j] * corr[(i, j)])
            }
        }
    }
}

/// Predictor values for one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorBundle {
    pub layout: Layout,
    pub eta: Vec<f64>,
}

impl PredictorBundle {
    pub fn new(layout: Layout, eta: Vec<f64>) -> Result<Self> {
        if eta.len() != layout.len() {
            return Err(Error::InvalidParameter(format!(
                "bundle needs {} predictor values, got {}",
                layout.len(),
                eta.len()
            )));
        }
        if eta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "predictor values must be finite".into(),
            ));
        }
        Ok(Self { layout, eta })
    }

    /// Bundle of a modified-family model expressing the same distribution
    /// in the basic family, or vice versa.
    pub fn convert(&self) -> Result<PredictorBundle> {
        let k = self.layout.dim;
        let order = Some(self.layout.mask.order);
        let (target, diag, off): (Family, Vec<f64>, Vec<f64>) = match self.layout.family {
            Family::ModifiedChol => {
                let f = self.layout.inverse_factor(&self.eta)?;
                (
                    Family::BasicChol,
                    f.diag().iter().map(|v| v.ln()).collect(),
                    f.offdiag().to_vec(),
                )
            }
            Family::BasicChol => {
                let p = self.layout.modified_params(&self.eta)?;
                (
                    Family::ModifiedChol,
                    p.psi().iter().map(|v| v.ln()).collect(),
                    p.phi().to_vec(),
                )
            }
            other => {
                return Err(Error::InvalidParameter(format!(
                    "cannot convert family {}",
                    other.name()
                )));
            }
        };
        let layout = Layout::new(target, k, order)?;
        let mut eta = self.eta[..k].to_vec();
        eta.extend(diag);
        for (idx, (i, j)) in offdiag_pairs(k).enumerate() {
            if layout.mask.is_active(i, j) {
                eta.push(off[idx]);
            }
        }
        PredictorBundle::new(layout, eta)
    }
}

/// First and diagonal second derivatives with respect to every predictor
/// coordinate of a layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeBundle {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    /// `ỹ = y - μ`.
    pub residual: Vec<f64>,
    /// `z = L^{-1} ỹ` (Cholesky families only).
    pub z: Vec<f64>,
}

fn check_y(layout: &Layout, y: &[f64]) {
    debug_assert_eq!(y.len(), layout.dim, "response dimension mismatch");
}

/// `z_j = Σ_{m≤j} λ_mj ỹ_m` for the basic family.
#[inline]
fn basic_z(layout: &Layout, eta: &[f64], resid: &[f64], j: usize) -> f64 {
    let k = layout.dim;
    let mut acc = eta[k + j].exp() * resid[j];
    for m in 0..j {
        acc += layout.off(eta, m, j) * resid[m];
    }
    acc
}

/// Innovation `e_j = ỹ_j - Σ_{i<j} φ_ij ỹ_i = -Σ_{i≤j} φ_ij ỹ_i` for the
/// modified family.
#[inline]
fn innovation(layout: &Layout, eta: &[f64], resid: &[f64], j: usize) -> f64 {
    let mut acc = resid[j];
    for i in 0..j {
        acc -= layout.off(eta, i, j) * resid[i];
    }
    acc
}

fn residual(layout: &Layout, eta: &[f64], y: &[f64]) -> Vec<f64> {
    y.iter()
        .zip(&eta[..layout.dim])
        .map(|(y, m)| y - m)
        .collect()
}

/// `-(k/2) log 2π + Σ log λ_ii - ½ zᵀz`.
pub fn loglik_basic(bundle: &PredictorBundle, y: &[f64]) -> Result<f64> {
    require_family(&bundle.layout, Family::BasicChol)?;
    Ok(basic_loglik(&bundle.layout, &bundle.eta, y))
}

/// `-(k/2) log 2π - ½ Σ log ψ_j - ½ Σ e_j² / ψ_j`.
pub fn loglik_modified(bundle: &PredictorBundle, y: &[f64]) -> Result<f64> {
    require_family(&bundle.layout, Family::ModifiedChol)?;
    Ok(modified_loglik(&bundle.layout, &bundle.eta, y))
}

fn require_family(layout: &Layout, family: Family) -> Result<()> {
    if layout.family != family {
        return Err(Error::InvalidParameter(format!(
            "expected a {} bundle, got {}",
            family.name(),
            layout.family.name()
        )));
    }
    Ok(())
}

pub(crate) fn basic_loglik(layout: &Layout, eta: &[f64], y: &[f64]) -> f64 {
    check_y(layout, y);
    let k = layout.dim;
    let resid = residual(layout, eta, y);
    let mut quad = 0.0;
    let mut logdet = 0.0;
    for j in 0..k {
        let z = basic_z(layout, eta, &resid, j);
        quad += z * z;
        logdet += eta[k + j];
    }
    -0.5 * k as f64 * LN_2PI + logdet - 0.5 * quad
}

pub(crate) fn modified_loglik(layout: &Layout, eta: &[f64], y: &[f64]) -> f64 {
    check_y(layout, y);
    let k = layout.dim;
    let resid = residual(layout, eta, y);
    let mut acc = 0.0;
    for j in 0..k {
        let e = innovation(layout, eta, &resid, j);
        acc += eta[k + j] + e * e * (-eta[k + j]).exp();
    }
    -0.5 * k as f64 * LN_2PI - 0.5 * acc
}

/// Brute-force Gaussian log-density through a Cholesky factorization of `Σ`.
pub fn loglik_generic(mu: &[f64], sigma: &CovarianceMatrix, y: &[f64]) -> Result<f64> {
    dense_loglik(mu, sigma.matrix(), y)
}

fn dense_loglik(mu: &[f64], sigma: &DMatrix<f64>, y: &[f64]) -> Result<f64> {
    let k = mu.len();
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NumericalFailure("covariance is singular or indefinite".into()))?;
    let resid = DVector::from_iterator(k, y.iter().zip(mu).map(|(y, m)| y - m));
    let l = chol.l_dirty();
    let mut w = resid;
    l.solve_lower_triangular_mut(&mut w);
    let logdet: f64 = (0..k).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
    let value = -0.5 * (k as f64 * LN_2PI + logdet + w.norm_squared());
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NumericalFailure("non-finite log-likelihood".into()))
    }
}

/// Log-likelihood for any family. Errors only when a variance-correlation
/// family produces an indefinite `Σ`.
pub fn loglik(layout: &Layout, eta: &[f64], y: &[f64]) -> Result<f64> {
    match layout.family {
        Family::BasicChol => Ok(basic_loglik(layout, eta, y)),
        Family::ModifiedChol => Ok(modified_loglik(layout, eta, y)),
        Family::Ar1 | Family::ConstCorr => {
            dense_loglik(&eta[..layout.dim], &layout.reference_sigma(eta), y)
        }
    }
}

/// Analytic derivatives for the basic family.
pub fn grad_basic(bundle: &PredictorBundle, y: &[f64]) -> Result<DerivativeBundle> {
    require_family(&bundle.layout, Family::BasicChol)?;
    Ok(basic_derivatives(&bundle.layout, &bundle.eta, y))
}

/// Same computation as [`grad_basic`]; both halves are always filled.
pub fn hess_diag_basic(bundle: &PredictorBundle, y: &[f64]) -> Result<DerivativeBundle> {
    grad_basic(bundle, y)
}

pub fn grad_modified(bundle: &PredictorBundle, y: &[f64]) -> Result<DerivativeBundle> {
    require_family(&bundle.layout, Family::ModifiedChol)?;
    Ok(modified_derivatives(&bundle.layout, &bundle.eta, y))
}

pub fn hess_diag_modified(bundle: &PredictorBundle, y: &[f64]) -> Result<DerivativeBundle> {
    grad_modified(bundle, y)
}

fn basic_derivatives(layout: &Layout, eta: &[f64], y: &[f64]) -> DerivativeBundle {
    check_y(layout, y);
    let k = layout.dim;
    let resid = residual(layout, eta, y);
    let z: Vec<f64> = (0..k).map(|j| basic_z(layout, eta, &resid, j)).collect();
    let lam_diag: Vec<f64> = (0..k).map(|i| eta[k + i].exp()).collect();
    let p = layout.params.len();
    let mut first = vec![0.0; p];
    let mut second = vec![0.0; p];
    for i in 0..k {
        // Σ^{-1} ỹ = (L^{-1})ᵀ z
        let mut g = lam_diag[i] * z[i];
        let mut h = lam_diag[i] * lam_diag[i];
        for j in (i + 1)..k {
            let l = layout.off(eta, i, j);
            g += l * z[j];
            h += l * l;
        }
        first[i] = g;
        second[i] = -h;
        let a = lam_diag[i] * resid[i];
        first[k + i] = 1.0 - a * z[i];
        // -2 λ² ỹ² - λ ỹ Σ_{m<i} ỹ_m λ_mi, with Σ_{m<i} = z_i - λ_ii ỹ_i
        second[k + i] = -2.0 * a * a - a * (z[i] - a);
    }
    for (idx, (i, j)) in offdiag_pairs(k).enumerate() {
        if let Some(slot) = layout.offdiag_slot[idx] {
            first[slot] = -resid[i] * z[j];
            second[slot] = -resid[i] * resid[i];
        }
    }
    DerivativeBundle {
        first,
        second,
        residual: resid,
        z,
    }
}

fn modified_derivatives(layout: &Layout, eta: &[f64], y: &[f64]) -> DerivativeBundle {
    check_y(layout, y);
    let k = layout.dim;
    let resid = residual(layout, eta, y);
    let e: Vec<f64> = (0..k).map(|j| innovation(layout, eta, &resid, j)).collect();
    let inv_psi: Vec<f64> = (0..k).map(|j| (-eta[k + j]).exp()).collect();
    let p = layout.params.len();
    let mut first = vec![0.0; p];
    let mut second = vec![0.0; p];
    for i in 0..k {
        // Tᵀ D^{-1} T ỹ
        let mut g = e[i] * inv_psi[i];
        let mut h = inv_psi[i];
        for j in (i + 1)..k {
            let phi = layout.off(eta, i, j);
            g -= phi * e[j] * inv_psi[j];
            h += phi * phi * inv_psi[j];
        }
        first[i] = g;
        second[i] = -h;
        let q = e[i] * e[i] * inv_psi[i];
        first[k + i] = 0.5 * (q - 1.0);
        second[k + i] = -0.5 * q;
    }
    for (idx, (i, j)) in offdiag_pairs(k).enumerate() {
        if let Some(slot) = layout.offdiag_slot[idx] {
            first[slot] = resid[i] * e[j] * inv_psi[j];
            second[slot] = -resid[i] * resid[i] * inv_psi[j];
        }
    }
    let z = e
        .iter()
        .zip(&inv_psi)
        .map(|(e, ip)| e * ip.sqrt())
        .collect();
    DerivativeBundle {
        first,
        second,
        residual: resid,
        z,
    }
}

/// First and second derivative for a single predictor coordinate.
///
/// For the Cholesky families this costs `O(k)` for covariance coordinates
/// and `O(k²)` for means.
pub fn coord_derivatives(
    layout: &Layout,
    eta: &[f64],
    y: &[f64],
    slot: usize,
) -> Result<(f64, f64)> {
    let k = layout.dim;
    let param = layout.params[slot];
    match (layout.family, param) {
        (Family::BasicChol, ParamId::LambdaDiag { i }) => {
            let resid = residual(layout, eta, y);
            let z = basic_z(layout, eta, &resid, i);
            let a = eta[k + i].exp() * resid[i];
            Ok((1.0 - a * z, -2.0 * a * a - a * (z - a)))
        }
        (Family::BasicChol, ParamId::Lambda { i, j }) => {
            let resid = residual(layout, eta, y);
            let z = basic_z(layout, eta, &resid, j);
            Ok((-resid[i] * z, -resid[i] * resid[i]))
        }
        (Family::ModifiedChol, ParamId::Psi { i }) => {
            let resid = residual(layout, eta, y);
            let e = innovation(layout, eta, &resid, i);
            let q = e * e * (-eta[k + i]).exp();
            Ok((0.5 * (q - 1.0), -0.5 * q))
        }
        (Family::ModifiedChol, ParamId::Phi { i, j }) => {
            let resid = residual(layout, eta, y);
            let e = innovation(layout, eta, &resid, j);
            let ip = (-eta[k + j]).exp();
            Ok((resid[i] * e * ip, -resid[i] * resid[i] * ip))
        }
        (Family::BasicChol, _) => {
            let d = basic_derivatives(layout, eta, y);
            Ok((d.first[slot], d.second[slot]))
        }
        (Family::ModifiedChol, _) => {
            let d = modified_derivatives(layout, eta, y);
            Ok((d.first[slot], d.second[slot]))
        }
        (_, ParamId::Mu { i }) => {
            let sigma = layout.reference_sigma(eta);
            let chol = sigma.cholesky().ok_or_else(|| {
                Error::NumericalFailure("covariance is singular or indefinite".into())
            })?;
            let resid = DVector::from_vec(residual(layout, eta, y));
            let g = chol.solve(&resid);
            let mut unit = DVector::zeros(k);
            unit[i] = 1.0;
            let col = chol.solve(&unit);
            Ok((g[i], -col[i]))
        }
        _ => reference_fd(layout, eta, y, slot),
    }
}

/// Finite-difference step for a predictor value.
pub fn fd_step(eta: f64) -> f64 {
    1e-5f64.max(1e-7 * eta.abs())
}

/// Central differences of the log-likelihood in one coordinate with one
/// level of Richardson extrapolation.
fn reference_fd(layout: &Layout, eta: &[f64], y: &[f64], slot: usize) -> Result<(f64, f64)> {
    let h = fd_step(eta[slot]);
    let mut work = eta.to_vec();
    let mut eval = |delta: f64| -> Result<f64> {
        work[slot] = eta[slot] + delta;
        loglik(layout, &work, y)
    };
    let f0 = eval(0.0)?;
    let (fp, fm) = (eval(h)?, eval(-h)?);
    let (fp2, fm2) = (eval(0.5 * h)?, eval(-0.5 * h)?);
    let d1_h = (fp - fm) / (2.0 * h);
    let d1_h2 = (fp2 - fm2) / h;
    let d2_h = (fp - 2.0 * f0 + fm) / (h * h);
    let d2_h2 = (fp2 - 2.0 * f0 + fm2) / (0.25 * h * h);
    Ok(((4.0 * d1_h2 - d1_h) / 3.0, (4.0 * d2_h2 - d2_h) / 3.0))
}

/// Derivatives for the variance-correlation families: analytic for the
/// means, finite differences of [`loglik_generic`] for the rest.
pub fn grad_reference(
    family: Family,
    bundle: &PredictorBundle,
    y: &[f64],
) -> Result<DerivativeBundle> {
    if family.is_cholesky() {
        return Err(Error::InvalidParameter(
            "reference derivatives apply to ar1 and const_corr".into(),
        ));
    }
    require_family(&bundle.layout, family)?;
    let layout = &bundle.layout;
    let mut first = Vec::with_capacity(layout.len());
    let mut second = Vec::with_capacity(layout.len());
    for slot in 0..layout.len() {
        let (g, h) = coord_derivatives(layout, &bundle.eta, y, slot)?;
        first.push(g);
        second.push(h);
    }
    Ok(DerivativeBundle {
        first,
        second,
        residual: residual(layout, &bundle.eta, y),
        z: Vec::new(),
    })
}

/// All-coordinate derivatives for any family.
pub fn derivatives(layout: &Layout, eta: &[f64], y: &[f64]) -> Result<DerivativeBundle> {
    match layout.family {
        Family::BasicChol => Ok(basic_derivatives(layout, eta, y)),
        Family::ModifiedChol => Ok(modified_derivatives(layout, eta, y)),
        f => grad_reference(
            f,
            &PredictorBundle {
                layout: layout.clone(),
                eta: eta.to_vec(),
            },
            y,
        ),
    }
}

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Log-likelihood of `n` observations stored row-major.
pub fn loglik_batch(layout: &Layout, eta: &[f64], y: &[f64]) -> Result<f64> {
    let p = layout.len();
    let k = layout.dim;
    let n = y.len() / k;
    let terms = (0..n).map(|r| loglik(layout, &eta[r * p..(r + 1) * p], &y[r * k..(r + 1) * k]));
    if n > 10_000 {
        let values: Result<Vec<f64>> = terms.collect();
        Ok(compensated_sum(values?))
    } else {
        terms.sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::PI;

    fn random_eta(rng: &mut ChaCha8Rng, layout: &Layout) -> Vec<f64> {
        layout
            .params()
            .iter()
            .map(|p| match p {
                ParamId::Mu { .. } => rng.random_range(-1.0..1.0),
                ParamId::LambdaDiag { .. } | ParamId::Psi { .. } | ParamId::Sigma { .. } => {
                    rng.random_range(-0.7..0.7)
                }
                ParamId::Rho => rng.random_range(-1.0..1.0),
                ParamId::RhoPair { .. } => 0.1 * rng.sample::<f64, _>(StandardNormal),
                _ => 0.5 * rng.sample::<f64, _>(StandardNormal),
            })
            .collect()
    }

    fn random_y(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
        (0..k)
            .map(|_| 1.5 * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    #[test]
    fn standard_normal_at_mode() {
        let layout = Layout::new(Family::BasicChol, 1, None).unwrap();
        let b = PredictorBundle::new(layout, vec![0.0, 0.0]).unwrap();
        assert!((loglik_basic(&b, &[0.0]).unwrap() + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);

        let layout = Layout::new(Family::ModifiedChol, 1, None).unwrap();
        let b = PredictorBundle::new(layout, vec![2.0, 0.0]).unwrap();
        assert!((loglik_modified(&b, &[2.0]).unwrap() + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_residual_basic() {
        let layout = Layout::new(Family::BasicChol, 2, None).unwrap();
        let b = PredictorBundle::new(layout, vec![0.3, -0.2, 0.4, -0.1, 2.0]).unwrap();
        let expected = -(2.0 * PI).ln() + 0.4 - 0.1;
        assert!((loglik_basic(&b, &[0.3, -0.2]).unwrap() - expected).abs() < 1e-14);
        let d = grad_basic(&b, &[0.3, -0.2]).unwrap();
        assert_eq!(&d.first[..2], &[0.0, 0.0]);
        assert_eq!(&d.first[2..4], &[1.0, 1.0]);
        assert_eq!(d.first[4], 0.0);
    }

    #[test]
    fn zero_residual_modified() {
        let layout = Layout::new(Family::ModifiedChol, 3, None).unwrap();
        let eta = vec![0.0, 1.0, 2.0, 0.1, 0.2, 0.3, 0.5, -0.5, 0.7];
        let b = PredictorBundle::new(layout, eta).unwrap();
        let d = grad_modified(&b, &[0.0, 1.0, 2.0]).unwrap();
        assert_eq!(&d.first[3..6], &[-0.5, -0.5, -0.5]);
        assert_eq!(&d.first[6..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn modified_hand_evaluation() {
        // ψ = (1,1), φ12 = 0.5, y - μ = (1, 0.5): e = (1, 0); quadratic ½.
        let layout = Layout::new(Family::ModifiedChol, 2, None).unwrap();
        let b = PredictorBundle::new(layout, vec![0.0, 0.0, 0.0, 0.0, 0.5]).unwrap();
        let value = loglik_modified(&b, &[1.0, 0.5]).unwrap();
        assert!((value - (-(2.0 * PI).ln() - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn lambda_offdiag_second_derivative() {
        let layout = Layout::new(Family::BasicChol, 2, None).unwrap();
        let b = PredictorBundle::new(layout, vec![0.0, 0.0, 0.3, 0.1, 0.7]).unwrap();
        let d = hess_diag_basic(&b, &[2.0, 5.0]).unwrap();
        assert_eq!(d.second[4], -4.0);
    }

    #[test]
    fn generic_examples() {
        let s = CovarianceMatrix::new(DMatrix::identity(1, 1)).unwrap();
        assert!((loglik_generic(&[1.0], &s, &[1.0]).unwrap() + 0.5 * LN_2PI).abs() < 1e-15);
        let s = CovarianceMatrix::new(DMatrix::identity(2, 2)).unwrap();
        let v = loglik_generic(&[0.0, 0.0], &s, &[1.0, 1.0]).unwrap();
        assert!((v - (-LN_2PI - 1.0)).abs() < 1e-14);
        let singular =
            CovarianceMatrix::from_trusted(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]));
        assert!(matches!(
            loglik_generic(&[0.0, 0.0], &singular, &[1.0, 0.0]),
            Err(Error::NumericalFailure(_))
        ));
    }

    #[test]
    fn univariate_density_integrates_to_one() {
        let s = CovarianceMatrix::new(DMatrix::from_element(1, 1, 0.7)).unwrap();
        // Composite Simpson on [-12, 12] around μ = 0.4.
        let (a, b, m) = (-12.0, 12.0, 4000);
        let h = (b - a) / m as f64;
        let f = |x: f64| loglik_generic(&[0.4], &s, &[x + 0.4]).unwrap().exp();
        let mut acc = f(a) + f(b);
        for i in 1..m {
            acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        assert!((acc * h / 3.0 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn families_agree_with_generic() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for case in 0..200 {
            let k = [1, 2, 3, 5, 10][case % 5];
            let family = if case % 2 == 0 {
                Family::BasicChol
            } else {
                Family::ModifiedChol
            };
            let layout = Layout::new(family, k, None).unwrap();
            let eta = random_eta(&mut rng, &layout);
            let y = random_y(&mut rng, k);
            let b = PredictorBundle::new(layout.clone(), eta.clone()).unwrap();
            let own = loglik(&layout, &eta, &y).unwrap();
            let sigma = layout.covariance(&eta).unwrap();
            let generic = loglik_generic(&eta[..k], &sigma, &y).unwrap();
            let converted = b.convert().unwrap();
            let other = loglik(&converted.layout, &converted.eta, &y).unwrap();
            assert!(
                (own - generic).abs() < 1e-10,
                "case {case}: {own} vs {generic}"
            );
            assert!((own - other).abs() < 1e-10, "case {case}");
        }
    }

    #[test]
    fn mean_gradient_consistent_across_families() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let layout = Layout::new(Family::ModifiedChol, 5, None).unwrap();
        let eta = random_eta(&mut rng, &layout);
        let y = random_y(&mut rng, 5);
        let b = PredictorBundle::new(layout, eta).unwrap();
        let dm = grad_modified(&b, &y).unwrap();
        let c = b.convert().unwrap();
        let db = grad_basic(&c, &y).unwrap();
        for i in 0..5 {
            assert!((dm.first[i] - db.first[i]).abs() < 1e-10);
            assert!((dm.second[i] - db.second[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn coordinate_derivatives_match_bundle() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for family in [Family::BasicChol, Family::ModifiedChol] {
            for k in [1, 3, 10] {
                let layout = Layout::new(family, k, Some(2)).unwrap();
                let eta = random_eta(&mut rng, &layout);
                let y = random_y(&mut rng, k);
                let d = derivatives(&layout, &eta, &y).unwrap();
                for slot in 0..layout.len() {
                    let (g, h) = coord_derivatives(&layout, &eta, &y, slot).unwrap();
                    assert!((g - d.first[slot]).abs() < 1e-12);
                    assert!((h - d.second[slot]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rho_link_round_trip() {
        for rho in [-0.99, 0.0, 0.99] {
            let l = LinkFunction::Rho;
            assert!((l.inverse(l.link(rho)) - rho).abs() < 1e-12);
        }
        for theta in [1e-3, 1.0, 40.0] {
            assert!(
                (LinkFunction::Log.inverse(LinkFunction::Log.link(theta)) - theta).abs()
                    < 1e-12 * theta
            );
        }
    }

    /// Bivariate normal score with respect to log σ1 and the rho-link
    /// predictor, derived by hand.
    fn bivariate_score(s1: f64, s2: f64, rho: f64, r: [f64; 2]) -> (f64, f64) {
        let u = r[0] / s1;
        let v = r[1] / s2;
        let om = 1.0 - rho * rho;
        // ℓ = -log s1 - log s2 - ½ log(1-ρ²) - (u² - 2ρuv + v²) / (2(1-ρ²))
        let d_logs1 = -1.0 + (u * u - rho * u * v) / om;
        let d_rho = rho / om + (u * v) / om - rho * (u * u - 2.0 * rho * u * v + v * v) / (om * om);
        let eta = LinkFunction::Rho.link(rho);
        (d_logs1, d_rho * LinkFunction::Rho.dtheta_deta(eta))
    }

    #[test]
    fn const_corr_bivariate_gradient_matches_analytic() {
        let layout = Layout::new(Family::ConstCorr, 2, None).unwrap();
        let (s1, s2, rho) = (0.8f64, 1.7f64, -0.35f64);
        let eta = vec![0.2, -0.1, s1.ln(), s2.ln(), LinkFunction::Rho.link(rho)];
        let y = [1.1, -0.9];
        let b = PredictorBundle::new(layout, eta).unwrap();
        let d = grad_reference(Family::ConstCorr, &b, &y).unwrap();
        let (g_s1, g_rho) = bivariate_score(s1, s2, rho, [0.9, -0.8]);
        assert!((d.first[2] - g_s1).abs() < 1e-7, "{} vs {g_s1}", d.first[2]);
        assert!(
            (d.first[4] - g_rho).abs() < 1e-7,
            "{} vs {g_rho}",
            d.first[4]
        );
    }

    #[test]
    fn reference_univariate_pattern() {
        // ρ = 0, σ = 1, y = μ: mean gradients vanish, log σ gradient is -1.
        for family in [Family::Ar1, Family::ConstCorr] {
            let layout = Layout::new(family, 3, None).unwrap();
            let eta = vec![0.0; layout.len()];
            let b = PredictorBundle::new(layout, eta).unwrap();
            let d = grad_reference(family, &b, &[0.0; 3]).unwrap();
            for i in 0..3 {
                assert!(d.first[i].abs() < 1e-12);
                assert!((d.first[3 + i] + 1.0).abs() < 1e-6);
                // ∂²/∂(log σ)² of -log σ - ỹ²/(2σ²) at ỹ = 0 is 0.
                assert!(d.second[3 + i].abs() < 1e-3);
            }
            for g in &d.first[6..] {
                assert!(g.abs() < 1e-6);
            }
        }
    }

    #[test]
    fn indefinite_const_corr_fails() {
        let layout = Layout::new(Family::ConstCorr, 3, None).unwrap();
        let r = LinkFunction::Rho.link(0.95);
        let eta = vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, r, -r, r];
        assert!(loglik(&layout, &eta, &[0.0; 3]).is_err());
        assert!(layout.covariance(&eta).is_err());
    }

    #[test]
    fn batch_sum_matches_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let layout = Layout::new(Family::ModifiedChol, 3, None).unwrap();
        let n = 12_000;
        let mut eta = Vec::new();
        let mut y = Vec::new();
        let mut rows = 0.0;
        for _ in 0..n {
            let e = random_eta(&mut rng, &layout);
            let yy = random_y(&mut rng, 3);
            rows += loglik(&layout, &e, &yy).unwrap();
            eta.extend(e);
            y.extend(yy);
        }
        let batch = loglik_batch(&layout, &eta, &y).unwrap();
        assert!((batch - rows).abs() < 1e-9 * rows.abs().max(1.0));
    }

    #[test]
    fn structural_zero_counts() {
        let l = Layout::new(Family::BasicChol, 10, Some(5)).unwrap();
        assert_eq!(l.len(), 10 + 10 + 35);
        assert_eq!(l.structural_zero_count(), 10);
        let l = Layout::new(Family::Ar1, 10, None).unwrap();
        assert_eq!(l.structural_zero_count(), 44);
        assert!(Layout::new(Family::Ar1, 10, Some(2)).is_err());
    }
}
