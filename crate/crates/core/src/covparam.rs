//! Covariance parameterizations.
//!
//! Indices are zero-based throughout. Off-diagonal parameters `(i, j)` with
//! `i < j` are stored densely in column order of the upper triangle, at
//! position `i + j(j-1)/2`. In the basic parameterization `λ_ij` is the entry
//! of `L^{-1}` in row `j`, column `i`, so that
//! `z_j = Σ_{m ≤ j} λ_mj ỹ_m`. In the modified parameterization `φ_ij` is the
//! coefficient of `y_i` in the autoregression for `y_j`, and `ψ_j` is the
//! variance of its innovation.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative eigenvalue floor below which a symmetric matrix is not positive
/// definite.
pub const PD_REL_TOL: f64 = 1e-10;

#[inline]
pub fn offdiag_index(i: usize, j: usize) -> usize {
    debug_assert!(i < j);
    i + j * (j - 1) / 2
}

#[inline]
pub fn offdiag_len(dim: usize) -> usize {
    dim * dim.saturating_sub(1) / 2
}

/// Off-diagonal pairs in storage order.
pub fn offdiag_pairs(dim: usize) -> impl Iterator<Item = (usize, usize)> {
    (1..dim).flat_map(|j| (0..j).map(move |i| (i, j)))
}

/// Order-`r` antedependence: only pairs with `0 < j - i <= r` are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ADMask {
    pub dim: usize,
    pub order: usize,
}

impl ADMask {
    pub fn new(dim: usize, order: usize) -> Self {
        Self { dim, order }
    }

    /// The unrestricted mask `r = k - 1`.
    pub fn full(dim: usize) -> Self {
        Self {
            dim,
            order: dim.saturating_sub(1),
        }
    }

    #[inline]
    pub fn is_active(&self, i: usize, j: usize) -> bool {
        i < j && j - i <= self.order
    }

    pub fn active_count(&self) -> usize {
        offdiag_pairs(self.dim)
            .filter(|&(i, j)| self.is_active(i, j))
            .count()
    }

    /// Covariance-specifying entries left free: the diagonal plus the
    /// active off-diagonal pairs.
    pub fn free_parameter_count(&self) -> usize {
        self.dim + self.active_count()
    }

    pub fn zero_count(&self) -> usize {
        offdiag_len(self.dim) - self.active_count()
    }

    /// Structural-zero flags in storage order.
    pub fn structural_zeros(&self) -> Vec<bool> {
        offdiag_pairs(self.dim)
            .map(|(i, j)| !self.is_active(i, j))
            .collect()
    }
}

/// Entries of the inverse Cholesky factor `L^{-1}` (lower triangular).
#[derive(Debug, Clone, PartialEq)]
pub struct InverseCholFactor {
    dim: usize,
    diag: Vec<f64>,
    offdiag: Vec<f64>,
    structural_zero: Vec<bool>,
}

impl InverseCholFactor {
    pub fn new(diag: Vec<f64>, offdiag: Vec<f64>) -> Result<Self> {
        let dim = diag.len();
        if offdiag.len() != offdiag_len(dim) {
            return Err(Error::InvalidParameter(format!(
                "expected {} off-diagonal entries for dim {dim}, got {}",
                offdiag_len(dim),
                offdiag.len()
            )));
        }
        if let Some((i, v)) = diag
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0 && v.is_finite()))
        {
            return Err(Error::InvalidParameter(format!(
                "λ_{i}{i} = {v} must be positive"
            )));
        }
        if offdiag.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite off-diagonal λ".into()));
        }
        Ok(Self {
            dim,
            structural_zero: vec![false; offdiag.len()],
            diag,
            offdiag,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(vec![1.0; dim], vec![0.0; offdiag_len(dim)]).expect("identity is valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn offdiag(&self) -> &[f64] {
        &self.offdiag
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match i.cmp(&j) {
            std::cmp::Ordering::Equal => self.diag[i],
            std::cmp::Ordering::Less => self.offdiag[offdiag_index(i, j)],
            std::cmp::Ordering::Greater => 0.0,
        }
    }

    pub fn structural_zeros(&self) -> &[bool] {
        &self.structural_zero
    }

    /// `L^{-1}` as a dense lower-triangular matrix.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let k = self.dim;
        let mut m = DMatrix::zeros(k, k);
        for j in 0..k {
            m[(j, j)] = self.diag[j];
            for i in 0..j {
                m[(j, i)] = self.offdiag[offdiag_index(i, j)];
            }
        }
        m
    }

    pub fn apply_ad_mask(&self, mask: &ADMask) -> Result<Self> {
        check_mask(self.dim, mask)?;
        let mut out = self.clone();
        for (idx, (i, j)) in offdiag_pairs(self.dim).enumerate() {
            if !mask.is_active(i, j) {
                out.offdiag[idx] = 0.0;
                out.structural_zero[idx] = true;
            }
        }
        Ok(out)
    }
}

/// Innovation variances `ψ` and generalized autoregressive parameters `φ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModifiedCholParams {
    dim: usize,
    psi: Vec<f64>,
    phi: Vec<f64>,
    structural_zero: Vec<bool>,
}

impl ModifiedCholParams {
    pub fn new(psi: Vec<f64>, phi: Vec<f64>) -> Result<Self> {
        let dim = psi.len();
        if phi.len() != offdiag_len(dim) {
            return Err(Error::InvalidParameter(format!(
                "expected {} autoregressive parameters for dim {dim}, got {}",
                offdiag_len(dim),
                phi.len()
            )));
        }
        if let Some((i, v)) = psi
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0 && v.is_finite()))
        {
            return Err(Error::InvalidParameter(format!(
                "ψ_{i} = {v} must be positive"
            )));
        }
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite φ".into()));
        }
        Ok(Self {
            dim,
            structural_zero: vec![false; phi.len()],
            psi,
            phi,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    /// `φ_ij` with the convention `φ_ii = -1`.
    pub fn phi_at(&self, i: usize, j: usize) -> f64 {
        match i.cmp(&j) {
            std::cmp::Ordering::Equal => -1.0,
            std::cmp::Ordering::Less => self.phi[offdiag_index(i, j)],
            std::cmp::Ordering::Greater => 0.0,
        }
    }

    pub fn structural_zeros(&self) -> &[bool] {
        &self.structural_zero
    }

    pub fn apply_ad_mask(&self, mask: &ADMask) -> Result<Self> {
        check_mask(self.dim, mask)?;
        let mut out = self.clone();
        for (idx, (i, j)) in offdiag_pairs(self.dim).enumerate() {
            if !mask.is_active(i, j) {
                out.phi[idx] = 0.0;
                out.structural_zero[idx] = true;
            }
        }
        Ok(out)
    }
}

fn check_mask(dim: usize, mask: &ADMask) -> Result<()> {
    if mask.dim != dim {
        return Err(Error::InvalidParameter(format!(
            "mask dimension {} does not match parameter dimension {dim}",
            mask.dim
        )));
    }
    Ok(())
}

/// Symmetric positive definite covariance matrix with a lazily computed
/// precision matrix.
#[derive(Debug, Clone)]
pub struct CovarianceMatrix {
    sigma: DMatrix<f64>,
    precision: OnceLock<DMatrix<f64>>,
}

impl PartialEq for CovarianceMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.sigma == other.sigma
    }
}

/// Iteration cap for the symmetric eigensolver, whose default never gives up.
const EIGEN_MAX_ITER: usize = 10_000;

/// Symmetric eigendecomposition with a bounded number of sweeps. A
/// tolerance slightly above machine epsilon is tried when the strict one
/// stalls.
fn symmetric_eigen(m: &DMatrix<f64>) -> Option<SymmetricEigen<f64, nalgebra::Dyn>> {
    SymmetricEigen::try_new(m.clone(), f64::EPSILON, EIGEN_MAX_ITER)
        .or_else(|| SymmetricEigen::try_new(m.clone(), 64.0 * f64::EPSILON, EIGEN_MAX_ITER))
}

impl CovarianceMatrix {
    /// Validates symmetry and positive definiteness. Eigenvalues in
    /// `(-1e-10·λ_max, 1e-10·λ_max]` are clamped up to `1e-10·λ_max`.
    pub fn new(sigma: DMatrix<f64>) -> Result<Self> {
        let k = sigma.nrows();
        if k == 0 || sigma.ncols() != k {
            return Err(Error::InvalidParameter(
                "covariance must be square and non-empty".into(),
            ));
        }
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "covariance has non-finite entries".into(),
            ));
        }
        let scale = sigma.amax().max(f64::MIN_POSITIVE);
        for i in 0..k {
            for j in 0..i {
                if (sigma[(i, j)] - sigma[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::InvalidParameter(format!(
                        "covariance not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        let sym = (&sigma + sigma.transpose()) * 0.5;
        let Some(eig) = symmetric_eigen(&sym) else {
            // Without a spectrum, a successful Cholesky factorization still
            // certifies positive definiteness.
            return match sym.clone().cholesky() {
                Some(_) => Ok(Self::from_trusted(sym)),
                None => Err(Error::NumericalFailure(
                    "eigendecomposition of covariance did not converge".into(),
                )),
            };
        };
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if max <= 0.0 || min <= -PD_REL_TOL * max {
            return Err(Error::InvalidParameter(format!(
                "covariance not positive definite (eigenvalues in [{min:e}, {max:e}])"
            )));
        }
        let floor = PD_REL_TOL * max;
        if min < floor {
            let clamped = eig.eigenvalues.map(|v| v.max(floor));
            let rebuilt =
                &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
            return Ok(Self::from_trusted((&rebuilt + rebuilt.transpose()) * 0.5));
        }
        Ok(Self::from_trusted(sym))
    }

    /// Skips validation; the caller guarantees a symmetric PD matrix.
    pub(crate) fn from_trusted(sigma: DMatrix<f64>) -> Self {
        Self {
            sigma,
            precision: OnceLock::new(),
        }
    }

    pub(crate) fn with_precision(sigma: DMatrix<f64>, precision: DMatrix<f64>) -> Self {
        let cell = OnceLock::new();
        let _ = cell.set(precision);
        Self {
            sigma,
            precision: cell,
        }
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.sigma[(i, j)]
    }

    /// `Σ^{-1}`; entry `(i, j)` is `ς_ij`.
    pub fn precision(&self) -> &DMatrix<f64> {
        self.precision.get_or_init(|| {
            let chol = self
                .sigma
                .clone()
                .cholesky()
                .expect("covariance is positive definite");
            chol.inverse()
        })
    }

    /// Lower Cholesky factor `L` with `Σ = L Lᵀ`.
    pub fn cholesky_lower(&self) -> Result<DMatrix<f64>> {
        self.sigma
            .clone()
            .cholesky()
            .map(|c| c.l())
            .ok_or_else(|| Error::NumericalFailure("Cholesky factorization failed".into()))
    }

    pub fn log_det(&self) -> Result<f64> {
        let l = self.cholesky_lower()?;
        Ok(2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>())
    }

    /// Eigenvalues, or NaN entries if the decomposition does not converge.
    pub fn eigenvalues(&self) -> DVector<f64> {
        symmetric_eigen(&self.sigma)
            .map(|e| e.eigenvalues)
            .unwrap_or_else(|| DVector::from_element(self.dim(), f64::NAN))
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().min()
    }
}

/// `Σ = L Lᵀ` from the entries of `L^{-1}`.
///
/// `L` is obtained by forward substitution against the identity, and the
/// precision `Σ^{-1} = (L^{-1})ᵀ L^{-1}` is cached directly.
pub fn sigma_from_basic(factor: &InverseCholFactor) -> Result<CovarianceMatrix> {
    if let Some((i, v)) = factor.diag.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "λ_{i}{i} = {v} must be positive"
        )));
    }
    let linv = factor.to_matrix();
    let l = invert_lower_triangular(&linv);
    let sigma = &l * l.transpose();
    let precision = linv.transpose() * &linv;
    Ok(CovarianceMatrix::with_precision(
        symmetrize(sigma),
        symmetrize(precision),
    ))
}

/// Inverse of a lower-triangular matrix with positive diagonal, column by
/// column via forward substitution.
pub(crate) fn invert_lower_triangular(a: &DMatrix<f64>) -> DMatrix<f64> {
    let k = a.nrows();
    let mut inv = DMatrix::zeros(k, k);
    for c in 0..k {
        inv[(c, c)] = 1.0 / a[(c, c)];
        for r in (c + 1)..k {
            let mut acc = 0.0;
            for m in c..r {
                acc += a[(r, m)] * inv[(m, c)];
            }
            inv[(r, c)] = -acc / a[(r, r)];
        }
    }
    inv
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// `Σ` from the autoregressive construction
/// `y_j = Σ_{i<j} φ_ij y_i + ε_j`, `Var(ε_j) = ψ_j`.
pub fn sigma_from_modified(params: &ModifiedCholParams) -> Result<CovarianceMatrix> {
    if let Some((i, v)) = params.psi.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "ψ_{i} = {v} must be positive"
        )));
    }
    let k = params.dim;
    let mut sigma = DMatrix::zeros(k, k);
    for j in 0..k {
        for l in 0..j {
            let cov: f64 = (0..j).map(|i| params.phi_at(i, j) * sigma[(i, l)]).sum();
            sigma[(j, l)] = cov;
            sigma[(l, j)] = cov;
        }
        let var: f64 = (0..j)
            .map(|i| params.phi_at(i, j) * sigma[(i, j)])
            .sum::<f64>()
            + params.psi[j];
        sigma[(j, j)] = var;
    }
    Ok(CovarianceMatrix::from_trusted(sigma))
}

/// Modified Cholesky parameters of an arbitrary covariance matrix.
pub fn modified_from_sigma(sigma: &CovarianceMatrix) -> Result<ModifiedCholParams> {
    let linv = invert_lower_triangular(&sigma.cholesky_lower()?);
    let k = sigma.dim();
    let diag = (0..k).map(|i| linv[(i, i)]).collect();
    let offdiag = offdiag_pairs(k).map(|(i, j)| linv[(j, i)]).collect();
    Ok(basic_to_modified(&InverseCholFactor::new(diag, offdiag)?))
}

/// `λ_ii = ψ_i^{-1/2}`, `λ_ij = -φ_ij ψ_j^{-1/2}`.
pub fn modified_to_basic(params: &ModifiedCholParams) -> InverseCholFactor {
    let diag: Vec<f64> = params.psi.iter().map(|p| p.powf(-0.5)).collect();
    let offdiag = offdiag_pairs(params.dim)
        .enumerate()
        .map(|(idx, (_, j))| -params.phi[idx] * diag[j])
        .collect();
    InverseCholFactor {
        dim: params.dim,
        diag,
        offdiag,
        structural_zero: params.structural_zero.clone(),
    }
}

/// `ψ_i = λ_ii^{-2}`, `φ_ij = -λ_ij / λ_jj`.
pub fn basic_to_modified(factor: &InverseCholFactor) -> ModifiedCholParams {
    let psi = factor.diag.iter().map(|l| l.powi(-2)).collect();
    let phi = offdiag_pairs(factor.dim)
        .enumerate()
        .map(|(idx, (_, j))| -factor.offdiag[idx] / factor.diag[j])
        .collect();
    ModifiedCholParams {
        dim: factor.dim,
        psi,
        phi,
        structural_zero: factor.structural_zero.clone(),
    }
}

fn check_sds(sds: &[f64]) -> Result<()> {
    if sds.is_empty() {
        return Err(Error::InvalidParameter(
            "need at least one standard deviation".into(),
        ));
    }
    if let Some((i, v)) = sds
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v > 0.0 && v.is_finite()))
    {
        return Err(Error::InvalidParameter(format!(
            "σ_{i} = {v} must be positive"
        )));
    }
    Ok(())
}

/// `Σ = diag(σ) P diag(σ)` with `P_ij = ρ^{|i-j|}`.
pub fn sigma_from_ar1(sds: &[f64], rho: f64) -> Result<CovarianceMatrix> {
    check_sds(sds)?;
    if !(rho.abs() < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "|ρ| = {} must be below 1",
            rho.abs()
        )));
    }
    let k = sds.len();
    let sigma = DMatrix::from_fn(k, k, |i, j| {
        sds[i] * sds[j] * rho.powi(i.abs_diff(j) as i32)
    });
    Ok(CovarianceMatrix::from_trusted(sigma))
}

/// `Σ = diag(σ) C diag(σ)`; positive definiteness of `C` is checked, not
/// implied.
pub fn sigma_from_const_corr(sds: &[f64], corr: &DMatrix<f64>) -> Result<CovarianceMatrix> {
    check_sds(sds)?;
    let k = sds.len();
    if corr.nrows() != k || corr.ncols() != k {
        return Err(Error::InvalidParameter(
            "correlation matrix has wrong shape".into(),
        ));
    }
    for i in 0..k {
        if (corr[(i, i)] - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "correlation diagonal {i} is not 1"
            )));
        }
    }
    let sigma = DMatrix::from_fn(k, k, |i, j| sds[i] * sds[j] * corr[(i, j)]);
    CovarianceMatrix::new(sigma)
}

/// Variances and correlation matrix of `Σ`.
pub fn correlation_from_sigma(sigma: &CovarianceMatrix) -> (Vec<f64>, DMatrix<f64>) {
    let m = sigma.matrix();
    let k = m.nrows();
    let variances: Vec<f64> = (0..k).map(|i| m[(i, i)]).collect();
    let corr = DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            1.0
        } else {
            m[(i, j)] / (variances[i] * variances[j]).sqrt()
        }
    });
    (variances, corr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).amax()
    }

    fn random_factor(rng: &mut ChaCha8Rng, k: usize) -> InverseCholFactor {
        let diag = (0..k)
            .map(|_| rng.sample::<f64, _>(StandardNormal).exp())
            .collect();
        let off = (0..offdiag_len(k))
            .map(|_| rng.sample(StandardNormal))
            .collect();
        InverseCholFactor::new(diag, off).unwrap()
    }

    #[test]
    fn storage_order_matches_pairs() {
        for (pos, (i, j)) in offdiag_pairs(6).enumerate() {
            assert_eq!(offdiag_index(i, j), pos);
        }
        assert_eq!(offdiag_pairs(6).count(), offdiag_len(6));
    }

    #[test]
    fn basic_identity_and_scalar() {
        let s = sigma_from_basic(&InverseCholFactor::identity(2)).unwrap();
        assert_eq!(s.matrix(), &DMatrix::identity(2, 2));

        let f = InverseCholFactor::new(vec![1f64.exp()], vec![]).unwrap();
        let s = sigma_from_basic(&f).unwrap();
        assert!((s.get(0, 0) - (-2f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn basic_matches_dense_inverse_oracle() {
        // λ12 = -0.5 is L^{-1}[1][0].
        let f = InverseCholFactor::new(vec![1.0; 3], vec![-0.5, 0.0, 0.0]).unwrap();
        let linv = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, -0.5, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let oracle = {
            let inv = linv.clone().try_inverse().unwrap();
            &inv * inv.transpose()
        };
        let s = sigma_from_basic(&f).unwrap();
        assert!(max_abs_diff(s.matrix(), &oracle) < 1e-14);
        // y2 = 0.5 y1 + ε: var 1.25, cov 0.5.
        assert!((s.get(1, 1) - 1.25).abs() < 1e-15);
        assert!((s.get(0, 1) - 0.5).abs() < 1e-15);
        assert!(max_abs_diff(s.precision(), &(linv.transpose() * &linv)) < 1e-15);
    }

    #[test]
    fn non_positive_diagonal_rejected() {
        assert!(matches!(
            InverseCholFactor::new(vec![1.0, 0.0], vec![0.0]),
            Err(Error::InvalidParameter(_))
        ));
        assert!(ModifiedCholParams::new(vec![-1.0], vec![]).is_err());
    }

    #[test]
    fn modified_autoregressive_example() {
        let p = ModifiedCholParams::new(vec![1.0, 1.0], vec![0.5]).unwrap();
        let s = sigma_from_modified(&p).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.25]);
        assert!(max_abs_diff(s.matrix(), &expected) < 1e-15);
    }

    #[test]
    fn modified_autoregressive_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 200_000;
        let (mut s11, mut s12, mut s22) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let y1: f64 = rng.sample(StandardNormal);
            let y2 = 0.5 * y1 + rng.sample::<f64, _>(StandardNormal);
            s11 += y1 * y1;
            s12 += y1 * y2;
            s22 += y2 * y2;
        }
        let n = n as f64;
        // Standard errors are below 0.005 at this sample size.
        assert!((s11 / n - 1.0).abs() < 0.02);
        assert!((s12 / n - 0.5).abs() < 0.02);
        assert!((s22 / n - 1.25).abs() < 0.02);
    }

    #[test]
    fn modified_without_autocorrelation_is_diagonal() {
        let p = ModifiedCholParams::new(vec![0.3, 2.0, 5.0], vec![0.0; 3]).unwrap();
        let s = sigma_from_modified(&p).unwrap();
        assert_eq!(
            s.matrix(),
            &DMatrix::from_diagonal(&DVector::from_vec(vec![0.3, 2.0, 5.0]))
        );
    }

    #[test]
    fn conversion_examples() {
        let p = ModifiedCholParams::new(vec![1.0, 1.0, 1.0], vec![0.0; 3]).unwrap();
        assert_eq!(modified_to_basic(&p), InverseCholFactor::identity(3));

        let p = ModifiedCholParams::new(vec![1.0, 4.0], vec![1.0]).unwrap();
        let f = modified_to_basic(&p);
        assert_eq!(f.diag(), &[1.0, 0.5]);
        assert_eq!(f.offdiag(), &[-0.5]);
        let a = sigma_from_basic(&f).unwrap();
        let b = sigma_from_modified(&p).unwrap();
        assert!(max_abs_diff(a.matrix(), b.matrix()) < 1e-14);
        assert_eq!(basic_to_modified(&f), p);
        let back = basic_to_modified(&InverseCholFactor::identity(4));
        assert_eq!(back.psi(), &[1.0; 4]);
        assert!(back.phi().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn random_factors_are_positive_definite() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for draw in 0..1000 {
            let k = 1 + draw % 10;
            let s = sigma_from_basic(&random_factor(&mut rng, k)).unwrap();
            assert!(s.min_eigenvalue() > 0.0, "draw {draw}");
        }
    }

    #[test]
    fn ad_mask_counts() {
        let m = ADMask::new(10, 5);
        assert_eq!(m.active_count(), 35);
        assert_eq!(m.free_parameter_count(), 45);
        assert_eq!(m.zero_count(), 10);
        assert_eq!(ADMask::full(7).zero_count(), 0);

        let f = InverseCholFactor::new(vec![1.0; 3], vec![0.1, 0.2, 0.3]).unwrap();
        assert_eq!(
            f.apply_ad_mask(&ADMask::full(3)).unwrap().offdiag(),
            f.offdiag()
        );
        let masked = f.apply_ad_mask(&ADMask::new(3, 1)).unwrap();
        assert_eq!(masked.offdiag(), &[0.1, 0.0, 0.3]);
        assert_eq!(masked.structural_zeros(), &[false, true, false]);
        assert!(f.apply_ad_mask(&ADMask::new(4, 1)).is_err());
    }

    #[test]
    fn banded_phi_gives_banded_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = 8;
        let psi = (0..k).map(|_| rng.random_range(0.1..3.0)).collect();
        let phi = (0..offdiag_len(k))
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let p = ModifiedCholParams::new(psi, phi)
            .unwrap()
            .apply_ad_mask(&ADMask::new(k, 2))
            .unwrap();
        let f = modified_to_basic(&p);
        for (idx, (i, j)) in offdiag_pairs(k).enumerate() {
            if j - i > 2 {
                assert_eq!(f.offdiag()[idx], 0.0);
            }
        }
    }

    #[test]
    fn ad1_correlation_identity() {
        let p = ModifiedCholParams::new(vec![0.4, 1.3, 0.7], vec![0.6, 0.0, -0.9]).unwrap();
        let (_, c) = correlation_from_sigma(&sigma_from_modified(&p).unwrap());
        assert!((c[(0, 2)] - c[(0, 1)] * c[(1, 2)]).abs() < 1e-14);
    }

    #[test]
    fn ar1_structure() {
        let s = sigma_from_ar1(&[1.0; 3], 0.5).unwrap();
        assert_eq!(
            s.matrix().row(0).iter().copied().collect::<Vec<_>>(),
            vec![1.0, 0.5, 0.25]
        );
        let d = sigma_from_ar1(&[1.0, 2.0], 0.0).unwrap();
        assert_eq!(d.get(0, 1), 0.0);
        assert!(sigma_from_ar1(&[1.0, 1.0], 1.0).is_err());
        assert!(sigma_from_ar1(&[1.0, 1.0], -1.2).is_err());
    }

    #[test]
    fn const_corr_product_and_boundary() {
        let corr = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let s = sigma_from_const_corr(&[1.0, 2.0], &corr).unwrap();
        assert_eq!(
            s.matrix(),
            &DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 4.0])
        );
        let s = sigma_from_const_corr(&[1.0, 3.0, 0.5], &DMatrix::identity(3, 3)).unwrap();
        assert_eq!(s.get(1, 2), 0.0);

        // Correlation matrix with prescribed eigenvalues via a rotation of
        // diag(1 - ρ, 1 + ρ): eigenvalue 1 - ρ.
        let near = |eps: f64| DMatrix::from_row_slice(2, 2, &[1.0, 1.0 - eps, 1.0 - eps, 1.0]);
        let ok = sigma_from_const_corr(&[1.0, 1.0], &near(1e-10)).unwrap();
        assert!(ok.min_eigenvalue() > 0.0);
        assert!(sigma_from_const_corr(&[1.0, 1.0], &near(-1e-3)).is_err());

        let bad = DMatrix::from_row_slice(3, 3, &[1.0, 0.9, -0.9, 0.9, 1.0, 0.9, -0.9, 0.9, 1.0]);
        assert!(matches!(
            sigma_from_const_corr(&[1.0; 3], &bad),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn correlation_of_diagonal_is_identity() {
        let s = CovarianceMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0])))
            .unwrap();
        let (v, c) = correlation_from_sigma(&s);
        assert_eq!(v, vec![2.0, 3.0]);
        assert_eq!(c, DMatrix::identity(2, 2));
    }

    proptest! {
        #[test]
        fn conversions_are_mutual_inverses(seed in 0u64..10_000, k in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_factor(&mut rng, k);
            let back = modified_to_basic(&basic_to_modified(&f));
            for (a, b) in f.diag().iter().zip(back.diag()) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
            for (a, b) in f.offdiag().iter().zip(back.offdiag()) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
            let p = basic_to_modified(&f);
            let p2 = basic_to_modified(&modified_to_basic(&p));
            for (a, b) in p.psi().iter().zip(p2.psi()) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
            for (a, b) in p.phi().iter().zip(p2.phi()) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }

        #[test]
        fn modified_and_basic_assembly_agree(seed in 0u64..10_000, k in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let psi = (0..k).map(|_| rng.random_range(0.2..2.0)).collect();
            let phi = (0..offdiag_len(k)).map(|_| rng.random_range(-0.8..0.8)).collect();
            let p = ModifiedCholParams::new(psi, phi).unwrap();
            let a = sigma_from_modified(&p).unwrap();
            let b = sigma_from_basic(&modified_to_basic(&p)).unwrap();
            let scale = a.matrix().amax().max(1.0);
            prop_assert!(max_abs_diff(a.matrix(), b.matrix()) < 1e-10 * scale);
        }

        #[test]
        fn correlations_bounded(seed in 0u64..10_000, k in 2usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = sigma_from_basic(&random_factor(&mut rng, k)).unwrap();
            let (_, c) = correlation_from_sigma(&s);
            prop_assert!(c.iter().all(|v| v.abs() <= 1.0 + 1e-12));
        }
    }
}
