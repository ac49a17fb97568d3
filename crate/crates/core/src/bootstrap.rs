//! Gaussian multiplier bootstrap for the maximum of standardized channel
//! sums.
//!
//! The `B² × B²` sample covariance of the per-observation ψ vectors is
//! factored as `Σ̂ = Σ̂^{1/2} Σ̂^{1/2}` through a symmetric eigendecomposition
//! (negative eigenvalues clipped to zero). Each bootstrap draw is
//! `‖Σ̂^{1/2} ξ‖_∞` with `ξ` standard normal.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::dgcit::PsiTensor;
use crate::error::{Error, Result};
use crate::rng::{derive, SeedRng};

const EIGEN_TOL: f64 = 1e-20;

#[derive(Debug, Clone)]
pub struct BootCovariance {
    pub sigma: DMatrix<f64>,
    pub sqrt: Option<DMatrix<f64>>,
    pub clipped: usize,
}

impl BootCovariance {
    pub fn from_sigma(sigma: DMatrix<f64>) -> Self {
        Self { sigma, sqrt: None, clipped: 0 }
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    /// Computes and stores the PSD square root.
    pub fn factor(mut self) -> Result<Self> {
        let (root, clipped) = psd_sqrt(&self.sigma)?;
        self.sqrt = Some(root);
        self.clipped = clipped;
        Ok(self)
    }
}

/// Sample covariance of the channel vectors; channel `b1 + B·b2` indexes
/// rows and columns.
pub fn covariance_matrix(psi: &PsiTensor) -> BootCovariance {
    let n = psi.n();
    let c = psi.channels();
    let mut centered = DMatrix::<f64>::zeros(n, c);
    for ch in 0..c {
        let vals = psi.channel(ch);
        let mean = vals.iter().sum::<f64>() / n as f64;
        for (i, v) in vals.iter().enumerate() {
            centered[(i, ch)] = v - mean;
        }
    }
    let mut sigma = centered.tr_mul(&centered) / (n as f64 - 1.0);
    // Exact symmetry.
    for i in 0..c {
        for j in 0..i {
            let v = 0.5 * (sigma[(i, j)] + sigma[(j, i)]);
            sigma[(i, j)] = v;
            sigma[(j, i)] = v;
        }
    }
    BootCovariance::from_sigma(sigma)
}

/// `V·diag(√max(λ, 0))·Vᵀ` and the number of negative eigenvalues clipped.
pub fn psd_sqrt(sigma: &DMatrix<f64>) -> Result<(DMatrix<f64>, usize)> {
    if !sigma.is_square() {
        return Err(Error::Shape("matrix must be square".into()));
    }
    if sigma.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("matrix has non-finite entries".into()));
    }
    let max_iter = 100 * sigma.nrows().max(10);
    // A machine-epsilon deflation test can stop with residuals near 1e-5 on
    // large matrices; try a tighter one first.
    let eig = SymmetricEigen::try_new(sigma.clone(), EIGEN_TOL, max_iter)
        .or_else(|| SymmetricEigen::try_new(sigma.clone(), f64::EPSILON, max_iter))
        .ok_or_else(|| Error::Numeric("symmetric eigensolver did not converge".into()))?;
    let mut clipped = 0;
    let roots: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| {
            if l < 0.0 {
                clipped += 1;
                0.0
            } else {
                l.sqrt()
            }
        })
        .collect();
    let mut scaled = eig.eigenvectors.clone();
    for (j, r) in roots.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*r);
    }
    let mut root = &scaled * eig.eigenvectors.transpose();
    let dim = root.nrows();
    for i in 0..dim {
        for j in 0..i {
            let v = 0.5 * (root[(i, j)] + root[(j, i)]);
            root[(i, j)] = v;
            root[(j, i)] = v;
        }
    }
    Ok((root, clipped))
}

/// Maxima `‖Σ̂^{1/2} ξ_j‖_∞` for `J` draws. Draw `j` uses its own stream
/// derived from one value taken from `rng`, so results do not depend on
/// thread scheduling.
pub fn bootstrap_maxima(root: &DMatrix<f64>, draws: usize, rng: &mut SeedRng) -> Vec<f64> {
    let base = rng.next_u64();
    let dim = root.ncols();
    let cols: Vec<f64> = (0..draws)
        .into_par_iter()
        .flat_map_iter(|j| {
            let mut r = derive(base, &[j as u64]);
            (0..dim).map(move |_| StandardNormal.sample(&mut r)).collect::<Vec<f64>>()
        })
        .collect();
    let xi = DMatrix::from_column_slice(dim, draws, &cols);
    let prod = root * xi;
    prod.column_iter().map(|c| c.iter().fold(0.0f64, |m, v| m.max(v.abs()))).collect()
}

/// Fraction of bootstrap maxima at least as large as `t`.
pub fn pvalue_from_maxima(t: f64, maxima: &[f64]) -> f64 {
    maxima.iter().filter(|&&m| m >= t).count() as f64 / maxima.len() as f64
}

pub fn bootstrap_pvalue(t: f64, cov: &BootCovariance, draws: usize, rng: &mut SeedRng) -> Result<f64> {
    if draws == 0 {
        return Err(Error::InvalidConfig("J must be >= 1".into()));
    }
    let owned;
    let root = match &cov.sqrt {
        Some(r) => r,
        None => {
            owned = psd_sqrt(&cov.sigma)?.0;
            &owned
        }
    };
    Ok(pvalue_from_maxima(t, &bootstrap_maxima(root, draws, rng)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn frob(m: &DMatrix<f64>) -> f64 {
        m.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn identity_root_is_identity() {
        let (r, clipped) = psd_sqrt(&DMatrix::identity(4, 4)).unwrap();
        assert!(frob(&(r - DMatrix::<f64>::identity(4, 4))) < 1e-12);
        assert_eq!(clipped, 0);
    }

    #[test]
    fn diagonal_root() {
        let (r, _) = psd_sqrt(&DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 9.0]))).unwrap();
        assert!((r[(0, 0)] - 2.0).abs() < 1e-12 && (r[(1, 1)] - 3.0).abs() < 1e-12);
        assert!(r[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn tiny_negative_eigenvalue_clipped() {
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, -1e-12, 2.0]));
        let (r, clipped) = psd_sqrt(&s).unwrap();
        assert_eq!(clipped, 1);
        let eig = SymmetricEigen::new(r.clone());
        assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-14));
        assert!(frob(&(&r * &r - &s)) < 1e-10);
    }

    #[test]
    fn non_finite_matrix_rejected() {
        let s = DMatrix::from_element(2, 2, f64::NAN);
        assert!(matches!(psd_sqrt(&s), Err(Error::Numeric(_))));
    }

    #[test]
    fn extreme_statistics() {
        let cov = BootCovariance::from_sigma(DMatrix::identity(3, 3)).factor().unwrap();
        assert_eq!(bootstrap_pvalue(0.0, &cov, 200, &mut seeded(1)).unwrap(), 1.0);
        assert_eq!(bootstrap_pvalue(1e10, &cov, 200, &mut seeded(1)).unwrap(), 0.0);
    }

    #[test]
    fn pvalue_monotone_in_statistic() {
        let maxima = bootstrap_maxima(&DMatrix::identity(5, 5), 500, &mut seeded(3));
        let mut prev = 1.0;
        for t in [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0] {
            let p = pvalue_from_maxima(t, &maxima);
            assert!(p <= prev);
            prev = p;
        }
    }

    #[test]
    fn bootstrap_is_deterministic() {
        let cov = BootCovariance::from_sigma(DMatrix::identity(6, 6)).factor().unwrap();
        let a = bootstrap_pvalue(2.0, &cov, 300, &mut seeded(9)).unwrap();
        let b = bootstrap_pvalue(2.0, &cov, 300, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
    }
}
