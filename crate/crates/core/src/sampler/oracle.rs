//! Samplers built from a known (or least-squares fitted) model.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use statrs::function::erf::erf;

use super::{ConditionalSampler, Fitted, SamplerFactory, TrainingSet};
use crate::error::{invalid, shape, Error, Result};
use crate::featbank::Side;
use crate::rng::SeedRng;

/// `W | Z = z ~ N(intercept + zᵀβ, σ²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleLinearGaussian {
    pub beta: Vec<f64>,
    pub sigma: f64,
    pub intercept: f64,
    /// Whether `beta` came from a least-squares fit.
    pub fitted: bool,
}

impl OracleLinearGaussian {
    pub fn new(beta: Vec<f64>, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(invalid(format!("sigma must be positive, got {sigma}")));
        }
        if beta.is_empty() || beta.iter().any(|b| !b.is_finite()) {
            return Err(invalid("beta must be nonempty and finite"));
        }
        Ok(Self { beta, sigma, intercept: 0.0, fitted: false })
    }

    pub fn with_intercept(mut self, intercept: f64) -> Self {
        self.intercept = intercept;
        self
    }

    pub fn mean(&self, z: &[f64]) -> f64 {
        self.intercept + self.beta.iter().zip(z).map(|(b, v)| b * v).sum::<f64>()
    }
}

impl ConditionalSampler for OracleLinearGaussian {
    fn z_dim(&self) -> usize {
        self.beta.len()
    }

    fn fill(&self, z: &[f64], out: &mut [f64], rng: &mut SeedRng) {
        let mu = self.mean(z);
        for o in out {
            let e: f64 = StandardNormal.sample(rng);
            *o = mu + self.sigma * e;
        }
    }
}

/// Least-squares fit of `w ≈ zᵀβ` (no intercept). With `known_sigma` the
/// sampler uses it; otherwise the residual standard error `√(RSS/(n−d))`.
pub fn fit_oracle_ols(z: &[f64], w: &[f64], d_z: usize, known_sigma: Option<f64>) -> Result<OracleLinearGaussian> {
    let n = w.len();
    if d_z == 0 || z.len() != n * d_z {
        return Err(shape("design matrix does not match response length"));
    }
    if n <= d_z {
        return Err(Error::Numeric(format!("need n > d_Z for least squares, got n={n}, d_Z={d_z}")));
    }
    let design = DMatrix::from_row_slice(n, d_z, z);
    let response = DVector::from_column_slice(w);
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-10 * smax) {
        return Err(Error::Numeric("design matrix is rank deficient".into()));
    }
    let beta = svd
        .solve(&response, 0.0)
        .map_err(|e| Error::Numeric(format!("least squares solve failed: {e}")))?;
    let sigma = match known_sigma {
        Some(s) => s,
        None => {
            let resid = &response - &design * &beta;
            (resid.norm_squared() / (n - d_z) as f64).sqrt().max(f64::MIN_POSITIVE)
        }
    };
    let mut out = OracleLinearGaussian::new(beta.iter().copied().collect(), sigma)?;
    out.fitted = true;
    Ok(out)
}

/// Total variation distance between `N(mu1, σ²)` and `N(mu2, σ²)`.
pub fn gaussian_tv(mu1: f64, mu2: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(invalid(format!("sigma must be positive, got {sigma}")));
    }
    Ok(erf((mu1 - mu2).abs() / (2.0 * sigma * std::f64::consts::SQRT_2)))
}

type DrawFn = dyn Fn(&[f64], &mut SeedRng) -> f64 + Send + Sync;

/// Sampler defined by a closure drawing one value given `z`.
#[derive(Clone)]
pub struct FnSampler {
    d_z: usize,
    draw: Arc<DrawFn>,
}

impl FnSampler {
    pub fn new(d_z: usize, draw: impl Fn(&[f64], &mut SeedRng) -> f64 + Send + Sync + 'static) -> Self {
        Self { d_z, draw: Arc::new(draw) }
    }
}

impl std::fmt::Debug for FnSampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FnSampler").field("d_z", &self.d_z).finish_non_exhaustive()
    }
}

impl ConditionalSampler for FnSampler {
    fn z_dim(&self) -> usize {
        self.d_z
    }

    fn fill(&self, z: &[f64], out: &mut [f64], rng: &mut SeedRng) {
        for o in out {
            *o = (self.draw)(z, rng);
        }
    }
}

/// Hands out fixed samplers regardless of the training data.
#[derive(Clone)]
pub struct OracleFactory {
    pub x: Arc<dyn ConditionalSampler>,
    pub y: Arc<dyn ConditionalSampler>,
}

impl OracleFactory {
    pub fn new(x: impl ConditionalSampler + 'static, y: impl ConditionalSampler + 'static) -> Self {
        Self { x: Arc::new(x), y: Arc::new(y) }
    }
}

impl SamplerFactory for OracleFactory {
    fn fit(&self, side: Side, train: &TrainingSet, _rng: &mut SeedRng) -> Result<Fitted> {
        let sampler = match side {
            Side::X => Arc::clone(&self.x),
            Side::Y => Arc::clone(&self.y),
        };
        if sampler.z_dim() != train.d_z {
            return Err(shape(format!("oracle expects d_Z={}, data has {}", sampler.z_dim(), train.d_z)));
        }
        Ok(Fitted { sampler, losses: Vec::new() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn oracle_moments() {
        let s = OracleLinearGaussian::new(vec![0.0, 0.0], 1.0).unwrap();
        let draws = s.sample(&[3.0, -1.0], 100_000, &mut seeded(4)).unwrap();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((0.97..=1.03).contains(&var), "var {var}");
    }

    #[test]
    fn sample_is_deterministic_and_checks_dim() {
        let s = OracleLinearGaussian::new(vec![1.0], 0.5).unwrap();
        let a = s.sample(&[0.2], 1, &mut seeded(1)).unwrap();
        let b = s.sample(&[0.2], 1, &mut seeded(1)).unwrap();
        assert_eq!(a, b);
        assert!(s.sample(&[0.2, 0.1], 1, &mut seeded(1)).is_err());
    }

    #[test]
    fn ols_interpolates_noiseless_data() {
        let beta = [1.5, -2.0, 0.25];
        let mut rng = seeded(3);
        let z: Vec<f64> = (0..60).map(|_| StandardNormal.sample(&mut rng)).collect();
        let w: Vec<f64> = z.chunks(3).map(|r| r.iter().zip(&beta).map(|(a, b)| a * b).sum()).collect();
        let fit = fit_oracle_ols(&z, &w, 3, Some(1.0)).unwrap();
        for (a, b) in fit.beta.iter().zip(&beta) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(fit.fitted);
    }

    #[test]
    fn ols_rejects_duplicate_column() {
        let z = vec![1.0, 1.0, 2.0, 2.0, -1.0, -1.0, 0.5, 0.5];
        let w = vec![1.0, 2.0, 3.0, 4.0];
        assert!(matches!(fit_oracle_ols(&z, &w, 2, None), Err(Error::Numeric(_))));
    }

    #[test]
    fn tv_closed_forms() {
        assert_eq!(gaussian_tv(1.0, 1.0, 2.0).unwrap(), 0.0);
        assert!((gaussian_tv(0.0, 2.0, 1.0).unwrap() - 0.682_689_492_137).abs() < 1e-9);
        let mut prev = 0.0;
        for gap in [0.1, 1.0, 5.0, 20.0, 100.0] {
            let tv = gaussian_tv(0.0, gap, 1.0).unwrap();
            assert!(tv >= prev && tv <= 1.0);
            prev = tv;
        }
        assert!(prev > 1.0 - 1e-12);
        assert!(gaussian_tv(0.0, 1.0, 0.0).is_err());
    }
}
