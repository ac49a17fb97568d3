//! Regression-style baselines: the generalized covariance measure (GCM)
//! test and a conditional randomization test (GCIT) driven by a sampler for
//! `X | Z`.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::Dataset;
use crate::error::{shape, Error, Result};
use crate::rng::SeedRng;
use crate::sampler::knn::KnnSampler;
use crate::sampler::{ConditionalSampler, TrainingSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GcmResult {
    /// Mean of residual products.
    pub statistic: f64,
    /// Standard error of the mean product.
    pub stderr: f64,
    /// `statistic / stderr`.
    pub standardized: f64,
    pub p_value: f64,
}

fn check_pair(x_res: &[f64], y_res: &[f64]) -> Result<()> {
    if x_res.len() != y_res.len() {
        return Err(shape(format!("residual lengths differ: {} vs {}", x_res.len(), y_res.len())));
    }
    if x_res.len() < 2 {
        return Err(shape("need at least two residual pairs"));
    }
    Ok(())
}

pub fn gcm(x_res: &[f64], y_res: &[f64]) -> Result<f64> {
    check_pair(x_res, y_res)?;
    Ok(x_res.iter().zip(y_res).map(|(a, b)| a * b).sum::<f64>() / x_res.len() as f64)
}

/// Two-sided normal p-value for a standardized statistic.
pub fn two_sided_normal_p(z: f64) -> f64 {
    2.0 * Normal::standard().sf(z.abs())
}

pub fn gcm_test(x_res: &[f64], y_res: &[f64]) -> Result<GcmResult> {
    let statistic = gcm(x_res, y_res)?;
    let n = x_res.len() as f64;
    let var = x_res.iter().zip(y_res).map(|(a, b)| (a * b - statistic).powi(2)).sum::<f64>() / (n - 1.0);
    if !(var > 0.0) {
        return Err(Error::Degenerate("residual products have zero variance".into()));
    }
    let stderr = var.sqrt() / n.sqrt();
    let standardized = statistic / stderr;
    Ok(GcmResult { statistic, stderr, standardized, p_value: two_sided_normal_p(standardized) })
}

/// `[1 + #{m : ρ⁽ᵐ⁾ ≥ ρ}] / (1 + M)`.
pub fn crt_pvalue(rho_obs: f64, rho_samples: &[f64]) -> f64 {
    let hits = rho_samples.iter().filter(|&&r| r >= rho_obs).count();
    (1 + hits) as f64 / (1 + rho_samples.len()) as f64
}

/// Conditional randomization test with statistic `|GCM|`.
///
/// `Ê(X|Z)` is the mean of `m` pseudo draws per row, `Ê(Y|Z)` a k-NN
/// regression on the full data. The observed statistic is compared against
/// `m` datasets whose X column is replaced by fresh pseudo draws.
pub fn run_gcit_baseline(
    data: &Dataset,
    sampler_x: &dyn ConditionalSampler,
    m: usize,
    knn_k: usize,
    rng: &mut SeedRng,
) -> Result<f64> {
    if m == 0 {
        return Ok(1.0);
    }
    if sampler_x.z_dim() != data.d_z() {
        return Err(shape("sampler dimension does not match the data"));
    }
    let n = data.n();
    let train = TrainingSet { indices: (0..n).collect(), z: data.z().to_vec(), w: data.y().to_vec(), d_z: data.d_z() };
    let knn = KnnSampler::new(&train, knn_k)?;
    let y_res: Vec<f64> = (0..n).map(|i| data.y()[i] - knn.conditional_mean(data.z_row(i))).collect();

    // Row i: m draws for the mean estimate, then one draw per resampled dataset.
    let mut x_hat = vec![0.0; n];
    let mut resampled = vec![0.0; n * m];
    let mut buf = vec![0.0; 2 * m];
    for i in 0..n {
        sampler_x.fill(data.z_row(i), &mut buf, rng);
        x_hat[i] = buf[..m].iter().sum::<f64>() / m as f64;
        for k in 0..m {
            resampled[k * n + i] = buf[m + k];
        }
    }
    let stat = |x: &[f64]| -> Result<f64> {
        let x_res: Vec<f64> = x.iter().zip(&x_hat).map(|(a, b)| a - b).collect();
        Ok(gcm(&x_res, &y_res)?.abs())
    };
    let rho = stat(data.x())?;
    let samples: Vec<f64> = resampled.chunks_exact(n).map(stat).collect::<Result<_>>()?;
    Ok(crt_pvalue(rho, &samples))
}
