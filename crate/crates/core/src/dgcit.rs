//! The cross-fitted double-generator max-type statistic.
//!
//! For random features `h_{1,b}` on X and `h_{2,b}` on Y, the residual of
//! observation `i` is `h(value_i) − M⁻¹ Σ_m h(pseudo_{i,m})`, with pseudo
//! samples drawn by a sampler trained on the folds not containing `i`. Each
//! feature pair `(b1, b2)` is a channel whose per-observation product of
//! residuals is standardized by its sample standard deviation, giving
//! `ψ_{b1,b2,i}`. The statistic is `T = max |n^{-1/2} Σ_i ψ_{b1,b2,i}|`.

use rayon::prelude::*;

use crate::bootstrap::{bootstrap_pvalue, covariance_matrix};
use crate::data::{make_folds, Dataset, Diagnostics, FoldDiagnostics, FoldPartition, TestConfig, TestReport};
use crate::error::{shape, Error, Result};
use crate::featbank::{eval_bank, eval_feature, sample_bank, FeatureBank, Side};
use crate::rng::derive;
use crate::sampler::{ConditionalSampler, Fitted, SamplerFactory, TrainingSet};

/// Standardizers below this are replaced by it.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// Standardized residual products, channel-major.
///
/// Channel `c = b1 + B·b2` pairs X-feature `b1` with Y-feature `b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiTensor {
    b: usize,
    n: usize,
    psi: Vec<f64>,
    sigma_hat: Vec<f64>,
    sums: Vec<f64>,
    floored: usize,
}

impl PsiTensor {
    /// Wraps already standardized values (`psi[c·n + i]`); standardizers are
    /// set to 1.
    pub fn from_standardized(b: usize, n: usize, psi: Vec<f64>) -> Result<Self> {
        if psi.len() != b * b * n {
            return Err(shape(format!("expected {} psi values, got {}", b * b * n, psi.len())));
        }
        let root_n = (n as f64).sqrt();
        let sums = psi.chunks_exact(n).map(|ch| ch.iter().sum::<f64>() / root_n).collect();
        Ok(Self { b, n, psi, sigma_hat: vec![1.0; b * b], sums, floored: 0 })
    }

    pub fn b(&self) -> usize {
        self.b
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn channels(&self) -> usize {
        self.b * self.b
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.psi[c * self.n..(c + 1) * self.n]
    }

    pub fn get(&self, b1: usize, b2: usize, i: usize) -> f64 {
        self.psi[(b1 + self.b * b2) * self.n + i]
    }

    pub fn sigma_hat(&self, b1: usize, b2: usize) -> f64 {
        self.sigma_hat[b1 + self.b * b2]
    }

    /// `n^{-1/2} Σ_i ψ` per channel.
    pub fn channel_sums(&self) -> &[f64] {
        &self.sums
    }

    /// Channels whose standardizer was floored.
    pub fn floored(&self) -> usize {
        self.floored
    }
}

/// `B × n` residuals; `pseudo` is row-major `n × m` (row `i` holds the
/// draws for observation `i`).
pub fn residual_matrix(bank: &FeatureBank, values: &[f64], pseudo: &[f64], m: usize) -> Result<Vec<Vec<f64>>> {
    let n = values.len();
    if m == 0 || pseudo.len() != n * m {
        return Err(shape(format!("pseudo block has {} values, expected {n} x {m}", pseudo.len())));
    }
    let observed = eval_bank(bank, values);
    Ok(bank
        .thetas()
        .par_iter()
        .zip(observed)
        .map(|(theta, obs)| {
            obs.iter()
                .zip(pseudo.chunks_exact(m))
                .map(|(h, draws)| h - draws.iter().map(|&v| eval_feature(theta, v)).sum::<f64>() / m as f64)
                .collect()
        })
        .collect())
}

pub fn build_psi(rx: &[Vec<f64>], ry: &[Vec<f64>]) -> Result<PsiTensor> {
    let b = rx.len();
    if b == 0 || ry.len() != b {
        return Err(shape("both sides need the same positive number of features"));
    }
    let n = rx[0].len();
    if n < 2 {
        return Err(shape("need at least two observations"));
    }
    if rx.iter().chain(ry).any(|r| r.len() != n) {
        return Err(shape("residual rows have different lengths"));
    }
    let root_n = (n as f64).sqrt();
    let per_channel: Vec<(Vec<f64>, f64, f64, bool)> = (0..b * b)
        .into_par_iter()
        .map(|c| {
            let (b1, b2) = (c % b, c / b);
            let q: Vec<f64> = rx[b1].iter().zip(&ry[b2]).map(|(a, v)| a * v).collect();
            let mean = q.iter().sum::<f64>() / n as f64;
            let sd = (q.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt();
            let floored = !(sd >= SIGMA_FLOOR);
            let sigma = if floored { SIGMA_FLOOR } else { sd };
            let psi: Vec<f64> = q.iter().map(|v| v / sigma).collect();
            let sum = psi.iter().sum::<f64>() / root_n;
            (psi, sigma, sum, floored)
        })
        .collect();
    let mut out = PsiTensor {
        b,
        n,
        psi: Vec::with_capacity(b * b * n),
        sigma_hat: Vec::with_capacity(b * b),
        sums: Vec::with_capacity(b * b),
        floored: 0,
    };
    for (psi, sigma, sum, floored) in per_channel {
        out.psi.extend(psi);
        out.sigma_hat.push(sigma);
        out.sums.push(sum);
        out.floored += usize::from(floored);
    }
    if out.psi.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite standardized product".into()));
    }
    Ok(out)
}

pub fn test_statistic(psi: &PsiTensor) -> f64 {
    psi.sums.iter().fold(0.0f64, |m, s| m.max(s.abs()))
}

/// Which rows one fold's samplers were trained on and evaluated at.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossFitRecord {
    pub fold: usize,
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct DgcitOutput {
    pub report: TestReport,
    pub psi: PsiTensor,
    pub folds: FoldPartition,
    pub cross_fit: Vec<CrossFitRecord>,
}

// Stream tags for derive().
const STREAM_FOLDS: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_PSEUDO: u64 = 3;
const STREAM_BANK: u64 = 4;
const STREAM_BOOT: u64 = 5;

fn side_tag(side: Side) -> u64 {
    match side {
        Side::X => 0,
        Side::Y => 1,
    }
}

fn standardizer(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    (mean, if sd > 0.0 { sd } else { 1.0 })
}

/// Runs the full test: folds, per-fold sampler training, pseudo sampling,
/// feature banks, ψ assembly over all `n`, and the bootstrap p-value.
pub fn run_dgcit(data: &Dataset, cfg: &TestConfig, factory: &dyn SamplerFactory) -> Result<DgcitOutput> {
    cfg.validate()?;
    let n = data.n();
    let d_z = data.d_z();
    let seed = cfg.seed;
    let folds = make_folds(n, cfg.folds, &mut derive(seed, &[STREAM_FOLDS]))?;

    // Train X and Y samplers for every fold on its complement.
    let jobs: Vec<(usize, Side)> = (0..cfg.folds).flat_map(|l| [(l, Side::X), (l, Side::Y)]).collect();
    let fitted: Vec<Fitted> = jobs
        .par_iter()
        .map(|&(l, side)| {
            let idx = folds.complement(l);
            let w = match side {
                Side::X => data.x(),
                Side::Y => data.y(),
            };
            let train = TrainingSet {
                z: idx.iter().flat_map(|&i| data.z_row(i).iter().copied()).collect(),
                w: idx.iter().map(|&i| w[i]).collect(),
                indices: idx,
                d_z,
            };
            factory.fit(side, &train, &mut derive(seed, &[STREAM_TRAIN, l as u64, side_tag(side)]))
        })
        .collect::<Result<_>>()?;

    // Pseudo samples for each observation from its own fold's samplers.
    let m = cfg.m_pseudo;
    let fold_of = folds.assignments();
    let draw = |side: Side| -> Result<Vec<f64>> {
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let l = fold_of[i];
                let sampler: &dyn ConditionalSampler = &*fitted[2 * l + side_tag(side) as usize].sampler;
                let mut rng = derive(seed, &[STREAM_PSEUDO, side_tag(side), i as u64]);
                sampler.sample(data.z_row(i), m, &mut rng)
            })
            .collect::<Result<_>>()?;
        Ok(rows.concat())
    };
    let mut pseudo_x = draw(Side::X)?;
    let mut pseudo_y = draw(Side::Y)?;

    let bank_x = sample_bank(cfg.b_funcs, cfg.d1, Side::X, &mut derive(seed, &[STREAM_BANK, 0]))?;
    let bank_y = sample_bank(cfg.b_funcs, cfg.d2, Side::Y, &mut derive(seed, &[STREAM_BANK, 1]))?;

    let mut x = data.x().to_vec();
    let mut y = data.y().to_vec();
    if cfg.standardize {
        for (obs, pseudo) in [(&mut x, &mut pseudo_x), (&mut y, &mut pseudo_y)] {
            let (mean, sd) = standardizer(obs);
            for v in obs.iter_mut().chain(pseudo.iter_mut()) {
                *v = (*v - mean) / sd;
            }
        }
    }
    let rx = residual_matrix(&bank_x, &x, &pseudo_x, m)?;
    let ry = residual_matrix(&bank_y, &y, &pseudo_y, m)?;
    let psi = build_psi(&rx, &ry)?;
    let statistic = test_statistic(&psi);

    let cov = covariance_matrix(&psi).factor()?;
    let p_value = bootstrap_pvalue(statistic, &cov, cfg.boot, &mut derive(seed, &[STREAM_BOOT]))?;

    let mut diagnostics = Diagnostics {
        folds: Vec::with_capacity(cfg.folds),
        sigma_floor_count: psi.floored(),
        clipped_eigenvalues: cov.clipped,
    };
    let mut cross_fit = Vec::with_capacity(cfg.folds);
    for l in 0..cfg.folds {
        let eval = folds.fold(l);
        let train = folds.complement(l);
        diagnostics.folds.push(FoldDiagnostics {
            fold: l,
            train_size: train.len(),
            eval_size: eval.len(),
            x_losses: fitted[2 * l].losses.clone(),
            y_losses: fitted[2 * l + 1].losses.clone(),
        });
        cross_fit.push(CrossFitRecord { fold: l, train, eval });
    }
    let report = TestReport::new(statistic, p_value, n, d_z, cfg, diagnostics);
    Ok(DgcitOutput { report, psi, folds, cross_fit })
}

/// Convenience wrapper when only the report is needed.
pub fn dgcit_pvalue(data: &Dataset, cfg: &TestConfig, factory: &dyn SamplerFactory) -> Result<f64> {
    Ok(run_dgcit(data, cfg, factory)?.report.p_value)
}
