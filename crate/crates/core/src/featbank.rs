//! Random bounded feature banks.
//!
//! A feature with parameter `θ ∈ R^d` is
//! `h_θ(v) = logistic(θ₁·v + θ₂ + Σ_{k=3..d} θ_k·sin((k−2)·v))`,
//! so every value lies in `(0, 1)` and `h` is Lipschitz in `θ` with constant
//! at most `¼·√(v² + d − 1)`. Parameters are drawn i.i.d. `N(0, 2/d)` per
//! coordinate.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::rng::SeedRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    X,
    Y,
}

/// `B` frozen feature parameter vectors for one side of the test.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    thetas: Vec<Vec<f64>>,
    side: Side,
}

impl FeatureBank {
    pub fn from_thetas(thetas: Vec<Vec<f64>>, side: Side) -> Result<Self> {
        if thetas.is_empty() {
            return Err(invalid("feature bank needs at least one function"));
        }
        let d = thetas[0].len();
        if d < 2 || thetas.iter().any(|t| t.len() != d) {
            return Err(invalid("feature parameters must share a dimension >= 2"));
        }
        if thetas.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("feature parameters must be finite"));
        }
        Ok(Self { thetas, side })
    }

    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.thetas[0].len()
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn thetas(&self) -> &[Vec<f64>] {
        &self.thetas
    }
}

pub fn sample_bank(b: usize, d: usize, side: Side, rng: &mut SeedRng) -> Result<FeatureBank> {
    if b < 1 {
        return Err(invalid("B must be >= 1"));
    }
    if d < 2 {
        return Err(invalid(format!("feature dimension must be >= 2, got {d}")));
    }
    let normal = Normal::new(0.0, (2.0 / d as f64).sqrt()).expect("positive sd");
    let thetas = (0..b).map(|_| (0..d).map(|_| normal.sample(rng)).collect()).collect();
    FeatureBank::from_thetas(thetas, side)
}

pub fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn eval_feature(theta: &[f64], v: f64) -> f64 {
    let mut arg = theta[0] * v + theta[1];
    for (k, &t) in theta.iter().enumerate().skip(2) {
        arg += t * ((k - 1) as f64 * v).sin();
    }
    logistic(arg)
}

/// `B × n` matrix (one row per feature) of feature values.
pub fn eval_bank(bank: &FeatureBank, values: &[f64]) -> Vec<Vec<f64>> {
    bank.thetas
        .par_iter()
        .map(|theta| values.iter().map(|&v| eval_feature(theta, v)).collect())
        .collect()
}
