//! Conditional samplers: draw pseudo samples from an approximation of
//! `W | Z` for `W` either the X or the Y variable.
//!
//! [`SamplerFactory`] is how the test obtains samplers per fold: it receives
//! the training rows of one fold complement and returns a fitted sampler.

pub mod gan;
pub mod knn;
pub mod oracle;
pub mod sinkhorn;

use std::sync::Arc;

use crate::error::{shape, Result};
use crate::featbank::Side;
use crate::rng::SeedRng;

pub use gan::{train_sinkhorn_sampler, SinkhornConfig, SinkhornFactory, SinkhornSampler};
pub use knn::{KnnFactory, KnnSampler};
pub use oracle::{fit_oracle_ols, gaussian_tv, FnSampler, OracleFactory, OracleLinearGaussian};
pub use sinkhorn::sinkhorn_divergence;

pub trait ConditionalSampler: Send + Sync {
    /// Dimension of the conditioning vector.
    fn z_dim(&self) -> usize;

    /// Writes `out.len()` conditionally i.i.d. draws given `z`. `z` has
    /// length [`Self::z_dim`].
    fn fill(&self, z: &[f64], out: &mut [f64], rng: &mut SeedRng);

    fn sample(&self, z: &[f64], m: usize, rng: &mut SeedRng) -> Result<Vec<f64>> {
        if z.len() != self.z_dim() {
            return Err(shape(format!("conditioning vector has length {}, sampler expects {}", z.len(), self.z_dim())));
        }
        let mut out = vec![0.0; m];
        self.fill(z, &mut out, rng);
        Ok(out)
    }
}

/// Rows of one training split: `z` row-major `len × d_z`, responses `w`.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    /// Dataset indices of the rows, for cross-fitting bookkeeping.
    pub indices: Vec<usize>,
    pub z: Vec<f64>,
    pub w: Vec<f64>,
    pub d_z: usize,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn z_row(&self, i: usize) -> &[f64] {
        &self.z[i * self.d_z..(i + 1) * self.d_z]
    }
}

pub struct Fitted {
    pub sampler: Arc<dyn ConditionalSampler>,
    /// Per-epoch training loss, empty for untrained samplers.
    pub losses: Vec<f64>,
}

pub trait SamplerFactory: Sync {
    fn fit(&self, side: Side, train: &TrainingSet, rng: &mut SeedRng) -> Result<Fitted>;
}
