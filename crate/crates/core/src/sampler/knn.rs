//! Nearest-neighbour conditional resampling.
//!
//! A pseudo sample for `z` is the response of a uniformly chosen row among
//! the `k` training rows closest to `z` in Euclidean distance.

use std::sync::Arc;

use rand::Rng;

use super::{ConditionalSampler, Fitted, SamplerFactory, TrainingSet};
use crate::error::{invalid, Result};
use crate::featbank::Side;
use crate::rng::SeedRng;

#[derive(Debug, Clone, PartialEq)]
pub struct KnnSampler {
    z: Vec<f64>,
    w: Vec<f64>,
    d_z: usize,
    k: usize,
}

impl KnnSampler {
    pub fn new(train: &TrainingSet, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(invalid("k must be >= 1"));
        }
        if train.is_empty() {
            return Err(invalid("nearest-neighbour sampler needs training rows"));
        }
        Ok(Self { z: train.z.clone(), w: train.w.clone(), d_z: train.d_z, k: k.min(train.len()) })
    }

    /// Indices of the `k` nearest training rows; ties broken by index.
    pub fn neighbours(&self, z: &[f64]) -> Vec<usize> {
        let mut d: Vec<(f64, usize)> = self
            .z
            .chunks_exact(self.d_z)
            .enumerate()
            .map(|(i, row)| (row.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum(), i))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if self.k < d.len() {
            d.select_nth_unstable_by(self.k - 1, cmp);
            d.truncate(self.k);
        }
        d.sort_unstable_by(cmp);
        d.into_iter().map(|(_, i)| i).collect()
    }

    /// k-NN regression estimate of `E[W | Z = z]`.
    pub fn conditional_mean(&self, z: &[f64]) -> f64 {
        let nb = self.neighbours(z);
        nb.iter().map(|&i| self.w[i]).sum::<f64>() / nb.len() as f64
    }
}

impl ConditionalSampler for KnnSampler {
    fn z_dim(&self) -> usize {
        self.d_z
    }

    fn fill(&self, z: &[f64], out: &mut [f64], rng: &mut SeedRng) {
        let nb = self.neighbours(z);
        for o in out {
            *o = self.w[nb[rng.gen_range(0..nb.len())]];
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KnnFactory {
    pub k: usize,
}

impl SamplerFactory for KnnFactory {
    fn fit(&self, _side: Side, train: &TrainingSet, _rng: &mut SeedRng) -> Result<Fitted> {
        Ok(Fitted { sampler: Arc::new(KnnSampler::new(train, self.k)?), losses: Vec::new() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn toy() -> TrainingSet {
        TrainingSet {
            indices: (0..5).collect(),
            z: vec![0.0, 1.0, 2.0, 3.0, 10.0],
            w: vec![5.0, 6.0, 7.0, 8.0, 9.0],
            d_z: 1,
        }
    }

    #[test]
    fn k1_on_exact_match_returns_that_row() {
        let s = KnnSampler::new(&toy(), 1).unwrap();
        let draws = s.sample(&[2.0], 50, &mut seeded(0)).unwrap();
        assert!(draws.iter().all(|&d| d == 7.0));
    }

    #[test]
    fn draws_come_from_neighbourhood() {
        let s = KnnSampler::new(&toy(), 3).unwrap();
        let draws = s.sample(&[1.1], 200, &mut seeded(1)).unwrap();
        assert!(draws.iter().all(|d| [5.0, 6.0, 7.0].contains(d)));
        for v in [5.0, 6.0, 7.0] {
            assert!(draws.contains(&v));
        }
        assert!((s.conditional_mean(&[1.1]) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn k_larger_than_training_set_uses_all_rows() {
        let s = KnnSampler::new(&toy(), 25).unwrap();
        assert_eq!(s.neighbours(&[0.0]).len(), 5);
        assert!((s.conditional_mean(&[0.0]) - 7.0).abs() < 1e-12);
    }
}
