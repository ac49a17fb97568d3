//! Data generators for the simulation models, each paired with oracle
//! samplers for its true conditional laws.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::rng::{seeded, SeedRng};
use crate::sampler::{FnSampler, OracleFactory, OracleLinearGaussian};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZDist {
    Normal,
    /// Laplace with scale `1/√2` (unit variance).
    Laplace,
}

impl ZDist {
    pub fn draw(self, rng: &mut SeedRng) -> f64 {
        match self {
            Self::Normal => StandardNormal.sample(rng),
            Self::Laplace => {
                let u: f64 = rng.gen_range(-0.5..0.5);
                -std::f64::consts::FRAC_1_SQRT_2 * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
        }
    }
}

impl std::str::FromStr for ZDist {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Self::Normal),
            "laplace" => Ok(Self::Laplace),
            other => Err(invalid(format!("unknown z distribution `{other}`"))),
        }
    }
}

impl std::fmt::Display for ZDist {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Normal => "normal",
            Self::Laplace => "laplace",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostNonlinearConfig {
    pub n: usize,
    pub d_z: usize,
    /// Dependence strength; the null holds iff `b == 0`.
    pub b: f64,
    pub z_dist: ZDist,
    pub noise_sd: f64,
    pub seed: u64,
}

impl PostNonlinearConfig {
    pub fn new(n: usize, d_z: usize, b: f64, z_dist: ZDist, seed: u64) -> Self {
        Self { n, d_z, b, z_dist, noise_sd: 0.5, seed }
    }
}

/// `X = sin(a_fᵀZ + ε_f)`, `Y = cos(a_gᵀZ + b·X + ε_g)`.
#[derive(Debug, Clone)]
pub struct PostNonlinearSample {
    pub data: Dataset,
    pub null_holds: bool,
    pub a_f: Vec<f64>,
    pub a_g: Vec<f64>,
    pub b: f64,
    pub noise_sd: f64,
}

fn unit_direction(d: usize, rng: &mut SeedRng) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.gen::<f64>()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn gen_postnonlinear(cfg: &PostNonlinearConfig) -> Result<PostNonlinearSample> {
    if !(cfg.noise_sd > 0.0) || !(cfg.b >= 0.0) || cfg.d_z == 0 || cfg.n == 0 {
        return Err(invalid("post-nonlinear model needs n, d_Z >= 1, noise_sd > 0 and b >= 0"));
    }
    let mut rng = seeded(cfg.seed);
    let a_f = unit_direction(cfg.d_z, &mut rng);
    let a_g = unit_direction(cfg.d_z, &mut rng);
    let noise = Normal::new(0.0, cfg.noise_sd).expect("positive sd");
    let z: Vec<f64> = (0..cfg.n * cfg.d_z).map(|_| cfg.z_dist.draw(&mut rng)).collect();
    let mut x = Vec::with_capacity(cfg.n);
    let mut y = Vec::with_capacity(cfg.n);
    for row in z.chunks_exact(cfg.d_z) {
        let xi = (dot(&a_f, row) + noise.sample(&mut rng)).sin();
        let yi = (dot(&a_g, row) + cfg.b * xi + noise.sample(&mut rng)).cos();
        x.push(xi);
        y.push(yi);
    }
    Ok(PostNonlinearSample {
        data: Dataset::new(x, y, z, cfg.d_z)?,
        null_holds: cfg.b == 0.0,
        a_f,
        a_g,
        b: cfg.b,
        noise_sd: cfg.noise_sd,
    })
}

impl PostNonlinearSample {
    /// Samplers that draw from the true `X | Z` and `Y | Z` laws (the latter
    /// integrates over `X | Z` when `b > 0`).
    pub fn oracle(&self) -> OracleFactory {
        let d = self.a_f.len();
        let noise = Normal::new(0.0, self.noise_sd).expect("positive sd");
        let a_f = self.a_f.clone();
        let x = FnSampler::new(d, move |z, rng| (dot(&a_f, z) + noise.sample(rng)).sin());
        let (a_f, a_g, b) = (self.a_f.clone(), self.a_g.clone(), self.b);
        let y = FnSampler::new(d, move |z, rng| {
            let xi = (dot(&a_f, z) + noise.sample(rng)).sin();
            (dot(&a_g, z) + b * xi + noise.sample(rng)).cos()
        });
        OracleFactory::new(x, y)
    }
}

/// `X = X*·g(Y)` with `X*, Y ~ N(0, 1)` and `Z` standard normal, all
/// independent.
#[derive(Clone)]
pub struct Example2Model {
    pub g: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    /// Whether `g` is constant (the null then holds).
    pub constant_g: bool,
}

impl Example2Model {
    pub fn constant(c: f64) -> Self {
        Self { g: Arc::new(move |_| c), constant_g: true }
    }

    pub fn identity() -> Self {
        Self { g: Arc::new(|y| y), constant_g: false }
    }

    pub fn oracle(&self, d_z: usize) -> OracleFactory {
        let g = Arc::clone(&self.g);
        let x = FnSampler::new(d_z, move |_, rng| {
            let xs: f64 = StandardNormal.sample(rng);
            let y: f64 = StandardNormal.sample(rng);
            xs * g(y)
        });
        let y = FnSampler::new(d_z, |_, rng| StandardNormal.sample(rng));
        OracleFactory::new(x, y)
    }
}

pub fn gen_example2(n: usize, d_z: usize, model: &Example2Model, rng: &mut SeedRng) -> Result<Dataset> {
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n * d_z);
    for _ in 0..n {
        let xs: f64 = StandardNormal.sample(rng);
        let yi: f64 = StandardNormal.sample(rng);
        z.extend((0..d_z).map(|_| { let v: f64 = StandardNormal.sample(rng); v }));
        x.push(xs * (model.g)(yi));
        y.push(yi);
    }
    Dataset::new(x, y, z, d_z)
}

/// `X = Zᵀβ + ε`, `ε ~ N(0, σ²)`, and `Y ~ N(0, 1)` independent of both.
#[derive(Debug, Clone)]
pub struct LinearGaussianSample {
    pub data: Dataset,
    pub x_oracle: OracleLinearGaussian,
    pub y_oracle: OracleLinearGaussian,
}

impl LinearGaussianSample {
    /// The null always holds for this model.
    pub fn null_holds(&self) -> bool {
        true
    }

    pub fn oracle(&self) -> OracleFactory {
        OracleFactory::new(self.x_oracle.clone(), self.y_oracle.clone())
    }
}

pub fn gen_linear_gaussian(n: usize, d_z: usize, beta: &[f64], sigma: f64, rng: &mut SeedRng) -> Result<LinearGaussianSample> {
    if beta.len() != d_z {
        return Err(invalid("beta length must equal d_Z"));
    }
    let x_oracle = OracleLinearGaussian::new(beta.to_vec(), sigma)?;
    let y_oracle = OracleLinearGaussian::new(vec![0.0; d_z], 1.0)?;
    let z: Vec<f64> = (0..n * d_z).map(|_| StandardNormal.sample(rng)).collect();
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for row in z.chunks_exact(d_z) {
        let e: f64 = StandardNormal.sample(rng);
        x.push(dot(beta, row) + sigma * e);
        y.push(StandardNormal.sample(rng));
    }
    Ok(LinearGaussianSample { data: Dataset::new(x, y, z, d_z)?, x_oracle, y_oracle })
}
