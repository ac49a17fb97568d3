//! Replication harness: size/power sweeps over simulation cells and the
//! root-n total-variation table for OLS-fitted Gaussian samplers.
//!
//! Every replication owns a stream derived from `(master seed, cell id,
//! replication index)`, so results are independent of the worker count.
//! Sweep rows are appended per finished cell; cells already present in the
//! output file (same id and seed) are skipped on rerun.

use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GeneratorKind, TestConfig};
use crate::dgcit::run_dgcit;
use crate::error::{invalid, Error, Result};
use crate::featbank::Side;
use crate::rng::{derive, derive_seed};
use crate::sampler::{fit_oracle_ols, gaussian_tv, KnnFactory, OracleFactory, SamplerFactory, SinkhornFactory, TrainingSet};
use crate::stats::{gcm_test, run_gcit_baseline};
use crate::synthetic::{gen_example2, gen_postnonlinear, Example2Model, PostNonlinearConfig, ZDist};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dgcit,
    Gcit,
    Gcm,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dgcit" => Ok(Self::Dgcit),
            "gcit" => Ok(Self::Gcit),
            "gcm" => Ok(Self::Gcm),
            other => Err(invalid(format!("unknown method `{other}`"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Dgcit => "dgcit",
            Self::Gcit => "gcit",
            Self::Gcm => "gcm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Size,
    Power,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "size" => Ok(Self::Size),
            "power" => Ok(Self::Power),
            other => Err(invalid(format!("unknown mode `{other}`"))),
        }
    }
}

/// Data-generating model of one sweep cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Post-nonlinear noise model with dependence strength `b`.
    Pnl,
    /// `X = X*·g(Y)`: `g(y) = y` when `b > 0`, constant otherwise.
    Example2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub model: ModelKind,
    pub n: usize,
    pub d_z: usize,
    pub b: f64,
    pub z_dist: ZDist,
}

impl Cell {
    pub fn pnl(n: usize, d_z: usize, b: f64, z_dist: ZDist) -> Self {
        Self { model: ModelKind::Pnl, n, d_z, b, z_dist }
    }

    pub fn example2(n: usize, d_z: usize, dependent: bool) -> Self {
        Self { model: ModelKind::Example2, n, d_z, b: if dependent { 1.0 } else { 0.0 }, z_dist: ZDist::Normal }
    }

    pub fn id(&self) -> String {
        let model = match self.model {
            ModelKind::Pnl => "pnl",
            ModelKind::Example2 => "ex2",
        };
        format!("{model}-n{}-d{}-b{}-{}", self.n, self.d_z, self.b, self.z_dist)
    }

    pub fn null_holds(&self) -> bool {
        self.b == 0.0
    }
}

/// One simulated dataset with the oracle samplers of its model.
pub struct Simulated {
    pub data: Dataset,
    pub oracle: OracleFactory,
}

pub fn simulate(cell: &Cell, seed: u64) -> Result<Simulated> {
    match cell.model {
        ModelKind::Pnl => {
            let s = gen_postnonlinear(&PostNonlinearConfig::new(cell.n, cell.d_z, cell.b, cell.z_dist, seed))?;
            let oracle = s.oracle();
            Ok(Simulated { data: s.data, oracle })
        }
        ModelKind::Example2 => {
            let model = if cell.b > 0.0 { Example2Model::identity() } else { Example2Model::constant(1.0) };
            let data = gen_example2(cell.n, cell.d_z, &model, &mut derive(seed, &[0]))?;
            Ok(Simulated { data, oracle: model.oracle(cell.d_z) })
        }
    }
}

/// Factory for the configured generator kind; `oracle` is used for
/// [`GeneratorKind::Oracle`].
pub fn factory_for<'a>(cfg: &TestConfig, oracle: &'a OracleFactory) -> Box<dyn SamplerFactory + 'a> {
    match cfg.generator {
        GeneratorKind::Oracle => Box::new(oracle.clone()),
        GeneratorKind::Knn => Box::new(KnnFactory { k: cfg.knn_k }),
        GeneratorKind::Sinkhorn => Box::new(SinkhornFactory { cfg: cfg.sinkhorn.clone() }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub mode: Mode,
    pub grid: Vec<Cell>,
    pub reps: usize,
    pub levels: Vec<f64>,
    pub methods: Vec<Method>,
    /// Test configuration; its `generator` selects the samplers and its
    /// `seed` is the master seed.
    pub config: TestConfig,
    /// Resampled datasets for the randomization baseline.
    pub crt_draws: usize,
    pub workers: usize,
    pub out: PathBuf,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.reps < 1 {
            return Err(invalid("reps must be >= 1"));
        }
        if self.grid.is_empty() {
            return Err(invalid("sweep grid is empty"));
        }
        if self.methods.is_empty() {
            return Err(invalid("no methods selected"));
        }
        if self.levels.is_empty() || self.levels.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(invalid("levels must be nonempty and lie in (0, 1)"));
        }
        if self.workers < 1 {
            return Err(invalid("workers must be >= 1"));
        }
        self.config.validate()
    }

    /// Grid with `b = 0` forced in size mode.
    pub fn effective_grid(&self) -> Vec<Cell> {
        self.grid
            .iter()
            .map(|c| match self.mode {
                Mode::Size => Cell { b: 0.0, ..*c },
                Mode::Power => *c,
            })
            .collect()
    }
}

/// p-values of every method for one replication (`None` for a failure).
pub fn run_replication(cell: &Cell, methods: &[Method], cfg: &TestConfig, crt_draws: usize, rep_seed: u64) -> Vec<Option<f64>> {
    let sim = match simulate(cell, derive_seed(rep_seed, &[0])) {
        Ok(s) => s,
        Err(_) => return vec![None; methods.len()],
    };
    methods
        .iter()
        .map(|&m| run_method(m, &sim, cfg, crt_draws, rep_seed).ok())
        .collect()
}

fn run_method(method: Method, sim: &Simulated, cfg: &TestConfig, crt_draws: usize, rep_seed: u64) -> Result<f64> {
    let factory = factory_for(cfg, &sim.oracle);
    let data = &sim.data;
    match method {
        Method::Dgcit => {
            let cfg = TestConfig { seed: derive_seed(rep_seed, &[1]), ..cfg.clone() };
            Ok(run_dgcit(data, &cfg, factory.as_ref())?.report.p_value)
        }
        Method::Gcit => {
            let x = factory.fit(Side::X, &full_training_set(data, Side::X), &mut derive(rep_seed, &[2]))?;
            run_gcit_baseline(data, x.sampler.as_ref(), crt_draws, cfg.knn_k, &mut derive(rep_seed, &[3]))
        }
        Method::Gcm => {
            let mut res = Vec::with_capacity(2);
            for (side, tag) in [(Side::X, 4u64), (Side::Y, 5)] {
                let fitted = factory.fit(side, &full_training_set(data, side), &mut derive(rep_seed, &[tag]))?;
                let mut rng = derive(rep_seed, &[tag, 1]);
                let obs = if side == Side::X { data.x() } else { data.y() };
                let r: Vec<f64> = (0..data.n())
                    .map(|i| {
                        let draws = fitted.sampler.sample(data.z_row(i), cfg.m_pseudo, &mut rng)?;
                        Ok(obs[i] - draws.iter().sum::<f64>() / draws.len() as f64)
                    })
                    .collect::<Result<_>>()?;
                res.push(r);
            }
            Ok(gcm_test(&res[0], &res[1])?.p_value)
        }
    }
}

fn full_training_set(data: &Dataset, side: Side) -> TrainingSet {
    let w = match side {
        Side::X => data.x(),
        Side::Y => data.y(),
    };
    TrainingSet { indices: (0..data.n()).collect(), z: data.z().to_vec(), w: w.to_vec(), d_z: data.d_z() }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn rep_seed(master: u64, cell: &Cell, rep: usize) -> u64 {
    derive_seed(master, &[fnv1a(&cell.id()), rep as u64])
}

/// p-values per method (outer) and replication (inner) for one cell.
pub fn run_cell(cell: &Cell, methods: &[Method], cfg: &TestConfig, crt_draws: usize, reps: usize) -> Vec<Vec<Option<f64>>> {
    let per_rep: Vec<Vec<Option<f64>>> = (0..reps)
        .into_par_iter()
        .map(|r| run_replication(cell, methods, cfg, crt_draws, rep_seed(cfg.seed, cell, r)))
        .collect();
    (0..methods.len()).map(|k| per_rep.iter().map(|row| row[k]).collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell_id: String,
    #[serde(rename = "d_Z")]
    pub d_z: usize,
    pub b: f64,
    pub z_dist: ZDist,
    pub method: Method,
    pub alpha: f64,
    pub reps_ok: usize,
    pub reps_failed: usize,
    pub reject_rate: f64,
    pub mc_stderr: f64,
    pub seed: u64,
}

/// Rejection rate over the successful replications.
pub fn rejection_rate(pvalues: &[Option<f64>], alpha: f64) -> (f64, usize, usize) {
    let ok: Vec<f64> = pvalues.iter().flatten().copied().collect();
    let failed = pvalues.len() - ok.len();
    if ok.is_empty() {
        return (f64::NAN, 0, failed);
    }
    let rate = ok.iter().filter(|&&p| p <= alpha).count() as f64 / ok.len() as f64;
    (rate, ok.len(), failed)
}

pub fn summarize(cell: &Cell, methods: &[Method], pvalues: &[Vec<Option<f64>>], levels: &[f64], seed: u64) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for (k, &method) in methods.iter().enumerate() {
        for &alpha in levels {
            let (rate, ok, failed) = rejection_rate(&pvalues[k], alpha);
            let se = if ok > 0 { (rate * (1.0 - rate) / ok as f64).sqrt() } else { f64::NAN };
            rows.push(SweepRow {
                cell_id: cell.id(),
                d_z: cell.d_z,
                b: cell.b,
                z_dist: cell.z_dist,
                method,
                alpha,
                reps_ok: ok,
                reps_failed: failed,
                reject_rate: rate,
                mc_stderr: se,
                seed,
            });
        }
    }
    rows
}

pub const SWEEP_HEADER: &str = "cell_id,d_Z,b,z_dist,method,alpha,reps_ok,reps_failed,reject_rate,mc_stderr,seed";

fn row_line(r: &SweepRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        r.cell_id, r.d_z, r.b, r.z_dist, r.method, r.alpha, r.reps_ok, r.reps_failed, r.reject_rate, r.mc_stderr, r.seed
    )
}

/// `(cell_id, seed)` pairs already recorded in a results file.
fn finished_cells(path: &Path) -> Result<HashSet<(String, u64)>> {
    let mut done = HashSet::new();
    if !path.exists() {
        return Ok(done);
    }
    for line in BufReader::new(std::fs::File::open(path)?).lines() {
        let line = line?;
        if line.starts_with('#') || line.starts_with("cell_id") || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() == 11 {
            if let Ok(seed) = fields[10].parse() {
                done.insert((fields[0].to_string(), seed));
            }
        }
    }
    Ok(done)
}

/// Runs every cell not yet in `spec.out`, appending its rows as it
/// finishes. Returns the rows computed in this call.
pub fn cmd_sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers)
        .build()
        .map_err(|e| invalid(format!("cannot start worker pool: {e}")))?;
    let done = finished_cells(&spec.out)?;
    if !spec.out.exists() {
        let mut f = std::fs::File::create(&spec.out)?;
        let echo = serde_json::to_string(&SpecEcho::from(spec))?;
        writeln!(f, "# config: {echo}")?;
        writeln!(f, "{SWEEP_HEADER}")?;
    }
    let seed = spec.config.seed;
    let mut all = Vec::new();
    for cell in spec.effective_grid() {
        if done.contains(&(cell.id(), seed)) {
            continue;
        }
        let pvals = pool.install(|| run_cell(&cell, &spec.methods, &spec.config, spec.crt_draws, spec.reps));
        let rows = summarize(&cell, &spec.methods, &pvals, &spec.levels, seed);
        let mut f = OpenOptions::new().append(true).open(&spec.out)?;
        for r in &rows {
            writeln!(f, "{}", row_line(r))?;
        }
        f.flush()?;
        all.extend(rows);
    }
    Ok(all)
}

#[derive(Serialize)]
struct SpecEcho<'a> {
    mode: Mode,
    grid: &'a [Cell],
    reps: usize,
    levels: &'a [f64],
    methods: &'a [Method],
    config: &'a TestConfig,
    crt_draws: usize,
}

impl<'a> From<&'a SweepSpec> for SpecEcho<'a> {
    fn from(s: &'a SweepSpec) -> Self {
        Self {
            mode: s.mode,
            grid: &s.grid,
            reps: s.reps,
            levels: &s.levels,
            methods: &s.methods,
            config: &s.config,
            crt_draws: s.crt_draws,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Row {
    pub n: usize,
    /// `√(mean over refits and Z of TV²)`.
    pub rms_tv: f64,
    /// `√n · rms_tv`.
    pub scaled: f64,
    pub reps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Spec {
    pub ns: Vec<usize>,
    pub d_z: usize,
    pub sigma: f64,
    pub reps: usize,
    /// Fresh `Z` draws per refit for the expectation over `Z`.
    pub z_draws: usize,
    pub seed: u64,
}

/// For each `n`: fit β by OLS on `X = Zᵀβ₀ + ε` (β₀ = 1, σ known) and
/// average `TV(N(zᵀβ̂, σ²), N(zᵀβ₀, σ²))²` over fresh `z` and refits.
pub fn prop1_table(spec: &Prop1Spec) -> Result<Vec<Prop1Row>> {
    if spec.ns.windows(2).any(|w| w[0] >= w[1]) || spec.ns.is_empty() {
        return Err(invalid("n grid must be nonempty and increasing"));
    }
    if spec.reps < 1 || spec.z_draws < 1 || spec.d_z < 1 {
        return Err(invalid("reps, z draws and d_Z must be >= 1"));
    }
    if !(spec.sigma > 0.0) {
        return Err(invalid("sigma must be positive"));
    }
    let d = spec.d_z;
    let beta0 = vec![1.0; d];
    spec.ns
        .iter()
        .map(|&n| {
            let per_rep: Vec<f64> = (0..spec.reps)
                .into_par_iter()
                .map(|r| -> Result<f64> {
                    let mut rng = derive(spec.seed, &[n as u64, r as u64]);
                    let z: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let x: Vec<f64> = z
                        .chunks_exact(d)
                        .map(|row| {
                            let e: f64 = StandardNormal.sample(&mut rng);
                            row.iter().zip(&beta0).map(|(a, b)| a * b).sum::<f64>() + spec.sigma * e
                        })
                        .collect();
                    let fit = fit_oracle_ols(&z, &x, d, Some(spec.sigma))?;
                    let mut acc = 0.0;
                    for _ in 0..spec.z_draws {
                        let zr: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                        let mu0: f64 = zr.iter().zip(&beta0).map(|(a, b)| a * b).sum();
                        let tv = gaussian_tv(fit.mean(&zr), mu0, spec.sigma)?;
                        acc += tv * tv;
                    }
                    Ok(acc / spec.z_draws as f64)
                })
                .collect::<Result<_>>()?;
            let mean_sq = per_rep.iter().sum::<f64>() / per_rep.len() as f64;
            let rms = mean_sq.sqrt();
            Ok(Prop1Row { n, rms_tv: rms, scaled: (n as f64).sqrt() * rms, reps: spec.reps })
        })
        .collect()
}

pub fn write_prop1(spec: &Prop1Spec, rows: &[Prop1Row], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "# config: {}", serde_json::to_string(spec)?)?;
    writeln!(f, "n,rms_tv,sqrt_n_rms_tv,reps")?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.n, r.rms_tv, r.scaled, r.reps)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejection_rate_counts_failures_separately() {
        let p = [Some(0.01), None, Some(0.5), Some(0.1)];
        let (rate, ok, failed) = rejection_rate(&p, 0.1);
        assert_eq!((ok, failed), (3, 1));
        assert!((rate - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_rep_has_zero_stderr() {
        let cell = Cell::pnl(40, 2, 0.0, ZDist::Normal);
        let rows = summarize(&cell, &[Method::Gcm], &[vec![Some(0.3)]], &[0.1], 1);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].mc_stderr, 0.0);
    }

    #[test]
    fn size_mode_forces_null() {
        let spec = SweepSpec {
            mode: Mode::Size,
            grid: vec![Cell::pnl(100, 5, 0.9, ZDist::Normal)],
            reps: 1,
            levels: vec![0.1],
            methods: vec![Method::Gcm],
            config: TestConfig::default(),
            crt_draws: 9,
            workers: 1,
            out: PathBuf::from("unused"),
        };
        assert!(spec.effective_grid().iter().all(|c| c.b == 0.0));
    }

    #[test]
    fn prop1_is_scale_free_and_shrinks_with_n() {
        let mut spec = Prop1Spec { ns: vec![100, 1600], d_z: 3, sigma: 1.0, reps: 20, z_draws: 50, seed: 3 };
        let base = prop1_table(&spec).unwrap();
        spec.sigma = 250.0;
        let scaled = prop1_table(&spec).unwrap();
        for (a, b) in base.iter().zip(&scaled) {
            assert!((a.rms_tv - b.rms_tv).abs() < 1e-9);
        }
        assert!(base[0].scaled > 0.1);
        assert!(base[1].rms_tv < base[0].rms_tv);
        assert!(prop1_table(&Prop1Spec { ns: vec![200, 100], ..spec }).is_err());
    }
}
