//! Data model shared by every other module: observations, fold partitions,
//! test configuration, CSV ingestion and the JSON report.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::rng::SeedRng;
use crate::sampler::gan::SinkhornConfig;

/// `n` observations of scalar `x`, scalar `y` and a `d_z`-vector `z`.
///
/// `z` is stored row-major; use [`Dataset::z_row`] for observation `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    d_z: usize,
}

impl Dataset {
    pub fn new(x: Vec<f64>, y: Vec<f64>, z: Vec<f64>, d_z: usize) -> Result<Self> {
        if d_z == 0 {
            return Err(invalid("d_Z must be at least 1"));
        }
        let n = x.len();
        if n == 0 {
            return Err(invalid("dataset is empty"));
        }
        if y.len() != n || z.len() != n * d_z {
            return Err(shape(format!(
                "x has {n} rows, y has {}, z has {} values for d_Z={d_z}",
                y.len(),
                z.len()
            )));
        }
        for i in 0..n {
            let row_ok = x[i].is_finite()
                && y[i].is_finite()
                && z[i * d_z..(i + 1) * d_z].iter().all(|v| v.is_finite());
            if !row_ok {
                return Err(Error::Data { row: i + 1, msg: "non-finite value".into() });
            }
        }
        Ok(Self { x, y, z, d_z })
    }

    pub fn from_rows(x: Vec<f64>, y: Vec<f64>, z_rows: &[Vec<f64>]) -> Result<Self> {
        let d_z = z_rows.first().map_or(0, Vec::len);
        if z_rows.iter().any(|r| r.len() != d_z) {
            return Err(shape("ragged z rows"));
        }
        Self::new(x, y, z_rows.concat(), d_z)
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Row-major `n × d_z` block.
    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn z_row(&self, i: usize) -> &[f64] {
        &self.z[i * self.d_z..(i + 1) * self.d_z]
    }

    /// Writes the dataset in the CSV layout accepted by [`load_csv`].
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["x".to_string(), "y".to_string()];
        header.extend((1..=self.d_z).map(|k| format!("z{k}")));
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![fmt_f64(self.x[i]), fmt_f64(self.y[i])];
            rec.extend(self.z_row(i).iter().map(|&v| fmt_f64(v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn fmt_f64(v: f64) -> String {
    // Shortest representation that parses back to the same bits.
    format!("{v:?}")
}

/// Column names used to pull a [`Dataset`] out of a CSV file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub x: String,
    pub y: String,
    pub z: Vec<String>,
}

impl CsvSchema {
    /// `x`, `y` and the positional block `z1..zd`, with `d` the largest
    /// contiguous index present in `header`.
    pub fn infer(header: &[&str]) -> Result<Self> {
        let mut d = 0;
        while header.contains(&format!("z{}", d + 1).as_str()) {
            d += 1;
        }
        if d == 0 {
            return Err(Error::Schema("header has no z1 column".into()));
        }
        Ok(Self { x: "x".into(), y: "y".into(), z: (1..=d).map(|k| format!("z{k}")).collect() })
    }
}

/// Loads a dataset with the default `x, y, z1..zd` layout.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    load_csv_with(path, None)
}

pub fn load_csv_with(path: &Path, schema: Option<&CsvSchema>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let schema = match schema {
        Some(s) => s.clone(),
        None => CsvSchema::infer(&header_refs)?,
    };
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let xi = find(&schema.x)?;
    let yi = find(&schema.y)?;
    let zi: Vec<usize> = schema.z.iter().map(|c| find(c)).collect::<Result<_>>()?;

    let (mut x, mut y, mut z) = (Vec::new(), Vec::new(), Vec::new());
    for (r, rec) in reader.records().enumerate() {
        let row = r + 1;
        let rec = rec?;
        let cell = |col: usize| -> Result<f64> {
            let raw = rec
                .get(col)
                .ok_or_else(|| Error::Data { row, msg: format!("missing cell in column {}", col + 1) })?;
            let v: f64 = raw
                .parse()
                .map_err(|_| Error::Data { row, msg: format!("non-numeric value `{raw}`") })?;
            if !v.is_finite() {
                return Err(Error::Data { row, msg: format!("non-finite value `{raw}`") });
            }
            Ok(v)
        };
        x.push(cell(xi)?);
        y.push(cell(yi)?);
        for &c in &zi {
            z.push(cell(c)?);
        }
    }
    Dataset::new(x, y, z, zi.len())
}

/// Assignment of each observation to one of `L` folds (0-based).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPartition {
    assignments: Vec<usize>,
    folds: usize,
}

impl FoldPartition {
    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn num_folds(&self) -> usize {
        self.folds
    }

    /// Indices in fold `l`, ascending.
    pub fn fold(&self, l: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == l).collect()
    }

    /// Indices outside fold `l`, ascending.
    pub fn complement(&self, l: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] != l).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.folds];
        for &a in &self.assignments {
            s[a] += 1;
        }
        s
    }
}

/// Uniformly random balanced partition of `0..n` into `folds` folds.
pub fn make_folds(n: usize, folds: usize, rng: &mut SeedRng) -> Result<FoldPartition> {
    if folds == 0 || n < 2 * folds {
        return Err(invalid(format!("need n >= 2L, got n={n}, L={folds}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut assignments = vec![0; n];
    for (k, &i) in perm.iter().enumerate() {
        assignments[i] = k % folds;
    }
    Ok(FoldPartition { assignments, folds })
}

/// How conditional samplers are obtained for a test run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Sinkhorn,
    Knn,
    Oracle,
}

impl std::str::FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sinkhorn" => Ok(Self::Sinkhorn),
            "knn" => Ok(Self::Knn),
            "oracle" => Ok(Self::Oracle),
            other => Err(invalid(format!("unknown generator `{other}`"))),
        }
    }
}

impl std::fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sinkhorn => "sinkhorn",
            Self::Knn => "knn",
            Self::Oracle => "oracle",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestConfig {
    /// Feature functions per side (`B`).
    pub b_funcs: usize,
    /// Pseudo samples per observation (`M`).
    pub m_pseudo: usize,
    /// Number of cross-fitting folds (`L`).
    pub folds: usize,
    /// Bootstrap draws (`J`).
    pub boot: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Feature parameter dimension on the X side.
    pub d1: usize,
    /// Feature parameter dimension on the Y side.
    pub d2: usize,
    /// z-score X and Y (and their pseudo samples) before evaluating features.
    pub standardize: bool,
    pub generator: GeneratorKind,
    pub knn_k: usize,
    pub sinkhorn: SinkhornConfig,
}

impl Default for TestConfig {
    fn default() -> Self {
        Self {
            b_funcs: 30,
            m_pseudo: 100,
            folds: 2,
            boot: 1000,
            alpha: 0.05,
            seed: 0,
            d1: 2,
            d2: 2,
            standardize: true,
            generator: GeneratorKind::Sinkhorn,
            knn_k: 25,
            sinkhorn: SinkhornConfig::default(),
        }
    }
}

impl TestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.b_funcs < 1 {
            return Err(invalid("B must be >= 1"));
        }
        if self.m_pseudo < 1 {
            return Err(invalid("M must be >= 1"));
        }
        if self.folds < 2 {
            return Err(invalid("L must be >= 2"));
        }
        if self.boot < 1 {
            return Err(invalid("J must be >= 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.d1 < 2 || self.d2 < 2 {
            return Err(invalid("feature dimensions d1, d2 must be >= 2"));
        }
        if self.knn_k < 1 {
            return Err(invalid("k must be >= 1"));
        }
        self.sinkhorn.validate()
    }
}

/// Generator training trace for one fold.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FoldDiagnostics {
    pub fold: usize,
    pub train_size: usize,
    pub eval_size: usize,
    /// Per-epoch mean generator loss for the X|Z sampler (empty if untrained).
    pub x_losses: Vec<f64>,
    pub y_losses: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub folds: Vec<FoldDiagnostics>,
    /// Channels whose standardizer hit the floor.
    pub sigma_floor_count: usize,
    /// Negative eigenvalues of the bootstrap covariance clipped to zero.
    pub clipped_eigenvalues: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub statistic: f64,
    pub p_value: f64,
    pub reject: bool,
    pub alpha: f64,
    #[serde(rename = "B")]
    pub b_funcs: usize,
    #[serde(rename = "M")]
    pub m_pseudo: usize,
    #[serde(rename = "L")]
    pub folds: usize,
    #[serde(rename = "J")]
    pub boot: usize,
    pub seed: u64,
    #[serde(rename = "d_Z")]
    pub d_z: usize,
    pub n: usize,
    pub config: TestConfig,
    pub diagnostics: Diagnostics,
}

impl TestReport {
    pub fn new(statistic: f64, p_value: f64, n: usize, d_z: usize, config: &TestConfig, diagnostics: Diagnostics) -> Self {
        Self {
            statistic,
            p_value,
            reject: p_value <= config.alpha,
            alpha: config.alpha,
            b_funcs: config.b_funcs,
            m_pseudo: config.m_pseudo,
            folds: config.folds,
            boot: config.boot,
            seed: config.seed,
            d_z,
            n,
            config: config.clone(),
            diagnostics,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn write_report(report: &TestReport, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(report.to_json()?.as_bytes())?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<TestReport> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use std::collections::HashSet;

    #[test]
    fn folds_n4_l2_balanced_and_disjoint() {
        let p = make_folds(4, 2, &mut seeded(1)).unwrap();
        assert_eq!(p.sizes(), vec![2, 2]);
        let all: HashSet<usize> = p.fold(0).into_iter().chain(p.fold(1)).collect();
        assert_eq!(all, (0..4).collect());
    }

    #[test]
    fn folds_n5_l2_sizes() {
        let mut s = make_folds(5, 2, &mut seeded(3)).unwrap().sizes();
        s.sort_unstable();
        assert_eq!(s, vec![2, 3]);
    }

    #[test]
    fn folds_are_deterministic() {
        let a = make_folds(100, 2, &mut seeded(42)).unwrap();
        let b = make_folds(100, 2, &mut seeded(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn folds_reject_small_n() {
        assert!(matches!(make_folds(3, 2, &mut seeded(0)), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn dataset_rejects_non_finite() {
        let err = Dataset::new(vec![1.0, f64::NAN], vec![0.0, 0.0], vec![0.0, 0.0], 1).unwrap_err();
        assert!(matches!(err, Error::Data { row: 2, .. }));
    }

    #[test]
    fn config_validation() {
        assert!(TestConfig::default().validate().is_ok());
        let bad = TestConfig { alpha: 1.5, ..TestConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TestConfig { folds: 1, ..TestConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn reject_uses_less_or_equal() {
        let cfg = TestConfig { alpha: 0.05, ..TestConfig::default() };
        assert!(TestReport::new(1.0, 0.03, 10, 1, &cfg, Diagnostics::default()).reject);
        assert!(TestReport::new(1.0, 0.05, 10, 1, &cfg, Diagnostics::default()).reject);
        assert!(!TestReport::new(1.0, 0.051, 10, 1, &cfg, Diagnostics::default()).reject);
    }
}
