//! `dgcit` command-line front end.
//!
//! Subcommands:
//! * `test`: run the double-generator test on a CSV with columns `x, y, z1..zd`.
//! * `sweep`: size/power replications over a grid of simulated cells.
//! * `prop1`: root-n scaled total-variation table for OLS-fitted samplers.
//! * `generate`: write a simulated dataset as CSV.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dgcit::data::{load_csv, write_report, GeneratorKind, TestConfig};
use dgcit::experiment::{cmd_sweep, prop1_table, write_prop1, Cell, Method, Mode, Prop1Spec, SweepSpec};
use dgcit::rng::seeded;
use dgcit::sampler::{KnnFactory, SamplerFactory, SinkhornFactory};
use dgcit::synthetic::{gen_example2, gen_linear_gaussian, gen_postnonlinear, Example2Model, PostNonlinearConfig, ZDist};
use dgcit::{run_dgcit, Error};

#[derive(Parser, Debug)]
#[command(name = "dgcit", version, about = "Double-generator conditional independence testing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Test X ⫫ Y | Z on a CSV file.
    Test(TestArgs),
    /// Rejection rates over replications of simulated cells.
    Sweep(SweepArgs),
    /// √n-scaled RMS total variation of OLS-fitted Gaussian samplers.
    Prop1(Prop1Args),
    /// Write a simulated dataset.
    Generate(GenerateArgs),
}

fn parse_alpha(s: &str) -> Result<f64, String> {
    let a: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if a > 0.0 && a < 1.0 {
        Ok(a)
    } else {
        Err(format!("{a} is outside (0, 1)"))
    }
}

fn parse_positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be positive"))
    }
}

/// Options shared by `test` and `sweep`.
#[derive(Args, Debug, Clone)]
struct TestFlags {
    /// Feature functions per side (B).
    #[arg(long, default_value_t = 30, value_parser = clap::value_parser!(u64).range(1..))]
    b_funcs: u64,
    /// Pseudo samples per observation (M).
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    m_pseudo: u64,
    /// Cross-fitting folds (L).
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(2..))]
    folds: u64,
    /// Bootstrap draws (J).
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    boot: u64,
    /// Significance level in (0, 1).
    #[arg(long, default_value_t = 0.05, value_parser = parse_alpha)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Conditional sampler: sinkhorn, knn or oracle (oracle needs a simulated model).
    #[arg(long, default_value = "sinkhorn")]
    generator: GeneratorKind,
    /// Training epochs of the Sinkhorn generators.
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    /// Entropic regularization of the Sinkhorn loss.
    #[arg(long, default_value_t = 0.1, value_parser = parse_positive)]
    sinkhorn_eps: f64,
    /// Scaling rounds per Sinkhorn evaluation.
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    sinkhorn_iters: u64,
    /// z-score X, Y and their pseudo samples before evaluating features.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    standardize: bool,
    /// Neighbours for the k-NN sampler.
    #[arg(long, default_value_t = 25, value_parser = clap::value_parser!(u64).range(1..))]
    knn_k: u64,
    /// Feature parameter dimension on the X side.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(2..))]
    d1: u64,
    /// Feature parameter dimension on the Y side.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(2..))]
    d2: u64,
}

impl TestFlags {
    fn config(&self) -> TestConfig {
        let mut cfg = TestConfig {
            b_funcs: self.b_funcs as usize,
            m_pseudo: self.m_pseudo as usize,
            folds: self.folds as usize,
            boot: self.boot as usize,
            alpha: self.alpha,
            seed: self.seed,
            standardize: self.standardize,
            generator: self.generator,
            knn_k: self.knn_k as usize,
            d1: self.d1 as usize,
            d2: self.d2 as usize,
            ..TestConfig::default()
        };
        cfg.sinkhorn.epochs = self.epochs;
        cfg.sinkhorn.epsilon = self.sinkhorn_eps;
        cfg.sinkhorn.sinkhorn_iters = self.sinkhorn_iters as usize;
        cfg
    }
}

#[derive(Args, Debug)]
struct TestArgs {
    /// CSV with header `x,y,z1,...,zd`.
    csv: PathBuf,
    #[command(flatten)]
    flags: TestFlags,
    /// Report file (JSON).
    #[arg(long, default_value = "dgcit-report.json")]
    out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ModelArg {
    /// Post-nonlinear noise model.
    Pnl,
    /// Dependence invisible to covariance (`X = X*·g(Y)`).
    Ex2,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ModeArg {
    Size,
    Power,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_enum, default_value = "size")]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "pnl")]
    model: ModelArg,
    /// Sample size of every cell.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Conditioning dimensions (comma separated).
    #[arg(long = "d-z", value_delimiter = ',', default_value = "50")]
    d_z: Vec<usize>,
    /// Dependence strengths (comma separated; ignored in size mode).
    #[arg(long, value_delimiter = ',', default_value = "0")]
    b: Vec<f64>,
    /// Distributions of Z (comma separated: normal, laplace).
    #[arg(long, value_delimiter = ',', default_value = "normal")]
    z_dist: Vec<ZDist>,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    reps: u64,
    /// Levels at which rejection rates are reported (comma separated).
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1", value_parser = parse_alpha)]
    levels: Vec<f64>,
    /// Methods (comma separated: dgcit, gcit, gcm).
    #[arg(long, value_delimiter = ',', default_value = "dgcit")]
    methods: Vec<Method>,
    /// Resampled datasets per randomization-test replication.
    #[arg(long, default_value_t = 99)]
    crt_draws: usize,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    workers: u64,
    #[command(flatten)]
    flags: TestFlags,
    /// Results table (CSV, appended to when it exists).
    #[arg(long, default_value = "sweep.csv")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Prop1Args {
    /// Increasing sample sizes (comma separated).
    #[arg(long, value_delimiter = ',', default_value = "200,800,3200")]
    n: Vec<usize>,
    #[arg(long = "d-z", default_value_t = 10)]
    d_z: usize,
    #[arg(long, default_value_t = 1.0, value_parser = parse_positive)]
    sigma: f64,
    /// OLS refits per sample size.
    #[arg(long, default_value_t = 200)]
    reps: usize,
    /// Fresh Z draws per refit for the expectation over Z.
    #[arg(long, default_value_t = 200)]
    z_draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    workers: u64,
    #[arg(long, default_value = "prop1.csv")]
    out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum GenModel {
    Pnl,
    Ex2,
    Linear,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, value_enum, default_value = "pnl")]
    model: GenModel,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long = "d-z", default_value_t = 5)]
    d_z: usize,
    /// Dependence strength (pnl), or any nonzero value for g(y) = y (ex2).
    #[arg(long, default_value_t = 0.0)]
    b: f64,
    #[arg(long, default_value = "normal")]
    z_dist: ZDist,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "data.csv")]
    out: PathBuf,
}

fn cmd_test(args: &TestArgs) -> Result<(), Error> {
    let cfg = args.flags.config();
    let data = load_csv(&args.csv).map_err(|e| match e {
        e @ (Error::Io(_) | Error::Csv(_)) => Error::Io(std::io::Error::other(format!("{}: {e}", args.csv.display()))),
        other => other,
    })?;
    let factory: Box<dyn SamplerFactory> = match cfg.generator {
        GeneratorKind::Sinkhorn => Box::new(SinkhornFactory { cfg: cfg.sinkhorn.clone() }),
        GeneratorKind::Knn => Box::new(KnnFactory { k: cfg.knn_k }),
        GeneratorKind::Oracle => {
            return Err(Error::InvalidConfig(
                "--generator oracle needs a known data-generating model; use sinkhorn or knn for CSV input".into(),
            ))
        }
    };
    let out = run_dgcit(&data, &cfg, factory.as_ref())?;
    let r = &out.report;
    println!("n: {}  d_Z: {}", r.n, data.d_z());
    println!("statistic: {}", r.statistic);
    println!("p-value: {}", r.p_value);
    let verdict = if r.reject { "reject" } else { "do not reject" };
    println!("decision: {verdict} conditional independence at alpha = {}", r.alpha);
    write_report(r, &args.out)?;
    println!("report: {}", args.out.display());
    Ok(())
}

fn build_pool(workers: u64) -> Result<rayon::ThreadPool, Error> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers as usize)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("--workers: {e}")))
}

fn cmd_sweep_args(args: &SweepArgs) -> Result<(), Error> {
    let mut grid = Vec::new();
    for &d_z in &args.d_z {
        for &b in &args.b {
            match args.model {
                ModelArg::Pnl => grid.extend(args.z_dist.iter().map(|&z| Cell::pnl(args.n, d_z, b, z))),
                // Z is Gaussian in this model.
                ModelArg::Ex2 => grid.push(Cell::example2(args.n, d_z, b != 0.0)),
            }
        }
    }
    let spec = SweepSpec {
        mode: match args.mode {
            ModeArg::Size => Mode::Size,
            ModeArg::Power => Mode::Power,
        },
        grid,
        reps: args.reps as usize,
        levels: args.levels.clone(),
        methods: args.methods.clone(),
        config: args.flags.config(),
        crt_draws: args.crt_draws,
        workers: args.workers as usize,
        out: args.out.clone(),
    };
    let rows = cmd_sweep(&spec)?;
    for r in &rows {
        println!(
            "{:<28} {:<6} alpha={:<5} reject={:.3} (se {:.3}, ok {}, failed {})",
            r.cell_id, r.method, r.alpha, r.reject_rate, r.mc_stderr, r.reps_ok, r.reps_failed
        );
    }
    if rows.is_empty() {
        println!("all cells already present in {}", args.out.display());
    }
    Ok(())
}

fn cmd_prop1(args: &Prop1Args) -> Result<(), Error> {
    let spec = Prop1Spec {
        ns: args.n.clone(),
        d_z: args.d_z,
        sigma: args.sigma,
        reps: args.reps,
        z_draws: args.z_draws,
        seed: args.seed,
    };
    let rows = build_pool(args.workers)?.install(|| prop1_table(&spec))?;
    println!("{:>8} {:>12} {:>14}", "n", "rms_tv", "sqrt_n_rms_tv");
    for r in &rows {
        println!("{:>8} {:>12.6} {:>14.6}", r.n, r.rms_tv, r.scaled);
    }
    write_prop1(&spec, &rows, &args.out)?;
    Ok(())
}

fn cmd_generate(args: &GenerateArgs) -> Result<(), Error> {
    let data = match args.model {
        GenModel::Pnl => gen_postnonlinear(&PostNonlinearConfig::new(args.n, args.d_z, args.b, args.z_dist, args.seed))?.data,
        GenModel::Ex2 => {
            let model = if args.b != 0.0 { Example2Model::identity() } else { Example2Model::constant(1.0) };
            gen_example2(args.n, args.d_z, &model, &mut seeded(args.seed))?
        }
        GenModel::Linear => {
            let beta = vec![1.0 / (args.d_z as f64).sqrt(); args.d_z];
            gen_linear_gaussian(args.n, args.d_z, &beta, 1.0, &mut seeded(args.seed))?.data
        }
    };
    data.write_csv(&args.out)?;
    println!("wrote {} rows to {}", data.n(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Test(a) => cmd_test(a),
        Command::Sweep(a) => cmd_sweep_args(a),
        Command::Prop1(a) => cmd_prop1(a),
        Command::Generate(a) => cmd_generate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
