//! Acceptance suite. Each test prints one `PASS`/`FAIL` line and then asserts.
//!
//! Run with `cargo test -p dgcit --test acceptance -- --include-ignored` to
//! include the slow trained-generator calibration.

use std::io::Write;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use dgcit::bootstrap::{bootstrap_pvalue, psd_sqrt, BootCovariance};
use dgcit::data::{GeneratorKind, TestConfig};
use dgcit::dgcit::run_dgcit;
use dgcit::experiment::{
    cmd_sweep, prop1_table, rejection_rate, run_cell, write_prop1, Cell, Method, Mode, Prop1Spec, SweepSpec,
};
use dgcit::nn::Mlp;
use dgcit::rng::{derive, derive_seed, seeded};
use dgcit::sampler::sinkhorn::{sinkhorn_divergence, squared_euclidean};
use dgcit::sampler::{OracleFactory, SinkhornConfig};
use dgcit::stats::{gcm_test, run_gcit_baseline};
use dgcit::synthetic::{gen_example2, gen_linear_gaussian, Example2Model, ZDist};

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout();
    writeln!(out, "[{tag}] criterion {id}: {name}: {detail}").unwrap();
    out.flush().unwrap();
}

fn oracle_cfg(seed: u64) -> TestConfig {
    TestConfig { generator: GeneratorKind::Oracle, alpha: 0.1, seed, ..Default::default() }
}

fn dgcit_rates(cell: &Cell, cfg: &TestConfig, reps: usize, levels: &[f64]) -> (Vec<f64>, usize) {
    let pv = run_cell(cell, &[Method::Dgcit], cfg, 0, reps).remove(0);
    let failed = pv.iter().filter(|p| p.is_none()).count();
    (levels.iter().map(|&a| rejection_rate(&pv, a).0).collect(), failed)
}

fn std_normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Rejection rates at α = 0.1 and 0.05 for the oracle size cell.
fn oracle_size() -> (f64, f64) {
    static SIZE: OnceLock<(f64, f64)> = OnceLock::new();
    *SIZE.get_or_init(|| {
        let cell = Cell::pnl(500, 50, 0.0, ZDist::Normal);
        let (r, failed) = dgcit_rates(&cell, &oracle_cfg(101), 200, &[0.1, 0.05]);
        assert_eq!(failed, 0);
        (r[0], r[1])
    })
}

#[test]
fn c01_size_with_oracle_samplers() {
    let (r10, r05) = oracle_size();
    let pass = (0.05..=0.16).contains(&r10) && (0.015..=0.10).contains(&r05);
    report(1, "size, oracle samplers", pass, &format!("rate@0.10={r10:.3} in [0.05,0.16], rate@0.05={r05:.3} in [0.015,0.10]"));
    assert!(pass);
}

#[test]
#[ignore = "slow: trains 200 generators"]
fn c02_size_with_trained_sinkhorn_samplers() {
    let cell = Cell::pnl(500, 50, 0.0, ZDist::Normal);
    let cfg = TestConfig {
        generator: GeneratorKind::Sinkhorn,
        alpha: 0.1,
        seed: 202,
        sinkhorn: SinkhornConfig { epochs: 100, ..Default::default() },
        ..Default::default()
    };
    let (r, failed) = dgcit_rates(&cell, &cfg, 100, &[0.1]);
    let pass = r[0] <= 0.20;
    report(2, "size, trained Sinkhorn samplers", pass, &format!("rate@0.10={:.3} <= 0.20 ({failed} failed reps)", r[0]));
    assert!(pass);
}

#[test]
fn c03_power_grows_with_signal() {
    let cfg = oracle_cfg(303);
    let (strong, f1) = dgcit_rates(&Cell::pnl(1000, 100, 0.9, ZDist::Normal), &cfg, 50, &[0.1]);
    let (weak, f2) = dgcit_rates(&Cell::pnl(1000, 100, 0.3, ZDist::Normal), &cfg, 50, &[0.1]);
    let size = oracle_size().0;
    let pass = strong[0] >= 0.8 && weak[0] > size && f1 + f2 == 0;
    report(
        3,
        "power",
        pass,
        &format!("power(b=0.9)={:.3} >= 0.8, power(b=0.3)={:.3} > size {size:.3}", strong[0], weak[0]),
    );
    assert!(pass);
}

#[test]
fn c04_gcm_blind_to_example2_dependence() {
    let (n, d_z, reps) = (1000, 100, 100);
    let model = Example2Model::identity();
    let oracle = model.oracle(d_z);
    // The five-parameter feature class is reported alongside the default.
    let wide = |seed| TestConfig { d1: 5, d2: 5, ..oracle_cfg(seed) };
    let (mut gcm_rej, mut dgcit_rej, mut wide_rej) = (0usize, 0usize, 0usize);
    for rep in 0..reps {
        let seed = derive_seed(404, &[rep as u64]);
        let data = gen_example2(n, d_z, &model, &mut derive(seed, &[0])).unwrap();
        // The exact conditional means of X and Y given Z are both zero.
        if gcm_test(data.x(), data.y()).unwrap().p_value <= 0.1 {
            gcm_rej += 1;
        }
        if run_dgcit(&data, &oracle_cfg(derive_seed(seed, &[1])), &oracle).unwrap().report.p_value <= 0.1 {
            dgcit_rej += 1;
        }
        if run_dgcit(&data, &wide(derive_seed(seed, &[1])), &oracle).unwrap().report.p_value <= 0.1 {
            wide_rej += 1;
        }
    }
    let rate = |k: usize| k as f64 / reps as f64;
    let (g, d) = (rate(gcm_rej), rate(dgcit_rej));
    let pass = g <= 0.16 && d >= 0.5;
    report(
        4,
        "Example 2, GCM vs DGCIT",
        pass,
        &format!("GCM rate={g:.3} <= 0.16, DGCIT rate={d:.3} >= 0.5; with d1=d2=5 features {:.3}", rate(wide_rej)),
    );
    assert!(pass);
}

#[test]
fn c05_tv_error_does_not_vanish_at_root_n() {
    let spec = Prop1Spec { ns: vec![200, 800, 3200], d_z: 10, sigma: 1.0, reps: 200, z_draws: 200, seed: 505 };
    let rows = prop1_table(&spec).unwrap();
    let vals: Vec<f64> = rows.iter().map(|r| r.scaled).collect();
    let pass = vals.iter().all(|&v| v >= 0.1) && vals[2] >= 0.5 * vals[0];
    report(5, "root-n scaled TV error", pass, &format!("values {vals:.3?}, all >= 0.1 and last >= 0.5 x first"));
    assert!(pass);
}

/// Standard normal survival function by Simpson integration of the density.
fn normal_tail(t: f64) -> f64 {
    let steps = 20_000;
    let h = t / steps as f64;
    let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = phi(0.0) + phi(t);
    for k in 1..steps {
        s += if k % 2 == 1 { 4.0 } else { 2.0 } * phi(k as f64 * h);
    }
    0.5 - s * h / 3.0
}

#[test]
fn c06_bootstrap_matches_half_normal_tail() {
    let cov = BootCovariance::from_sigma(DMatrix::from_element(1, 1, 1.0));
    let mut worst = 0.0f64;
    let mut detail = Vec::new();
    for (i, t) in [1.0, 1.645, 2.576].into_iter().enumerate() {
        let p = bootstrap_pvalue(t, &cov, 100_000, &mut seeded(600 + i as u64)).unwrap();
        let exact = 2.0 * normal_tail(t);
        worst = worst.max((p - exact).abs());
        detail.push(format!("T={t}: {p:.4} vs {exact:.4}"));
    }
    let pass = worst <= 0.005;
    report(6, "bootstrap vs half-normal tail", pass, &format!("{}; max gap {worst:.4} <= 0.005", detail.join(", ")));
    assert!(pass);
}

#[test]
fn c07_crt_pvalues_are_valid() {
    let (n, d_z, reps) = (200, 5, 500);
    let beta = vec![1.0 / (d_z as f64).sqrt(); d_z];
    let pvals: Vec<f64> = (0..reps)
        .map(|rep| {
            let seed = derive_seed(707, &[rep as u64]);
            let s = gen_linear_gaussian(n, d_z, &beta, 1.0, &mut derive(seed, &[0])).unwrap();
            run_gcit_baseline(&s.data, &s.x_oracle, 99, 25, &mut derive(seed, &[1])).unwrap()
        })
        .collect();
    let mut worst = f64::NEG_INFINITY;
    for k in 1..10 {
        let t = k as f64 / 10.0;
        let cdf = pvals.iter().filter(|&&p| p <= t).count() as f64 / reps as f64;
        worst = worst.max(cdf - t);
    }
    let pass = worst <= 0.06;
    report(7, "CRT validity", pass, &format!("max decile excess of ECDF over uniform {worst:.3} <= 0.06"));
    assert!(pass);
}

fn mlp_fd_error(sizes: &[usize], seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let net = Mlp::new(sizes, &mut rng).unwrap();
    let batch = 3;
    let x: Vec<f64> = (0..batch * sizes[0]).map(|_| std_normal(&mut rng)).collect();
    let u: Vec<f64> = (0..batch * sizes[sizes.len() - 1]).map(|_| std_normal(&mut rng)).collect();
    let cache = net.forward_batch(&x, batch).unwrap();
    let g = net.backward_batch(&cache, &u).unwrap();
    let objective = |net: &Mlp, x: &[f64]| -> f64 {
        net.forward_batch(x, batch).unwrap().output().iter().zip(&u).map(|(a, b)| a * b).sum()
    };
    let h = 1e-5;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
    let mut worst = 0.0f64;
    let mut work = net.clone();
    for k in 0..net.params().len() {
        let p0 = net.params()[k];
        work.params_mut()[k] = p0 + h;
        let plus = objective(&work, &x);
        work.params_mut()[k] = p0 - h;
        let minus = objective(&work, &x);
        work.params_mut()[k] = p0;
        worst = worst.max(rel((plus - minus) / (2.0 * h), g.params[k]));
    }
    let mut xw = x.clone();
    for k in 0..x.len() {
        xw[k] = x[k] + h;
        let plus = objective(&net, &xw);
        xw[k] = x[k] - h;
        let minus = objective(&net, &xw);
        xw[k] = x[k];
        worst = worst.max(rel((plus - minus) / (2.0 * h), g.input[k]));
    }
    worst
}

fn random_psd(dim: usize, rank: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, rank, |_, _| std_normal(rng));
    (&g * g.transpose()) / rank as f64
}

#[test]
fn c08_numerical_kernels() {
    let cfg = SinkhornConfig::default();
    let mut fd_worst = 0.0f64;
    for (i, d_z) in [1usize, 5, 50, 100].into_iter().enumerate() {
        let mut gen = vec![d_z + cfg.noise_dim];
        gen.extend(&cfg.gen_hidden);
        gen.push(1);
        let mut cost = vec![1 + d_z];
        cost.extend(&cfg.cost_hidden);
        cost.push(cfg.embed_dim);
        fd_worst = fd_worst.max(mlp_fd_error(&gen, 800 + i as u64));
        fd_worst = fd_worst.max(mlp_fd_error(&cost, 810 + i as u64));
    }

    let mut rng = seeded(820);
    let mut root_worst = 0.0f64;
    for i in 0..50 {
        let dim = 2 + i * 898 / 49;
        // Every fifth matrix is rank deficient so clipping is exercised.
        let rank = if i % 5 == 0 { (dim / 2).max(1) } else { dim + 5 };
        let sigma = random_psd(dim, rank, &mut rng);
        let (root, _) = psd_sqrt(&sigma).unwrap();
        root_worst = root_worst.max((&root * &root - &sigma).norm());
    }

    let pts: Vec<Vec<f64>> = (0..40).map(|_| (0..3).map(|_| std_normal(&mut rng)).collect()).collect();
    let other: Vec<Vec<f64>> = (0..30).map(|_| (0..3).map(|_| 1.0 + std_normal(&mut rng)).collect()).collect();
    let cost = |a: &Vec<f64>, b: &Vec<f64>| squared_euclidean(a, b);
    let self_div = sinkhorn_divergence(&pts, &pts, cost, 0.1, 100).unwrap().abs();
    let ab = sinkhorn_divergence(&pts, &other, cost, 0.1, 100).unwrap();
    let ba = sinkhorn_divergence(&other, &pts, cost, 0.1, 100).unwrap();
    let sym = (ab - ba).abs();
    let (p, q) = (vec![vec![0.3, -1.2]], vec![vec![2.0, 0.5]]);
    let single = sinkhorn_divergence(&p, &q, cost, 0.1, 100).unwrap();
    let single_ok = single == squared_euclidean(&p[0], &q[0]);

    let pass = fd_worst < 1e-4 && root_worst <= 1e-6 && self_div <= 1e-8 && sym <= 1e-10 && single_ok;
    report(
        8,
        "numerical kernels",
        pass,
        &format!(
            "FD rel err {fd_worst:.2e} < 1e-4, psd_sqrt err {root_worst:.2e} <= 1e-6, self {self_div:.2e} <= 1e-8, \
             symmetry {sym:.2e} <= 1e-10, single point exact: {single_ok}"
        ),
    );
    assert!(pass);
}

#[test]
fn c09_double_robustness_with_biased_y_sampler() {
    let (n, d_z, reps) = (500, 10, 200);
    let beta = vec![1.0 / (d_z as f64).sqrt(); d_z];
    let mut rejections = 0;
    for rep in 0..reps {
        let seed = derive_seed(909, &[rep as u64]);
        let s = gen_linear_gaussian(n, d_z, &beta, 1.0, &mut derive(seed, &[0])).unwrap();
        // Y ~ N(0, 1), so +0.5σ is an intercept of 0.5.
        let biased = s.y_oracle.clone().with_intercept(0.5);
        let factory = OracleFactory::new(s.x_oracle.clone(), biased);
        if run_dgcit(&s.data, &oracle_cfg(derive_seed(seed, &[1])), &factory).unwrap().report.p_value <= 0.1 {
            rejections += 1;
        }
    }
    let rate = rejections as f64 / reps as f64;
    let pass = rate <= 0.16;
    report(9, "double robustness", pass, &format!("rate@0.10={rate:.3} <= 0.16"));
    assert!(pass);
}

#[test]
fn c10_fixed_seed_outputs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let beta = [0.5, -0.5, 1.0];
    let mut files = Vec::new();
    for run in 0..2 {
        let s = gen_linear_gaussian(150, 3, &beta, 1.0, &mut seeded(1001)).unwrap();
        let data_path = p.join(format!("data{run}.csv"));
        s.data.write_csv(&data_path).unwrap();

        let cfg = TestConfig { generator: GeneratorKind::Knn, boot: 300, m_pseudo: 20, seed: 1002, ..Default::default() };
        let factory = dgcit::sampler::KnnFactory { k: cfg.knn_k };
        let out = run_dgcit(&s.data, &cfg, &factory).unwrap();
        let report_path = p.join(format!("report{run}.json"));
        dgcit::data::write_report(&out.report, &report_path).unwrap();

        let sweep_path = p.join(format!("sweep{run}.csv"));
        let spec = SweepSpec {
            mode: Mode::Power,
            grid: vec![Cell::pnl(120, 3, 0.5, ZDist::Laplace), Cell::example2(120, 3, true)],
            reps: 2,
            levels: vec![0.05, 0.1],
            methods: vec![Method::Dgcit, Method::Gcit, Method::Gcm],
            config: TestConfig { generator: GeneratorKind::Oracle, boot: 200, m_pseudo: 20, seed: 1003, ..Default::default() },
            crt_draws: 19,
            workers: 2,
            out: sweep_path.clone(),
        };
        cmd_sweep(&spec).unwrap();

        let prop_path = p.join(format!("prop{run}.csv"));
        let pspec = Prop1Spec { ns: vec![50, 100], d_z: 3, sigma: 1.0, reps: 3, z_draws: 20, seed: 1004 };
        write_prop1(&pspec, &prop1_table(&pspec).unwrap(), &prop_path).unwrap();

        files.push([data_path, report_path, sweep_path, prop_path]);
    }
    let same: Vec<bool> = (0..4).map(|k| std::fs::read(&files[0][k]).unwrap() == std::fs::read(&files[1][k]).unwrap()).collect();
    let pass = same.iter().all(|&b| b);
    report(10, "determinism", pass, &format!("data/report/sweep/prop1 identical: {same:?}"));
    assert!(pass);
}
