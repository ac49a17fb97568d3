use dgcit::data::{GeneratorKind, TestConfig};
use dgcit::dgcit::run_dgcit;
use dgcit::experiment::{run_cell, Cell, Method};
use dgcit::rng::seeded;
use dgcit::sampler::KnnFactory;
use dgcit::synthetic::{gen_linear_gaussian, ZDist};

fn small_cfg(folds: usize, seed: u64) -> TestConfig {
    TestConfig { folds, boot: 200, m_pseudo: 10, b_funcs: 5, generator: GeneratorKind::Knn, knn_k: 5, seed, ..Default::default() }
}

#[test]
fn samplers_never_see_their_evaluation_rows() {
    let s = gen_linear_gaussian(97, 3, &[1.0, 0.0, -1.0], 1.0, &mut seeded(1)).unwrap();
    for folds in [2, 3, 5] {
        let out = run_dgcit(&s.data, &small_cfg(folds, 7), &KnnFactory { k: 5 }).unwrap();
        assert_eq!(out.cross_fit.len(), folds);
        let mut covered = vec![0usize; 97];
        for rec in &out.cross_fit {
            assert!(rec.train.iter().all(|i| !rec.eval.contains(i)));
            assert_eq!(rec.train.len() + rec.eval.len(), 97);
            for &i in &rec.eval {
                covered[i] += 1;
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
        let sizes = out.folds.sizes();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }
}

#[test]
fn report_matches_psi_and_config() {
    let s = gen_linear_gaussian(80, 2, &[0.5, 0.5], 1.0, &mut seeded(2)).unwrap();
    let cfg = small_cfg(2, 3);
    let out = run_dgcit(&s.data, &cfg, &KnnFactory { k: 5 }).unwrap();
    assert_eq!(out.psi.channels(), 25);
    assert_eq!(out.psi.n(), 80);
    assert_eq!(out.report.config, cfg);
    let k = out.report.p_value * 200.0;
    assert!((k - k.round()).abs() < 1e-9);
    let t = out.psi.channel_sums().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert_eq!(t, out.report.statistic);
}

#[test]
fn worker_count_does_not_change_results() {
    let cell = Cell::pnl(120, 3, 0.4, ZDist::Normal);
    let cfg = TestConfig { generator: GeneratorKind::Oracle, boot: 200, m_pseudo: 10, seed: 5, ..Default::default() };
    let methods = [Method::Dgcit, Method::Gcit, Method::Gcm];
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_cell(&cell, &methods, &cfg, 19, 4))
    };
    assert_eq!(run(1), run(3));
}
