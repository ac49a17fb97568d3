use dgcit::bootstrap::{bootstrap_pvalue, BootCovariance};
use dgcit::rng::{derive, seeded};
use dgcit::stats::gcm_test;
use dgcit::synthetic::{gen_example2, gen_linear_gaussian, Example2Model};
use nalgebra::DMatrix;

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn example2_dependence_is_invisible_to_correlation() {
    let n = 100_000;
    let d = gen_example2(n, 2, &Example2Model::identity(), &mut seeded(1)).unwrap();
    assert!(corr(d.x(), d.y()).abs() < 0.01);
    let x2: Vec<f64> = d.x().iter().map(|v| v * v).collect();
    let y2: Vec<f64> = d.y().iter().map(|v| v * v).collect();
    assert!(corr(&x2, &y2) > 0.1);
    let mean = d.x().iter().sum::<f64>() / n as f64;
    assert!(mean.abs() < 3.0 / (n as f64).sqrt());
}

#[test]
fn constant_g_gives_x_star() {
    let d = gen_example2(500, 1, &Example2Model::constant(1.0), &mut seeded(2)).unwrap();
    let e = gen_example2(500, 1, &Example2Model::identity(), &mut seeded(2)).unwrap();
    // Same stream: X* is shared, only the multiplier differs.
    for i in 0..500 {
        assert!((d.x()[i] * e.y()[i] - e.x()[i]).abs() < 1e-12);
    }
}

#[test]
fn gcm_of_example2_is_within_noise() {
    let d = gen_example2(100_000, 3, &Example2Model::identity(), &mut seeded(3)).unwrap();
    // Both conditional means are exactly zero.
    let r = gcm_test(d.x(), d.y()).unwrap();
    assert!(r.statistic.abs() < 3.0 * r.stderr, "{r:?}");
}

#[test]
fn gcm_test_is_calibrated_under_the_null() {
    let (n, reps) = (100_000, 1000);
    let beta = [0.6, -0.8];
    let mut rejections = 0;
    for rep in 0..reps {
        let s = gen_linear_gaussian(n, 2, &beta, 1.0, &mut derive(4, &[rep])).unwrap();
        let d = &s.data;
        let x_res: Vec<f64> = (0..n).map(|i| d.x()[i] - s.x_oracle.mean(d.z_row(i))).collect();
        if gcm_test(&x_res, d.y()).unwrap().p_value <= 0.1 {
            rejections += 1;
        }
    }
    let rate = rejections as f64 / reps as f64;
    assert!((0.07..=0.13).contains(&rate), "{rate}");
}

#[test]
fn bootstrap_hits_ten_percent_at_the_normal_quantile() {
    let cov = BootCovariance::from_sigma(DMatrix::from_element(1, 1, 1.0));
    let p = bootstrap_pvalue(1.644854, &cov, 100_000, &mut seeded(5)).unwrap();
    assert!((p - 0.10).abs() <= 0.005, "{p}");
}
