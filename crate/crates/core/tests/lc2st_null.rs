use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use tfmpe::diagnostics::{Lc2stConfig, Lc2stFit};
use tfmpe::seed;

/// theta ~ N(0, 1), x | theta ~ N(theta, 1), so theta | x ~ N(x / 2, 1 / 2).
fn calibration(n: usize, seed_: u64) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let mut rng = seed::rng(seed_);
    let mut z = || -> f64 { StandardNormal.sample(&mut rng) };
    let theta = Array2::from_shape_fn((n, 1), |_| z());
    let x = Array2::from_shape_fn((n, 1), |(i, _)| theta[[i, 0]] + z());
    let tq = Array2::from_shape_fn((n, 1), |(i, _)| x[[i, 0]] / 2.0 + 0.5f64.sqrt() * z());
    (x, theta, tq)
}

fn posterior_at(x: f64, n: usize, seed_: u64) -> Array2<f64> {
    let mut rng = seed::rng(seed_);
    Array2::from_shape_fn((n, 1), |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        x / 2.0 + 0.5f64.sqrt() * z
    })
}

#[test]
fn null_rank_of_exact_sampler_is_uniform() {
    let config = Lc2stConfig {
        cv_folds: 2,
        n_null: 19,
        n_cal: 200,
        n_posterior: 200,
        patience: 20,
        max_epochs: 200,
        ..Default::default()
    };
    let reps = 50;
    let mut bins = [0usize; 5];
    for r in 0..reps {
        let (x, th, tq) = calibration(config.n_cal, 100 + r);
        let fit = Lc2stFit::fit(x.view(), th.view(), tq.view(), &config, r).unwrap();
        let xo = ndarray::array![0.4 * r as f64 / reps as f64 - 0.2];
        let post = posterior_at(xo[0], config.n_posterior, 900 + r);
        let res = fit.evaluate(xo.view(), post.view()).unwrap();
        // nulls at or above the statistic, 0..=19
        let k = (res.p_value * 19.0).round() as usize;
        bins[k / 4] += 1;
    }
    let e = reps as f64 / 5.0;
    let chi2: f64 = bins.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
    println!("rank bins {bins:?} chi2 {chi2:.2}");
    assert!(chi2 < 13.28, "rank bins {bins:?}");
}
