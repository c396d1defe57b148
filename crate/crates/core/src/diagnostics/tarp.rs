//! Coverage diagnostic from random reference points.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TarpResult {
    /// Credibility levels `0, 1/m, ..., 1`.
    pub alpha: Vec<f64>,
    /// Expected coverage probability at each level.
    pub ecp: Vec<f64>,
    /// Area between the coverage curve and the diagonal.
    pub atc: f64,
    /// Kolmogorov-Smirnov p-value for uniformity of the coverage ranks.
    pub ks_p: f64,
    /// Per-case coverage ranks.
    pub ranks: Vec<f64>,
}

impl TarpResult {
    pub fn max_deviation(&self) -> f64 {
        self.alpha
            .iter()
            .zip(&self.ecp)
            .map(|(a, e)| (a - e).abs())
            .fold(0.0, f64::max)
    }
}

pub const DEFAULT_LEVELS: usize = 100;

/// `samples[i]` are posterior draws (rows) for case `i`, `truth` holds the
/// generating parameters one case per row.
pub fn tarp(samples: &[Array2<f64>], truth: ArrayView2<f64>, seed_: u64) -> Result<TarpResult> {
    let n = samples.len();
    if n < 2 || truth.nrows() != n {
        return Err(Error::Diagnostic(format!(
            "need at least 2 cases with one truth each (got {n} cases, {} truths)",
            truth.nrows()
        )));
    }
    let d = truth.ncols();
    for (i, s) in samples.iter().enumerate() {
        if s.nrows() < 2 || s.ncols() != d {
            return Err(Error::Diagnostic(format!(
                "case {i}: need at least 2 draws of width {d}"
            )));
        }
    }
    let pooled = ndarray::concatenate(
        Axis(0),
        &samples.iter().map(|s| s.view()).collect::<Vec<_>>(),
    )
    .map_err(|e| Error::shape(e.to_string()))?;
    let sd = pooled.std_axis(Axis(0), 0.0);
    if let Some(j) = sd.iter().position(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::Diagnostic(format!(
            "posterior samples have zero or non-finite spread in dimension {j}"
        )));
    }
    let mut rng = seed::rng(seed_);
    let mut ranks = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        let z = s / &sd;
        let t = &truth.row(i) / &sd;
        let lo = z.fold_axis(Axis(0), f64::INFINITY, |a, &b| a.min(b));
        let hi = z.fold_axis(Axis(0), f64::NEG_INFINITY, |a, &b| a.max(b));
        let r: Array1<f64> = lo
            .iter()
            .zip(&hi)
            .map(|(&l, &h)| if h > l { rng.random_range(l..h) } else { l })
            .collect();
        let dist = |v: ndarray::ArrayView1<f64>| (&v - &r).mapv(|x| x * x).sum();
        let d_star = dist(t.view());
        let inside = z
            .rows()
            .into_iter()
            .filter(|row| dist(*row) < d_star)
            .count();
        ranks.push(inside as f64 / s.nrows() as f64);
    }
    let m = DEFAULT_LEVELS;
    let alpha: Vec<f64> = (0..=m).map(|k| k as f64 / m as f64).collect();
    let ecp: Vec<f64> = alpha
        .iter()
        .map(|&a| ranks.iter().filter(|&&f| f < a).count() as f64 / n as f64)
        .collect();
    Ok(TarpResult {
        atc: area_to_diagonal(&alpha, &ecp),
        ks_p: ks_uniform(&ranks),
        alpha,
        ecp,
        ranks,
    })
}

/// Trapezoidal `int |ecp(a) - a| da`.
pub fn area_to_diagonal(alpha: &[f64], ecp: &[f64]) -> f64 {
    alpha
        .windows(2)
        .zip(ecp.windows(2))
        .map(|(a, e)| 0.5 * (a[1] - a[0]) * ((e[0] - a[0]).abs() + (e[1] - a[1]).abs()))
        .sum()
}

/// One-sample KS test against U(0, 1), asymptotic p-value.
pub fn ks_uniform(values: &[f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return 1.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let nf = n as f64;
    let d = v
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let x = x.clamp(0.0, 1.0);
            ((i + 1) as f64 / nf - x).max(x - i as f64 / nf)
        })
        .fold(0.0, f64::max);
    let sn = nf.sqrt();
    kolmogorov_q((sn + 0.12 + 0.11 / sn) * d)
}

/// `P(K > lambda)` for the Kolmogorov distribution.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = 2.0 * (-1f64).powi(k - 1) * (-2.0 * kf * kf * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn diagonal_has_zero_area() {
        let a: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
        assert_eq!(area_to_diagonal(&a, &a), 0.0);
        let ones = vec![1.0; 11];
        assert!((area_to_diagonal(&a, &ones) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kolmogorov_tail_values() {
        // P(K > 1.36) is the usual 5% critical value
        assert!((kolmogorov_q(1.358) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_q(1.628) - 0.01).abs() < 1e-3);
    }

    #[test]
    fn draws_at_truth_are_overconfident() {
        let mut rng = seed::rng(4);
        let truth = Array2::from_shape_fn((50, 2), |_| StandardNormal.sample(&mut rng));
        let samples: Vec<Array2<f64>> = truth
            .rows()
            .into_iter()
            .map(|r| {
                r.insert_axis(Axis(0))
                    .broadcast((20, 2))
                    .unwrap()
                    .to_owned()
            })
            .collect();
        let res = tarp(&samples, truth.view(), 1).unwrap();
        assert!(res.ranks.iter().all(|&f| f == 0.0));
        assert!(res.ecp[1..].iter().all(|&e| e == 1.0));
        assert_eq!(res.ecp[0], 0.0);
    }

    #[test]
    fn zero_spread_is_an_error() {
        let s = vec![Array2::zeros((5, 1)), Array2::zeros((5, 1))];
        let t = array![[0.0], [0.0]];
        assert!(matches!(tarp(&s, t.view(), 0), Err(Error::Diagnostic(_))));
    }

    #[test]
    fn exact_posterior_is_calibrated() {
        // theta ~ N(0, I_2), x = theta + N(0, 0.5^2 I); posterior N(0.8 x, 0.2 I)
        let mut rng = seed::rng(11);
        let (n_cases, n_draws) = (500, 200);
        let mut truth = Array2::zeros((n_cases, 2));
        let mut samples = Vec::new();
        for i in 0..n_cases {
            let mut s = Array2::zeros((n_draws, 2));
            for j in 0..2 {
                let th: f64 = StandardNormal.sample(&mut rng);
                let e: f64 = StandardNormal.sample(&mut rng);
                let x = th + 0.5 * e;
                truth[[i, j]] = th;
                for k in 0..n_draws {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    s[[k, j]] = 0.8 * x + 0.2f64.sqrt() * z;
                }
            }
            samples.push(s);
        }
        let res = tarp(&samples, truth.view(), 3).unwrap();
        assert!(res.max_deviation() < 0.1, "{}", res.max_deviation());
        assert!(res.atc < 0.05);
    }
}
