//! Closed-form check of the posterior factorisation
//! `p(theta | y_1..n) ∝ p(theta)^(1-n) prod_s p(theta | y_s)`
//! on a conjugate 1-D Gaussian.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::seed;

/// `theta ~ N(mu0, tau0^2)`, `y_s = theta + c + e_s`, `e_s ~ N(0, sigma^2)`
/// and a site-shared offset `c ~ N(0, shared_sd^2)`. With `shared_sd = 0`
/// sites are conditionally i.i.d.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConjugateGaussian {
    pub mu0: f64,
    pub tau0: f64,
    pub sigma: f64,
    pub shared_sd: f64,
}

impl Default for ConjugateGaussian {
    fn default() -> Self {
        ConjugateGaussian {
            mu0: 0.5,
            tau0: 1.5,
            sigma: 0.8,
            shared_sd: 0.0,
        }
    }
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((x - mean).powi(2) / var + (2.0 * std::f64::consts::PI * var).ln())
}

/// Gaussian posterior `(mean, var)` from a prior and `n` averaged
/// observations with per-mean variance `lik_var`.
fn update(mu0: f64, var0: f64, ybar: f64, lik_var: f64) -> (f64, f64) {
    let prec = 1.0 / var0 + 1.0 / lik_var;
    ((mu0 / var0 + ybar / lik_var) / prec, 1.0 / prec)
}

impl ConjugateGaussian {
    pub fn simulate(&self, n_s: usize, seed_: u64) -> (f64, Vec<f64>) {
        let mut rng = seed::rng(seed_);
        let std = |sd: f64| Normal::new(0.0, sd).expect("finite sd");
        let theta = self.mu0 + std(self.tau0).sample(&mut rng);
        let c = if self.shared_sd > 0.0 {
            std(self.shared_sd).sample(&mut rng)
        } else {
            0.0
        };
        let y = (0..n_s)
            .map(|_| theta + c + std(self.sigma).sample(&mut rng))
            .collect();
        (theta, y)
    }

    /// Exact joint posterior log density (normalised) at `theta`.
    pub fn joint_log_posterior(&self, y: &[f64], theta: f64) -> f64 {
        let n = y.len() as f64;
        let ybar = y.iter().sum::<f64>() / n;
        // y_bar | theta ~ N(theta, sigma^2 / n + shared_sd^2)
        let lik_var = self.sigma.powi(2) / n + self.shared_sd.powi(2);
        let (m, v) = update(self.mu0, self.tau0.powi(2), ybar, lik_var);
        log_normal(theta, m, v)
    }

    /// Exact single-site posterior log density.
    pub fn site_log_posterior(&self, y_s: f64, theta: f64) -> f64 {
        let lik_var = self.sigma.powi(2) + self.shared_sd.powi(2);
        let (m, v) = update(self.mu0, self.tau0.powi(2), y_s, lik_var);
        log_normal(theta, m, v)
    }

    /// `(1 - n) log p(theta) + sum_s log p(theta | y_s)`, unnormalised.
    pub fn factorised_log_posterior(&self, y: &[f64], theta: f64) -> f64 {
        let prior = log_normal(theta, self.mu0, self.tau0.powi(2));
        (1.0 - y.len() as f64) * prior
            + y.iter()
                .map(|&ys| self.site_log_posterior(ys, theta))
                .sum::<f64>()
    }

    /// Evaluation grid `mu0 ± 5 tau0`.
    pub fn grid(&self, points: usize) -> Vec<f64> {
        let (lo, hi) = (self.mu0 - 5.0 * self.tau0, self.mu0 + 5.0 * self.tau0);
        (0..points)
            .map(|k| lo + (hi - lo) * k as f64 / (points.max(2) - 1) as f64)
            .collect()
    }

    /// Max absolute difference of the two log densities after each is
    /// centred by its grid mean.
    pub fn discrepancy(&self, y: &[f64], grid: &[f64]) -> f64 {
        let centred = |f: &dyn Fn(f64) -> f64| {
            let v: Vec<f64> = grid.iter().map(|&t| f(t)).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.into_iter().map(move |x| x - m).collect::<Vec<_>>()
        };
        let a = centred(&|t| self.joint_log_posterior(y, t));
        let b = centred(&|t| self.factorised_log_posterior(y, t));
        a.iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }
}

/// Discrepancy of the factorised posterior on a conditionally i.i.d.
/// conjugate model with `n_s` sites.
pub fn factorisation_oracle(n_s: usize, grid_points: usize, seed_: u64) -> f64 {
    let model = ConjugateGaussian::default();
    let (_, y) = model.simulate(n_s, seed_);
    model.discrepancy(&y, &model.grid(grid_points))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_site_is_identical() {
        for s in 0..5 {
            assert!(factorisation_oracle(1, 1001, s) < 1e-12);
        }
    }

    #[test]
    fn iid_sites_factorise() {
        for s in 0..5 {
            assert!(factorisation_oracle(5, 1001, s) < 1e-8);
        }
    }

    #[test]
    fn shared_noise_breaks_factorisation() {
        let m = ConjugateGaussian {
            shared_sd: 1.0,
            ..Default::default()
        };
        let (_, y) = m.simulate(5, 3);
        assert!(m.discrepancy(&y, &m.grid(1001)) > 1e-1);
    }

    #[test]
    fn grid_integral_is_one() {
        let m = ConjugateGaussian::default();
        let (_, y) = m.simulate(4, 9);
        let g = m.grid(4001);
        let h = g[1] - g[0];
        let total: f64 = g
            .iter()
            .map(|&t| m.joint_log_posterior(&y, t).exp() * h)
            .sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
}
