//! Two-level hierarchical models: global parameters, exchangeable site-local
//! parameters drawn conditionally on the globals, and a per-site simulator.
//!
//! Parameters live in a constrained space (the prior support). Flows work in
//! an unconstrained space reached through [`Support::to_unconstrained`].

use std::fmt;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};
use crate::seed::{self, stream};

/// Relative distance from an interval endpoint below which constrained
/// values are pulled inside before the logit.
pub const BOUNDARY_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Support {
    Real,
    Positive,
    Interval { low: f64, high: f64 },
}

impl Support {
    pub fn contains(&self, x: f64) -> bool {
        match *self {
            Support::Real => x.is_finite(),
            Support::Positive => x.is_finite() && x > 0.0,
            Support::Interval { low, high } => x >= low && x <= high,
        }
    }

    /// Constrained value to the real line: identity, log, or scaled logit.
    pub fn to_unconstrained(&self, x: f64) -> Result<f64> {
        match *self {
            Support::Real => {
                if x.is_finite() {
                    Ok(x)
                } else {
                    Err(Error::domain(format!("non-finite real parameter {x}")))
                }
            }
            Support::Positive => {
                if x > 0.0 && x.is_finite() {
                    Ok(x.ln())
                } else {
                    Err(Error::domain(format!("{x} is not in (0, inf)")))
                }
            }
            Support::Interval { low, high } => {
                if !(x > low && x < high) {
                    return Err(Error::domain(format!(
                        "{x} is not in the open interval ({low}, {high})"
                    )));
                }
                let z = ((x - low) / (high - low)).clamp(BOUNDARY_EPS, 1.0 - BOUNDARY_EPS);
                Ok((z / (1.0 - z)).ln())
            }
        }
    }

    pub fn to_constrained(&self, u: f64) -> f64 {
        match *self {
            Support::Real => u,
            Support::Positive => u.exp(),
            Support::Interval { low, high } => low + (high - low) * sigmoid(u),
        }
    }

    /// `log |d to_constrained(u) / du|`.
    pub fn log_det_jacobian(&self, u: f64) -> f64 {
        match *self {
            Support::Real => 0.0,
            Support::Positive => u,
            Support::Interval { low, high } => (high - low).ln() - softplus(-u) - softplus(u),
        }
    }
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub fn normal_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// Draw from `N(mean, sd^2)` truncated to `[low, high]` by inverting the CDF
/// at `u ~ Uniform(0, 1)`.
pub fn truncated_normal_from_uniform(mean: f64, sd: f64, low: f64, high: f64, u: f64) -> f64 {
    let alpha = (low - mean) / sd;
    let beta = (high - mean) / sd;
    // Work in whichever tail keeps the CDF values away from 1.
    let (a, b, sign) = if alpha > 0.0 {
        (-beta, -alpha, -1.0)
    } else {
        (alpha, beta, 1.0)
    };
    let pa = normal_cdf(a);
    let pb = normal_cdf(b);
    let p = pa + u * (pb - pa);
    let z = normal_quantile(p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)).clamp(a, b);
    (mean + sign * sd * z).clamp(low, high)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Prior {
    Normal { mean: f64, sd: f64 },
    HalfNormal { scale: f64 },
    LogNormal { mu: f64, sigma: f64 },
    Uniform { low: f64, high: f64 },
}

impl Prior {
    pub fn support(&self) -> Support {
        match *self {
            Prior::Normal { .. } => Support::Real,
            Prior::HalfNormal { .. } | Prior::LogNormal { .. } => Support::Positive,
            Prior::Uniform { low, high } => Support::Interval { low, high },
        }
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Prior::Normal { mean, sd } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + sd * z
            }
            Prior::HalfNormal { scale } => loop {
                let z: f64 = StandardNormal.sample(rng);
                if z != 0.0 {
                    break scale * z.abs();
                }
            },
            Prior::LogNormal { mu, sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                (mu + sigma * z).exp()
            }
            Prior::Uniform { low, high } => loop {
                // open interval: endpoints have no unconstrained image
                let x = low + (high - low) * rng.random::<f64>();
                if x > low && x < high {
                    break x;
                }
            },
        }
    }

    pub fn log_density(&self, x: f64) -> f64 {
        use std::f64::consts::PI;
        match *self {
            Prior::Normal { mean, sd } => {
                let z = (x - mean) / sd;
                -0.5 * z * z - sd.ln() - 0.5 * (2.0 * PI).ln()
            }
            Prior::HalfNormal { scale } => {
                if x < 0.0 {
                    return f64::NEG_INFINITY;
                }
                let z = x / scale;
                -0.5 * z * z - scale.ln() + 0.5 * (2.0 / PI).ln()
            }
            Prior::LogNormal { mu, sigma } => {
                if x <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                let z = (x.ln() - mu) / sigma;
                -0.5 * z * z - (x * sigma).ln() - 0.5 * (2.0 * PI).ln()
            }
            Prior::Uniform { low, high } => {
                if x < low || x > high {
                    f64::NEG_INFINITY
                } else {
                    -(high - low).ln()
                }
            }
        }
    }
}

/// Conditional prior of one site's local parameters given the globals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LocalPrior {
    /// Local components independent of the globals, one prior per component.
    Independent(Vec<Prior>),
    /// Component `j` is `TruncNorm(theta_g[mean_index[j]], theta_g[sd_index[j]], low, high)`.
    TruncatedNormal {
        mean_index: Vec<usize>,
        sd_index: Vec<usize>,
        low: f64,
        high: f64,
    },
}

impl LocalPrior {
    fn dim(&self) -> usize {
        match self {
            LocalPrior::Independent(p) => p.len(),
            LocalPrior::TruncatedNormal { mean_index, .. } => mean_index.len(),
        }
    }

    fn support(&self, j: usize) -> Support {
        match self {
            LocalPrior::Independent(p) => p[j].support(),
            LocalPrior::TruncatedNormal { low, high, .. } => Support::Interval {
                low: *low,
                high: *high,
            },
        }
    }

    fn sample<R: rand::Rng + ?Sized>(&self, theta_g: &[f64], rng: &mut R) -> Vec<f64> {
        match self {
            LocalPrior::Independent(priors) => priors.iter().map(|p| p.sample(rng)).collect(),
            LocalPrior::TruncatedNormal {
                mean_index,
                sd_index,
                low,
                high,
            } => mean_index
                .iter()
                .zip(sd_index)
                .map(|(&m, &s)| loop {
                    let x = truncated_normal_from_uniform(
                        theta_g[m],
                        theta_g[s],
                        *low,
                        *high,
                        rng.random::<f64>(),
                    );
                    if x > *low && x < *high {
                        break x;
                    }
                })
                .collect(),
        }
    }

    pub fn log_density(&self, theta_g: &[f64], eta_s: &[f64]) -> f64 {
        match self {
            LocalPrior::Independent(priors) => priors
                .iter()
                .zip(eta_s)
                .map(|(p, &x)| p.log_density(x))
                .sum(),
            LocalPrior::TruncatedNormal {
                mean_index,
                sd_index,
                low,
                high,
            } => mean_index
                .iter()
                .zip(sd_index)
                .zip(eta_s)
                .map(|((&m, &s), &x)| {
                    if x < *low || x > *high {
                        return f64::NEG_INFINITY;
                    }
                    let (mu, sd) = (theta_g[m], theta_g[s]);
                    let mass = normal_cdf((high - mu) / sd) - normal_cdf((low - mu) / sd);
                    Prior::Normal { mean: mu, sd }.log_density(x) - mass.ln()
                })
                .sum(),
        }
    }
}

/// A named block of parameters or observations with a shared support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub dim: usize,
}

impl Variable {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Variable {
            name: name.into(),
            dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ObservationKind {
    /// A fixed-length vector per site.
    Fixed { dim: usize },
    /// One scalar per observation time; times are drawn i.i.d. uniform on
    /// `[0, horizon]` and sorted.
    Functional { n_points: usize, horizon: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSpec {
    pub variable: Variable,
    pub kind: ObservationKind,
    /// Count-valued outputs are modelled as `log1p(y)` by the flows.
    pub counts: bool,
}

impl ObservationSpec {
    pub fn dim(&self) -> usize {
        match self.kind {
            ObservationKind::Fixed { dim } => dim,
            ObservationKind::Functional { n_points, .. } => n_points,
        }
    }

    pub fn n_points(&self) -> usize {
        match self.kind {
            ObservationKind::Fixed { .. } => 0,
            ObservationKind::Functional { n_points, .. } => n_points,
        }
    }

    pub fn is_functional(&self) -> bool {
        matches!(self.kind, ObservationKind::Functional { .. })
    }

    pub fn to_unconstrained(&self, y: f64) -> f64 {
        if self.counts {
            y.max(0.0).ln_1p()
        } else {
            y
        }
    }

    pub fn to_constrained(&self, u: f64) -> f64 {
        if self.counts {
            u.exp_m1().round().max(0.0)
        } else {
            u
        }
    }
}

/// Stochastic per-site forward model. Implementations must be pure in all
/// arguments, including the seed.
pub trait SiteSimulator: Send + Sync {
    fn simulate(
        &self,
        theta_g: &[f64],
        eta_s: &[f64],
        schedule: &[f64],
        seed: u64,
    ) -> Result<Vec<f64>>;
}

impl<F> SiteSimulator for F
where
    F: Fn(&[f64], &[f64], &[f64], u64) -> Result<Vec<f64>> + Send + Sync,
{
    fn simulate(
        &self,
        theta_g: &[f64],
        eta_s: &[f64],
        schedule: &[f64],
        seed: u64,
    ) -> Result<Vec<f64>> {
        self(theta_g, eta_s, schedule, seed)
    }
}

/// One joint prior draw: the globals and `n_sites` rows of local parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterDraw {
    pub theta_g: Vec<f64>,
    pub eta: Vec<Vec<f64>>,
}

#[derive(Clone)]
pub struct HierarchicalModel {
    pub name: String,
    pub globals: Vec<Variable>,
    pub global_prior: Vec<Prior>,
    pub locals: Vec<Variable>,
    pub local_prior: LocalPrior,
    pub observation: ObservationSpec,
    pub simulator: Arc<dyn SiteSimulator>,
}

impl fmt::Debug for HierarchicalModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HierarchicalModel")
            .field("name", &self.name)
            .field("d_g", &self.d_g())
            .field("d_l", &self.d_l())
            .field("d_y", &self.d_y())
            .finish()
    }
}

impl HierarchicalModel {
    pub fn new(
        name: impl Into<String>,
        globals: Vec<Variable>,
        global_prior: Vec<Prior>,
        locals: Vec<Variable>,
        local_prior: LocalPrior,
        observation: ObservationSpec,
        simulator: Arc<dyn SiteSimulator>,
    ) -> Result<Self> {
        let model = HierarchicalModel {
            name: name.into(),
            globals,
            global_prior,
            locals,
            local_prior,
            observation,
            simulator,
        };
        let d_g: usize = model.globals.iter().map(|v| v.dim).sum();
        let d_l: usize = model.locals.iter().map(|v| v.dim).sum();
        if d_g != model.global_prior.len() {
            return Err(Error::shape(format!(
                "{} global components but {} priors",
                d_g,
                model.global_prior.len()
            )));
        }
        if d_l != model.local_prior.dim() {
            return Err(Error::shape(format!(
                "{} local components but local prior has {}",
                d_l,
                model.local_prior.dim()
            )));
        }
        Ok(model)
    }

    pub fn d_g(&self) -> usize {
        self.global_prior.len()
    }

    pub fn d_l(&self) -> usize {
        self.local_prior.dim()
    }

    /// Per-site observation width (number of time points for functional tasks).
    pub fn d_y(&self) -> usize {
        self.observation.dim()
    }

    /// Total parameter dimension `d_g + n_sites * d_l`.
    pub fn param_dim(&self, n_sites: usize) -> usize {
        self.d_g() + n_sites * self.d_l()
    }

    pub fn global_support(&self, j: usize) -> Support {
        self.global_prior[j].support()
    }

    pub fn local_support(&self, j: usize) -> Support {
        self.local_prior.support(j)
    }

    pub fn sample_globals(&self, seed: u64) -> Vec<f64> {
        let mut rng = seed::rng_for(seed, &[stream::PRIOR]);
        self.global_prior
            .iter()
            .map(|p| p.sample(&mut rng))
            .collect()
    }

    /// Local parameters of one site; the seed fully determines the draw.
    pub fn sample_local(&self, theta_g: &[f64], site_seed: u64) -> Vec<f64> {
        let mut rng = seed::rng(site_seed);
        self.local_prior.sample(theta_g, &mut rng)
    }

    pub fn sample_prior(&self, n_sites: usize, seed: u64) -> Result<ParameterDraw> {
        if n_sites == 0 {
            return Err(Error::domain("n_sites must be at least 1"));
        }
        let theta_g = self.sample_globals(seed);
        let eta = (0..n_sites)
            .map(|s| self.sample_local(&theta_g, seed::derive(seed, &[stream::PRIOR, s as u64])))
            .collect();
        Ok(ParameterDraw { theta_g, eta })
    }

    /// Observation times for one site (empty for fixed-dimension tasks).
    pub fn sample_schedule(&self, seed: u64) -> Vec<f64> {
        match self.observation.kind {
            ObservationKind::Fixed { .. } => Vec::new(),
            ObservationKind::Functional { n_points, horizon } => {
                sample_schedule(n_points, horizon, seed).expect("n_points >= 1 by construction")
            }
        }
    }

    pub fn check_support(&self, theta_g: &[f64], eta_s: &[f64]) -> Result<()> {
        if theta_g.len() != self.d_g() || eta_s.len() != self.d_l() {
            return Err(Error::shape(format!(
                "expected ({}, {}) parameters, got ({}, {})",
                self.d_g(),
                self.d_l(),
                theta_g.len(),
                eta_s.len()
            )));
        }
        for (j, &x) in theta_g.iter().enumerate() {
            if !self.global_support(j).contains(x) {
                return Err(Error::domain(format!(
                    "global component {j} = {x} outside {:?}",
                    self.global_support(j)
                )));
            }
        }
        for (j, &x) in eta_s.iter().enumerate() {
            if !self.local_support(j).contains(x) {
                return Err(Error::domain(format!(
                    "local component {j} = {x} outside {:?}",
                    self.local_support(j)
                )));
            }
        }
        Ok(())
    }

    pub fn simulate_site(
        &self,
        theta_g: &[f64],
        eta_s: &[f64],
        schedule: &[f64],
        seed: u64,
    ) -> Result<Vec<f64>> {
        self.check_support(theta_g, eta_s)?;
        if let ObservationKind::Functional { horizon, .. } = self.observation.kind {
            if schedule.is_empty() || schedule.iter().any(|&t| !(0.0..=horizon).contains(&t)) {
                return Err(Error::domain(format!(
                    "schedule must be non-empty and inside [0, {horizon}]"
                )));
            }
        }
        self.simulator.simulate(theta_g, eta_s, schedule, seed)
    }

    pub fn globals_to_unconstrained(&self, theta_g: &[f64]) -> Result<Vec<f64>> {
        theta_g
            .iter()
            .enumerate()
            .map(|(j, &x)| self.global_support(j).to_unconstrained(x))
            .collect()
    }

    pub fn locals_to_unconstrained(&self, eta_s: &[f64]) -> Result<Vec<f64>> {
        eta_s
            .iter()
            .enumerate()
            .map(|(j, &x)| self.local_support(j).to_unconstrained(x))
            .collect()
    }

    /// Flatten `(theta_g, eta_1, ..., eta_n)` into the unconstrained layout.
    pub fn to_unconstrained(&self, theta_g: &[f64], eta: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut out = self.globals_to_unconstrained(theta_g)?;
        for eta_s in eta {
            if eta_s.len() != self.d_l() {
                return Err(Error::shape(format!(
                    "local block of length {} (expected {})",
                    eta_s.len(),
                    self.d_l()
                )));
            }
            out.extend(self.locals_to_unconstrained(eta_s)?);
        }
        Ok(out)
    }

    pub fn to_constrained(&self, u: &[f64]) -> Result<ParameterDraw> {
        let (d_g, d_l) = (self.d_g(), self.d_l());
        if u.len() < d_g || (u.len() - d_g) % d_l.max(1) != 0 {
            return Err(Error::shape(format!(
                "unconstrained vector of length {} does not fit d_g = {d_g}, d_l = {d_l}",
                u.len()
            )));
        }
        let theta_g = (0..d_g)
            .map(|j| self.global_support(j).to_constrained(u[j]))
            .collect();
        let eta = u[d_g..]
            .chunks(d_l)
            .map(|c| {
                c.iter()
                    .enumerate()
                    .map(|(j, &v)| self.local_support(j).to_constrained(v))
                    .collect()
            })
            .collect();
        Ok(ParameterDraw { theta_g, eta })
    }

    /// Log-determinant of the Jacobian of `to_constrained` at `u`.
    pub fn log_det_jacobian(&self, u: &[f64]) -> f64 {
        let (d_g, d_l) = (self.d_g(), self.d_l());
        let mut total = 0.0;
        for (j, &v) in u.iter().enumerate() {
            total += if j < d_g {
                self.global_support(j).log_det_jacobian(v)
            } else {
                self.local_support((j - d_g) % d_l).log_det_jacobian(v)
            };
        }
        total
    }

    pub fn log_prior(&self, draw: &ParameterDraw) -> f64 {
        let g: f64 = self
            .global_prior
            .iter()
            .zip(&draw.theta_g)
            .map(|(p, &x)| p.log_density(x))
            .sum();
        g + draw
            .eta
            .iter()
            .map(|e| self.local_prior.log_density(&draw.theta_g, e))
            .sum::<f64>()
    }
}

/// Sorted i.i.d. `Uniform(0, horizon)` observation times.
pub fn sample_schedule(n_points: usize, horizon: f64, seed: u64) -> Result<Vec<f64>> {
    if n_points == 0 {
        return Err(Error::domain("a schedule needs at least one point"));
    }
    let mut rng = seed::rng_for(seed, &[stream::SCHEDULE]);
    let mut times: Vec<f64> = (0..n_points)
        .map(|_| horizon * rng.random::<f64>())
        .collect();
    times.sort_by(f64::total_cmp);
    Ok(times)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn log_transform_of_one_is_zero() {
        assert_eq!(Support::Positive.to_unconstrained(1.0).unwrap(), 0.0);
    }

    #[test]
    fn centred_logit_of_midpoint_is_zero() {
        let s = Support::Interval {
            low: -10.0,
            high: 10.0,
        };
        assert!(s.to_unconstrained(0.0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn interval_endpoints_are_rejected() {
        let s = Support::Interval {
            low: -10.0,
            high: 10.0,
        };
        assert!(s.to_unconstrained(-10.0).is_err());
        assert!(s.to_unconstrained(10.0).is_err());
        assert!(Support::Positive.to_unconstrained(0.0).is_err());
        // just inside the endpoint is clamped, not rejected
        assert!(s.to_unconstrained(10.0 - 1e-14).unwrap().is_finite());
    }

    #[test]
    fn truncated_normal_respects_bounds_in_both_tails() {
        for &(m, sd) in &[(0.0, 1.0), (9.9, 0.01), (-9.99, 5.0), (1.0, 3.0)] {
            for k in 1..100 {
                let u = k as f64 / 100.0;
                let x = truncated_normal_from_uniform(m, sd, -10.0, 10.0, u);
                assert!((-10.0..=10.0).contains(&x), "{x}");
            }
        }
        // median of an untruncated-in-practice draw is the mean
        let x = truncated_normal_from_uniform(0.5, 0.01, -10.0, 10.0, 0.5);
        assert!((x - 0.5).abs() < 1e-9);
    }

    fn finite_difference_log_derivative(s: Support, u: f64) -> f64 {
        let h = 1e-6;
        let d = (s.to_constrained(u + h) - s.to_constrained(u - h)) / (2.0 * h);
        d.abs().ln()
    }

    proptest! {
        #[test]
        fn interval_round_trip(low in -5.0f64..0.0, width in 0.1f64..20.0, z in 0.001f64..0.999) {
            let s = Support::Interval { low, high: low + width };
            let x = low + z * width;
            let back = s.to_constrained(s.to_unconstrained(x).unwrap());
            prop_assert!((back - x).abs() <= 1e-10 * x.abs().max(1.0));
        }

        #[test]
        fn positive_round_trip(x in 1e-6f64..1e6) {
            let back = Support::Positive.to_constrained(Support::Positive.to_unconstrained(x).unwrap());
            prop_assert!((back - x).abs() <= 1e-10 * x);
        }

        #[test]
        fn log_det_matches_finite_differences(u in -8.0f64..8.0) {
            for s in [Support::Real, Support::Positive, Support::Interval { low: 0.1, high: 3.0 }] {
                let fd = finite_difference_log_derivative(s, u);
                let analytic = s.log_det_jacobian(u);
                prop_assert!((fd - analytic).abs() <= 1e-5 * analytic.abs().max(1.0),
                    "{:?} u={} fd={} analytic={}", s, u, fd, analytic);
            }
        }
    }

    #[test]
    fn schedule_is_sorted_and_in_range() {
        let t = sample_schedule(50, 730.0, 3).unwrap();
        assert!(t.windows(2).all(|w| w[0] <= w[1]));
        assert!(t.iter().all(|&x| (0.0..=730.0).contains(&x)));
        assert_eq!(sample_schedule(1, 10.0, 0).unwrap().len(), 1);
        assert!(sample_schedule(0, 10.0, 0).is_err());
    }

    #[test]
    fn schedule_mean_is_half_horizon() {
        // Monte Carlo: mean of Uniform(0, T) is T/2 with sd T/sqrt(12 n)
        let t = sample_schedule(100_000, 730.0, 11).unwrap();
        let mean = t.iter().sum::<f64>() / t.len() as f64;
        assert!((mean - 365.0).abs() < 0.01 * 365.0);
    }
}
