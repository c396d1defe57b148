//! Hierarchical benchmark tasks and the seasonal SEIR model.

use std::f64::consts::{FRAC_PI_2, PI, SQRT_2};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Binomial, Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    HierarchicalModel, LocalPrior, ObservationKind, ObservationSpec, Prior, Variable,
};
use crate::ode::{solve_dense, SolverConfig};
use crate::seed::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    GaussianLinear,
    GaussianLinearUniform,
    GaussianMixture,
    Sir,
    Slcp,
    TwoMoons,
    Seir,
}

impl TaskId {
    pub const ALL: [TaskId; 7] = [
        TaskId::GaussianLinear,
        TaskId::GaussianLinearUniform,
        TaskId::GaussianMixture,
        TaskId::Sir,
        TaskId::Slcp,
        TaskId::TwoMoons,
        TaskId::Seir,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::GaussianLinear => "gaussian_linear",
            TaskId::GaussianLinearUniform => "gaussian_linear_uniform",
            TaskId::GaussianMixture => "gaussian_mixture",
            TaskId::Sir => "sir",
            TaskId::Slcp => "slcp",
            TaskId::TwoMoons => "two_moons",
            TaskId::Seir => "seir",
        }
    }

    pub fn registry() -> String {
        TaskId::ALL.map(|t| t.name()).join(", ")
    }

    /// `(d_g, d_l)`.
    pub fn dims(self) -> (usize, usize) {
        match self {
            TaskId::GaussianLinear | TaskId::GaussianLinearUniform => (1, 5),
            TaskId::GaussianMixture => (2, 1),
            TaskId::Sir => (1, 1),
            TaskId::Slcp => (3, 2),
            TaskId::TwoMoons => (4, 2),
            TaskId::Seir => (1, 1),
        }
    }

    pub fn model(self) -> HierarchicalModel {
        build(self).expect("built-in task definitions are consistent")
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        TaskId::ALL
            .into_iter()
            .find(|t| t.name() == key)
            .ok_or_else(|| Error::UnknownTask {
                name: s.to_string(),
                registry: TaskId::registry(),
            })
    }
}

pub mod sir {
    pub const POPULATION: f64 = 1e6;
    pub const I0: f64 = 1.0;
    pub const N_COUNTS: u64 = 1000;
    pub const N_TIMES: usize = 10;
    pub const HORIZON: f64 = 160.0;

    pub fn times() -> Vec<f64> {
        (0..N_TIMES)
            .map(|k| HORIZON * k as f64 / (N_TIMES - 1) as f64)
            .collect()
    }
}

pub mod seir {
    pub const ALPHA: f64 = 1.0 / 5.0;
    pub const GAMMA: f64 = 1.0 / 7.0;
    pub const PHI: f64 = 0.0;
    pub const POPULATION: f64 = 1e5;
    pub const E0: f64 = 10.0;
    pub const I0: f64 = 0.0;
    pub const HORIZON: f64 = 730.0;
    pub const N_POINTS: usize = 12;
}

/// Number of bivariate draws per SLCP site.
pub const SLCP_DRAWS: usize = 4;

/// Tolerances for the epidemic simulators (tighter than the flow solver so
/// conservation holds well below the observation noise).
pub fn simulator_solver() -> SolverConfig {
    SolverConfig {
        rtol: 1e-9,
        atol: 1e-9,
        max_steps: 100_000,
        ..SolverConfig::default()
    }
}

fn sim_err(task: TaskId, message: impl Into<String>) -> Error {
    Error::Simulation {
        task: task.name().into(),
        message: message.into(),
    }
}

pub fn task_gaussian_linear(sigma: f64, mu: &[f64], seed: u64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::domain(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let mut rng = seed::rng_for(seed, &[stream::SIMULATE]);
    Ok(mu
        .iter()
        .map(|&m| {
            let z: f64 = StandardNormal.sample(&mut rng);
            m + sigma * z
        })
        .collect())
}

pub fn task_gaussian_mixture(eta: f64, seed: u64) -> Result<Vec<f64>> {
    if !(-10.0..=10.0).contains(&eta) {
        return Err(Error::domain(format!("eta = {eta} outside [-10, 10]")));
    }
    let mut rng = seed::rng_for(seed, &[stream::SIMULATE]);
    let sd = if rng.random::<bool>() { 1.0 } else { 0.1 };
    let z: f64 = StandardNormal.sample(&mut rng);
    Ok(vec![eta + sd * z])
}

/// Right-hand side of the SIR system in persons.
pub fn sir_rhs(gamma: f64, beta: f64, y: &[f64], dy: &mut [f64]) {
    let (s, i) = (y[0], y[1]);
    let infection = beta * s * i / sir::POPULATION;
    dy[0] = -infection;
    dy[1] = infection - gamma * i;
    dy[2] = gamma * i;
}

/// Deterministic SIR trajectory `(S, I, R)` at the given times.
pub fn sir_trajectory(gamma: f64, beta: f64, times: &[f64]) -> Result<Vec<Vec<f64>>> {
    let y0 = [sir::POPULATION - sir::I0, sir::I0, 0.0];
    solve_dense(
        |_, y, dy| sir_rhs(gamma, beta, y, dy),
        0.0,
        &y0,
        times,
        &simulator_solver(),
    )
    .map_err(|e| sim_err(TaskId::Sir, e.to_string()))
}

pub fn task_sir(gamma: f64, beta: f64, seed: u64) -> Result<Vec<f64>> {
    if !(gamma > 0.0) || !(beta >= 0.0) || !gamma.is_finite() || !beta.is_finite() {
        return Err(Error::domain(format!(
            "SIR rates must be positive, got gamma = {gamma}, beta = {beta}"
        )));
    }
    let traj = sir_trajectory(gamma, beta, &sir::times())?;
    let mut rng = seed::rng_for(seed, &[stream::SIMULATE]);
    traj.iter()
        .map(|state| {
            let p = (state[1] / sir::POPULATION).clamp(0.0, 1.0);
            let b = Binomial::new(sir::N_COUNTS, p)
                .map_err(|e| sim_err(TaskId::Sir, format!("binomial(p = {p}): {e}")))?;
            Ok(b.sample(&mut rng) as f64)
        })
        .collect()
}

/// Lower Cholesky factor `(l11, l21, l22)` of the SLCP covariance.
pub fn slcp_cholesky(s1: f64, s2: f64, rho: f64) -> Result<(f64, f64, f64)> {
    let (a, b) = (s1 * s1, s2 * s2);
    if a <= 0.0 || b <= 0.0 {
        return Err(Error::domain(format!(
            "degenerate SLCP covariance (sigma_1 = {s1}, sigma_2 = {s2})"
        )));
    }
    let r = rho.tanh();
    Ok((a, r * b, b * (1.0 - r * r).sqrt()))
}

pub fn task_slcp(globals: &[f64], means: &[f64], seed: u64) -> Result<Vec<f64>> {
    if globals.len() != 3 || means.len() != 2 {
        return Err(Error::shape(
            "SLCP expects (sigma_1, sigma_2, rho) and (m_0, m_1)",
        ));
    }
    if globals
        .iter()
        .chain(means)
        .any(|x| !(-3.0..=3.0).contains(x))
    {
        return Err(Error::domain("SLCP parameters must lie in [-3, 3]"));
    }
    let (l11, l21, l22) = slcp_cholesky(globals[0], globals[1], globals[2])?;
    let mut rng = seed::rng_for(seed, &[stream::SIMULATE]);
    let mut out = Vec::with_capacity(2 * SLCP_DRAWS);
    for _ in 0..SLCP_DRAWS {
        let z1: f64 = StandardNormal.sample(&mut rng);
        let z2: f64 = StandardNormal.sample(&mut rng);
        out.push(means[0] + l11 * z1);
        out.push(means[1] + l21 * z1 + l22 * z2);
    }
    Ok(out)
}

/// Crescent map applied to the moon point `p`.
pub fn two_moons_map(eta: &[f64], p: [f64; 2]) -> [f64; 2] {
    [
        p[0] - (eta[0] + eta[1]).abs() / SQRT_2,
        p[1] + (-eta[0] + eta[1]) / SQRT_2,
    ]
}

pub fn two_moons_point(a: f64, r: f64) -> [f64; 2] {
    [r * a.cos() + 0.25, r * a.sin()]
}

pub fn task_two_moons(eta: &[f64], seed: u64) -> Result<Vec<f64>> {
    if eta.len() != 2 || eta.iter().any(|x| !(-1.0..=1.0).contains(x)) {
        return Err(Error::domain(
            "two moons local parameters must lie in [-1, 1]^2",
        ));
    }
    let mut rng = seed::rng_for(seed, &[stream::SIMULATE]);
    let a = rng.random_range(-FRAC_PI_2..FRAC_PI_2);
    let r = Normal::new(0.1, 0.01).expect("valid").sample(&mut rng);
    Ok(two_moons_map(eta, two_moons_point(a, r)).to_vec())
}

pub fn seasonal_transmission(beta0: f64, amplitude: f64, t: f64) -> f64 {
    beta0 * (1.0 + amplitude * (2.0 * PI * t / 365.0 - seir::PHI).sin())
}

/// Right-hand side of the seasonal SEIR system `(S, E, I, R)`.
pub fn seir_rhs(beta0: f64, amplitude: f64, t: f64, y: &[f64], dy: &mut [f64]) {
    let (s, e, i) = (y[0], y[1], y[2]);
    let lambda = seasonal_transmission(beta0, amplitude, t) * i / seir::POPULATION;
    dy[0] = -lambda * s;
    dy[1] = lambda * s - seir::ALPHA * e;
    dy[2] = seir::ALPHA * e - seir::GAMMA * i;
    dy[3] = seir::GAMMA * i;
}

/// SEIR states at arbitrary (unsorted) times in `[0, horizon]`.
pub fn seir_trajectory(beta0: f64, amplitude: f64, times: &[f64]) -> Result<Vec<Vec<f64>>> {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let sorted: Vec<f64> = order.iter().map(|&k| times[k]).collect();
    let y0 = [
        seir::POPULATION - seir::E0 - seir::I0,
        seir::E0,
        seir::I0,
        0.0,
    ];
    let states = solve_dense(
        |t, y, dy| seir_rhs(beta0, amplitude, t, y, dy),
        0.0,
        &y0,
        &sorted,
        &simulator_solver(),
    )
    .map_err(|e| sim_err(TaskId::Seir, e.to_string()))?;
    let mut out = vec![Vec::new(); times.len()];
    for (state, &k) in states.into_iter().zip(&order) {
        out[k] = state;
    }
    Ok(out)
}

pub fn task_seir(beta0: f64, amplitude: f64, times: &[f64], seed: u64) -> Result<Vec<f64>> {
    if !(beta0 > 0.0 && beta0.is_finite()) || !(0.0..1.0).contains(&amplitude) {
        return Err(Error::domain(format!(
            "SEIR needs beta0 > 0 and amplitude in [0, 1), got {beta0}, {amplitude}"
        )));
    }
    if times.iter().any(|&t| !(0.0..=seir::HORIZON).contains(&t)) {
        return Err(Error::domain(format!(
            "observation times must lie in [0, {}]",
            seir::HORIZON
        )));
    }
    let states = seir_trajectory(beta0, amplitude, times)?;
    let mut rng = seed::rng_for(seed, &[stream::SIMULATE]);
    states
        .iter()
        .map(|s| {
            let rate = seir::ALPHA * s[1].max(0.0);
            if rate == 0.0 {
                return Ok(0.0);
            }
            let p = Poisson::new(rate)
                .map_err(|e| sim_err(TaskId::Seir, format!("poisson({rate}): {e}")))?;
            Ok(p.sample(&mut rng))
        })
        .collect()
}

fn build(task: TaskId) -> Result<HierarchicalModel> {
    let fixed = |name: &str, dim: usize, counts: bool| ObservationSpec {
        variable: Variable::new(name, dim),
        kind: ObservationKind::Fixed { dim },
        counts,
    };
    let half_normal = Prior::HalfNormal { scale: 1.0 };
    match task {
        TaskId::GaussianLinear | TaskId::GaussianLinearUniform => {
            let local = if task == TaskId::GaussianLinear {
                Prior::Normal { mean: 0.0, sd: 1.0 }
            } else {
                Prior::Uniform {
                    low: -10.0,
                    high: 10.0,
                }
            };
            HierarchicalModel::new(
                task.name(),
                vec![Variable::new("sigma", 1)],
                vec![half_normal],
                vec![Variable::new("mu", 5)],
                LocalPrior::Independent(vec![local; 5]),
                fixed("y", 5, false),
                Arc::new(|g: &[f64], l: &[f64], _: &[f64], seed: u64| {
                    task_gaussian_linear(g[0], l, seed)
                }),
            )
        }
        TaskId::GaussianMixture => HierarchicalModel::new(
            task.name(),
            vec![Variable::new("mu_g", 1), Variable::new("sigma_g", 1)],
            vec![
                Prior::Uniform {
                    low: -10.0,
                    high: 10.0,
                },
                half_normal,
            ],
            vec![Variable::new("eta", 1)],
            LocalPrior::TruncatedNormal {
                mean_index: vec![0],
                sd_index: vec![1],
                low: -10.0,
                high: 10.0,
            },
            fixed("y", 1, false),
            Arc::new(|_: &[f64], l: &[f64], _: &[f64], seed: u64| {
                task_gaussian_mixture(l[0], seed)
            }),
        ),
        TaskId::Sir => HierarchicalModel::new(
            task.name(),
            vec![Variable::new("gamma", 1)],
            vec![Prior::LogNormal {
                mu: 0.125f64.ln(),
                sigma: 0.2,
            }],
            vec![Variable::new("beta", 1)],
            LocalPrior::Independent(vec![Prior::LogNormal {
                mu: 0.4f64.ln(),
                sigma: 0.5,
            }]),
            fixed("y", sir::N_TIMES, true),
            Arc::new(|g: &[f64], l: &[f64], _: &[f64], seed: u64| task_sir(g[0], l[0], seed)),
        ),
        TaskId::Slcp => {
            let u = Prior::Uniform {
                low: -3.0,
                high: 3.0,
            };
            HierarchicalModel::new(
                task.name(),
                vec![
                    Variable::new("sigma_1", 1),
                    Variable::new("sigma_2", 1),
                    Variable::new("rho", 1),
                ],
                vec![u; 3],
                vec![Variable::new("m", 2)],
                LocalPrior::Independent(vec![u; 2]),
                fixed("y", 2 * SLCP_DRAWS, false),
                Arc::new(|g: &[f64], l: &[f64], _: &[f64], seed: u64| task_slcp(g, l, seed)),
            )
        }
        TaskId::TwoMoons => HierarchicalModel::new(
            task.name(),
            vec![Variable::new("mu_g", 2), Variable::new("sigma_g", 2)],
            vec![
                Prior::Uniform {
                    low: -1.0,
                    high: 1.0,
                },
                Prior::Uniform {
                    low: -1.0,
                    high: 1.0,
                },
                Prior::Uniform {
                    low: 0.1,
                    high: 3.0,
                },
                Prior::Uniform {
                    low: 0.1,
                    high: 3.0,
                },
            ],
            vec![Variable::new("eta", 2)],
            LocalPrior::TruncatedNormal {
                mean_index: vec![0, 1],
                sd_index: vec![2, 3],
                low: -1.0,
                high: 1.0,
            },
            fixed("y", 2, false),
            Arc::new(|_: &[f64], l: &[f64], _: &[f64], seed: u64| task_two_moons(l, seed)),
        ),
        TaskId::Seir => HierarchicalModel::new(
            task.name(),
            vec![Variable::new("beta_0", 1)],
            vec![Prior::Uniform {
                low: 0.1,
                high: 2.0,
            }],
            vec![Variable::new("amplitude", 1)],
            LocalPrior::Independent(vec![Prior::Uniform {
                low: 0.2,
                high: 0.5,
            }]),
            ObservationSpec {
                variable: Variable::new("y", 1),
                kind: ObservationKind::Functional {
                    n_points: seir::N_POINTS,
                    horizon: seir::HORIZON,
                },
                counts: true,
            },
            Arc::new(|g: &[f64], l: &[f64], times: &[f64], seed: u64| {
                task_seir(g[0], l[0], times, seed)
            }),
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_var(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    #[test]
    fn registry_round_trip() {
        for t in TaskId::ALL {
            assert_eq!(t.name().parse::<TaskId>().unwrap(), t);
        }
        let err = "lotka_volterra".parse::<TaskId>().unwrap_err();
        assert!(err.to_string().contains("gaussian_linear"));
    }

    #[test]
    fn dimension_table() {
        for t in TaskId::ALL {
            let m = t.model();
            assert_eq!((m.d_g(), m.d_l()), t.dims());
            for n_s in [1, 7, 50] {
                assert_eq!(m.param_dim(n_s), t.dims().0 + n_s * t.dims().1);
            }
        }
    }

    #[test]
    fn gaussian_linear_noise_free_limit() {
        let mu = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = task_gaussian_linear(1e-8, &mu, 3).unwrap();
        for (a, b) in y.iter().zip(&mu) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(task_gaussian_linear(-1.0, &mu, 3).is_err());
    }

    #[test]
    fn gaussian_linear_variance() {
        let mut per_dim = vec![Vec::new(); 5];
        for s in 0..100_000u64 {
            let y = task_gaussian_linear(2.0, &[0.0; 5], s).unwrap();
            for (j, v) in y.into_iter().enumerate() {
                per_dim[j].push(v);
            }
        }
        for d in &per_dim {
            let (_, v) = mean_var(d);
            assert!((3.8..=4.2).contains(&v), "{v}");
        }
    }

    #[test]
    fn gaussian_mixture_moments() {
        let ys: Vec<f64> = (0..100_000u64)
            .map(|s| task_gaussian_mixture(0.0, s).unwrap()[0])
            .collect();
        let (m, v) = mean_var(&ys);
        assert!(m.abs() <= 0.02, "{m}");
        assert!((0.49..=0.52).contains(&v), "{v}");
        assert_eq!(
            task_gaussian_mixture(1.5, 9).unwrap(),
            task_gaussian_mixture(1.5, 9).unwrap()
        );
    }

    #[test]
    fn sir_without_transmission_decays() {
        let gamma = 0.1;
        let times = sir::times();
        let traj = sir_trajectory(gamma, 0.0, &times).unwrap();
        for (t, s) in times.iter().zip(&traj) {
            let expected = sir::I0 * (-gamma * t).exp();
            assert!((s[1] - expected).abs() < 1e-6 * sir::I0, "{t} {}", s[1]);
        }
        let y = task_sir(gamma, 0.0, 1).unwrap();
        assert!(y.iter().all(|&c| c == 0.0 || c == 1.0));
        assert_eq!(*y.last().unwrap(), 0.0);
    }

    #[test]
    fn sir_counts_in_binomial_support() {
        let m = TaskId::Sir.model();
        for s in 0..50 {
            let d = m.sample_prior(1, s).unwrap();
            let y = m.simulate_site(&d.theta_g, &d.eta[0], &[], s).unwrap();
            assert_eq!(y.len(), sir::N_TIMES);
            assert!(y
                .iter()
                .all(|&c| c >= 0.0 && c <= sir::N_COUNTS as f64 && c.fract() == 0.0));
        }
    }

    #[test]
    fn slcp_covariance_entries() {
        let (l11, l21, l22) = slcp_cholesky(1.0, 1.0, 0.0).unwrap();
        assert_eq!(l21, 0.0);
        assert_eq!((l11, l22), (1.0, 1.0));
        let (l11, l21, l22) = slcp_cholesky(1.0, 1.0, 3.0).unwrap();
        let cov = l11 * l21;
        let corr = cov / (l11 * (l21 * l21 + l22 * l22).sqrt());
        assert!((corr - 3f64.tanh()).abs() < 1e-12);
        assert!(slcp_cholesky(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn slcp_cholesky_reconstructs_covariance() {
        let m = TaskId::Slcp.model();
        for s in 0..10_000 {
            let g = m.sample_globals(s);
            if g[0].abs() <= 1e-6 || g[1].abs() <= 1e-6 {
                continue;
            }
            let (l11, l21, l22) = slcp_cholesky(g[0], g[1], g[2]).unwrap();
            assert!(l11 > 0.0 && l22 > 0.0);
            let s11 = g[0].powi(4);
            let s22 = g[1].powi(4);
            let s12 = g[2].tanh() * g[0].powi(2) * g[1].powi(2);
            assert!((l11 * l11 - s11).abs() <= 1e-10 * s11.max(1.0));
            assert!((l11 * l21 - s12).abs() <= 1e-10 * s11.max(s22).max(1.0));
            assert!((l21 * l21 + l22 * l22 - s22).abs() <= 1e-10 * s22.max(1.0));
        }
    }

    #[test]
    fn two_moons_point_and_radius() {
        let p = two_moons_point(0.0, 0.1);
        assert!((p[0] - 0.35).abs() < 1e-15 && p[1] == 0.0);
        let mut rng = seed::rng(4);
        let radii: Vec<f64> = (0..100_000)
            .map(|_| {
                let a = rng.random_range(-FRAC_PI_2..FRAC_PI_2);
                let r = Normal::new(0.1, 0.01).unwrap().sample(&mut rng);
                let p = two_moons_point(a, r);
                ((p[0] - 0.25).powi(2) + p[1].powi(2)).sqrt()
            })
            .collect();
        let (m, v) = mean_var(&radii);
        assert!((m - 0.1).abs() < 1e-3);
        assert!((v.sqrt() - 0.01).abs() < 1e-3);
        assert_eq!(task_two_moons(&[0.2, -0.3], 1).unwrap().len(), 2);
    }

    #[test]
    fn seir_constant_transmission_without_amplitude() {
        for t in [0.0, 17.0, 91.25, 400.0] {
            assert_eq!(seasonal_transmission(0.7, 0.0, t), 0.7);
        }
    }

    #[test]
    fn seir_counts_nonnegative_and_deterministic() {
        let m = TaskId::Seir.model();
        let d = m.sample_prior(1, 2).unwrap();
        let times = m.sample_schedule(5);
        let a = m.simulate_site(&d.theta_g, &d.eta[0], &times, 8).unwrap();
        let b = m.simulate_site(&d.theta_g, &d.eta[0], &times, 8).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&c| c >= 0.0 && c.fract() == 0.0));
        assert!(m.simulate_site(&d.theta_g, &d.eta[0], &[800.0], 8).is_err());
    }

    #[test]
    fn seir_unsorted_times_match_sorted() {
        let a = seir_trajectory(1.0, 0.3, &[300.0, 10.0, 150.0]).unwrap();
        let b = seir_trajectory(1.0, 0.3, &[10.0, 150.0, 300.0]).unwrap();
        assert_eq!(a[0], b[2]);
        assert_eq!(a[1], b[0]);
    }
}
