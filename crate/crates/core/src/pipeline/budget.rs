use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::HierarchicalModel;
use crate::seed::{self, stream};

/// Simulation accounting. Only [`BudgetLedger::simulate_site`] touches the
/// true-simulator counter.
#[derive(Debug, Default)]
pub struct BudgetLedger {
    true_calls: AtomicU64,
    surrogate_draws: AtomicU64,
    sim_nanos: AtomicU64,
    like_nanos: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub true_simulator_calls: u64,
    pub surrogate_draws: u64,
    /// Accumulated wall-clock seconds inside the true simulator.
    pub t_sim_total: f64,
    /// Accumulated wall-clock seconds spent drawing from surrogates.
    pub t_like_total: f64,
}

impl LedgerSnapshot {
    pub fn t_sim_per_call(&self) -> Option<f64> {
        (self.true_simulator_calls > 0).then(|| self.t_sim_total / self.true_simulator_calls as f64)
    }

    pub fn t_like_per_draw(&self) -> Option<f64> {
        (self.surrogate_draws > 0).then(|| self.t_like_total / self.surrogate_draws as f64)
    }
}

impl BudgetLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Start from a previously recorded state (resumed runs).
    pub fn from_snapshot(s: &LedgerSnapshot) -> Self {
        BudgetLedger {
            true_calls: AtomicU64::new(s.true_simulator_calls),
            surrogate_draws: AtomicU64::new(s.surrogate_draws),
            sim_nanos: AtomicU64::new((s.t_sim_total * 1e9) as u64),
            like_nanos: AtomicU64::new((s.t_like_total * 1e9) as u64),
        }
    }

    pub fn simulate_site(
        &self,
        model: &HierarchicalModel,
        theta_g: &[f64],
        eta_s: &[f64],
        schedule: &[f64],
        seed: u64,
    ) -> Result<Vec<f64>> {
        // parameters outside the prior support never reach the simulator
        model.check_support(theta_g, eta_s)?;
        let start = Instant::now();
        let out = model.simulate_site(theta_g, eta_s, schedule, seed);
        self.true_calls.fetch_add(1, Ordering::Relaxed);
        self.sim_nanos
            .fetch_add(start.elapsed().as_nanos() as u64, Ordering::Relaxed);
        out
    }

    pub fn record_surrogate(&self, draws: u64, elapsed: Duration) {
        self.surrogate_draws.fetch_add(draws, Ordering::Relaxed);
        self.like_nanos
            .fetch_add(elapsed.as_nanos() as u64, Ordering::Relaxed);
    }

    pub fn true_simulator_calls(&self) -> u64 {
        self.true_calls.load(Ordering::Relaxed)
    }

    pub fn surrogate_draws(&self) -> u64 {
        self.surrogate_draws.load(Ordering::Relaxed)
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            true_simulator_calls: self.true_simulator_calls(),
            surrogate_draws: self.surrogate_draws(),
            t_sim_total: self.sim_nanos.load(Ordering::Relaxed) as f64 * 1e-9,
            t_like_total: self.like_nanos.load(Ordering::Relaxed) as f64 * 1e-9,
        }
    }
}

/// Site counts `n ~ U{1, ..., min(n_s, remaining)}` until `budget` is spent.
pub fn stick_breaking(budget: u64, n_s: usize, seed: u64) -> Result<Vec<usize>> {
    if n_s == 0 || budget == 0 {
        return Err(Error::Config {
            field: "pf".into(),
            message: "budget and n_s must be positive".into(),
        });
    }
    let mut rng = seed::rng_for(seed, &[stream::STICK]);
    let mut left = budget;
    let mut out = Vec::new();
    while left > 0 {
        let hi = (n_s as u64).min(left);
        let n = rng.random_range(1..=hi);
        out.push(n as usize);
        left -= n;
    }
    Ok(out)
}
