//! Simulation cost arithmetic.

use serde::{Deserialize, Serialize};

use crate::pipeline::LedgerSnapshot;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    /// Single-site true-simulator calls.
    pub n_true: u64,
    /// Multi-site training samples.
    pub n_multi: u64,
    pub n_s: u64,
    pub t_sim: f64,
    pub t_like: f64,
    /// Seconds.
    pub npe: f64,
    pub pf: f64,
    pub lf: f64,
    /// `t_sim / t_like`.
    pub per_site_speedup: f64,
    pub npe_over_lf: f64,
}

impl CostReport {
    pub fn new(n_true: u64, n_multi: u64, n_s: u64, t_sim: f64, t_like: f64) -> Self {
        let npe = n_multi as f64 * n_s as f64 * t_sim;
        let pf = n_multi as f64 * n_s as f64 / 2.0 * t_sim;
        let lf = n_true as f64 * t_sim + n_multi as f64 * n_s as f64 * t_like;
        CostReport {
            n_true,
            n_multi,
            n_s,
            t_sim,
            t_like,
            npe,
            pf,
            lf,
            per_site_speedup: t_sim / t_like,
            npe_over_lf: npe / lf,
        }
    }

    pub fn hours(seconds: f64) -> f64 {
        seconds / 3600.0
    }
}

/// Cost table for a recorded run. `N1` is the true-call count; `N2` is the
/// number of multi-site samples implied by the surrogate draws, or `N1`
/// when no surrogate draws were made.
pub fn budget_report(ledger: &LedgerSnapshot, n_s: u64, t_sim: f64, t_like: f64) -> CostReport {
    let n_multi = if ledger.surrogate_draws > 0 && n_s > 0 {
        ledger.surrogate_draws / n_s
    } else {
        ledger.true_simulator_calls
    };
    CostReport::new(ledger.true_simulator_calls, n_multi, n_s, t_sim, t_like)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_unit_costs_substitute() {
        let r = CostReport::new(300, 200, 7, 2.0, 2.0);
        assert_eq!(r.lf, (300.0 + 200.0 * 7.0) * 2.0);
        assert_eq!(r.pf * 2.0, r.npe);
    }

    #[test]
    fn report_reads_the_ledger() {
        let snap = LedgerSnapshot {
            true_simulator_calls: 1000,
            surrogate_draws: 50_000,
            ..Default::default()
        };
        let r = budget_report(&snap, 50, 1.0, 0.01);
        assert_eq!((r.n_true, r.n_multi), (1000, 1000));
        assert!((r.lf - (1000.0 + 500.0)).abs() < 1e-9);
    }
}
