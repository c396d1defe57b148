//! Posterior diagnostics: local classifier two-sample tests, coverage,
//! kernel two-sample tests, predictive checks and cost accounting.

pub mod cost;
pub mod lc2st;
pub mod mmd;
pub mod oracle;
pub mod ppc;
pub mod tarp;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

pub use cost::{budget_report, CostReport};
pub use lc2st::{lc2st, p_value, t_mse, Lc2stConfig, Lc2stFit, Lc2stResult};
pub use mmd::{mmd2, MmdResult};
pub use oracle::{factorisation_oracle, ConjugateGaussian};
pub use ppc::{posterior_predictive, predictive_bands, PredictiveSource};
pub use tarp::{tarp, TarpResult};

use crate::error::{Error, Result};
use crate::model::HierarchicalModel;
use crate::ode::SolverConfig;
use crate::pipeline::data::{
    fn_inputs, globals_unconstrained, locals_unconstrained, observations_unconstrained,
};
use crate::pipeline::{generate_direct_dataset, BudgetLedger, Dataset, PosteriorSampler};
use crate::seed::{self, stream};

/// Mean and 95% Student-t half-width.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive dof")
        .inverse_cdf(0.975);
    (mean, t * (var / n as f64).sqrt())
}

/// One row of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub task: String,
    pub method: String,
    #[serde(rename = "N")]
    pub n: u64,
    pub n_s: u64,
    pub mean: f64,
    pub ci95: f64,
}

/// Flat unconstrained `(theta_g, eta_1..eta_n)` rows of a dataset.
pub fn dataset_parameters(model: &HierarchicalModel, data: &Dataset) -> Result<Array2<f64>> {
    let g = globals_unconstrained(model, data.theta_g.view())?;
    let l = locals_unconstrained(model, data.eta.view())?;
    concatenate(Axis(1), &[g.view(), l.view()]).map_err(|e| Error::shape(e.to_string()))
}

/// Classifier features for observations: unconstrained values followed by
/// the scaled schedule for functional tasks.
pub fn observation_features(
    model: &HierarchicalModel,
    y: ArrayView2<f64>,
    schedule: ArrayView2<f64>,
) -> Array2<f64> {
    let u = observations_unconstrained(model, y);
    let f = fn_inputs(model, schedule);
    concatenate(Axis(1), &[u.view(), f.view()]).expect("row counts agree")
}

/// Per-observation results of a task-level local classifier test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskLc2st {
    pub results: Vec<Lc2stResult>,
    /// Simulator calls spent on calibration and observations; kept apart
    /// from the training budget.
    pub evaluation_calls: u64,
}

impl TaskLc2st {
    pub fn statistics(&self) -> Vec<f64> {
        self.results.iter().map(|r| r.t_mse).collect()
    }
}

/// Local classifier test of `sampler` at every observation in `obs`, with
/// classifiers calibrated on the joint draws in `cal`.
pub fn lc2st_datasets(
    sampler: &dyn PosteriorSampler,
    model: &HierarchicalModel,
    cal: &Dataset,
    obs: &Dataset,
    config: &Lc2stConfig,
    solver: &SolverConfig,
    seed_: u64,
) -> Result<Vec<Lc2stResult>> {
    config.validate()?;
    if cal.n_sites != obs.n_sites {
        return Err(Error::shape(
            "calibration and observation site counts differ",
        ));
    }
    let n_sites = cal.n_sites;
    let theta = dataset_parameters(model, cal)?;
    let cal_seeds: Vec<u64> = (0..cal.len() as u64)
        .map(|i| seed::derive(seed_, &[stream::BASE, i]))
        .collect();
    let theta_q = sampler.draw(
        model,
        n_sites,
        cal.y.view(),
        cal.schedule.view(),
        &cal_seeds,
        solver,
    )?;
    let x = observation_features(model, cal.y.view(), cal.schedule.view());
    let fit = Lc2stFit::fit(
        x.view(),
        theta.view(),
        theta_q.view(),
        config,
        seed::derive(seed_, &[stream::CLASSIFIER]),
    )?;
    let x_obs = observation_features(model, obs.y.view(), obs.schedule.view());
    (0..obs.len())
        .map(|i| {
            let post = draw_at(
                sampler,
                model,
                obs,
                i,
                config.n_posterior,
                solver,
                seed::derive(seed_, &[stream::OBSERVATION, i as u64]),
            )?;
            fit.evaluate(x_obs.row(i), post.view())
        })
        .collect()
}

/// `n` unconstrained posterior draws at row `i` of `data`.
pub fn draw_at(
    sampler: &dyn PosteriorSampler,
    model: &HierarchicalModel,
    data: &Dataset,
    i: usize,
    n: usize,
    solver: &SolverConfig,
    seed_: u64,
) -> Result<Array2<f64>> {
    let rep = |a: ArrayView2<f64>| {
        a.row(i)
            .insert_axis(Axis(0))
            .broadcast((n, a.ncols()))
            .expect("broadcast a row")
            .to_owned()
    };
    let seeds: Vec<u64> = (0..n as u64).map(|k| seed::derive(seed_, &[k])).collect();
    sampler.draw(
        model,
        data.n_sites,
        rep(data.y.view()).view(),
        rep(data.schedule.view()).view(),
        &seeds,
        solver,
    )
}

/// As [`lc2st_datasets`] on freshly simulated calibration and observation
/// sets; the calls are reported apart from any training budget.
pub fn lc2st_task(
    sampler: &dyn PosteriorSampler,
    model: &HierarchicalModel,
    n_sites: usize,
    n_obs: usize,
    config: &Lc2stConfig,
    solver: &SolverConfig,
    seed_: u64,
) -> Result<TaskLc2st> {
    config.validate()?;
    let ledger = BudgetLedger::new();
    let obs = generate_direct_dataset(
        model,
        n_obs,
        n_sites,
        seed::derive(seed_, &[stream::OBSERVATION]),
        &ledger,
    )?;
    let cal = generate_direct_dataset(
        model,
        config.n_cal,
        n_sites,
        seed::derive(seed_, &[stream::REFERENCE]),
        &ledger,
    )?;
    let results = lc2st_datasets(sampler, model, &cal, &obs, config, solver, seed_)?;
    Ok(TaskLc2st {
        results,
        evaluation_calls: ledger.true_simulator_calls(),
    })
}

/// Coverage of `sampler` over the cases in `data`, in the unconstrained
/// parameter space.
pub fn tarp_dataset(
    sampler: &dyn PosteriorSampler,
    model: &HierarchicalModel,
    data: &Dataset,
    n_samples: usize,
    solver: &SolverConfig,
    seed_: u64,
) -> Result<TarpResult> {
    let truth = dataset_parameters(model, data)?;
    let samples = (0..data.len())
        .map(|i| {
            draw_at(
                sampler,
                model,
                data,
                i,
                n_samples,
                solver,
                seed::derive(seed_, &[stream::OBSERVATION, i as u64]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    tarp(
        &samples,
        truth.view(),
        seed::derive(seed_, &[stream::REFERENCE]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ci_of_constant_is_zero() {
        assert_eq!(mean_ci95(&[2.0; 5]), (2.0, 0.0));
        let (m, h) = mean_ci95(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        // t_{0.975, 2} = 4.303
        assert!((h - 4.303 / 3f64.sqrt()).abs() < 1e-3);
    }
}
