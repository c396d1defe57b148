//! Posterior-predictive draws.

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{HierarchicalModel, ParameterDraw};
use crate::pipeline::{BudgetLedger, SiteSampler};
use crate::seed;

/// Where predictive observations come from.
pub enum PredictiveSource<'a> {
    /// The true simulator; every site draw is charged to the ledger.
    Simulator(&'a BudgetLedger),
    /// A trained per-site surrogate.
    Surrogate(&'a dyn SiteSampler),
}

/// One simulated multi-site observation per posterior draw, at the
/// observed schedule. `schedule` is the flat per-site concatenation; the
/// result has `n_draws` rows of `n_sites * d_y` constrained values.
pub fn posterior_predictive(
    model: &HierarchicalModel,
    source: &PredictiveSource<'_>,
    draws: &[ParameterDraw],
    schedule: ArrayView1<f64>,
    seed_: u64,
) -> Result<Array2<f64>> {
    let Some(first) = draws.first() else {
        return Ok(Array2::zeros((0, 0)));
    };
    let n_sites = first.eta.len();
    let w = model.observation.n_points();
    if schedule.len() != n_sites * w {
        return Err(Error::shape(format!(
            "schedule of length {} for {n_sites} sites of {w} points",
            schedule.len()
        )));
    }
    let d_y = model.d_y();
    let seed_of = |i: usize, s: usize| seed::derive(seed_, &[i as u64, s as u64]);
    let sched = |s: usize| schedule.slice(ndarray::s![s * w..(s + 1) * w]).to_vec();
    let mut out = Array2::zeros((draws.len(), n_sites * d_y));
    match source {
        PredictiveSource::Simulator(ledger) => {
            let rows = draws
                .par_iter()
                .enumerate()
                .map(|(i, d)| {
                    let mut y = Vec::with_capacity(n_sites * d_y);
                    for (s, eta) in d.eta.iter().enumerate() {
                        let ys = ledger
                            .simulate_site(model, &d.theta_g, eta, &sched(s), seed_of(i, s))
                            .map_err(|e| Error::Simulation {
                                task: model.name.clone(),
                                message: format!("predictive draw {i}, site {s}: {e}"),
                            })?;
                        y.extend(ys);
                    }
                    Ok(y)
                })
                .collect::<Result<Vec<_>>>()?;
            for (i, y) in rows.iter().enumerate() {
                out.row_mut(i).assign(&ndarray::aview1(y));
            }
        }
        PredictiveSource::Surrogate(sur) => {
            let rows = draws.len() * n_sites;
            let mut tg = Array2::zeros((rows, model.d_g()));
            let mut eta = Array2::zeros((rows, model.d_l()));
            let mut sch = Array2::zeros((rows, w));
            let mut seeds = Vec::with_capacity(rows);
            for (i, d) in draws.iter().enumerate() {
                for s in 0..n_sites {
                    let r = i * n_sites + s;
                    tg.row_mut(r).assign(&ndarray::aview1(&d.theta_g));
                    eta.row_mut(r).assign(&ndarray::aview1(&d.eta[s]));
                    sch.row_mut(r).assign(&ndarray::aview1(&sched(s)));
                    seeds.push(seed_of(i, s));
                }
            }
            let y = sur.sample_sites(model, tg.view(), eta.view(), sch.view(), &seeds)?;
            for i in 0..draws.len() {
                for s in 0..n_sites {
                    out.slice_mut(ndarray::s![i, s * d_y..(s + 1) * d_y])
                        .assign(&y.row(i * n_sites + s));
                }
            }
        }
    }
    Ok(out)
}

/// Pointwise `(lo, median, hi)` quantile bands over predictive rows.
pub fn predictive_bands(pred: &Array2<f64>, lo: f64, hi: f64) -> Array2<f64> {
    let mut bands = Array2::zeros((pred.ncols(), 3));
    for (j, col) in pred.columns().into_iter().enumerate() {
        let mut v = col.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| v[((v.len() - 1) as f64 * p).round() as usize];
        bands[[j, 0]] = q(lo);
        bands[[j, 1]] = q(0.5);
        bands[[j, 2]] = q(hi);
    }
    bands
}
