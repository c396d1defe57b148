use ndarray::{s, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use super::budget::BudgetLedger;
use crate::error::{Error, Result};
use crate::model::{HierarchicalModel, ObservationKind};
use crate::seed::{self, stream};
use crate::tokeniser::{Layout, Role};

/// Simulated tuples for a fixed site count, in constrained space. Row `i`
/// holds `theta_g`, the `n_sites` local blocks, observations and schedules
/// laid out site after site.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: String,
    pub n_sites: usize,
    pub theta_g: Array2<f64>,
    pub eta: Array2<f64>,
    pub y: Array2<f64>,
    pub schedule: Array2<f64>,
    pub seed: u64,
}

/// Per-sample randomness, independent of how samples are scheduled.
#[derive(Debug, Clone, Copy)]
pub struct SampleSeeds(pub u64);

impl SampleSeeds {
    pub fn new(master: u64, index: usize) -> Self {
        SampleSeeds(seed::derive(master, &[index as u64]))
    }
    pub fn prior(self) -> u64 {
        seed::derive(self.0, &[stream::PRIOR])
    }
    pub fn schedule(self, site: usize) -> u64 {
        seed::derive(self.0, &[stream::SCHEDULE, site as u64])
    }
    pub fn simulate(self, site: usize) -> u64 {
        seed::derive(self.0, &[stream::SIMULATE, site as u64])
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.theta_g.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Split a multi-site dataset into single-site rows.
    pub fn sites(&self, model: &HierarchicalModel) -> Dataset {
        let (d_l, d_y, np) = (model.d_l(), model.d_y(), model.observation.n_points());
        let n = self.len() * self.n_sites;
        let mut out = Dataset {
            task: self.task.clone(),
            n_sites: 1,
            theta_g: Array2::zeros((n, model.d_g())),
            eta: Array2::zeros((n, d_l)),
            y: Array2::zeros((n, d_y)),
            schedule: Array2::zeros((n, np * usize::from(model.observation.is_functional()))),
            seed: self.seed,
        };
        for i in 0..self.len() {
            for s in 0..self.n_sites {
                let r = i * self.n_sites + s;
                out.theta_g.row_mut(r).assign(&self.theta_g.row(i));
                out.eta
                    .row_mut(r)
                    .assign(&self.eta.slice(s![i, s * d_l..(s + 1) * d_l]));
                out.y
                    .row_mut(r)
                    .assign(&self.y.slice(s![i, s * d_y..(s + 1) * d_y]));
                let w = out.schedule.ncols();
                out.schedule
                    .row_mut(r)
                    .assign(&self.schedule.slice(s![i, s * w..(s + 1) * w]));
            }
        }
        out
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            task: self.task.clone(),
            n_sites: self.n_sites,
            theta_g: self.theta_g.select(Axis(0), rows),
            eta: self.eta.select(Axis(0), rows),
            y: self.y.select(Axis(0), rows),
            schedule: self.schedule.select(Axis(0), rows),
            seed: self.seed,
        }
    }
}

fn schedule_width(model: &HierarchicalModel) -> usize {
    match model.observation.kind {
        ObservationKind::Fixed { .. } => 0,
        ObservationKind::Functional { n_points, .. } => n_points,
    }
}

struct Row {
    theta_g: Vec<f64>,
    eta: Vec<f64>,
    y: Vec<f64>,
    schedule: Vec<f64>,
}

fn assemble(model: &HierarchicalModel, n_sites: usize, seed: u64, rows: Vec<Row>) -> Dataset {
    let n = rows.len();
    let mut d = Dataset {
        task: model.name.clone(),
        n_sites,
        theta_g: Array2::zeros((n, model.d_g())),
        eta: Array2::zeros((n, n_sites * model.d_l())),
        y: Array2::zeros((n, n_sites * model.d_y())),
        schedule: Array2::zeros((n, n_sites * schedule_width(model))),
        seed,
    };
    for (i, r) in rows.into_iter().enumerate() {
        d.theta_g.row_mut(i).assign(&ndarray::aview1(&r.theta_g));
        d.eta.row_mut(i).assign(&ndarray::aview1(&r.eta));
        if !r.y.is_empty() {
            d.y.row_mut(i).assign(&ndarray::aview1(&r.y));
        }
        d.schedule.row_mut(i).assign(&ndarray::aview1(&r.schedule));
    }
    d
}

fn simulation_error(model: &HierarchicalModel, index: usize, e: Error) -> Error {
    match e {
        Error::Simulation { task, message } => Error::Simulation {
            task,
            message: format!("sample {index}: {message}"),
        },
        other => Error::Simulation {
            task: model.name.clone(),
            message: format!("sample {index}: {other}"),
        },
    }
}

/// Draw prior parameters and schedules for `n` samples of `n_sites` sites.
fn draw_parameters(
    model: &HierarchicalModel,
    n: usize,
    n_sites: usize,
    seed: u64,
) -> Result<Vec<Row>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let ss = SampleSeeds::new(seed, i);
            let draw = model.sample_prior(n_sites, ss.prior())?;
            let mut schedule = Vec::new();
            for s in 0..n_sites {
                schedule.extend(model.sample_schedule(ss.schedule(s)));
            }
            Ok(Row {
                theta_g: draw.theta_g,
                eta: draw.eta.concat(),
                y: Vec::new(),
                schedule,
            })
        })
        .collect()
}

/// `n` samples with `n_sites` true-simulator sites each.
pub fn generate_direct_dataset(
    model: &HierarchicalModel,
    n: usize,
    n_sites: usize,
    seed: u64,
    ledger: &BudgetLedger,
) -> Result<Dataset> {
    if n == 0 || n_sites == 0 {
        return Err(Error::Config {
            field: "n".into(),
            message: "dataset size and site count must be at least 1".into(),
        });
    }
    let (d_l, w) = (model.d_l(), schedule_width(model));
    let mut rows = draw_parameters(model, n, n_sites, seed)?;
    rows.par_iter_mut().enumerate().try_for_each(|(i, r)| {
        let ss = SampleSeeds::new(seed, i);
        for s in 0..n_sites {
            let y = ledger
                .simulate_site(
                    model,
                    &r.theta_g,
                    &r.eta[s * d_l..(s + 1) * d_l],
                    &r.schedule[s * w..(s + 1) * w],
                    ss.simulate(s),
                )
                .map_err(|e| simulation_error(model, i, e))?;
            r.y.extend(y);
        }
        Ok::<_, Error>(())
    })?;
    Ok(assemble(model, n_sites, seed, rows))
}

/// `n` single-site tuples from one prior draw and one simulator call each.
pub fn generate_single_site_dataset(
    model: &HierarchicalModel,
    n: usize,
    seed: u64,
    ledger: &BudgetLedger,
) -> Result<Dataset> {
    generate_direct_dataset(model, n, 1, seed, ledger)
}

/// Batched per-site observation sampler standing in for the simulator.
pub trait SiteSampler: Sync {
    /// One constrained observation per row of `(theta_g, eta_s, schedule_s)`.
    fn sample_sites(
        &self,
        model: &HierarchicalModel,
        theta_g: ArrayView2<f64>,
        eta: ArrayView2<f64>,
        schedule: ArrayView2<f64>,
        seeds: &[u64],
    ) -> Result<Array2<f64>>;
}

/// The true simulator behind the surrogate interface. Calls are not charged
/// to the budget; it exists to test the surrogate path structurally.
pub struct OracleSurrogate;

impl SiteSampler for OracleSurrogate {
    fn sample_sites(
        &self,
        model: &HierarchicalModel,
        theta_g: ArrayView2<f64>,
        eta: ArrayView2<f64>,
        schedule: ArrayView2<f64>,
        seeds: &[u64],
    ) -> Result<Array2<f64>> {
        let rows: Vec<Vec<f64>> = (0..seeds.len())
            .into_par_iter()
            .map(|r| {
                model.simulate_site(
                    &theta_g.row(r).to_vec(),
                    &eta.row(r).to_vec(),
                    &schedule.row(r).to_vec(),
                    seeds[r],
                )
            })
            .collect::<Result<_>>()?;
        let mut out = Array2::zeros((rows.len(), model.d_y()));
        for (r, y) in rows.iter().enumerate() {
            out.row_mut(r).assign(&ndarray::aview1(y));
        }
        Ok(out)
    }
}

/// Multi-site data with observations drawn from `surrogate`. Parameter and
/// schedule draws use the same per-sample seeds as
/// [`generate_direct_dataset`], and site `s` of sample `i` is handed the
/// seed the simulator would have received.
pub fn generate_multi_site_dataset(
    model: &HierarchicalModel,
    surrogate: &dyn SiteSampler,
    n: usize,
    n_sites: usize,
    seed: u64,
    ledger: &BudgetLedger,
) -> Result<Dataset> {
    if n == 0 || n_sites == 0 {
        return Err(Error::Config {
            field: "n".into(),
            message: "dataset size and site count must be at least 1".into(),
        });
    }
    let rows = draw_parameters(model, n, n_sites, seed)?;
    let mut d = assemble(model, n_sites, seed, rows);
    let flat = d.sites(model);
    let seeds: Vec<u64> = (0..n)
        .flat_map(|i| {
            let ss = SampleSeeds::new(seed, i);
            (0..n_sites).map(move |s| ss.simulate(s))
        })
        .collect();
    let start = std::time::Instant::now();
    let y = surrogate.sample_sites(
        model,
        flat.theta_g.view(),
        flat.eta.view(),
        flat.schedule.view(),
        &seeds,
    )?;
    ledger.record_surrogate(seeds.len() as u64, start.elapsed());
    let d_y = model.d_y();
    for i in 0..n {
        for s in 0..n_sites {
            d.y.slice_mut(s![i, s * d_y..(s + 1) * d_y])
                .assign(&y.row(i * n_sites + s));
        }
    }
    Ok(d)
}

/// Unconstrained flat training arrays for one layout.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub layout: Layout,
    pub target: Array2<f64>,
    pub cond: Array2<f64>,
    pub fn_inputs: Array2<f64>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.target.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> TrainingSet {
        TrainingSet {
            layout: self.layout.clone(),
            target: self.target.select(Axis(0), rows),
            cond: self.cond.select(Axis(0), rows),
            fn_inputs: self.fn_inputs.select(Axis(0), rows),
        }
    }
}

/// Functional inputs scaled to `[0, 1]` by the horizon.
pub fn fn_inputs(model: &HierarchicalModel, schedule: ArrayView2<f64>) -> Array2<f64> {
    match model.observation.kind {
        ObservationKind::Functional { horizon, .. } => schedule.mapv(|t| t / horizon),
        ObservationKind::Fixed { .. } => Array2::zeros((schedule.nrows(), 0)),
    }
}

pub fn observations_unconstrained(model: &HierarchicalModel, y: ArrayView2<f64>) -> Array2<f64> {
    y.mapv(|v| model.observation.to_unconstrained(v))
}

pub fn globals_unconstrained(
    model: &HierarchicalModel,
    theta_g: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(theta_g.dim());
    for (r, row) in theta_g.rows().into_iter().enumerate() {
        let u = model.globals_to_unconstrained(&row.to_vec())?;
        out.row_mut(r).assign(&ndarray::aview1(&u));
    }
    Ok(out)
}

pub fn locals_unconstrained(
    model: &HierarchicalModel,
    eta: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let d_l = model.d_l();
    let mut out = Array2::zeros(eta.dim());
    for r in 0..eta.nrows() {
        for (c, &x) in eta.row(r).iter().enumerate() {
            out[[r, c]] = model.local_support(c % d_l).to_unconstrained(x)?;
        }
    }
    Ok(out)
}

fn hcat(parts: &[&Array2<f64>]) -> Array2<f64> {
    let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
    ndarray::concatenate(Axis(1), &views).expect("row counts agree")
}

/// Training arrays for `role` built from a dataset.
pub fn training_set(
    model: &HierarchicalModel,
    data: &Dataset,
    role: Role,
    grouping: bool,
) -> Result<TrainingSet> {
    let single = matches!(role, Role::Surrogate | Role::LocalPosterior);
    let owned;
    let d = if single && data.n_sites > 1 {
        owned = data.sites(model);
        &owned
    } else {
        data
    };
    let layout = Layout::new(model, role, d.n_sites, grouping)?;
    let g = globals_unconstrained(model, d.theta_g.view())?;
    let l = locals_unconstrained(model, d.eta.view())?;
    let y = observations_unconstrained(model, d.y.view());
    let f = fn_inputs(model, d.schedule.view());
    let (target, cond) = match role {
        Role::Posterior => (hcat(&[&g, &l]), y),
        Role::Surrogate => (y, hcat(&[&g, &l])),
        Role::GlobalPosterior => (g, y),
        Role::LocalPosterior => (l, hcat(&[&g, &y])),
    };
    Ok(TrainingSet {
        layout,
        target,
        cond,
        fn_inputs: f,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::TaskId;

    #[test]
    fn single_site_counts_and_support() {
        let m = TaskId::GaussianMixture.model();
        let l = BudgetLedger::new();
        let d = generate_single_site_dataset(&m, 1000, 4, &l).unwrap();
        assert_eq!(l.true_simulator_calls(), 1000);
        assert_eq!(d.len(), 1000);
        for i in 0..d.len() {
            m.check_support(&d.theta_g.row(i).to_vec(), &d.eta.row(i).to_vec())
                .unwrap();
        }
        let again = generate_single_site_dataset(&m, 1000, 4, &BudgetLedger::new()).unwrap();
        assert_eq!(d, again);
    }

    #[test]
    fn direct_charges_every_site() {
        let m = TaskId::GaussianLinear.model();
        let l = BudgetLedger::new();
        let d = generate_direct_dataset(&m, 100, 10, 1, &l).unwrap();
        assert_eq!(l.true_simulator_calls(), 1000);
        assert_eq!(d.y.dim(), (100, 50));
    }

    #[test]
    fn oracle_surrogate_reproduces_direct_data_without_charges() {
        let m = TaskId::Seir.model();
        let l = BudgetLedger::new();
        let lf = generate_multi_site_dataset(&m, &OracleSurrogate, 20, 3, 9, &l).unwrap();
        assert_eq!(l.true_simulator_calls(), 0);
        assert_eq!(l.surrogate_draws(), 60);
        let direct = generate_direct_dataset(&m, 20, 3, 9, &BudgetLedger::new()).unwrap();
        assert_eq!(lf, direct);
    }

    #[test]
    fn training_sets_have_layout_widths() {
        let m = TaskId::Seir.model();
        let d = generate_direct_dataset(&m, 5, 2, 3, &BudgetLedger::new()).unwrap();
        for role in [
            Role::Posterior,
            Role::Surrogate,
            Role::GlobalPosterior,
            Role::LocalPosterior,
        ] {
            let ts = training_set(&m, &d, role, true).unwrap();
            assert_eq!(ts.target.ncols(), ts.layout.target_dim);
            assert_eq!(ts.cond.ncols(), ts.layout.cond_dim);
            assert_eq!(ts.fn_inputs.ncols(), ts.layout.n_fn);
            let rows = if matches!(role, Role::Surrogate | Role::LocalPosterior) {
                10
            } else {
                5
            };
            assert_eq!(ts.len(), rows);
            assert!(ts.fn_inputs.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }
}
