use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{
    fn_inputs, globals_unconstrained, locals_unconstrained, observations_unconstrained,
    SiteSampler, TrainingSet,
};
use crate::error::{Error, Result};
use crate::flow::{
    cfm_loss_at, draw_path_noise, path_batch, sample_field, zero_field_loss, Architecture,
    FieldSpec, FlowBatch, PathConfig, VectorField,
};
use crate::model::{HierarchicalModel, ParameterDraw};
use crate::nets::{Adam, AdamConfig, Mode, ParamStore};
use crate::ode::SolverConfig;
use crate::seed::{self, stream};
use crate::tokeniser::{Layout, Normaliser, Role, TokenDims};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub validation_fraction: f64,
    pub path: PathConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            adam: AdamConfig::default(),
            batch_size: 100,
            patience: 100,
            max_epochs: 1000,
            validation_fraction: 0.1,
            path: PathConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                field: format!("training.{field}"),
                message: message.into(),
            })
        };
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be at least 1");
        }
        if self.patience > self.max_epochs {
            return bad("patience", "must not exceed max_epochs");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction", "must be in [0, 1)");
        }
        if !(self.adam.learning_rate > 0.0) {
            return bad("adam.learning_rate", "must be positive");
        }
        self.path.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub train: Vec<f64>,
    pub validation: Vec<f64>,
    /// Validation loss of the zero vector field on the same noise.
    pub zero_field_validation: Option<f64>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainingCurve {
    pub fn epochs(&self) -> usize {
        self.train.len()
    }

    pub fn best_validation(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.validation[e])
    }
}

/// A trained vector field together with everything needed to use it.
#[derive(Debug, Clone)]
pub struct Estimator {
    pub task: String,
    pub role: Role,
    pub grouping: bool,
    pub field: VectorField,
    pub params: ParamStore<f32>,
    pub normaliser: Normaliser,
    pub curve: TrainingCurve,
    pub optimiser: Option<Adam<f32>>,
}

/// Integrated draws, denormalised and still unconstrained.
#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub values: Array2<f64>,
    /// Rows that needed a fresh base draw after a failed solve.
    pub retries: usize,
}

pub const MAX_SAMPLE_ATTEMPTS: u64 = 4;
const SAMPLE_CHUNK: usize = 512;
const EVAL_CHUNK: usize = 512;

impl Estimator {
    pub fn new(
        model: &HierarchicalModel,
        role: Role,
        grouping: bool,
        architecture: Architecture,
        max_sites: usize,
        init_seed: u64,
    ) -> Result<Self> {
        let layout = Layout::new(model, role, max_sites, grouping)?;
        let spec = FieldSpec {
            architecture,
            dims: TokenDims::for_model(model, max_sites),
            target_dim: layout.target_dim,
            cond_dim: layout.cond_dim,
            n_fn: layout.n_fn,
            init_seed,
        };
        Self::from_spec(model.name.clone(), role, grouping, spec)
    }

    pub fn from_spec(task: String, role: Role, grouping: bool, spec: FieldSpec) -> Result<Self> {
        let (field, params) = VectorField::build::<f32>(spec)?;
        Ok(Estimator {
            task,
            role,
            grouping,
            field,
            params,
            normaliser: Normaliser::identity(),
            curve: TrainingCurve::default(),
            optimiser: None,
        })
    }

    pub fn layout(&self, model: &HierarchicalModel, role: Role, n_sites: usize) -> Result<Layout> {
        Layout::new(model, role, n_sites, self.grouping)
    }

    /// Train on one or more layouts. Calling again continues the curve and
    /// the optimiser state.
    pub fn fit(&mut self, parts: &[TrainingSet], config: &TrainingConfig, seed: u64) -> Result<()> {
        config.validate()?;
        let total: usize = parts.iter().map(|p| p.len()).sum();
        if total == 0 {
            return Err(Error::Config {
                field: "dataset".into(),
                message: "cannot train on an empty dataset".into(),
            });
        }
        for p in parts {
            self.field.accepts(&p.layout)?;
        }
        // statistics come from the first data seen; later parts only add keys
        let mut fitted = Normaliser::identity();
        for p in parts {
            fitted.extend(&Normaliser::fit(&p.layout, p.target.view(), p.cond.view()));
        }
        self.normaliser.extend(&fitted);

        let normalised: Vec<TrainingSet> = parts
            .iter()
            .map(|p| {
                let cs = self.normaliser.columns(&p.layout);
                let mut q = p.clone();
                cs.normalise_target(&mut q.target);
                cs.normalise_cond(&mut q.cond);
                q
            })
            .collect();

        // split
        let mut split_rng = seed::rng_for(seed, &[stream::SPLIT]);
        let mut train_parts = Vec::new();
        let mut val_parts = Vec::new();
        for p in &normalised {
            let mut idx: Vec<usize> = (0..p.len()).collect();
            idx.shuffle(&mut split_rng);
            let n_val = if p.len() >= 2 {
                ((p.len() as f64 * config.validation_fraction).round() as usize).min(p.len() - 1)
            } else {
                0
            };
            let (v, t) = idx.split_at(n_val);
            train_parts.push(p.select(t));
            if !v.is_empty() {
                val_parts.push(p.select(v));
            }
        }
        if val_parts.is_empty() {
            // too little data to hold any out; monitor the training rows
            val_parts = train_parts.clone();
        }
        let mut val_rng = seed::rng_for(seed, &[stream::VALIDATION]);
        let val_noise: Vec<(Vec<f64>, Array2<f64>)> = val_parts
            .iter()
            .map(|p| draw_path_noise(&mut val_rng, p.len(), p.layout.target_dim))
            .collect();
        if self.curve.zero_field_validation.is_none() {
            let mut z = 0.0;
            let mut n = 0usize;
            for (p, (t, e)) in val_parts.iter().zip(&val_noise) {
                let (_, u) = path_batch(p.target.view(), t, e.view(), config.path.sigma_min)?;
                z += zero_field_loss(&u) * p.len() as f64;
                n += p.len();
            }
            self.curve.zero_field_validation = Some(z / n as f64);
        }

        let mut opt = match self.optimiser.take() {
            Some(mut o) => {
                o.config = config.adam;
                o
            }
            None => Adam::new(config.adam, &self.params),
        };
        let start = self.curve.epochs();
        // when continuing, the current parameters are the incumbent on this
        // validation set
        let mut best = match self.curve.best_epoch {
            Some(e) => Some((self.evaluate_loss(&val_parts, &val_noise, &config.path)?, e)),
            None => None,
        };
        let mut best_params = self.params.clone();
        self.curve.stopped_early = false;

        for epoch in start..start + config.max_epochs {
            let mut sh = seed::rng_for(seed, &[stream::SHUFFLE, epoch as u64]);
            let mut batches: Vec<(usize, Vec<usize>)> = Vec::new();
            for (k, p) in train_parts.iter().enumerate() {
                let mut idx: Vec<usize> = (0..p.len()).collect();
                idx.shuffle(&mut sh);
                for c in idx.chunks(config.batch_size) {
                    batches.push((k, c.to_vec()));
                }
            }
            batches.shuffle(&mut sh);
            let mut noise_rng = seed::rng_for(seed, &[stream::NOISE, epoch as u64]);
            let mut drop_rng = seed::rng_for(seed, &[stream::DROPOUT, epoch as u64]);
            let mut train_loss = 0.0;
            let mut seen = 0usize;
            for (k, rows) in &batches {
                let p = &train_parts[*k];
                let tgt = p.target.select(Axis(0), rows);
                let cond = p.cond.select(Axis(0), rows);
                let fin = p.fn_inputs.select(Axis(0), rows);
                let (t, eps) = draw_path_noise(&mut noise_rng, rows.len(), p.layout.target_dim);
                let batch = FlowBatch {
                    layout: &p.layout,
                    target: tgt.view(),
                    cond: cond.view(),
                    fn_inputs: fin.view(),
                };
                let mut g = self.params.zero_grads();
                let loss = cfm_loss_at(
                    &self.field,
                    &self.params,
                    batch,
                    &t,
                    eps.view(),
                    &config.path,
                    &mut Mode::Train(&mut drop_rng),
                    Some(&mut g),
                )
                .map_err(|e| self.divergence(epoch, e))?;
                if !g.0.iter().all(|a| a.iter().all(|x| x.is_finite())) {
                    return Err(
                        self.divergence(epoch, Error::Numeric("non-finite gradient".into()))
                    );
                }
                opt.update(&mut self.params, &g);
                train_loss += loss * rows.len() as f64;
                seen += rows.len();
            }
            let val = self
                .evaluate_loss(&val_parts, &val_noise, &config.path)
                .map_err(|e| self.divergence(epoch, e))?;
            self.curve.train.push(train_loss / seen.max(1) as f64);
            self.curve.validation.push(val);
            log::debug!(
                "{} epoch {epoch}: train {:.4} val {val:.4}",
                self.task,
                train_loss / seen.max(1) as f64
            );
            match best {
                Some((b, _)) if val >= b => {}
                _ => {
                    best = Some((val, epoch));
                    best_params = self.params.clone();
                }
            }
            let best_epoch = best.map(|b| b.1).unwrap_or(epoch);
            self.curve.best_epoch = Some(best_epoch);
            if epoch - best_epoch >= config.patience {
                self.curve.stopped_early = true;
                break;
            }
        }
        self.params = best_params;
        self.optimiser = Some(opt);
        Ok(())
    }

    fn divergence(&self, epoch: usize, e: Error) -> Error {
        Error::Training {
            epoch,
            message: e.to_string(),
            curve: self.curve.validation.clone(),
        }
    }

    /// Mean CFM loss over normalised sets with fixed noise.
    pub fn evaluate_loss(
        &self,
        parts: &[TrainingSet],
        noise: &[(Vec<f64>, Array2<f64>)],
        path: &PathConfig,
    ) -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for (p, (t, eps)) in parts.iter().zip(noise) {
            for lo in (0..p.len()).step_by(EVAL_CHUNK) {
                let hi = (lo + EVAL_CHUNK).min(p.len());
                let batch = FlowBatch {
                    layout: &p.layout,
                    target: p.target.slice(s![lo..hi, ..]),
                    cond: p.cond.slice(s![lo..hi, ..]),
                    fn_inputs: p.fn_inputs.slice(s![lo..hi, ..]),
                };
                let l = cfm_loss_at(
                    &self.field,
                    &self.params,
                    batch,
                    &t[lo..hi],
                    eps.slice(s![lo..hi, ..]),
                    path,
                    &mut Mode::Eval,
                    None,
                )?;
                total += l * (hi - lo) as f64;
                n += hi - lo;
            }
        }
        Ok(total / n.max(1) as f64)
    }

    /// CFM loss of raw (unnormalised) data under this estimator's statistics.
    pub fn loss_on(&self, set: &TrainingSet, path: &PathConfig, seed: u64) -> Result<f64> {
        let cs = self.normaliser.columns(&set.layout);
        let mut q = set.clone();
        cs.normalise_target(&mut q.target);
        cs.normalise_cond(&mut q.cond);
        let mut rng = seed::rng_for(seed, &[stream::VALIDATION]);
        let noise = draw_path_noise(&mut rng, q.len(), q.layout.target_dim);
        self.evaluate_loss(std::slice::from_ref(&q), std::slice::from_ref(&noise), path)
    }

    /// Integrate one draw per conditioning row. `cond` is unconstrained and
    /// unnormalised; row `r` uses base draws derived from `seeds[r]`.
    pub fn sample_rows(
        &self,
        layout: &Layout,
        cond: ArrayView2<f64>,
        fn_in: ArrayView2<f64>,
        seeds: &[u64],
        solver: &SolverConfig,
    ) -> Result<SampleOutcome> {
        let rows = cond.nrows();
        if seeds.len() != rows || fn_in.nrows() != rows {
            return Err(Error::shape(
                "seeds, conditioning and functional inputs disagree",
            ));
        }
        let cs = self.normaliser.columns(layout);
        let mut c = cond.to_owned();
        cs.normalise_cond(&mut c);
        let d = layout.target_dim;
        let mut out = Array2::zeros((rows, d));
        let mut pending: Vec<usize> = (0..rows).collect();
        let mut retries = 0;
        let mut last_error = None;
        for attempt in 0..MAX_SAMPLE_ATTEMPTS {
            if pending.is_empty() {
                break;
            }
            if attempt > 0 {
                retries += pending.len();
            }
            let results: Vec<Result<Vec<(usize, Option<Vec<f64>>, Option<Error>)>>> = pending
                .par_chunks(SAMPLE_CHUNK)
                .map(|chunk| {
                    let mut base = Array2::zeros((chunk.len(), d));
                    for (r, &row) in chunk.iter().enumerate() {
                        let mut rng = seed::rng_for(seeds[row], &[stream::BASE, attempt]);
                        for j in 0..d {
                            base[[r, j]] = StandardNormal.sample(&mut rng);
                        }
                    }
                    let cc = c.select(Axis(0), chunk);
                    let ff = fn_in.select(Axis(0), chunk);
                    let sol = sample_field(
                        &self.field,
                        &self.params,
                        layout,
                        cc.view(),
                        ff.view(),
                        base.view(),
                        solver,
                    )?;
                    let mut failed: Vec<Option<Error>> = (0..chunk.len()).map(|_| None).collect();
                    for (r, e) in sol.failures {
                        failed[r] = Some(e);
                    }
                    Ok(chunk
                        .iter()
                        .enumerate()
                        .zip(failed)
                        .map(|((r, &row), f)| match f {
                            None => (row, Some(sol.y.row(r).to_vec()), None),
                            Some(e) => (row, None, Some(e)),
                        })
                        .collect())
                })
                .collect();
            let mut next = Vec::new();
            for res in results {
                for (row, v, e) in res? {
                    match v {
                        Some(v) => out.row_mut(row).assign(&ndarray::aview1(&v)),
                        None => {
                            next.push(row);
                            last_error = e;
                        }
                    }
                }
            }
            pending = next;
        }
        if !pending.is_empty() {
            let reason = last_error.map(|e| e.to_string()).unwrap_or_default();
            return Err(Error::Integration {
                t: 1.0,
                steps: 0,
                reason: format!(
                    "{} of {rows} flow solves still failing after {MAX_SAMPLE_ATTEMPTS} attempts; last: {reason}",
                    pending.len()
                ),
            });
        }
        cs.denormalise_target(&mut out);
        Ok(SampleOutcome {
            values: out,
            retries,
        })
    }
}

impl SiteSampler for Estimator {
    fn sample_sites(
        &self,
        model: &HierarchicalModel,
        theta_g: ArrayView2<f64>,
        eta: ArrayView2<f64>,
        schedule: ArrayView2<f64>,
        seeds: &[u64],
    ) -> Result<Array2<f64>> {
        let layout = self.layout(model, Role::Surrogate, 1)?;
        let g = globals_unconstrained(model, theta_g)?;
        let l = locals_unconstrained(model, eta)?;
        let cond = ndarray::concatenate(Axis(1), &[g.view(), l.view()])
            .map_err(|e| Error::shape(e.to_string()))?;
        let f = fn_inputs(model, schedule);
        let site_seeds: Vec<u64> = seeds
            .iter()
            .map(|&s| seed::derive(s, &[stream::SURROGATE]))
            .collect();
        let out = self.sample_rows(
            &layout,
            cond.view(),
            f.view(),
            &site_seeds,
            &SolverConfig::default(),
        )?;
        Ok(out.values.mapv(|u| model.observation.to_constrained(u)))
    }
}

/// Anything that draws joint posterior samples `(theta_g, eta)`.
pub trait PosteriorSampler: Sync {
    /// One unconstrained flat draw `(theta_g, eta_1..eta_n)` per row of
    /// constrained observations `y` with schedules `schedule`.
    fn draw(
        &self,
        model: &HierarchicalModel,
        n_sites: usize,
        y: ArrayView2<f64>,
        schedule: ArrayView2<f64>,
        seeds: &[u64],
        solver: &SolverConfig,
    ) -> Result<Array2<f64>>;
}

impl PosteriorSampler for Estimator {
    fn draw(
        &self,
        model: &HierarchicalModel,
        n_sites: usize,
        y: ArrayView2<f64>,
        schedule: ArrayView2<f64>,
        seeds: &[u64],
        solver: &SolverConfig,
    ) -> Result<Array2<f64>> {
        let layout = self.layout(model, Role::Posterior, n_sites)?;
        let cond = observations_unconstrained(model, y);
        let f = fn_inputs(model, schedule);
        Ok(self
            .sample_rows(&layout, cond.view(), f.view(), seeds, solver)?
            .values)
    }
}

/// Global estimator `q(theta_g | y)` and per-site `q(eta_s | theta_g, y_s)`.
#[derive(Debug, Clone)]
pub struct PfEstimator {
    pub global: Estimator,
    pub local: Estimator,
}

impl PosteriorSampler for PfEstimator {
    fn draw(
        &self,
        model: &HierarchicalModel,
        n_sites: usize,
        y: ArrayView2<f64>,
        schedule: ArrayView2<f64>,
        seeds: &[u64],
        solver: &SolverConfig,
    ) -> Result<Array2<f64>> {
        let rows = y.nrows();
        let gl = self.global.layout(model, Role::GlobalPosterior, n_sites)?;
        let yu = observations_unconstrained(model, y);
        let f = fn_inputs(model, schedule);
        let g_seeds: Vec<u64> = seeds
            .iter()
            .map(|&s| seed::derive(s, &[stream::GLOBAL_DRAW]))
            .collect();
        let g = self
            .global
            .sample_rows(&gl, yu.view(), f.view(), &g_seeds, solver)?
            .values;
        let ll = self.local.layout(model, Role::LocalPosterior, 1)?;
        let (d_g, d_l, d_y) = (model.d_g(), model.d_l(), model.d_y());
        let np = f.ncols() / n_sites.max(1);
        let mut cond = Array2::zeros((rows * n_sites, d_g + d_y));
        let mut lf = Array2::zeros((rows * n_sites, np));
        let mut l_seeds = Vec::with_capacity(rows * n_sites);
        for r in 0..rows {
            for s_ in 0..n_sites {
                let k = r * n_sites + s_;
                cond.slice_mut(s![k, ..d_g]).assign(&g.row(r));
                cond.slice_mut(s![k, d_g..])
                    .assign(&yu.slice(s![r, s_ * d_y..(s_ + 1) * d_y]));
                lf.row_mut(k)
                    .assign(&f.slice(s![r, s_ * np..(s_ + 1) * np]));
                l_seeds.push(seed::derive(seeds[r], &[stream::BASE, s_ as u64]));
            }
        }
        let eta = self
            .local
            .sample_rows(&ll, cond.view(), lf.view(), &l_seeds, solver)?
            .values;
        let mut out = Array2::zeros((rows, d_g + n_sites * d_l));
        for r in 0..rows {
            out.slice_mut(s![r, ..d_g]).assign(&g.row(r));
            for s_ in 0..n_sites {
                out.slice_mut(s![r, d_g + s_ * d_l..d_g + (s_ + 1) * d_l])
                    .assign(&eta.row(r * n_sites + s_));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct PosteriorSamples {
    /// Unconstrained flat draws, one per row.
    pub unconstrained: Array2<f64>,
    pub draws: Vec<ParameterDraw>,
}

/// `n_samples` posterior draws for one observation, mapped back to the
/// constrained parameter space.
#[allow(clippy::too_many_arguments)]
pub fn sample_posterior(
    sampler: &dyn PosteriorSampler,
    model: &HierarchicalModel,
    n_sites: usize,
    y_obs: ArrayView1<f64>,
    schedule: ArrayView1<f64>,
    n_samples: usize,
    seed: u64,
    solver: &SolverConfig,
) -> Result<PosteriorSamples> {
    if y_obs.len() != n_sites * model.d_y() {
        return Err(Error::shape(format!(
            "observation of length {} does not hold {n_sites} sites of width {}",
            y_obs.len(),
            model.d_y()
        )));
    }
    let y = y_obs.insert_axis(Axis(0));
    let y = y.broadcast((n_samples, y_obs.len())).unwrap().to_owned();
    let sch = schedule
        .insert_axis(Axis(0))
        .broadcast((n_samples, schedule.len()))
        .unwrap()
        .to_owned();
    let seeds: Vec<u64> = (0..n_samples as u64)
        .map(|i| seed::derive(seed, &[stream::BASE, i]))
        .collect();
    let u = sampler.draw(model, n_sites, y.view(), sch.view(), &seeds, solver)?;
    let draws = u
        .rows()
        .into_iter()
        .map(|r| model.to_constrained(&r.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorSamples {
        unconstrained: u,
        draws,
    })
}
