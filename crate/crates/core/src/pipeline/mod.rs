//! Two-stage likelihood-factorised training, the ablation variants, dataset
//! and checkpoint persistence, and simulation-budget accounting.

pub mod budget;
pub mod data;
pub mod estimator;
pub mod persist;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use budget::{stick_breaking, BudgetLedger, LedgerSnapshot};
pub use data::{
    generate_direct_dataset, generate_multi_site_dataset, generate_single_site_dataset,
    training_set, Dataset, OracleSurrogate, SiteSampler, TrainingSet,
};
pub use estimator::{
    sample_posterior, Estimator, PfEstimator, PosteriorSampler, PosteriorSamples, TrainingConfig,
    TrainingCurve,
};
pub use persist::{load_checkpoint, load_dataset, persist_checkpoint, persist_dataset};

use crate::error::{Error, Result};
use crate::flow::Architecture;
use crate::model::HierarchicalModel;
use crate::nets::MlpConfig;
use crate::ode::SolverConfig;
use crate::seed::{self, stream};
use crate::tokeniser::Role;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Surrogate on single-site data, posterior on surrogate-synthesised data.
    Lf,
    /// Posterior trained on true multi-site simulations.
    Direct,
    /// One network for both the surrogate and the posterior.
    Joint,
    /// Likelihood-factorised training with MLP vector fields.
    Mlp,
    /// Likelihood-factorised training without group ids.
    NoGrouping,
    /// Separate global and local estimators.
    Pf,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Lf,
        Method::Direct,
        Method::Joint,
        Method::Mlp,
        Method::NoGrouping,
        Method::Pf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Lf => "lf",
            Method::Direct => "direct",
            Method::Joint => "joint",
            Method::Mlp => "mlp",
            Method::NoGrouping => "no_grouping",
            Method::Pf => "pf",
        }
    }

    /// True-simulator calls the method is charged for.
    pub fn expected_calls(self, n: u64, n_s: u64) -> u64 {
        match self {
            Method::Direct => n * n_s,
            _ => n,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config {
                field: "method".into(),
                message: format!(
                    "unknown method {s:?}; expected one of {}",
                    Method::ALL.map(|m| m.name()).join(", ")
                ),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub architecture: Architecture,
    /// Vector field used by the MLP ablation.
    pub mlp: MlpConfig,
    pub surrogate_training: TrainingConfig,
    pub posterior_training: TrainingConfig,
    pub solver: SolverConfig,
    /// Size of the surrogate-synthesised multi-site set; defaults to `N`.
    pub n_multi: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            architecture: Architecture::Transformer {
                transformer: Default::default(),
                embed: Default::default(),
            },
            mlp: MlpConfig::default(),
            surrogate_training: TrainingConfig::default(),
            posterior_training: TrainingConfig::default(),
            solver: SolverConfig::default(),
            n_multi: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.surrogate_training.validate()?;
        self.posterior_training.validate()?;
        self.solver.validate()?;
        if let Architecture::Transformer { transformer, .. } = &self.architecture {
            transformer.validate()?;
        }
        Ok(())
    }
}

/// Trained estimators of one method run.
#[derive(Debug, Clone)]
pub enum Trained {
    Single {
        posterior: Estimator,
        surrogate: Option<Estimator>,
    },
    Pf(PfEstimator),
}

impl Trained {
    pub fn sampler(&self) -> &dyn PosteriorSampler {
        match self {
            Trained::Single { posterior, .. } => posterior,
            Trained::Pf(pf) => pf,
        }
    }

    pub fn surrogate(&self) -> Option<&Estimator> {
        match self {
            Trained::Single { surrogate, .. } => surrogate.as_ref(),
            Trained::Pf(_) => None,
        }
    }

    pub fn estimators(&self) -> Vec<(&'static str, &Estimator)> {
        match self {
            Trained::Single {
                posterior,
                surrogate,
            } => {
                let mut v = vec![("posterior", posterior)];
                if let Some(s) = surrogate {
                    v.push(("surrogate", s));
                }
                v
            }
            Trained::Pf(pf) => vec![("global", &pf.global), ("local", &pf.local)],
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub method: Method,
    pub n: usize,
    pub n_s: usize,
    pub trained: Trained,
    pub ledger: LedgerSnapshot,
    /// Multi-site set the posterior was fitted on, kept so training can be
    /// resumed without new simulations.
    pub posterior_data: Option<Dataset>,
}

/// Seeds of the independent stages of a run.
pub fn seed_lineage(seed: u64) -> BTreeMap<String, u64> {
    BTreeMap::from([
        ("master".to_string(), seed),
        (
            "stage1_data".to_string(),
            seed::derive(seed, &[stream::STAGE1]),
        ),
        (
            "stage2_data".to_string(),
            seed::derive(seed, &[stream::STAGE2]),
        ),
        ("init".to_string(), seed::derive(seed, &[stream::INIT])),
        ("train".to_string(), seed::derive(seed, &[stream::SHUFFLE])),
    ])
}

/// Stage 1: fit the per-site surrogate on single-site data.
pub fn train_surrogate(
    model: &HierarchicalModel,
    data: &Dataset,
    architecture: Architecture,
    grouping: bool,
    config: &TrainingConfig,
    seed: u64,
) -> Result<Estimator> {
    if data.is_empty() {
        return Err(Error::Config {
            field: "dataset".into(),
            message: "cannot train a surrogate on an empty dataset".into(),
        });
    }
    let set = training_set(model, data, Role::Surrogate, grouping)?;
    let mut est = Estimator::new(
        model,
        Role::Surrogate,
        grouping,
        architecture,
        1,
        seed::derive(seed, &[stream::INIT]),
    )?;
    est.fit(&[set], config, seed)?;
    Ok(est)
}

/// Stage 2: fit the joint posterior on multi-site data.
pub fn train_posterior(
    model: &HierarchicalModel,
    data: &Dataset,
    architecture: Architecture,
    grouping: bool,
    config: &TrainingConfig,
    seed: u64,
) -> Result<Estimator> {
    if data.is_empty() {
        return Err(Error::Config {
            field: "dataset".into(),
            message: "cannot train a posterior on an empty dataset".into(),
        });
    }
    let set = training_set(model, data, Role::Posterior, grouping)?;
    let mut est = Estimator::new(
        model,
        Role::Posterior,
        grouping,
        architecture,
        data.n_sites,
        seed::derive(seed, &[stream::INIT]),
    )?;
    est.fit(&[set], config, seed)?;
    Ok(est)
}

/// Train `method` with simulation budget `n` for `n_s` sites.
pub fn run_method(
    method: Method,
    model: &HierarchicalModel,
    n: usize,
    n_s: usize,
    config: &PipelineConfig,
    seed: u64,
    ledger: &BudgetLedger,
) -> Result<RunOutcome> {
    config.validate()?;
    if n == 0 || n_s == 0 {
        return Err(Error::Config {
            field: "n".into(),
            message: "budget and site count must be at least 1".into(),
        });
    }
    let s1 = seed::derive(seed, &[stream::STAGE1]);
    let s2 = seed::derive(seed, &[stream::STAGE2]);
    let t1 = seed::derive(seed, &[stream::SHUFFLE, 1]);
    let t2 = seed::derive(seed, &[stream::SHUFFLE, 2]);
    let n_multi = config.n_multi.unwrap_or(n);
    let arch = match method {
        Method::Mlp => Architecture::Mlp {
            mlp: config.mlp.clone(),
        },
        _ => config.architecture.clone(),
    };
    let grouping = method != Method::NoGrouping;
    let calls_before = ledger.true_simulator_calls();

    let mut posterior_data = None;
    let trained = match method {
        Method::Lf | Method::Mlp | Method::NoGrouping => {
            let d1 = generate_single_site_dataset(model, n, s1, ledger)?;
            let sur = train_surrogate(
                model,
                &d1,
                arch.clone(),
                grouping,
                &config.surrogate_training,
                t1,
            )?;
            let stage1_calls = ledger.true_simulator_calls();
            let d2 = generate_multi_site_dataset(model, &sur, n_multi, n_s, s2, ledger)?;
            debug_assert_eq!(ledger.true_simulator_calls(), stage1_calls);
            let post = train_posterior(model, &d2, arch, grouping, &config.posterior_training, t2)?;
            posterior_data = Some(d2);
            Trained::Single {
                posterior: post,
                surrogate: Some(sur),
            }
        }
        Method::Direct => {
            let d = generate_direct_dataset(model, n, n_s, s1, ledger)?;
            let post = train_posterior(model, &d, arch, grouping, &config.posterior_training, t2)?;
            posterior_data = Some(d);
            Trained::Single {
                posterior: post,
                surrogate: None,
            }
        }
        Method::Joint => {
            if arch.is_mlp() {
                return Err(Error::Config {
                    field: "architecture".into(),
                    message: "the joint variant needs a token-based vector field".into(),
                });
            }
            let d1 = generate_single_site_dataset(model, n, s1, ledger)?;
            let sur_set = training_set(model, &d1, Role::Surrogate, grouping)?;
            let mut est = Estimator::new(
                model,
                Role::Posterior,
                grouping,
                arch,
                n_s,
                seed::derive(seed, &[stream::INIT]),
            )?;
            est.fit(
                std::slice::from_ref(&sur_set),
                &config.surrogate_training,
                t1,
            )?;
            let d2 = generate_multi_site_dataset(model, &est, n_multi, n_s, s2, ledger)?;
            let post_set = training_set(model, &d2, Role::Posterior, grouping)?;
            est.fit(&[sur_set, post_set], &config.posterior_training, t2)?;
            Trained::Single {
                posterior: est,
                surrogate: None,
            }
        }
        Method::Pf => Trained::Pf(train_pf(model, n, n_s, config, seed, ledger)?),
    };
    let charged = ledger.true_simulator_calls() - calls_before;
    let expected = method.expected_calls(n as u64, n_s as u64);
    if charged != expected {
        return Err(Error::Config {
            field: "budget".into(),
            message: format!("{method} charged {charged} simulator calls, expected {expected}"),
        });
    }
    Ok(RunOutcome {
        method,
        n,
        n_s,
        trained,
        ledger: ledger.snapshot(),
        posterior_data,
    })
}

/// Continue fitting the posterior of a loaded run on its stored training
/// set. The curve and optimiser state carry over; no simulator is called.
pub fn resume_posterior(
    run: &mut RunOutcome,
    model: &HierarchicalModel,
    config: &TrainingConfig,
    seed: u64,
) -> Result<()> {
    let Some(data) = &run.posterior_data else {
        return Err(Error::Config {
            field: "method".into(),
            message: format!("{} runs cannot be resumed", run.method),
        });
    };
    let Trained::Single { posterior, .. } = &mut run.trained else {
        unreachable!("runs with stored posterior data have a single posterior")
    };
    let set = training_set(model, data, Role::Posterior, posterior.grouping)?;
    let epochs = posterior.curve.epochs() as u64;
    posterior.fit(
        &[set],
        config,
        seed::derive(seed, &[stream::SHUFFLE, 2, epochs]),
    )
}

fn train_pf(
    model: &HierarchicalModel,
    n: usize,
    n_s: usize,
    config: &PipelineConfig,
    seed: u64,
    ledger: &BudgetLedger,
) -> Result<PfEstimator> {
    let counts = stick_breaking(n as u64, n_s, seed)?;
    let mut by_count: BTreeMap<usize, usize> = BTreeMap::new();
    for c in counts {
        *by_count.entry(c).or_default() += 1;
    }
    let s1 = seed::derive(seed, &[stream::STAGE1]);
    let mut datasets = Vec::new();
    for (&sites, &sims) in &by_count {
        datasets.push(generate_direct_dataset(
            model,
            sims,
            sites,
            seed::derive(s1, &[sites as u64]),
            ledger,
        )?);
    }
    let arch = config.architecture.clone();
    let global_sets = datasets
        .iter()
        .map(|d| training_set(model, d, Role::GlobalPosterior, true))
        .collect::<Result<Vec<_>>>()?;
    let mut global = Estimator::new(
        model,
        Role::GlobalPosterior,
        true,
        arch.clone(),
        n_s,
        seed::derive(seed, &[stream::INIT, 1]),
    )?;
    global.fit(
        &global_sets,
        &config.posterior_training,
        seed::derive(seed, &[stream::SHUFFLE, 1]),
    )?;

    // local slices conditioned on draws from the trained global estimator
    let (d_g, d_y) = (model.d_g(), model.d_y());
    let mut local_sets = Vec::new();
    for (k, d) in datasets.iter().enumerate() {
        let gs = &global_sets[k];
        let seeds: Vec<u64> = (0..d.len() as u64)
            .map(|i| seed::derive(seed, &[stream::GLOBAL_DRAW, k as u64, i]))
            .collect();
        let g_hat = global
            .sample_rows(
                &gs.layout,
                gs.cond.view(),
                gs.fn_inputs.view(),
                &seeds,
                &config.solver,
            )?
            .values;
        let mut single = training_set(model, d, Role::LocalPosterior, true)?;
        for i in 0..d.len() {
            for s_ in 0..d.n_sites {
                single
                    .cond
                    .slice_mut(s![i * d.n_sites + s_, ..d_g])
                    .assign(&g_hat.row(i));
            }
        }
        debug_assert_eq!(single.cond.ncols(), d_g + d_y);
        local_sets.push(single);
    }
    let merged = merge_sets(local_sets);
    let mut local = Estimator::new(
        model,
        Role::LocalPosterior,
        true,
        arch,
        1,
        seed::derive(seed, &[stream::INIT, 2]),
    )?;
    local.fit(
        &[merged],
        &config.posterior_training,
        seed::derive(seed, &[stream::SHUFFLE, 2]),
    )?;
    Ok(PfEstimator { global, local })
}

/// Concatenate sets that share a layout.
fn merge_sets(sets: Vec<TrainingSet>) -> TrainingSet {
    let mut it = sets.into_iter();
    let mut first = it.next().expect("at least one set");
    for s in it {
        let cat = |a: &Array2<f64>, b: &Array2<f64>| {
            ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("same widths")
        };
        first.target = cat(&first.target, &s.target);
        first.cond = cat(&first.cond, &s.cond);
        first.fn_inputs = cat(&first.fn_inputs, &s.fn_inputs);
    }
    first
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunRecord {
    method: Method,
    n: usize,
    n_s: usize,
    ledger: LedgerSnapshot,
}

pub const RUN_FILE: &str = "run.json";
const POSTERIOR_DATA: &str = "posterior_data";

/// Write every estimator of a run into its own checkpoint directory.
pub fn persist_run(dir: &Path, run: &RunOutcome, config: Value, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, est) in run.trained.estimators() {
        persist_checkpoint(&dir.join(name), est, config.clone(), seed_lineage(seed))?;
    }
    let rec = RunRecord {
        method: run.method,
        n: run.n,
        n_s: run.n_s,
        ledger: run.ledger,
    };
    if let Some(d) = &run.posterior_data {
        persist_dataset(
            &dir.join(POSTERIOR_DATA),
            d,
            config.clone(),
            seed_lineage(seed),
        )?;
    }
    let body =
        serde_json::json!({ "run": rec, "config": config, "seed_lineage": seed_lineage(seed) });
    std::fs::write(dir.join(RUN_FILE), serde_json::to_vec_pretty(&body)?)?;
    Ok(())
}

pub fn load_run(dir: &Path) -> Result<RunOutcome> {
    let path = dir.join(RUN_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::format(&path, format!("cannot read run record: {e}")))?;
    let body: Value =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let rec: RunRecord = serde_json::from_value(body["run"].clone())
        .map_err(|e| Error::format(&path, e.to_string()))?;
    let trained = if rec.method == Method::Pf {
        Trained::Pf(PfEstimator {
            global: load_checkpoint(&dir.join("global"))?,
            local: load_checkpoint(&dir.join("local"))?,
        })
    } else {
        let sur = dir.join("surrogate");
        Trained::Single {
            posterior: load_checkpoint(&dir.join("posterior"))?,
            surrogate: if sur.exists() {
                Some(load_checkpoint(&sur)?)
            } else {
                None
            },
        }
    };
    let pd = dir.join(POSTERIOR_DATA);
    Ok(RunOutcome {
        method: rec.method,
        n: rec.n,
        n_s: rec.n_s,
        trained,
        ledger: rec.ledger,
        posterior_data: if pd.exists() {
            Some(load_dataset(&pd)?)
        } else {
            None
        },
    })
}
