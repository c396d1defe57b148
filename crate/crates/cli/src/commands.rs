use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use ndarray::Array2;
use serde::Serialize;
use serde_json::{json, Value};
use tfmpe::diagnostics::{
    self, lc2st_datasets, mean_ci95, mmd2, posterior_predictive, predictive_bands, tarp_dataset,
    CostReport, MetricRow, PredictiveSource,
};
use tfmpe::model::HierarchicalModel;
use tfmpe::pipeline::{
    generate_direct_dataset, generate_single_site_dataset, load_dataset, load_run, persist_dataset,
    persist_run, resume_posterior, run_method, seed_lineage, BudgetLedger, Dataset, RunOutcome,
    RUN_FILE,
};
use tfmpe::seed::{self, stream};

use crate::config::{RunConfig, SweepConfig};

fn config_error(field: &str, message: impl Into<String>) -> tfmpe::Error {
    tfmpe::Error::Config {
        field: field.into(),
        message: message.into(),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn print_json(value: &Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json"));
}

pub fn simulate(cfg: &RunConfig, sites: usize) -> Result<()> {
    cfg.validate()?;
    let model = cfg.task_id()?.model();
    let ledger = BudgetLedger::new();
    let data = if sites == 1 {
        generate_single_site_dataset(&model, cfg.n, cfg.seed, &ledger)?
    } else {
        generate_direct_dataset(&model, cfg.n, sites, cfg.seed, &ledger)?
    };
    let mut echo = cfg.echo();
    echo["n_s"] = json!(sites);
    persist_dataset(&cfg.output, &data, echo, seed_lineage(cfg.seed))?;
    print_json(&json!({
        "output": cfg.output,
        "samples": data.len(),
        "sites": sites,
        "ledger": ledger.snapshot(),
    }));
    Ok(())
}

fn train_summary(run: &RunOutcome) -> Value {
    let curves: serde_json::Map<String, Value> = run
        .trained
        .estimators()
        .into_iter()
        .map(|(name, e)| {
            (
                name.to_string(),
                json!({
                    "epochs": e.curve.epochs(),
                    "best_validation": e.curve.best_validation(),
                    "stopped_early": e.curve.stopped_early,
                }),
            )
        })
        .collect();
    json!({ "method": run.method, "N": run.n, "n_s": run.n_s, "ledger": run.ledger, "estimators": curves })
}

pub fn train(cfg: &RunConfig, resume: bool) -> Result<()> {
    cfg.validate()?;
    let model = cfg.task_id()?.model();
    let out = &cfg.output;
    let run = if resume && out.join(RUN_FILE).exists() {
        let mut run = load_run(out)?;
        if run.method != cfg.method || run.n != cfg.n || run.n_s != cfg.n_s {
            return Err(config_error(
                "output",
                format!(
                    "existing run is {} with N = {}, n_s = {}; config asks for {} with N = {}, n_s = {}",
                    run.method, run.n, run.n_s, cfg.method, cfg.n, cfg.n_s
                ),
            )
            .into());
        }
        info!("resuming posterior training in {}", out.display());
        resume_posterior(&mut run, &model, &cfg.pipeline.posterior_training, cfg.seed)?;
        run
    } else {
        let ledger = BudgetLedger::new();
        run_method(
            cfg.method,
            &model,
            cfg.n,
            cfg.n_s,
            &cfg.pipeline,
            cfg.seed,
            &ledger,
        )?
    };
    persist_run(out, &run, cfg.echo(), cfg.seed)?;
    print_json(&train_summary(&run));
    Ok(())
}

/// The run's echoed config with the file given on the command line taking
/// precedence.
pub fn run_config(run_dir: &Path, explicit: Option<RunConfig>) -> Result<RunConfig> {
    if let Some(c) = explicit {
        return Ok(c);
    }
    let path = run_dir.join(RUN_FILE);
    let text = fs::read_to_string(&path).map_err(|e| {
        tfmpe::Error::format(
            &path,
            format!("missing or unreadable checkpoint record: {e}"),
        )
    })?;
    let body: Value =
        serde_json::from_str(&text).map_err(|e| tfmpe::Error::format(&path, e.to_string()))?;
    serde_json::from_value(body["config"].clone())
        .map_err(|e| tfmpe::Error::format(&path, format!("config echo: {e}")).into())
}

fn column_names(model: &HierarchicalModel, n_sites: usize) -> Vec<String> {
    let expand = |v: &tfmpe::model::Variable, suffix: &str| -> Vec<String> {
        if v.dim == 1 {
            vec![format!("{}{suffix}", v.name)]
        } else {
            (0..v.dim)
                .map(|i| format!("{}[{i}]{suffix}", v.name))
                .collect()
        }
    };
    let mut cols: Vec<String> = model.globals.iter().flat_map(|v| expand(v, "")).collect();
    for s in 0..n_sites {
        cols.extend(
            model
                .locals
                .iter()
                .flat_map(|v| expand(v, &format!("@{s}"))),
        );
    }
    cols
}

fn constrained(model: &HierarchicalModel, u: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(u.dim());
    for (r, row) in u.rows().into_iter().enumerate() {
        let d = model.to_constrained(&row.to_vec())?;
        let flat: Vec<f64> = d
            .theta_g
            .iter()
            .chain(d.eta.iter().flatten())
            .copied()
            .collect();
        out.row_mut(r).assign(&ndarray::aview1(&flat));
    }
    Ok(out)
}

fn write_matrix(path: &Path, header: &[String], m: &Array2<f64>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header)?;
    for row in m.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn observation_data(data_dir: &Path, model: &HierarchicalModel, n_s: usize) -> Result<Dataset> {
    let data = load_dataset(data_dir)?;
    if data.task != model.name || data.n_sites != n_s {
        return Err(config_error(
            "data",
            format!(
                "dataset holds {} with {} sites; run expects {} with {n_s}",
                data.task, data.n_sites, model.name
            ),
        )
        .into());
    }
    Ok(data)
}

pub struct SampleArgs<'a> {
    pub run: &'a Path,
    pub data: &'a Path,
    pub index: usize,
    pub n_samples: usize,
    pub output: &'a Path,
}

pub fn sample(a: SampleArgs<'_>, explicit: Option<RunConfig>) -> Result<()> {
    let cfg = run_config(a.run, explicit)?;
    let model = cfg.task_id()?.model();
    let run = load_run(a.run)?;
    let data = observation_data(a.data, &model, run.n_s)?;
    if a.index >= data.len() {
        return Err(config_error("index", format!("dataset has {} rows", data.len())).into());
    }
    let u = diagnostics::draw_at(
        run.trained.sampler(),
        &model,
        &data,
        a.index,
        a.n_samples,
        &cfg.pipeline.solver,
        seed::derive(cfg.seed, &[stream::OBSERVATION, a.index as u64]),
    )?;
    let c = constrained(&model, &u)?;
    write_matrix(a.output, &column_names(&model, run.n_s), &c)?;
    write_json(
        &a.output.with_extension("json"),
        &json!({ "config": cfg.echo(), "seed_lineage": seed_lineage(cfg.seed), "index": a.index, "draws": a.n_samples }),
    )?;
    print_json(&json!({ "output": a.output, "draws": a.n_samples }));
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Diagnostic {
    Lc2st,
    Tarp,
    Ppc,
    Mmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Predictive {
    Simulator,
    Surrogate,
}

pub struct EvaluateArgs<'a> {
    pub run: &'a Path,
    pub data: &'a Path,
    pub diagnostic: Diagnostic,
    pub output: &'a Path,
    pub index: usize,
    pub predictive: Predictive,
    pub reference: Option<&'a Path>,
}

#[derive(Serialize)]
struct ObservationRow {
    observation: usize,
    t_mse: f64,
    p_value: f64,
}

#[derive(Serialize)]
struct CurveRow {
    alpha: f64,
    ecp: f64,
}

#[derive(Serialize)]
struct BandRow {
    column: usize,
    lo: f64,
    median: f64,
    hi: f64,
    observed: f64,
}

pub fn evaluate(a: EvaluateArgs<'_>, explicit: Option<RunConfig>) -> Result<()> {
    let cfg = run_config(a.run, explicit)?;
    cfg.validate()?;
    let model = cfg.task_id()?.model();
    let run = load_run(a.run)?;
    let data = observation_data(a.data, &model, run.n_s)?;
    let d = &cfg.diagnostics;
    let solver = &cfg.pipeline.solver;
    let sampler = run.trained.sampler();
    let eval_seed = seed::derive(cfg.seed, &[stream::VALIDATION]);
    let header = json!({
        "config": cfg.echo(),
        "seed_lineage": seed_lineage(cfg.seed),
        "run": a.run,
        "data": a.data,
    });
    let mut report = header.clone();
    match a.diagnostic {
        Diagnostic::Lc2st => {
            let need = d.n_observations + d.lc2st.n_cal;
            if data.len() < need {
                return Err(config_error(
                    "data",
                    format!(
                        "local classifier test needs {need} samples, dataset has {}",
                        data.len()
                    ),
                )
                .into());
            }
            let rows: Vec<usize> = (0..data.len()).collect();
            let obs = data.select(&rows[..d.n_observations]);
            let cal = data.select(&rows[d.n_observations..need]);
            let res = lc2st_datasets(sampler, &model, &cal, &obs, &d.lc2st, solver, eval_seed)?;
            let t: Vec<f64> = res.iter().map(|r| r.t_mse).collect();
            let (mean, ci95) = mean_ci95(&t);
            let per: Vec<ObservationRow> = res
                .iter()
                .enumerate()
                .map(|(i, r)| ObservationRow {
                    observation: i,
                    t_mse: r.t_mse,
                    p_value: r.p_value,
                })
                .collect();
            write_csv(&a.output.join("per_observation.csv"), &per)?;
            let row = MetricRow {
                task: cfg.task.clone(),
                method: run.method.to_string(),
                n: run.n as u64,
                n_s: run.n_s as u64,
                mean,
                ci95,
            };
            write_csv(&a.output.join("rows.csv"), std::slice::from_ref(&row))?;
            report["lc2st"] = json!({ "results": res, "mean": mean, "ci95": ci95 });
        }
        Diagnostic::Tarp => {
            let n = d.tarp_cases.min(data.len());
            let rows: Vec<usize> = (0..n).collect();
            let res = tarp_dataset(
                sampler,
                &model,
                &data.select(&rows),
                d.tarp_samples,
                solver,
                eval_seed,
            )?;
            let curve: Vec<CurveRow> = res
                .alpha
                .iter()
                .zip(&res.ecp)
                .map(|(&alpha, &ecp)| CurveRow { alpha, ecp })
                .collect();
            write_csv(&a.output.join("tarp_curve.csv"), &curve)?;
            report["tarp"] = json!({
                "cases": n,
                "atc": res.atc,
                "ks_p": res.ks_p,
                "max_deviation": res.max_deviation(),
            });
        }
        Diagnostic::Ppc => {
            let u = diagnostics::draw_at(
                sampler,
                &model,
                &data,
                a.index,
                d.ppc_draws,
                solver,
                eval_seed,
            )?;
            let draws = u
                .rows()
                .into_iter()
                .map(|r| model.to_constrained(&r.to_vec()))
                .collect::<tfmpe::Result<Vec<_>>>()?;
            let ledger = BudgetLedger::new();
            let source = match a.predictive {
                Predictive::Simulator => PredictiveSource::Simulator(&ledger),
                Predictive::Surrogate => {
                    PredictiveSource::Surrogate(run.trained.surrogate().ok_or_else(|| {
                        config_error(
                            "predictive",
                            format!("{} runs have no surrogate", run.method),
                        )
                    })?)
                }
            };
            let pred = posterior_predictive(
                &model,
                &source,
                &draws,
                data.schedule.row(a.index),
                eval_seed,
            )?;
            let bands = predictive_bands(&pred, 0.05, 0.95);
            let rows: Vec<BandRow> = (0..bands.nrows())
                .map(|j| BandRow {
                    column: j,
                    lo: bands[[j, 0]],
                    median: bands[[j, 1]],
                    hi: bands[[j, 2]],
                    observed: data.y[[a.index, j]],
                })
                .collect();
            write_csv(&a.output.join("ppc_bands.csv"), &rows)?;
            report["ppc"] = json!({
                "index": a.index,
                "draws": d.ppc_draws,
                "simulator_calls": ledger.true_simulator_calls(),
            });
        }
        Diagnostic::Mmd => {
            let other = a.reference.ok_or_else(|| {
                config_error("reference", "the kernel test needs --reference RUN")
            })?;
            let reference = load_run(other)?;
            let s = d.mmd_samples;
            let x = diagnostics::draw_at(sampler, &model, &data, a.index, s, solver, eval_seed)?;
            let y = diagnostics::draw_at(
                reference.trained.sampler(),
                &model,
                &data,
                a.index,
                s,
                solver,
                seed::derive(eval_seed, &[1]),
            )?;
            let res = mmd2(x.view(), y.view(), d.mmd_permutations, eval_seed)?;
            report["mmd"] = json!({ "reference": other, "index": a.index, "result": res });
        }
    }
    write_json(&a.output.join("report.json"), &report)?;
    print_json(&report);
    Ok(())
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
struct CellMetrics {
    config: RunConfig,
    t_mse: Vec<f64>,
    mean: f64,
    ci95: f64,
    true_simulator_calls: u64,
}

/// Train and score one sweep cell; returns cached metrics when present.
fn run_cell(cell: &RunConfig, dir: &Path) -> Result<CellMetrics> {
    let path = dir.join("metrics.json");
    if path.exists() {
        let text = fs::read_to_string(&path)?;
        if let Ok(m) = serde_json::from_str::<CellMetrics>(&text) {
            info!("cached {}", dir.display());
            return Ok(m);
        }
    }
    info!(
        "running {} {} N={} n_s={} seed={}",
        cell.task, cell.method, cell.n, cell.n_s, cell.seed
    );
    let model = cell.task_id()?.model();
    let ledger = BudgetLedger::new();
    let run = run_method(
        cell.method,
        &model,
        cell.n,
        cell.n_s,
        &cell.pipeline,
        cell.seed,
        &ledger,
    )?;
    persist_run(&dir.join("run"), &run, cell.echo(), cell.seed)?;
    let d = &cell.diagnostics;
    let eval_ledger = BudgetLedger::new();
    let eval = generate_direct_dataset(
        &model,
        d.n_observations + d.lc2st.n_cal,
        cell.n_s,
        seed::derive(cell.seed, &[stream::OBSERVATION]),
        &eval_ledger,
    )?;
    let rows: Vec<usize> = (0..eval.len()).collect();
    let res = lc2st_datasets(
        run.trained.sampler(),
        &model,
        &eval.select(&rows[d.n_observations..]),
        &eval.select(&rows[..d.n_observations]),
        &d.lc2st,
        &cell.pipeline.solver,
        seed::derive(cell.seed, &[stream::VALIDATION]),
    )?;
    let t_mse: Vec<f64> = res.iter().map(|r| r.t_mse).collect();
    let (mean, ci95) = mean_ci95(&t_mse);
    let m = CellMetrics {
        config: cell.clone(),
        t_mse,
        mean,
        ci95,
        true_simulator_calls: run.ledger.true_simulator_calls,
    };
    write_json(&path, &m)?;
    Ok(m)
}

pub fn benchmark(sweep: &SweepConfig) -> Result<()> {
    let cells = sweep.cells();
    let mut groups: Vec<(MetricRow, Vec<f64>)> = Vec::new();
    for cell in &cells {
        cell.validate()?;
        let dir = sweep.output.join("cells").join(cell.digest());
        let m = run_cell(cell, &dir)?;
        let key = (
            cell.task.clone(),
            cell.method.to_string(),
            cell.n as u64,
            cell.n_s as u64,
        );
        match groups
            .iter_mut()
            .find(|(r, _)| (r.task.clone(), r.method.clone(), r.n, r.n_s) == key)
        {
            Some((_, v)) => v.extend(&m.t_mse),
            None => groups.push((
                MetricRow {
                    task: key.0,
                    method: key.1,
                    n: key.2,
                    n_s: key.3,
                    mean: 0.0,
                    ci95: 0.0,
                },
                m.t_mse.clone(),
            )),
        }
    }
    let rows: Vec<MetricRow> = groups
        .into_iter()
        .map(|(mut r, v)| {
            (r.mean, r.ci95) = mean_ci95(&v);
            r
        })
        .collect();
    write_csv(&sweep.output.join("results.csv"), &rows)?;
    write_json(&sweep.output.join("sweep.json"), sweep)?;
    print_json(&json!({ "cells": cells.len(), "rows": rows }));
    Ok(())
}

pub struct ReportArgs {
    pub run: Option<PathBuf>,
    pub n: Option<u64>,
    pub n_multi: Option<u64>,
    pub sites: Option<u64>,
    pub t_sim: Option<f64>,
    pub t_like: Option<f64>,
    pub output: Option<PathBuf>,
}

pub fn report(a: ReportArgs) -> Result<()> {
    let cost = match &a.run {
        Some(dir) => {
            let run = load_run(dir)?;
            let snap = run.ledger;
            let t_sim = a.t_sim.or(snap.t_sim_per_call()).ok_or_else(|| {
                config_error("t_sim", "no simulator timings recorded; pass --t-sim")
            })?;
            let t_like = a.t_like.or(snap.t_like_per_draw()).unwrap_or(t_sim);
            diagnostics::budget_report(&snap, run.n_s as u64, t_sim, t_like)
        }
        None => {
            let need = |v: Option<f64>, f: &str| {
                v.ok_or_else(|| config_error(f, "required without --run"))
            };
            let n =
                a.n.ok_or_else(|| config_error("n", "required without --run"))?;
            let n_s = a
                .sites
                .ok_or_else(|| config_error("sites", "required without --run"))?;
            CostReport::new(
                n,
                a.n_multi.unwrap_or(n),
                n_s,
                need(a.t_sim, "t_sim")?,
                need(a.t_like, "t_like")?,
            )
        }
    };
    let body = json!({
        "cost": cost,
        "hours": {
            "npe": CostReport::hours(cost.npe),
            "pf": CostReport::hours(cost.pf),
            "lf": CostReport::hours(cost.lf),
        },
        "run": a.run,
    });
    if let Some(out) = &a.output {
        write_json(out, &body)?;
    }
    print_json(&body);
    Ok(())
}
