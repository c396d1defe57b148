use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn tfmpe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tfmpe"))
        .args(args)
        .env("TFMPE_WORKERS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Value {
    let out = tfmpe(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A small network and short schedules so runs finish in seconds.
fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(
        &path,
        r#"
[pipeline.architecture]
kind = "transformer"
[pipeline.architecture.transformer]
n_blocks = 1
n_heads = 2
n_ff_layers = 1
d_lat = 16
ff_expansion = 2
[pipeline.surrogate_training]
max_epochs = 2
patience = 2
batch_size = 32
[pipeline.posterior_training]
max_epochs = 2
patience = 2
batch_size = 32

[diagnostics]
n_observations = 2
[diagnostics.lc2st]
hidden = [8]
cv_folds = 2
n_null = 3
n_cal = 30
n_posterior = 20
max_epochs = 3
"#,
    )
    .unwrap();
    path
}

#[test]
fn simulate_writes_manifest_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let v = ok(&[
            "simulate",
            "--task",
            "sir",
            "--n",
            "40",
            "--seed",
            "7",
            "-o",
            p(d),
        ]);
        assert_eq!(v["ledger"]["true_simulator_calls"], 40);
    }
    let manifest: Value =
        serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["arrays"]["y"]["shape"][0], 40);
    assert_eq!(manifest["config"]["seed"], 7);
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        if name != "manifest.json" {
            assert_eq!(
                fs::read(a.join(&name)).unwrap(),
                fs::read(b.join(&name)).unwrap(),
                "{name:?} differs"
            );
        }
    }
}

#[test]
fn unknown_task_lists_registry() {
    let dir = tempfile::tempdir().unwrap();
    let out = tfmpe(&["simulate", "--task", "lotka", "-o", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("gaussian_linear") && err.contains("seir"),
        "{err}"
    );
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[pipeline.posterior_training]\nlearning_rate = 0.1\n").unwrap();
    let out = tfmpe(&["train", "--config", p(&cfg), "-o", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    let out = tfmpe(&["train", "--method", "npe", "-o", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = tfmpe(&[
        "evaluate",
        "--run",
        p(&dir.path().join("nothing")),
        "--data",
        p(dir.path()),
        "-o",
        p(&dir.path().join("eval")),
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn train_budget_resume_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let c = p(&cfg);
    let lf = dir.path().join("lf");
    let v = ok(&[
        "train",
        "--config",
        c,
        "--task",
        "gaussian_linear",
        "--method",
        "lf",
        "--n",
        "60",
        "--sites",
        "3",
        "-o",
        p(&lf),
    ]);
    assert_eq!(v["ledger"]["true_simulator_calls"], 60);
    assert!(v["ledger"]["surrogate_draws"].as_u64().unwrap() >= 180);
    let v = ok(&[
        "train",
        "--config",
        c,
        "--task",
        "gaussian_linear",
        "--method",
        "direct",
        "--n",
        "60",
        "--sites",
        "3",
        "-o",
        p(&dir.path().join("direct")),
    ]);
    assert_eq!(v["ledger"]["true_simulator_calls"], 180);

    // resuming appends epochs to the stored curve
    let curve = |d: &Path| -> Vec<f64> {
        let m: Value =
            serde_json::from_slice(&fs::read(d.join("posterior").join("manifest.json")).unwrap())
                .unwrap();
        serde_json::from_value(m["meta"]["curve"]["train"].clone()).unwrap()
    };
    let before = curve(&lf);
    let v = ok(&[
        "train",
        "--config",
        c,
        "--task",
        "gaussian_linear",
        "--method",
        "lf",
        "--n",
        "60",
        "--sites",
        "3",
        "-o",
        p(&lf),
        "--resume",
    ]);
    assert_eq!(v["ledger"]["true_simulator_calls"], 60);
    let after = curve(&lf);
    assert_eq!(after.len(), before.len() + 2);
    assert_eq!(&after[..before.len()], &before[..]);

    // evaluation data comes from `simulate`
    let data = dir.path().join("eval_data");
    ok(&[
        "simulate",
        "--task",
        "gaussian_linear",
        "--n",
        "40",
        "--seed",
        "99",
        "-o",
        p(&data),
        "--sites",
        "3",
    ]);
    let mut per_obs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("eval{k}"));
        let r = ok(&[
            "evaluate",
            "--run",
            p(&lf),
            "--data",
            p(&data),
            "--config",
            c,
            "-o",
            p(&out),
        ]);
        let t = r["lc2st"]["mean"].as_f64().unwrap();
        assert!((0.0..=0.25).contains(&t));
        let rows = fs::read_to_string(out.join("rows.csv")).unwrap();
        assert!(rows.starts_with("task,method,N,n_s,mean,ci95"), "{rows}");
        per_obs.push(fs::read(out.join("per_observation.csv")).unwrap());
    }
    assert_eq!(per_obs[0], per_obs[1]);

    let tarp_out = dir.path().join("tarp");
    let r = ok(&[
        "evaluate",
        "--run",
        p(&lf),
        "--data",
        p(&data),
        "--config",
        c,
        "--diagnostic",
        "tarp",
        "-o",
        p(&tarp_out),
    ]);
    assert!(r["tarp"]["atc"].as_f64().unwrap() >= 0.0);
    assert!(tarp_out.join("tarp_curve.csv").exists());

    let ppc = ok(&[
        "evaluate",
        "--run",
        p(&lf),
        "--data",
        p(&data),
        "--config",
        c,
        "--diagnostic",
        "ppc",
        "--predictive",
        "surrogate",
        "-o",
        p(&dir.path().join("ppc")),
    ]);
    assert_eq!(ppc["ppc"]["simulator_calls"], 0);

    let samples = dir.path().join("samples.csv");
    ok(&[
        "sample",
        "--run",
        p(&lf),
        "--data",
        p(&data),
        "--samples",
        "25",
        "-o",
        p(&samples),
    ]);
    let text = fs::read_to_string(&samples).unwrap();
    assert_eq!(text.lines().count(), 26);

    let rep = ok(&[
        "report",
        "--run",
        p(&lf),
        "--t-sim",
        "1.0",
        "--t-like",
        "0.01",
    ]);
    assert_eq!(rep["cost"]["n_true"], 60);
}

#[test]
fn benchmark_resumes_finished_cells() {
    let dir = tempfile::tempdir().unwrap();
    let base = fs::read_to_string(tiny_config(dir.path())).unwrap();
    let sweep = dir.path().join("sweep.toml");
    let out = dir.path().join("bench");
    let header = format!(
        "output = {:?}\ntasks = [\"gaussian_linear\"]\nmethods = [\"lf\", \"direct\"]\nbudgets = [30]\nsites = [2]\n",
        p(&out)
    );
    // nest the tiny config under [base]
    let nested = base.replace("\n[", "\n[base.");
    fs::write(&sweep, format!("{header}{nested}")).unwrap();
    let first = ok(&["benchmark", "--sweep", p(&sweep)]);
    assert_eq!(first["cells"], 2);
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    let mut lines = results.lines();
    assert_eq!(lines.next(), Some("task,method,N,n_s,mean,ci95"));
    assert_eq!(lines.count(), 2);

    let cells: Vec<PathBuf> = fs::read_dir(out.join("cells"))
        .unwrap()
        .map(|e| e.unwrap().path().join("metrics.json"))
        .collect();
    let stamps: Vec<_> = cells
        .iter()
        .map(|c| fs::metadata(c).unwrap().modified().unwrap())
        .collect();
    let second = ok(&["benchmark", "--sweep", p(&sweep)]);
    assert_eq!(first["rows"], second["rows"]);
    for (c, s) in cells.iter().zip(stamps) {
        assert_eq!(fs::metadata(c).unwrap().modified().unwrap(), s);
    }
}

#[test]
fn cost_table_from_unit_times() {
    let v = ok(&[
        "report", "--n", "1000", "--sites", "2", "--t-sim", "11.88", "--t-like", "0.00641",
    ]);
    assert!((v["hours"]["npe"].as_f64().unwrap() - 6.6).abs() < 1e-9);
    assert!((v["hours"]["lf"].as_f64().unwrap() - 3.3).abs() < 0.01);
    assert_eq!(
        v["cost"]["per_site_speedup"].as_f64().unwrap().round(),
        1853.0
    );
}
