//! Run and sweep configuration files.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tfmpe::diagnostics::Lc2stConfig;
use tfmpe::pipeline::{Method, PipelineConfig};
use tfmpe::tasks::TaskId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    pub lc2st: Lc2stConfig,
    /// Observations averaged per local classifier test.
    pub n_observations: usize,
    pub tarp_cases: usize,
    pub tarp_samples: usize,
    pub ppc_draws: usize,
    pub mmd_samples: usize,
    pub mmd_permutations: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            lc2st: Lc2stConfig::default(),
            n_observations: 10,
            tarp_cases: 100,
            tarp_samples: 500,
            ppc_draws: 200,
            mmd_samples: 400,
            mmd_permutations: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: String,
    pub method: Method,
    /// Simulation budget.
    pub n: usize,
    pub n_s: usize,
    pub seed: u64,
    pub output: PathBuf,
    pub pipeline: PipelineConfig,
    pub diagnostics: DiagnosticsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: TaskId::GaussianLinear.name().into(),
            method: Method::Lf,
            n: 1000,
            n_s: 10,
            seed: 0,
            output: PathBuf::from("runs/default"),
            pipeline: PipelineConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
        }
    }
}

fn config_error(field: &str, message: impl Into<String>) -> tfmpe::Error {
    tfmpe::Error::Config {
        field: field.into(),
        message: message.into(),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text)
            .map_err(|e| config_error(&path.display().to_string(), e.to_string()).into())
    }

    pub fn task_id(&self) -> tfmpe::Result<TaskId> {
        self.task.parse()
    }

    pub fn validate(&self) -> tfmpe::Result<()> {
        self.task_id()?;
        if self.n == 0 {
            return Err(config_error("n", "simulation budget must be at least 1"));
        }
        if self.n_s == 0 {
            return Err(config_error("n_s", "site count must be at least 1"));
        }
        self.pipeline.validate()?;
        self.diagnostics.lc2st.validate()?;
        if self.diagnostics.n_observations == 0 {
            return Err(config_error(
                "diagnostics.n_observations",
                "must be at least 1",
            ));
        }
        Ok(())
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }

    /// Content hash used to address sweep cells.
    pub fn digest(&self) -> String {
        let mut cell = self.clone();
        cell.output = PathBuf::new();
        let bytes = serde_json::to_vec(&cell).expect("config serialises");
        Sha256::digest(&bytes)
            .iter()
            .take(12)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Cross-product of runs; every cell inherits `base`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub output: PathBuf,
    pub tasks: Vec<String>,
    pub methods: Vec<Method>,
    pub budgets: Vec<usize>,
    pub sites: Vec<usize>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub base: RunConfig,
}

impl SweepConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading sweep {}", path.display()))?;
        let sweep: SweepConfig = toml::from_str(&text)
            .map_err(|e| config_error(&path.display().to_string(), e.to_string()))?;
        for t in &sweep.tasks {
            t.parse::<TaskId>()?;
        }
        sweep.base.validate()?;
        Ok(sweep)
    }

    pub fn cells(&self) -> Vec<RunConfig> {
        let seeds = if self.seeds.is_empty() {
            vec![self.base.seed]
        } else {
            self.seeds.clone()
        };
        let mut out = Vec::new();
        for task in &self.tasks {
            for &method in &self.methods {
                for &n in &self.budgets {
                    for &n_s in &self.sites {
                        for &seed in &seeds {
                            out.push(RunConfig {
                                task: task.clone(),
                                method,
                                n,
                                n_s,
                                seed,
                                ..self.base.clone()
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("task = \"sir\"\nbudget = 3\n").unwrap_err();
        assert!(err.to_string().contains("budget"));
        let err =
            toml::from_str::<RunConfig>("[pipeline.posterior_training]\nlr = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("lr"));
    }

    #[test]
    fn digest_ignores_output_dir() {
        let a = RunConfig::default();
        let b = RunConfig {
            output: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.digest(), b.digest());
        let c = RunConfig {
            seed: 1,
            ..a.clone()
        };
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn example_config_parses() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/run.example.toml");
        let c = RunConfig::load(&path).unwrap();
        c.validate().unwrap();
        assert_eq!(
            c,
            RunConfig {
                output: c.output.clone(),
                ..RunConfig::default()
            }
        );
    }
}
