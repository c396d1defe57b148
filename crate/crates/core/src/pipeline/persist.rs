//! Directory archives: `manifest.json` plus one raw little-endian row-major
//! file per named array.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::data::Dataset;
use super::estimator::{Estimator, TrainingCurve};
use crate::error::{Error, Result};
use crate::flow::FieldSpec;
use crate::nets::{Adam, AdamConfig};
use crate::tokeniser::{Normaliser, Role};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub file: String,
    pub shape: [usize; 2],
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub kind: String,
    pub task: String,
    pub arrays: BTreeMap<String, ArrayEntry>,
    /// Kind-specific metadata (shapes, normalisation statistics, curves).
    pub meta: Value,
    /// Verbatim echo of the configuration that produced the artefact.
    pub config: Value,
    pub seed_lineage: BTreeMap<String, u64>,
}

trait Element: Copy {
    const DTYPE: &'static str;
    const SIZE: usize;
    fn put(self, out: &mut Vec<u8>);
    fn get(b: &[u8]) -> Self;
}

impl Element for f64 {
    const DTYPE: &'static str = "f64";
    const SIZE: usize = 8;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(b: &[u8]) -> Self {
        f64::from_le_bytes(b.try_into().expect("8 bytes"))
    }
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";
    const SIZE: usize = 4;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(b: &[u8]) -> Self {
        f32::from_le_bytes(b.try_into().expect("4 bytes"))
    }
}

/// Builder for an archive directory.
pub struct ArchiveWriter {
    dir: PathBuf,
    arrays: BTreeMap<String, ArrayEntry>,
}

impl ArchiveWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(ArchiveWriter {
            dir: dir.to_path_buf(),
            arrays: BTreeMap::new(),
        })
    }

    fn put<E: Element>(&mut self, name: &str, a: &Array2<E>) -> Result<()> {
        let file = format!("{}.bin", name.replace(['/', '\\'], "_"));
        let mut bytes = Vec::with_capacity(a.len() * E::SIZE);
        for &x in a.iter() {
            x.put(&mut bytes);
        }
        fs::write(self.dir.join(&file), bytes)?;
        self.arrays.insert(
            name.to_string(),
            ArrayEntry {
                file,
                shape: [a.nrows(), a.ncols()],
                dtype: E::DTYPE.into(),
            },
        );
        Ok(())
    }

    pub fn put_f64(&mut self, name: &str, a: &Array2<f64>) -> Result<()> {
        self.put(name, a)
    }

    pub fn put_f32(&mut self, name: &str, a: &Array2<f32>) -> Result<()> {
        self.put(name, a)
    }

    pub fn finish(
        self,
        kind: &str,
        task: &str,
        meta: Value,
        config: Value,
        seed_lineage: BTreeMap<String, u64>,
    ) -> Result<()> {
        let m = Manifest {
            schema_version: SCHEMA_VERSION,
            kind: kind.into(),
            task: task.into(),
            arrays: self.arrays,
            meta,
            config,
            seed_lineage,
        };
        fs::write(self.dir.join(MANIFEST), serde_json::to_vec_pretty(&m)?)?;
        Ok(())
    }
}

pub struct Archive {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Archive {
    pub fn open(dir: &Path, kind: &str) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::format(&path, format!("cannot read manifest: {e}")))?;
        let raw: Value =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let found = raw
            .get("schema_version")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::format(&path, "missing schema_version"))?;
        if found != SCHEMA_VERSION as u64 {
            return Err(Error::Version {
                path,
                found: found as u32,
                expected: SCHEMA_VERSION,
            });
        }
        let manifest: Manifest =
            serde_json::from_value(raw).map_err(|e| Error::format(&path, e.to_string()))?;
        if manifest.kind != kind {
            return Err(Error::format(
                &path,
                format!("expected a {kind} archive, found {}", manifest.kind),
            ));
        }
        Ok(Archive {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    fn get<E: Element>(&self, name: &str) -> Result<Array2<E>> {
        let entry = self.manifest.arrays.get(name).ok_or_else(|| {
            Error::format(
                self.dir.join(MANIFEST),
                format!("array {name:?} not listed"),
            )
        })?;
        let path = self.dir.join(&entry.file);
        if entry.dtype != E::DTYPE {
            return Err(Error::format(
                &path,
                format!(
                    "array {name:?} has dtype {}, expected {}",
                    entry.dtype,
                    E::DTYPE
                ),
            ));
        }
        let bytes = fs::read(&path).map_err(|e| Error::format(&path, format!("{name}: {e}")))?;
        let [r, c] = entry.shape;
        if bytes.len() != r * c * E::SIZE {
            return Err(Error::format(
                &path,
                format!(
                    "array {name:?} holds {} bytes but shape {r}x{c} of {} needs {}",
                    bytes.len(),
                    E::DTYPE,
                    r * c * E::SIZE
                ),
            ));
        }
        let v: Vec<E> = bytes.chunks_exact(E::SIZE).map(E::get).collect();
        Array2::from_shape_vec((r, c), v).map_err(|e| Error::format(&path, e.to_string()))
    }

    pub fn get_f64(&self, name: &str) -> Result<Array2<f64>> {
        self.get(name)
    }

    pub fn get_f32(&self, name: &str) -> Result<Array2<f32>> {
        self.get(name)
    }

    pub fn meta<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self.manifest.meta.get(key).cloned().ok_or_else(|| {
            Error::format(
                self.dir.join(MANIFEST),
                format!("meta field {key:?} missing"),
            )
        })?;
        serde_json::from_value(v)
            .map_err(|e| Error::format(self.dir.join(MANIFEST), format!("meta field {key:?}: {e}")))
    }
}

pub fn persist_dataset(
    dir: &Path,
    data: &Dataset,
    config: Value,
    lineage: BTreeMap<String, u64>,
) -> Result<()> {
    let mut w = ArchiveWriter::create(dir)?;
    w.put_f64("theta_g", &data.theta_g)?;
    w.put_f64("eta", &data.eta)?;
    w.put_f64("y", &data.y)?;
    w.put_f64("schedule", &data.schedule)?;
    let meta = serde_json::json!({
        "n_samples": data.len(),
        "n_sites": data.n_sites,
        "seed": data.seed,
    });
    w.finish("dataset", &data.task, meta, config, lineage)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let a = Archive::open(dir, "dataset")?;
    let d = Dataset {
        task: a.manifest.task.clone(),
        n_sites: a.meta("n_sites")?,
        theta_g: a.get_f64("theta_g")?,
        eta: a.get_f64("eta")?,
        y: a.get_f64("y")?,
        schedule: a.get_f64("schedule")?,
        seed: a.meta("seed")?,
    };
    let n: usize = a.meta("n_samples")?;
    for (name, rows) in [
        ("theta_g", d.theta_g.nrows()),
        ("eta", d.eta.nrows()),
        ("y", d.y.nrows()),
        ("schedule", d.schedule.nrows()),
    ] {
        if rows != n {
            return Err(Error::format(
                dir.join(MANIFEST),
                format!("array {name:?} has {rows} rows, manifest lists {n} samples"),
            ));
        }
    }
    Ok(d)
}

pub fn persist_checkpoint(
    dir: &Path,
    est: &Estimator,
    config: Value,
    lineage: BTreeMap<String, u64>,
) -> Result<()> {
    let mut w = ArchiveWriter::create(dir)?;
    for (i, v) in est.params.values().iter().enumerate() {
        w.put_f32(&format!("param.{i:03}"), v)?;
    }
    if let Some(opt) = &est.optimiser {
        for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
            w.put_f32(&format!("adam_m.{i:03}"), m)?;
            w.put_f32(&format!("adam_v.{i:03}"), v)?;
        }
    }
    let meta = serde_json::json!({
        "element_type": "f32",
        "role": est.role,
        "grouping": est.grouping,
        "field": est.field.spec,
        "param_names": est.params.names(),
        "normaliser": est.normaliser,
        "curve": est.curve,
        "adam": est.optimiser.as_ref().map(|o| serde_json::json!({
            "step": o.step,
            "config": o.config,
        })),
    });
    w.finish("checkpoint", &est.task, meta, config, lineage)
}

pub fn load_checkpoint(dir: &Path) -> Result<Estimator> {
    let a = Archive::open(dir, "checkpoint")?;
    let role: Role = a.meta("role")?;
    let grouping: bool = a.meta("grouping")?;
    let spec: FieldSpec = a.meta("field")?;
    let mut est = Estimator::from_spec(a.manifest.task.clone(), role, grouping, spec)?;
    let names: Vec<String> = a.meta("param_names")?;
    let values = (0..names.len())
        .map(|i| a.get_f32(&format!("param.{i:03}")))
        .collect::<Result<Vec<_>>>()?;
    est.params
        .load_values(&names, values)
        .map_err(|e| Error::format(dir.join(MANIFEST), e.to_string()))?;
    est.normaliser = a.meta::<Normaliser>("normaliser")?;
    est.curve = a.meta::<TrainingCurve>("curve")?;
    let adam: Option<Value> = a.meta("adam")?;
    if let Some(adam) = adam {
        let step = adam["step"]
            .as_u64()
            .ok_or_else(|| Error::format(dir.join(MANIFEST), "adam.step missing"))?;
        let config: AdamConfig = serde_json::from_value(adam["config"].clone())
            .map_err(|e| Error::format(dir.join(MANIFEST), format!("adam.config: {e}")))?;
        let mut opt = Adam::new(config, &est.params);
        opt.step = step;
        for i in 0..names.len() {
            opt.m[i] = a.get_f32(&format!("adam_m.{i:03}"))?;
            opt.v[i] = a.get_f32(&format!("adam_v.{i:03}"))?;
        }
        est.optimiser = Some(opt);
    }
    Ok(est)
}
