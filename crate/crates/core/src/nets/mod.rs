//! Neural building blocks with hand-written reverse-mode adjoints.
//!
//! Everything is generic over [`Scalar`]: training runs in `f32`, gradient
//! checks run the same code in `f64`.

pub mod layers;
pub mod mlp;
pub mod transformer;

use std::fmt::{Debug, Display};

use ndarray::{Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::Rng;

pub use layers::{LayerNorm, Linear, MultiHeadAttention};
pub use mlp::{Mlp, MlpConfig};
pub use transformer::{Transformer, TransformerConfig};

pub trait Scalar:
    LinalgScalar
    + Float
    + FromPrimitive
    + NumAssign
    + ScalarOperand
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + 'static
{
    const DTYPE: &'static str;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite conversion")
    }

    fn f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    fn f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors. Non-trainable entries (fixed Fourier bases)
/// live here too so that checkpoints carry them.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Array2<S>>,
    trainable: Vec<bool>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            trainable: Vec::new(),
        }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<S>, trainable: bool) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        self.trainable.push(trainable);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<S> {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array2<S>] {
        &self.values
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn n_trainable_scalars(&self) -> usize {
        self.values
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(v, _)| v.len())
            .sum()
    }

    pub fn zero_grads(&self) -> Grads<S> {
        Grads(self.values.iter().map(|v| Array2::zeros(v.dim())).collect())
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| T::of(x.f64())))
                .collect(),
            trainable: self.trainable.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Replace values in place, checking names and shapes.
    pub fn load_values(&mut self, names: &[String], values: Vec<Array2<S>>) -> Result<()> {
        if names != self.names.as_slice() {
            return Err(Error::shape(
                "parameter names do not match the architecture",
            ));
        }
        for (i, v) in values.iter().enumerate() {
            if v.dim() != self.values[i].dim() {
                return Err(Error::shape(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    self.names[i],
                    v.dim(),
                    self.values[i].dim()
                )));
            }
        }
        self.values = values;
        Ok(())
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads<S>(pub Vec<Array2<S>>);

impl<S: Scalar> Grads<S> {
    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<S> {
        &mut self.0[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Array2<S> {
        &self.0[id.0]
    }

    pub fn scale(&mut self, s: S) {
        for g in &mut self.0 {
            g.mapv_inplace(|x| x * s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| x.f64() * x.f64())
            .sum::<f64>()
            .sqrt()
    }
}

pub fn glorot_uniform<S: Scalar>(rows: usize, cols: usize, rng: &mut Rng) -> Array2<S> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || S::of(rng.random_range(-a..a)))
}

pub fn normal_init<S: Scalar>(rows: usize, cols: usize, sd: f64, rng: &mut Rng) -> Array2<S> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        S::of(sd * z)
    })
}

/// Forward-pass mode. Dropout draws from the contained generator.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Array2<S>>,
    pub v: Vec<Array2<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig, params: &ParamStore<S>) -> Self {
        Adam {
            config,
            step: 0,
            m: params
                .values()
                .iter()
                .map(|p| Array2::zeros(p.dim()))
                .collect(),
            v: params
                .values()
                .iter()
                .map(|p| Array2::zeros(p.dim()))
                .collect(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<S>, grads: &Grads<S>) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let lr = S::of(c.learning_rate * bc2.sqrt() / bc1);
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let (one, eps) = (S::one(), S::of(c.eps * bc2.sqrt()));
        for i in 0..params.len() {
            if !params.trainable[i] {
                continue;
            }
            let g = &grads.0[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = &mut params.values[i];
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    *p -= lr * *m / (v.sqrt() + eps);
                });
        }
    }
}
