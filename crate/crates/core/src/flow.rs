//! Conditional flow matching on the optimal-transport Gaussian path, the
//! vector-field networks and ODE sampling.
//!
//! Time runs from the standard normal base at `t = 0` to the target at
//! `t = 1`. The path is `x_t = t x_1 + (1 - (1 - sigma_min) t) eps`.

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::transformer::TransformerCache;
use crate::nets::TransformerConfig;
use crate::nets::{mlp::MlpCache, Grads, Mlp, MlpConfig, Mode, ParamStore, Scalar, Transformer};
use crate::ode::{solve_batch, BatchSolution, SolverConfig};
use crate::seed::{self, stream, Rng};
use crate::tokeniser::{EmbedCache, EmbedConfig, EmbeddingTables, Layout, TokenDims};

pub const DEFAULT_SIGMA_MIN: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathConfig {
    pub sigma_min: f64,
}

impl Default for PathConfig {
    fn default() -> Self {
        PathConfig {
            sigma_min: DEFAULT_SIGMA_MIN,
        }
    }
}

impl PathConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < 1.0) {
            return Err(Error::Config {
                field: "path.sigma_min".into(),
                message: format!("{} is not in (0, 1)", self.sigma_min),
            });
        }
        Ok(())
    }

    /// Path mean scale and standard deviation at time `t`.
    pub fn mu_sigma(&self, t: f64) -> (f64, f64) {
        (t, 1.0 - (1.0 - self.sigma_min) * t)
    }
}

/// Conditional OT vector field `u_t(x_t | x_1)`.
pub fn ot_target(theta_t: f64, theta_1: f64, t: f64, sigma_min: f64) -> Result<f64> {
    let denom = 1.0 - (1.0 - sigma_min) * t;
    if !(denom > 0.0) || !t.is_finite() {
        return Err(Error::domain(format!(
            "OT target undefined at t = {t} with sigma_min = {sigma_min}"
        )));
    }
    Ok((theta_1 - (1.0 - sigma_min) * theta_t) / denom)
}

pub fn sample_path_point(theta_1: f64, t: f64, eps: f64, sigma_min: f64) -> f64 {
    t * theta_1 + (1.0 - (1.0 - sigma_min) * t) * eps
}

/// Path points and regression targets for a batch, one `t` per row.
pub fn path_batch(
    x1: ArrayView2<f64>,
    t: &[f64],
    eps: ArrayView2<f64>,
    sigma_min: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if t.len() != x1.nrows() || eps.dim() != x1.dim() {
        return Err(Error::shape("path batch: t, eps and x1 disagree"));
    }
    let mut xt = Array2::zeros(x1.dim());
    let mut u = Array2::zeros(x1.dim());
    for (r, &tr) in t.iter().enumerate() {
        for c in 0..x1.ncols() {
            let p = sample_path_point(x1[[r, c]], tr, eps[[r, c]], sigma_min);
            xt[[r, c]] = p;
            u[[r, c]] = ot_target(p, x1[[r, c]], tr, sigma_min)?;
        }
    }
    Ok((xt, u))
}

/// `t ~ U(0, 1)` per row and standard normal noise.
pub fn draw_path_noise(rng: &mut Rng, rows: usize, dim: usize) -> (Vec<f64>, Array2<f64>) {
    let t: Vec<f64> = (0..rows).map(|_| rng.random::<f64>()).collect();
    let eps = Array2::from_shape_simple_fn((rows, dim), || StandardNormal.sample(rng));
    (t, eps)
}

/// Mean over rows of the squared error norm.
pub fn cfm_objective(v: &Array2<f64>, u: &Array2<f64>) -> f64 {
    let b = v.nrows().max(1) as f64;
    (v - u).iter().map(|d| d * d).sum::<f64>() / b
}

/// Loss of the zero field, `mean ||u_t||^2`.
pub fn zero_field_loss(u: &Array2<f64>) -> f64 {
    cfm_objective(&Array2::zeros(u.dim()), u)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    Transformer {
        #[serde(default)]
        transformer: TransformerConfig,
        #[serde(default)]
        embed: EmbedConfig,
    },
    Mlp {
        #[serde(default)]
        mlp: MlpConfig,
    },
}

impl Architecture {
    /// Small transformer used for the desk-scale runs.
    pub fn desk_transformer() -> Self {
        Architecture::Transformer {
            transformer: TransformerConfig {
                n_blocks: 2,
                n_heads: 4,
                n_ff_layers: 2,
                d_lat: 64,
                ff_expansion: 4,
            },
            embed: EmbedConfig::default(),
        }
    }

    pub fn is_mlp(&self) -> bool {
        matches!(self, Architecture::Mlp { .. })
    }
}

/// Everything needed to rebuild a vector field from scratch. Parameters are
/// initialised from `init_seed`, so a checkpoint only has to carry values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub architecture: Architecture,
    pub dims: TokenDims,
    /// Flat widths of the layout the MLP was built for. The transformer
    /// accepts any layout that fits `dims`.
    pub target_dim: usize,
    pub cond_dim: usize,
    pub n_fn: usize,
    pub init_seed: u64,
}

#[derive(Debug, Clone)]
enum Net {
    Token {
        tables: EmbeddingTables,
        encoder: Transformer,
    },
    Mlp(Mlp),
}

#[derive(Debug, Clone)]
pub struct VectorField {
    pub spec: FieldSpec,
    net: Net,
}

pub enum FieldCache<S> {
    Token {
        embed: EmbedCache<S>,
        encoder: TransformerCache<S>,
        gathered: Array2<S>,
    },
    Mlp(MlpCache<S>),
}

/// One batch sharing a layout; values are normalised and unconstrained.
#[derive(Debug, Clone, Copy)]
pub struct FlowBatch<'a> {
    pub layout: &'a Layout,
    pub target: ArrayView2<'a, f64>,
    pub cond: ArrayView2<'a, f64>,
    pub fn_inputs: ArrayView2<'a, f64>,
}

fn cast<S: Scalar>(a: ArrayView2<f64>) -> Array2<S> {
    a.mapv(S::of)
}

impl VectorField {
    pub fn build<S: Scalar>(spec: FieldSpec) -> Result<(Self, ParamStore<S>)> {
        let mut store = ParamStore::new();
        let mut rng = seed::rng_for(spec.init_seed, &[stream::INIT]);
        let net = match &spec.architecture {
            Architecture::Transformer { transformer, embed } => {
                transformer.validate()?;
                let tables = EmbeddingTables::new(
                    &mut store,
                    *embed,
                    spec.dims,
                    transformer.d_lat,
                    &mut rng,
                )?;
                let encoder = Transformer::new(&mut store, "encoder", *transformer, &mut rng)?;
                Net::Token { tables, encoder }
            }
            Architecture::Mlp { mlp } => {
                let d_in = spec.target_dim + spec.cond_dim + spec.n_fn + 1;
                Net::Mlp(Mlp::new(
                    &mut store,
                    "mlp",
                    d_in,
                    spec.target_dim,
                    mlp.clone(),
                    &mut rng,
                ))
            }
        };
        Ok((VectorField { spec, net }, store))
    }

    /// Check that `layout` can be evaluated by this network.
    pub fn accepts(&self, layout: &Layout) -> Result<()> {
        if let Net::Mlp(_) = self.net {
            if (layout.target_dim, layout.cond_dim, layout.n_fn)
                != (self.spec.target_dim, self.spec.cond_dim, self.spec.n_fn)
            {
                return Err(Error::Layout(format!(
                    "MLP built for widths ({}, {}, {}) cannot read a layout with ({}, {}, {})",
                    self.spec.target_dim,
                    self.spec.cond_dim,
                    self.spec.n_fn,
                    layout.target_dim,
                    layout.cond_dim,
                    layout.n_fn
                )));
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<S: Scalar>(
        &self,
        p: &ParamStore<S>,
        layout: &Layout,
        xt: &Array2<S>,
        cond: &Array2<S>,
        fn_inputs: &Array2<S>,
        t: &[S],
        mode: &mut Mode<'_>,
    ) -> Result<(Array2<S>, FieldCache<S>)> {
        self.accepts(layout)?;
        match &self.net {
            Net::Token { tables, encoder } => {
                let b = xt.nrows();
                let (h0, embed) = tables.embed(p, layout, xt, cond, fn_inputs, t)?;
                let (hk, enc) = encoder.forward(p, &h0, b, layout.len())?;
                let (v, gathered) = tables.readout(p, layout, &hk);
                Ok((
                    v,
                    FieldCache::Token {
                        embed,
                        encoder: enc,
                        gathered,
                    },
                ))
            }
            Net::Mlp(mlp) => {
                let tcol = Array2::from_shape_vec((t.len(), 1), t.to_vec())
                    .map_err(|e| Error::shape(e.to_string()))?;
                let x = concatenate(
                    Axis(1),
                    &[xt.view(), cond.view(), fn_inputs.view(), tcol.view()],
                )
                .map_err(|e| Error::shape(e.to_string()))?;
                let (v, cache) = mlp.forward(p, &x, mode)?;
                Ok((v, FieldCache::Mlp(cache)))
            }
        }
    }

    pub fn backward<S: Scalar>(
        &self,
        p: &ParamStore<S>,
        g: &mut Grads<S>,
        layout: &Layout,
        cache: &FieldCache<S>,
        dv: &Array2<S>,
    ) -> Result<()> {
        match (&self.net, cache) {
            (
                Net::Token { tables, encoder },
                FieldCache::Token {
                    embed,
                    encoder: enc,
                    gathered,
                },
            ) => {
                let dhk = tables.readout_backward(p, g, layout, gathered, dv);
                let dh0 = encoder.backward(p, g, enc, &dhk);
                tables.embed_backward(p, g, layout, embed, &dh0);
                Ok(())
            }
            (Net::Mlp(mlp), FieldCache::Mlp(c)) => {
                mlp.backward(p, g, c, dv);
                Ok(())
            }
            _ => Err(Error::shape("cache does not belong to this network")),
        }
    }

    /// Velocity for arbitrary rows of a batch, evaluated in precision `S`.
    /// `rows` index into `cond` and `fn_inputs`.
    pub fn velocity<S: Scalar>(
        &self,
        p: &ParamStore<S>,
        layout: &Layout,
        rows: &[usize],
        t: &[f64],
        x: ArrayView2<f64>,
        cond: ArrayView2<f64>,
        fn_inputs: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        let c = cond.select(Axis(0), rows);
        let f = fn_inputs.select(Axis(0), rows);
        let ts: Vec<S> = t.iter().map(|&v| S::of(v)).collect();
        let (v, _) = self.forward(
            p,
            layout,
            &cast::<S>(x),
            &cast::<S>(c.view()),
            &cast::<S>(f.view()),
            &ts,
            &mut Mode::Eval,
        )?;
        Ok(v.mapv(|z| z.f64()))
    }
}

/// CFM loss at given `t` and `eps`, accumulating parameter gradients into
/// `grads` when supplied.
#[allow(clippy::too_many_arguments)]
pub fn cfm_loss_at<S: Scalar>(
    field: &VectorField,
    p: &ParamStore<S>,
    batch: FlowBatch<'_>,
    t: &[f64],
    eps: ArrayView2<f64>,
    path: &PathConfig,
    mode: &mut Mode<'_>,
    grads: Option<&mut Grads<S>>,
) -> Result<f64> {
    let b = batch.target.nrows();
    if b == 0 {
        return Err(Error::shape("empty batch"));
    }
    let (xt, u) = path_batch(batch.target, t, eps, path.sigma_min)?;
    let ts: Vec<S> = t.iter().map(|&v| S::of(v)).collect();
    let (v, cache) = field.forward(
        p,
        batch.layout,
        &xt.mapv(S::of),
        &cast::<S>(batch.cond),
        &cast::<S>(batch.fn_inputs),
        &ts,
        mode,
    )?;
    let v64 = v.mapv(|z| z.f64());
    let loss = cfm_objective(&v64, &u);
    if !loss.is_finite() {
        let max_abs = batch
            .target
            .iter()
            .chain(batch.cond.iter())
            .fold(0.0f64, |m, x| m.max(x.abs()));
        return Err(Error::Numeric(format!(
            "non-finite CFM loss on a batch of {b} rows (max |input| = {max_abs:.3e}, \
             t in [{:.3}, {:.3}], non-finite outputs = {})",
            t.iter().cloned().fold(f64::INFINITY, f64::min),
            t.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            v64.iter().filter(|x| !x.is_finite()).count()
        )));
    }
    if let Some(g) = grads {
        let scale = 2.0 / b as f64;
        let dv = (&v64 - &u).mapv(|d| S::of(scale * d));
        field.backward(p, g, batch.layout, &cache, &dv)?;
    }
    Ok(loss)
}

/// CFM loss with `t` and `eps` drawn from `seed`.
pub fn cfm_loss<S: Scalar>(
    field: &VectorField,
    p: &ParamStore<S>,
    batch: FlowBatch<'_>,
    path: &PathConfig,
    seed: u64,
) -> Result<f64> {
    let mut rng = seed::rng_for(seed, &[stream::NOISE]);
    let (t, eps) = draw_path_noise(&mut rng, batch.target.nrows(), batch.layout.target_dim);
    cfm_loss_at(field, p, batch, &t, eps.view(), path, &mut Mode::Eval, None)
}

/// Integrate `dx/dt = v(t, x)` from the base draw at `t = 0` to `t = 1`.
/// `velocity` receives the active row indices, their times and states.
pub fn integrate_flow<F>(
    velocity: F,
    base: ArrayView2<f64>,
    solver: &SolverConfig,
) -> Result<BatchSolution>
where
    F: FnMut(&[usize], &[f64], ArrayView2<f64>) -> Result<Array2<f64>>,
{
    solve_batch(velocity, 0.0, 1.0, base, &[], solver)
}

/// Integrate a trained field for every row of a conditioning batch.
pub fn sample_field<S: Scalar>(
    field: &VectorField,
    p: &ParamStore<S>,
    layout: &Layout,
    cond: ArrayView2<f64>,
    fn_inputs: ArrayView2<f64>,
    base: ArrayView2<f64>,
    solver: &SolverConfig,
) -> Result<BatchSolution> {
    if base.nrows() != cond.nrows() || base.ncols() != layout.target_dim {
        return Err(Error::shape(
            "base draw does not match the conditioning batch",
        ));
    }
    integrate_flow(
        |rows, t, x| field.velocity(p, layout, rows, t, x, cond, fn_inputs),
        base,
        solver,
    )
}

/// Central finite-difference probe of the loss gradient at `n_probe`
/// randomly chosen trainable scalars. Returns `(analytic, numeric)` pairs.
#[allow(clippy::too_many_arguments)]
pub fn gradient_probe(
    field: &VectorField,
    p: &ParamStore<f64>,
    batch: FlowBatch<'_>,
    t: &[f64],
    eps: ArrayView2<f64>,
    path: &PathConfig,
    n_probe: usize,
    h: f64,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let mut g = p.zero_grads();
    cfm_loss_at(field, p, batch, t, eps, path, &mut Mode::Eval, Some(&mut g))?;
    let mut slots = Vec::new();
    for i in 0..p.len() {
        if p.is_trainable(crate::nets::ParamId(i)) {
            for k in 0..p.values()[i].len() {
                slots.push((i, k));
            }
        }
    }
    let mut rng = seed::rng_for(seed, &[stream::PERMUTE]);
    let mut out = Vec::with_capacity(n_probe);
    let mut q = p.clone();
    for _ in 0..n_probe {
        let (i, k) = slots[rng.random_range(0..slots.len())];
        let id = crate::nets::ParamId(i);
        let ncols = q.get(id).ncols();
        let (r, c) = (k / ncols, k % ncols);
        let x0 = q.get(id)[[r, c]];
        q.get_mut(id)[[r, c]] = x0 + h;
        let lp = cfm_loss_at(field, &q, batch, t, eps, path, &mut Mode::Eval, None)?;
        q.get_mut(id)[[r, c]] = x0 - h;
        let lm = cfm_loss_at(field, &q, batch, t, eps, path, &mut Mode::Eval, None)?;
        q.get_mut(id)[[r, c]] = x0;
        out.push((g.get(id)[[r, c]], (lp - lm) / (2.0 * h)));
    }
    Ok(out)
}

/// Relative error used for gradient checks, with an absolute floor so that
/// vanishing gradients do not dominate.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
