//! Token layouts, value normalisation, embeddings and the vector-field
//! readout.
//!
//! A [`Layout`] fixes, for one estimator role and site count, which tokens
//! exist and where each token's value lives in the flat target and
//! conditioning vectors. Per-sample data then travels as three matrices:
//! targets `(B, target_dim)`, conditioning `(B, cond_dim)` and functional
//! inputs `(B, n_fn)`.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::HierarchicalModel;
use crate::nets::{normal_init, Grads, Linear, ParamId, ParamStore, Scalar};
use crate::seed::Rng;

/// Which variables an estimator generates (targets) and which it reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// `q(theta_g, eta | y)` over `n_sites` sites.
    Posterior,
    /// `q(y_s | theta_g, eta_s)` for a single site.
    Surrogate,
    /// `q(theta_g | y)` over `n_sites` sites.
    GlobalPosterior,
    /// `q(eta_s | theta_g, y_s)` for a single site.
    LocalPosterior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    Target,
    Condition,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpec {
    pub var_id: usize,
    pub position: usize,
    pub group: usize,
    pub slot: Slot,
    /// Number of used value entries (the rest of `d_v` is zero padding).
    pub width: usize,
    /// Offset of the value block in the target or conditioning vector.
    pub offset: usize,
    /// Column of the functional input, if any.
    pub fn_index: Option<usize>,
}

/// Vocabulary shared by every layout of one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenDims {
    /// Number of variable ids including the unused id 0.
    pub vocab: usize,
    pub p_max: usize,
    pub g_max: usize,
    pub d_v: usize,
}

impl TokenDims {
    pub fn for_model(model: &HierarchicalModel, max_sites: usize) -> Self {
        let widths = model
            .globals
            .iter()
            .chain(&model.locals)
            .map(|v| v.dim)
            .chain(std::iter::once(obs_token_width(model)));
        TokenDims {
            vocab: model.globals.len() + model.locals.len() + 2,
            p_max: model.observation.n_points().max(1),
            g_max: max_sites + 1,
            d_v: widths.max().unwrap_or(1),
        }
    }
}

fn obs_token_width(model: &HierarchicalModel) -> usize {
    if model.observation.is_functional() {
        1
    } else {
        model.d_y()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub role: Role,
    pub n_sites: usize,
    pub grouping: bool,
    pub tokens: Vec<TokenSpec>,
    pub target_dim: usize,
    pub cond_dim: usize,
    pub n_fn: usize,
}

struct Builder<'a> {
    model: &'a HierarchicalModel,
    grouping: bool,
    tokens: Vec<TokenSpec>,
}

impl Builder<'_> {
    fn push(
        &mut self,
        var_id: usize,
        position: usize,
        group: usize,
        slot: Slot,
        width: usize,
        offset: usize,
        fn_index: Option<usize>,
    ) {
        self.tokens.push(TokenSpec {
            var_id,
            position,
            group: if self.grouping { group } else { 0 },
            slot,
            width,
            offset,
            fn_index,
        });
    }

    fn globals(&mut self, slot: Slot, base: usize) {
        let mut off = base;
        for (k, v) in self.model.globals.iter().enumerate() {
            self.push(k + 1, 0, 0, slot, v.dim, off, None);
            off += v.dim;
        }
    }

    fn locals(&mut self, slot: Slot, site: usize, base: usize) {
        let n_g = self.model.globals.len();
        let mut off = base;
        for (k, v) in self.model.locals.iter().enumerate() {
            self.push(n_g + k + 1, 0, site + 1, slot, v.dim, off, None);
            off += v.dim;
        }
    }

    /// One token per site, or one per time point for functional observations.
    fn observation(&mut self, slot: Slot, site: usize, base: usize, fn_base: usize) {
        let id = self.model.globals.len() + self.model.locals.len() + 1;
        if self.model.observation.is_functional() {
            for k in 0..self.model.observation.n_points() {
                self.push(id, k, site + 1, slot, 1, base + k, Some(fn_base + k));
            }
        } else {
            self.push(id, 0, site + 1, slot, self.model.d_y(), base, None);
        }
    }
}

impl Layout {
    pub fn new(
        model: &HierarchicalModel,
        role: Role,
        n_sites: usize,
        grouping: bool,
    ) -> Result<Self> {
        if n_sites == 0 {
            return Err(Error::Layout("a layout needs at least one site".into()));
        }
        let n_sites = match role {
            Role::Surrogate | Role::LocalPosterior => 1,
            _ => n_sites,
        };
        let (d_g, d_l, d_y) = (model.d_g(), model.d_l(), model.d_y());
        let n_points = model.observation.n_points();
        let mut b = Builder {
            model,
            grouping,
            tokens: Vec::new(),
        };
        let (target_dim, cond_dim) = match role {
            Role::Posterior => {
                b.globals(Slot::Target, 0);
                for s in 0..n_sites {
                    b.locals(Slot::Target, s, d_g + s * d_l);
                    b.observation(Slot::Condition, s, s * d_y, s * n_points);
                }
                (d_g + n_sites * d_l, n_sites * d_y)
            }
            Role::Surrogate => {
                b.globals(Slot::Condition, 0);
                b.locals(Slot::Condition, 0, d_g);
                b.observation(Slot::Target, 0, 0, 0);
                (d_y, d_g + d_l)
            }
            Role::GlobalPosterior => {
                b.globals(Slot::Target, 0);
                for s in 0..n_sites {
                    b.observation(Slot::Condition, s, s * d_y, s * n_points);
                }
                (d_g, n_sites * d_y)
            }
            Role::LocalPosterior => {
                b.globals(Slot::Condition, 0);
                b.locals(Slot::Target, 0, 0);
                b.observation(Slot::Condition, 0, d_g, 0);
                (d_l, d_g + d_y)
            }
        };
        let functional = model.observation.is_functional();
        let tokens = b.tokens;
        let layout = Layout {
            role,
            n_sites,
            grouping,
            tokens,
            target_dim,
            cond_dim,
            n_fn: if functional { n_sites * n_points } else { 0 },
        };
        layout.check()?;
        Ok(layout)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn role_mask(&self) -> Vec<bool> {
        self.tokens.iter().map(|t| t.slot == Slot::Target).collect()
    }

    pub fn n_targets(&self) -> usize {
        self.tokens
            .iter()
            .filter(|t| t.slot == Slot::Target)
            .count()
    }

    /// Structural checks: unique keys (when grouping) and an exact cover of
    /// both flat vectors.
    pub fn check(&self) -> Result<()> {
        if self.grouping {
            let mut seen = std::collections::HashSet::new();
            for t in &self.tokens {
                if !seen.insert((t.var_id, t.position, t.group)) {
                    return Err(Error::Layout(format!(
                        "duplicate token key ({}, {}, {})",
                        t.var_id, t.position, t.group
                    )));
                }
            }
        }
        for (slot, dim) in [
            (Slot::Target, self.target_dim),
            (Slot::Condition, self.cond_dim),
        ] {
            let mut cover = vec![0u8; dim];
            for t in self.tokens.iter().filter(|t| t.slot == slot) {
                for c in t.offset..t.offset + t.width {
                    if c >= dim {
                        return Err(Error::Layout(format!(
                            "token value block exceeds {slot:?} width {dim}"
                        )));
                    }
                    cover[c] += 1;
                }
            }
            if cover.iter().any(|&c| c != 1) {
                return Err(Error::Layout(format!(
                    "{slot:?} entries are not covered exactly once"
                )));
            }
        }
        Ok(())
    }

    /// Same tokens stored in a different order.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut sorted = order.to_vec();
        sorted.sort_unstable();
        if sorted != (0..self.len()).collect::<Vec<_>>() {
            return Err(Error::Layout(
                "not a permutation of the token indices".into(),
            ));
        }
        let mut out = self.clone();
        out.tokens = order.iter().map(|&i| self.tokens[i].clone()).collect();
        Ok(out)
    }

    /// Single-sample token sequence.
    pub fn tokenise(
        &self,
        d_v: usize,
        target: ArrayView1<f64>,
        cond: ArrayView1<f64>,
        fn_inputs: ArrayView1<f64>,
    ) -> Result<TokenSequence> {
        if target.len() != self.target_dim
            || cond.len() != self.cond_dim
            || fn_inputs.len() != self.n_fn
        {
            return Err(Error::Layout(format!(
                "got ({}, {}, {}) values, layout expects ({}, {}, {})",
                target.len(),
                cond.len(),
                fn_inputs.len(),
                self.target_dim,
                self.cond_dim,
                self.n_fn
            )));
        }
        let mut values = Array2::zeros((self.len(), d_v));
        for (i, t) in self.tokens.iter().enumerate() {
            let src = match t.slot {
                Slot::Target => &target,
                Slot::Condition => &cond,
            };
            values
                .slice_mut(s![i, ..t.width])
                .assign(&src.slice(s![t.offset..t.offset + t.width]));
        }
        Ok(TokenSequence {
            values,
            var_ids: self.tokens.iter().map(|t| t.var_id).collect(),
            positions: self.tokens.iter().map(|t| t.position).collect(),
            group_ids: self.tokens.iter().map(|t| t.group).collect(),
            fn_inputs: self
                .tokens
                .iter()
                .map(|t| t.fn_index.map(|k| fn_inputs[k]))
                .collect(),
            role_mask: self.role_mask(),
        })
    }

    /// Inverse of the target part of [`Layout::tokenise`].
    pub fn scatter_targets(&self, values: ArrayView2<f64>) -> Array1<f64> {
        let mut out = Array1::zeros(self.target_dim);
        for (i, t) in self.tokens.iter().enumerate() {
            if t.slot == Slot::Target {
                out.slice_mut(s![t.offset..t.offset + t.width])
                    .assign(&values.slice(s![i, ..t.width]));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub values: Array2<f64>,
    pub var_ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub group_ids: Vec<usize>,
    pub fn_inputs: Vec<Option<f64>>,
    pub role_mask: Vec<bool>,
}

/// Per-key affine normalisation, keyed by `(var_id, position, slot)` and
/// pooled over sites.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Normaliser {
    pub stats: BTreeMap<String, (f64, f64)>,
}

fn key(var_id: usize, position: usize, slot: usize) -> String {
    format!("{var_id}:{position}:{slot}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnStats {
    pub target_mean: Array1<f64>,
    pub target_sd: Array1<f64>,
    pub cond_mean: Array1<f64>,
    pub cond_sd: Array1<f64>,
}

impl Normaliser {
    /// Fit from unconstrained samples laid out by `layout`.
    pub fn fit(layout: &Layout, target: ArrayView2<f64>, cond: ArrayView2<f64>) -> Self {
        let mut acc: BTreeMap<String, (f64, f64, f64)> = BTreeMap::new();
        for t in &layout.tokens {
            let m = match t.slot {
                Slot::Target => &target,
                Slot::Condition => &cond,
            };
            for j in 0..t.width {
                let col = m.column(t.offset + j);
                let e = acc
                    .entry(key(t.var_id, t.position, j))
                    .or_insert((0.0, 0.0, 0.0));
                for &v in col {
                    e.0 += 1.0;
                    e.1 += v;
                    e.2 += v * v;
                }
            }
        }
        let stats = acc
            .into_iter()
            .map(|(k, (n, s, ss))| {
                let mean = if n > 0.0 { s / n } else { 0.0 };
                let var = if n > 1.0 {
                    (ss - n * mean * mean) / (n - 1.0)
                } else {
                    1.0
                };
                let sd = var.max(0.0).sqrt();
                (k, (mean, if sd > 1e-8 { sd } else { 1.0 }))
            })
            .collect();
        Normaliser { stats }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    /// Merge statistics from `other` for keys not present here.
    pub fn extend(&mut self, other: &Normaliser) {
        for (k, v) in &other.stats {
            self.stats.entry(k.clone()).or_insert(*v);
        }
    }

    pub fn columns(&self, layout: &Layout) -> ColumnStats {
        let mut cs = ColumnStats {
            target_mean: Array1::zeros(layout.target_dim),
            target_sd: Array1::ones(layout.target_dim),
            cond_mean: Array1::zeros(layout.cond_dim),
            cond_sd: Array1::ones(layout.cond_dim),
        };
        for t in &layout.tokens {
            for j in 0..t.width {
                let (m, s) = self
                    .stats
                    .get(&key(t.var_id, t.position, j))
                    .copied()
                    .unwrap_or((0.0, 1.0));
                let c = t.offset + j;
                match t.slot {
                    Slot::Target => {
                        cs.target_mean[c] = m;
                        cs.target_sd[c] = s;
                    }
                    Slot::Condition => {
                        cs.cond_mean[c] = m;
                        cs.cond_sd[c] = s;
                    }
                }
            }
        }
        cs
    }
}

impl ColumnStats {
    pub fn normalise_target(&self, x: &mut Array2<f64>) {
        for mut row in x.axis_iter_mut(Axis(0)) {
            row -= &self.target_mean;
            row /= &self.target_sd;
        }
    }

    pub fn denormalise_target(&self, x: &mut Array2<f64>) {
        for mut row in x.axis_iter_mut(Axis(0)) {
            row *= &self.target_sd;
            row += &self.target_mean;
        }
    }

    pub fn normalise_cond(&self, x: &mut Array2<f64>) {
        for mut row in x.axis_iter_mut(Axis(0)) {
            row -= &self.cond_mean;
            row /= &self.cond_sd;
        }
    }
}

/// `[cos(2 pi B xi); sin(2 pi B xi)]` for scalar `xi`.
pub fn fourier_features(xi: f64, basis: &[f64]) -> Vec<f64> {
    let tau = 2.0 * std::f64::consts::PI;
    let mut out: Vec<f64> = basis.iter().map(|b| (tau * b * xi).cos()).collect();
    out.extend(basis.iter().map(|b| (tau * b * xi).sin()));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedConfig {
    pub d_id: usize,
    pub d_pos: usize,
    pub d_grp: usize,
    pub d_fn: usize,
    pub fourier_scale: f64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            d_id: 16,
            d_pos: 16,
            d_grp: 16,
            d_fn: 32,
            fourier_scale: 1.0,
        }
    }
}

/// Learned embedding tables, the input projection `W`, the fixed Fourier
/// basis and the shared readout `W_out`.
#[derive(Debug, Clone)]
pub struct EmbeddingTables {
    pub config: EmbedConfig,
    pub dims: TokenDims,
    pub d_lat: usize,
    pub e_id: ParamId,
    pub e_pos: ParamId,
    pub e_grp: ParamId,
    pub basis: ParamId,
    pub proj: Linear,
    pub w_out: ParamId,
}

/// Embedding inputs for a batch that shares one layout.
pub struct EmbedCache<S> {
    input: Array2<S>,
}

impl EmbeddingTables {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        config: EmbedConfig,
        dims: TokenDims,
        d_lat: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if config.d_fn % 2 != 0 {
            return Err(Error::Config {
                field: "embed.d_fn".into(),
                message: "must be even".into(),
            });
        }
        let e_id = store.add(
            "embed.id",
            normal_init(dims.vocab, config.d_id, 1.0, rng),
            true,
        );
        let e_pos = store.add(
            "embed.pos",
            normal_init(dims.p_max, config.d_pos, 1.0, rng),
            true,
        );
        let e_grp = store.add(
            "embed.grp",
            normal_init(dims.g_max, config.d_grp, 1.0, rng),
            true,
        );
        let basis = store.add(
            "embed.fourier",
            normal_init(1, config.d_fn / 2, config.fourier_scale, rng),
            false,
        );
        let d_in = Self::input_width(&config, &dims);
        let proj = Linear::new(store, "embed.proj", d_in, d_lat, true, rng);
        let w_out = store.add(
            "readout.w",
            crate::nets::glorot_uniform(d_lat, dims.d_v, rng),
            true,
        );
        Ok(EmbeddingTables {
            config,
            dims,
            d_lat,
            e_id,
            e_pos,
            e_grp,
            basis,
            proj,
            w_out,
        })
    }

    pub fn input_width(config: &EmbedConfig, dims: &TokenDims) -> usize {
        dims.d_v + config.d_id + config.d_pos + config.d_grp + config.d_fn + 1
    }

    fn check_layout(&self, layout: &Layout) -> Result<()> {
        for t in &layout.tokens {
            if t.var_id >= self.dims.vocab
                || t.position >= self.dims.p_max
                || t.group >= self.dims.g_max
            {
                return Err(Error::Layout(format!(
                    "token ({}, {}, {}) outside embedding tables ({}, {}, {})",
                    t.var_id,
                    t.position,
                    t.group,
                    self.dims.vocab,
                    self.dims.p_max,
                    self.dims.g_max
                )));
            }
            if t.width > self.dims.d_v {
                return Err(Error::Layout(format!(
                    "token width {} exceeds d_v = {}",
                    t.width, self.dims.d_v
                )));
            }
        }
        Ok(())
    }

    /// `H0 = W [v; e_id; e_pos; e_grp; e_fn; t] + b` for every token of every
    /// batch row, returned as `(B * T, d_lat)`.
    pub fn embed<S: Scalar>(
        &self,
        p: &ParamStore<S>,
        layout: &Layout,
        x_target: &Array2<S>,
        cond: &Array2<S>,
        fn_inputs: &Array2<S>,
        t: &[S],
    ) -> Result<(Array2<S>, EmbedCache<S>)> {
        self.check_layout(layout)?;
        let b = x_target.nrows();
        if cond.nrows() != b
            || t.len() != b
            || x_target.ncols() != layout.target_dim
            || cond.ncols() != layout.cond_dim
        {
            return Err(Error::shape("embedding inputs do not match the layout"));
        }
        let n_tok = layout.len();
        let cfg = &self.config;
        let d_in = Self::input_width(cfg, &self.dims);
        let (o_id, o_pos, o_grp) = (
            self.dims.d_v,
            self.dims.d_v + cfg.d_id,
            self.dims.d_v + cfg.d_id + cfg.d_pos,
        );
        let o_fn = o_grp + cfg.d_grp;
        let e_id = p.get(self.e_id);
        let e_pos = p.get(self.e_pos);
        let e_grp = p.get(self.e_grp);
        let basis = p.get(self.basis).row(0);
        let tau = S::of(2.0 * std::f64::consts::PI);
        let half = cfg.d_fn / 2;

        let mut input = Array2::zeros((b * n_tok, d_in));
        for bi in 0..b {
            for (i, tok) in layout.tokens.iter().enumerate() {
                let mut row = input.row_mut(bi * n_tok + i);
                let src = match tok.slot {
                    Slot::Target => x_target.row(bi),
                    Slot::Condition => cond.row(bi),
                };
                row.slice_mut(s![..tok.width])
                    .assign(&src.slice(s![tok.offset..tok.offset + tok.width]));
                row.slice_mut(s![o_id..o_id + cfg.d_id])
                    .assign(&e_id.row(tok.var_id));
                row.slice_mut(s![o_pos..o_pos + cfg.d_pos])
                    .assign(&e_pos.row(tok.position));
                row.slice_mut(s![o_grp..o_grp + cfg.d_grp])
                    .assign(&e_grp.row(tok.group));
                if let Some(k) = tok.fn_index {
                    let xi = fn_inputs[[bi, k]];
                    for (j, &bj) in basis.iter().enumerate() {
                        let arg = tau * bj * xi;
                        row[o_fn + j] = arg.cos();
                        row[o_fn + half + j] = arg.sin();
                    }
                }
                row[d_in - 1] = t[bi];
            }
        }
        let h0 = self.proj.forward(p, &input);
        Ok((h0, EmbedCache { input }))
    }

    pub fn embed_backward<S: Scalar>(
        &self,
        p: &ParamStore<S>,
        g: &mut Grads<S>,
        layout: &Layout,
        cache: &EmbedCache<S>,
        dh0: &Array2<S>,
    ) {
        let din = self.proj.backward(p, g, &cache.input, dh0);
        let cfg = &self.config;
        let (o_id, o_pos, o_grp) = (
            self.dims.d_v,
            self.dims.d_v + cfg.d_id,
            self.dims.d_v + cfg.d_id + cfg.d_pos,
        );
        let n_tok = layout.len();
        // accumulate per-token gradients over the batch first
        let b = din.nrows() / n_tok.max(1);
        let mut per_tok = Array2::<S>::zeros((n_tok, din.ncols()));
        for bi in 0..b {
            per_tok += &din.slice(s![bi * n_tok..(bi + 1) * n_tok, ..]);
        }
        for (i, tok) in layout.tokens.iter().enumerate() {
            let r = per_tok.row(i);
            g.get_mut(self.e_id)
                .row_mut(tok.var_id)
                .scaled_add(S::one(), &r.slice(s![o_id..o_id + cfg.d_id]));
            g.get_mut(self.e_pos)
                .row_mut(tok.position)
                .scaled_add(S::one(), &r.slice(s![o_pos..o_pos + cfg.d_pos]));
            g.get_mut(self.e_grp)
                .row_mut(tok.group)
                .scaled_add(S::one(), &r.slice(s![o_grp..o_grp + cfg.d_grp]));
        }
    }

    /// `v_i = W_out h_i` on target tokens, scattered into `(B, target_dim)`.
    pub fn readout<S: Scalar>(
        &self,
        p: &ParamStore<S>,
        layout: &Layout,
        hk: &Array2<S>,
    ) -> (Array2<S>, Array2<S>) {
        let n_tok = layout.len();
        let b = hk.nrows() / n_tok.max(1);
        let targets: Vec<usize> = (0..n_tok)
            .filter(|&i| layout.tokens[i].slot == Slot::Target)
            .collect();
        let rows: Vec<usize> = (0..b)
            .flat_map(|bi| targets.iter().map(move |&i| bi * n_tok + i))
            .collect();
        let gathered = hk.select(Axis(0), &rows);
        let tok_out = gathered.dot(p.get(self.w_out));
        let mut v = Array2::zeros((b, layout.target_dim));
        for bi in 0..b {
            for (k, &i) in targets.iter().enumerate() {
                let tok = &layout.tokens[i];
                v.slice_mut(s![bi, tok.offset..tok.offset + tok.width])
                    .assign(&tok_out.slice(s![bi * targets.len() + k, ..tok.width]));
            }
        }
        (v, gathered)
    }

    pub fn readout_backward<S: Scalar>(
        &self,
        p: &ParamStore<S>,
        g: &mut Grads<S>,
        layout: &Layout,
        gathered: &Array2<S>,
        dv: &Array2<S>,
    ) -> Array2<S> {
        let n_tok = layout.len();
        let b = dv.nrows();
        let targets: Vec<usize> = (0..n_tok)
            .filter(|&i| layout.tokens[i].slot == Slot::Target)
            .collect();
        let mut dtok = Array2::zeros((b * targets.len(), self.dims.d_v));
        for bi in 0..b {
            for (k, &i) in targets.iter().enumerate() {
                let tok = &layout.tokens[i];
                dtok.slice_mut(s![bi * targets.len() + k, ..tok.width])
                    .assign(&dv.slice(s![bi, tok.offset..tok.offset + tok.width]));
            }
        }
        *g.get_mut(self.w_out) += &gathered.t().dot(&dtok);
        let dg = dtok.dot(&p.get(self.w_out).t());
        let mut dhk = Array2::zeros((b * n_tok, self.d_lat));
        for bi in 0..b {
            for (k, &i) in targets.iter().enumerate() {
                dhk.row_mut(bi * n_tok + i)
                    .assign(&dg.row(bi * targets.len() + k));
            }
        }
        dhk
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use crate::tasks::TaskId;
    use ndarray::Array1;

    #[test]
    fn gaussian_linear_two_sites_has_five_tokens() {
        let m = TaskId::GaussianLinear.model();
        let l = Layout::new(&m, Role::Posterior, 2, true).unwrap();
        assert_eq!(l.len(), 5);
        assert_eq!(l.n_targets(), 3);
        assert_eq!((l.target_dim, l.cond_dim), (11, 10));
    }

    #[test]
    fn seir_hundred_sites_token_counts() {
        let m = TaskId::Seir.model();
        let l = Layout::new(&m, Role::Posterior, 100, true).unwrap();
        let obs: Vec<_> = l
            .tokens
            .iter()
            .filter(|t| t.slot == Slot::Condition)
            .collect();
        assert_eq!(obs.len(), 1200);
        assert!(obs.iter().all(|t| t.fn_index.is_some()));
        assert_eq!(l.len(), 1301);
    }

    #[test]
    fn global_tokens_are_group_zero() {
        for task in TaskId::ALL {
            let m = task.model();
            let l = Layout::new(&m, Role::Posterior, 3, true).unwrap();
            for t in &l.tokens {
                let is_global = t.var_id <= m.globals.len();
                assert_eq!(t.group == 0, is_global, "{task}: {t:?}");
            }
        }
    }

    #[test]
    fn no_grouping_zeroes_group_ids() {
        let m = TaskId::TwoMoons.model();
        let l = Layout::new(&m, Role::Posterior, 4, false).unwrap();
        assert!(l.tokens.iter().all(|t| t.group == 0));
    }

    #[test]
    fn gather_scatter_round_trip() {
        for task in TaskId::ALL {
            let m = task.model();
            for role in [
                Role::Posterior,
                Role::Surrogate,
                Role::GlobalPosterior,
                Role::LocalPosterior,
            ] {
                let l = Layout::new(&m, role, 3, true).unwrap();
                let dims = TokenDims::for_model(&m, 3);
                let x = Array1::from_iter((0..l.target_dim).map(|i| i as f64 * 0.5 - 1.0));
                let c = Array1::from_iter((0..l.cond_dim).map(|i| -(i as f64)));
                let f = Array1::from_iter((0..l.n_fn).map(|i| i as f64 / 10.0));
                let seq = l.tokenise(dims.d_v, x.view(), c.view(), f.view()).unwrap();
                assert_eq!(l.scatter_targets(seq.values.view()), x);
            }
        }
    }

    #[test]
    fn fourier_features_at_zero_and_period() {
        let basis = [0.5, -1.3, 2.0];
        let f0 = fourier_features(0.0, &basis);
        assert_eq!(f0, vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        for &xi in &[1e-3, 3.7, 1e6] {
            assert!(fourier_features(xi, &basis).iter().all(|v| v.abs() <= 1.0));
        }
        // feature k repeats after 1 / B_k
        let a = fourier_features(0.3, &basis);
        let b = fourier_features(0.3 + 1.0 / basis[2], &basis);
        assert!((a[2] - b[2]).abs() < 1e-12 && (a[5] - b[5]).abs() < 1e-12);
    }

    fn tables(store: &mut ParamStore<f64>) -> (EmbeddingTables, Layout) {
        let m = TaskId::GaussianLinear.model();
        let layout = Layout::new(&m, Role::Posterior, 2, true).unwrap();
        let mut rng = seed::rng(5);
        let t = EmbeddingTables::new(
            store,
            EmbedConfig::default(),
            TokenDims::for_model(&m, 2),
            8,
            &mut rng,
        )
        .unwrap();
        (t, layout)
    }

    #[test]
    fn embedding_is_local_and_affine_in_values() {
        let mut store = ParamStore::<f64>::new();
        let (tab, layout) = tables(&mut store);
        let x = Array2::from_shape_fn((1, 11), |(_, j)| j as f64 * 0.1);
        let c = Array2::from_shape_fn((1, 10), |(_, j)| 1.0 - j as f64 * 0.2);
        let f = Array2::zeros((1, 0));
        let (h, _) = tab.embed(&store, &layout, &x, &c, &f, &[0.3]).unwrap();
        // changing sigma (token 0) only moves row 0
        let mut x2 = x.clone();
        x2[[0, 0]] += 1.0;
        let (h2, _) = tab.embed(&store, &layout, &x2, &c, &f, &[0.3]).unwrap();
        for i in 1..layout.len() {
            assert_eq!(h.row(i), h2.row(i));
        }
        // h(2v) - h(0) = 2 (h(v) - h(0)) for token 0
        let mut x0 = x.clone();
        x0[[0, 0]] = 0.0;
        let mut xd = x.clone();
        xd[[0, 0]] = 2.0 * x[[0, 0]];
        let (h0, _) = tab.embed(&store, &layout, &x0, &c, &f, &[0.3]).unwrap();
        let (hd, _) = tab.embed(&store, &layout, &xd, &c, &f, &[0.3]).unwrap();
        let lhs = &hd.row(0) - &h0.row(0);
        let rhs = (&h.row(0) - &h0.row(0)) * 2.0;
        assert!(lhs
            .iter()
            .zip(rhs.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn zero_tables_give_zero_embedding() {
        let mut store = ParamStore::<f64>::new();
        let (tab, layout) = tables(&mut store);
        for i in 0..store.len() {
            store.get_mut(ParamId(i)).fill(0.0);
        }
        let x = Array2::from_elem((2, 11), 0.7);
        let c = Array2::from_elem((2, 10), -0.4);
        let (h, _) = tab
            .embed(&store, &layout, &x, &c, &Array2::zeros((2, 0)), &[0.1, 0.9])
            .unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_readout_gives_zero_field() {
        let mut store = ParamStore::<f64>::new();
        let (tab, layout) = tables(&mut store);
        store.get_mut(tab.w_out).fill(0.0);
        let hk = Array2::from_elem((2 * layout.len(), 8), 1.5);
        let (v, _) = tab.readout(&store, &layout, &hk);
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn one_hot_readout_selects_latent_coordinates() {
        let mut store = ParamStore::<f64>::new();
        let (tab, layout) = tables(&mut store);
        let w = store.get_mut(tab.w_out);
        w.fill(0.0);
        for j in 0..5 {
            w[[j, j]] = 1.0;
        }
        let hk = Array2::from_shape_fn((layout.len(), 8), |(i, j)| (10 * i + j) as f64);
        let (v, _) = tab.readout(&store, &layout, &hk);
        // sigma token 0 -> latent 0; mu_1 token 1 -> latents 0..5
        assert_eq!(v[[0, 0]], 0.0);
        assert_eq!(
            v.slice(s![0, 1..6]).to_vec(),
            vec![10.0, 11.0, 12.0, 13.0, 14.0]
        );
    }

    #[test]
    fn out_of_range_ids_are_rejected() {
        let mut store = ParamStore::<f64>::new();
        let (tab, _) = tables(&mut store);
        let m = TaskId::GaussianLinear.model();
        let big = Layout::new(&m, Role::Posterior, 5, true).unwrap();
        let x = Array2::zeros((1, big.target_dim));
        let c = Array2::zeros((1, big.cond_dim));
        assert!(tab
            .embed(&store, &big, &x, &c, &Array2::zeros((1, 0)), &[0.0])
            .is_err());
    }

    #[test]
    fn normaliser_pools_over_sites() {
        let m = TaskId::GaussianLinear.model();
        let l = Layout::new(&m, Role::Posterior, 2, true).unwrap();
        let target = Array2::from_shape_fn((4, 11), |(r, c)| (r * 11 + c) as f64);
        let cond = Array2::zeros((4, 10));
        let n = Normaliser::fit(&l, target.view(), cond.view());
        let cs = n.columns(&l);
        // mu_1 slot 0 is column 1, mu_2 slot 0 is column 6: same pooled stats
        assert_eq!(cs.target_mean[1], cs.target_mean[6]);
        assert_eq!(cs.cond_sd[0], 1.0);
        let mut t2 = target.clone();
        cs.normalise_target(&mut t2);
        cs.denormalise_target(&mut t2);
        assert!(t2
            .iter()
            .zip(target.iter())
            .all(|(a, b)| (a - b).abs() < 1e-9));
    }
}
