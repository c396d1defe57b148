use ndarray::{s, Array1, Array2, Axis, Zip};
use rand::Rng as _;

use super::{glorot_uniform, Grads, Mode, ParamId, ParamStore, Scalar};
use crate::seed::Rng;

/// `y = x W + b` with `W` of shape `(d_in, d_out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), glorot_uniform(d_in, d_out, rng), true);
        let b = bias.then(|| store.add(format!("{name}.b"), Array2::zeros((1, d_out)), true));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward<S: Scalar>(&self, p: &ParamStore<S>, x: &Array2<S>) -> Array2<S> {
        let mut y = x.dot(p.get(self.w));
        if let Some(b) = self.b {
            y += &p.get(b).row(0);
        }
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward<S: Scalar>(
        &self,
        p: &ParamStore<S>,
        g: &mut Grads<S>,
        x: &Array2<S>,
        dy: &Array2<S>,
    ) -> Array2<S> {
        *g.get_mut(self.w) += &x.t().dot(dy);
        if let Some(b) = self.b {
            let db = dy.sum_axis(Axis(0));
            g.get_mut(b).row_mut(0).scaled_add(S::one(), &db);
        }
        dy.dot(&p.get(self.w).t())
    }

    /// Parameter gradients only, for the first layer of a network.
    pub fn backward_params<S: Scalar>(&self, g: &mut Grads<S>, x: &Array2<S>, dy: &Array2<S>) {
        *g.get_mut(self.w) += &x.t().dot(dy);
        if let Some(b) = self.b {
            let db = dy.sum_axis(Axis(0));
            g.get_mut(b).row_mut(0).scaled_add(S::one(), &db);
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

pub struct LayerNormCache<S> {
    xhat: Array2<S>,
    inv_std: Array1<S>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Array2::ones((1, dim)), true);
        let beta = store.add(format!("{name}.beta"), Array2::zeros((1, dim)), true);
        LayerNorm { gamma, beta, dim }
    }

    pub fn forward<S: Scalar>(
        &self,
        p: &ParamStore<S>,
        x: &Array2<S>,
    ) -> (Array2<S>, LayerNormCache<S>) {
        let n = S::of(self.dim as f64);
        let eps = S::of(LN_EPS);
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().fold(S::zero(), |a, &v| a + v * v) / n;
            *is = S::one() / (var + eps).sqrt();
            let k = *is;
            row.mapv_inplace(|v| v * k);
        }
        let gamma = p.get(self.gamma).row(0);
        let beta = p.get(self.beta).row(0);
        let y = &xhat * &gamma + &beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward<S: Scalar>(
        &self,
        p: &ParamStore<S>,
        g: &mut Grads<S>,
        cache: &LayerNormCache<S>,
        dy: &Array2<S>,
    ) -> Array2<S> {
        let gamma = p.get(self.gamma).row(0).to_owned();
        let dgamma = (dy * &cache.xhat).sum_axis(Axis(0));
        let dbeta = dy.sum_axis(Axis(0));
        g.get_mut(self.gamma)
            .row_mut(0)
            .scaled_add(S::one(), &dgamma);
        g.get_mut(self.beta).row_mut(0).scaled_add(S::one(), &dbeta);

        let n = S::of(self.dim as f64);
        let mut dx = dy * &gamma;
        for ((mut row, xh), &is) in dx
            .axis_iter_mut(Axis(0))
            .zip(cache.xhat.axis_iter(Axis(0)))
            .zip(cache.inv_std.iter())
        {
            let sum_d = row.sum();
            let sum_dx = row
                .iter()
                .zip(xh.iter())
                .fold(S::zero(), |a, (&d, &x)| a + d * x);
            Zip::from(&mut row).and(&xh).for_each(|d, &x| {
                *d = is * (*d - (sum_d + x * sum_dx) / n);
            });
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh approximation of GELU.
pub fn gelu<S: Scalar>(x: &Array2<S>) -> Array2<S> {
    let (c, a, half) = (S::of(GELU_C), S::of(0.044715), S::of(0.5));
    x.mapv(|v| half * v * (S::one() + (c * (v + a * v * v * v)).tanh()))
}

pub fn gelu_backward<S: Scalar>(x: &Array2<S>, dy: &Array2<S>) -> Array2<S> {
    let (c, a, half) = (S::of(GELU_C), S::of(0.044715), S::of(0.5));
    let three = S::of(3.0);
    let mut out = dy.clone();
    Zip::from(&mut out).and(x).for_each(|d, &v| {
        let th = (c * (v + a * v * v * v)).tanh();
        let dth = (S::one() - th * th) * c * (S::one() + three * a * v * v);
        *d *= half * (S::one() + th) + half * v * dth;
    });
    out
}

pub fn relu<S: Scalar>(x: &Array2<S>) -> Array2<S> {
    x.mapv(|v| if v > S::zero() { v } else { S::zero() })
}

pub fn relu_backward<S: Scalar>(x: &Array2<S>, dy: &Array2<S>) -> Array2<S> {
    let mut out = dy.clone();
    Zip::from(&mut out).and(x).for_each(|d, &v| {
        if v <= S::zero() {
            *d = S::zero();
        }
    });
    out
}

/// Inverted dropout. Returns the output and the scaled keep-mask (`None`
/// when inactive).
pub fn dropout<S: Scalar>(
    x: Array2<S>,
    rate: f64,
    mode: &mut Mode<'_>,
) -> (Array2<S>, Option<Array2<S>>) {
    match mode {
        Mode::Train(rng) if rate > 0.0 => {
            let keep = S::of(1.0 / (1.0 - rate));
            let mask = Array2::from_shape_simple_fn(x.dim(), || {
                if rng.random::<f64>() < rate {
                    S::zero()
                } else {
                    keep
                }
            });
            (x * &mask, Some(mask))
        }
        _ => (x, None),
    }
}

pub fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

/// Full (unmasked) multi-head self-attention over `batch` sequences of
/// length `seq`, stored as `(batch * seq, d)` rows.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
    pub d_model: usize,
}

pub struct AttentionCache<S> {
    x: Array2<S>,
    q: Array2<S>,
    k: Array2<S>,
    v: Array2<S>,
    probs: Vec<Array2<S>>,
    ctx: Array2<S>,
    batch: usize,
    seq: usize,
}

impl MultiHeadAttention {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        d_model: usize,
        n_heads: usize,
        rng: &mut Rng,
    ) -> Self {
        assert!(
            d_model % n_heads == 0,
            "d_model must be divisible by n_heads"
        );
        MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model, true, rng),
            k: Linear::new(store, &format!("{name}.k"), d_model, d_model, true, rng),
            v: Linear::new(store, &format!("{name}.v"), d_model, d_model, true, rng),
            o: Linear::new(store, &format!("{name}.o"), d_model, d_model, true, rng),
            n_heads,
            d_model,
        }
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn forward<S: Scalar>(
        &self,
        p: &ParamStore<S>,
        x: &Array2<S>,
        batch: usize,
        seq: usize,
    ) -> (Array2<S>, AttentionCache<S>) {
        let q = self.q.forward(p, x);
        let k = self.k.forward(p, x);
        let v = self.v.forward(p, x);
        let dh = self.head_dim();
        let scale = S::of(1.0 / (dh as f64).sqrt());
        let mut ctx = Array2::zeros(x.dim());
        let mut probs = Vec::with_capacity(batch * self.n_heads);
        for b in 0..batch {
            let r = b * seq..(b + 1) * seq;
            for h in 0..self.n_heads {
                let c = h * dh..(h + 1) * dh;
                let qb = q.slice(s![r.clone(), c.clone()]);
                let kb = k.slice(s![r.clone(), c.clone()]);
                let vb = v.slice(s![r.clone(), c.clone()]);
                let mut a = qb.dot(&kb.t());
                for mut row in a.axis_iter_mut(Axis(0)) {
                    let m = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v * scale));
                    let mut z = S::zero();
                    row.mapv_inplace(|v| {
                        let e = (v * scale - m).exp();
                        z += e;
                        e
                    });
                    row.mapv_inplace(|e| e / z);
                }
                ctx.slice_mut(s![r.clone(), c]).assign(&a.dot(&vb));
                probs.push(a);
            }
        }
        let out = self.o.forward(p, &ctx);
        (
            out,
            AttentionCache {
                x: x.clone(),
                q,
                k,
                v,
                probs,
                ctx,
                batch,
                seq,
            },
        )
    }

    pub fn backward<S: Scalar>(
        &self,
        p: &ParamStore<S>,
        g: &mut Grads<S>,
        cache: &AttentionCache<S>,
        dout: &Array2<S>,
    ) -> Array2<S> {
        let dctx = self.o.backward(p, g, &cache.ctx, dout);
        let dh = self.head_dim();
        let scale = S::of(1.0 / (dh as f64).sqrt());
        let (batch, seq) = (cache.batch, cache.seq);
        let mut dq = Array2::zeros(cache.q.dim());
        let mut dk = Array2::zeros(cache.k.dim());
        let mut dv = Array2::zeros(cache.v.dim());
        for b in 0..batch {
            let r = b * seq..(b + 1) * seq;
            for h in 0..self.n_heads {
                let c = h * dh..(h + 1) * dh;
                let a = &cache.probs[b * self.n_heads + h];
                let dcb = dctx.slice(s![r.clone(), c.clone()]);
                let qb = cache.q.slice(s![r.clone(), c.clone()]);
                let kb = cache.k.slice(s![r.clone(), c.clone()]);
                let vb = cache.v.slice(s![r.clone(), c.clone()]);
                let da = dcb.dot(&vb.t());
                dv.slice_mut(s![r.clone(), c.clone()])
                    .assign(&a.t().dot(&dcb));
                let mut ds = &da * a;
                for (mut row, arow) in ds.axis_iter_mut(Axis(0)).zip(a.axis_iter(Axis(0))) {
                    let dot = row.sum();
                    Zip::from(&mut row)
                        .and(&arow)
                        .for_each(|d, &p| *d -= p * dot);
                }
                // ds currently holds a * (da - <da, a>) after the loop above
                ds.mapv_inplace(|v| v * scale);
                dq.slice_mut(s![r.clone(), c.clone()]).assign(&ds.dot(&kb));
                dk.slice_mut(s![r.clone(), c]).assign(&ds.t().dot(&qb));
            }
        }
        let mut dx = self.q.backward(p, g, &cache.x, &dq);
        dx += &self.k.backward(p, g, &cache.x, &dk);
        dx += &self.v.backward(p, g, &cache.x, &dv);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::normal_init;
    use crate::seed;

    fn fd_check<F: Fn(&Array2<f64>) -> f64>(f: F, x: &Array2<f64>, analytic: &Array2<f64>) {
        let h = 1e-6;
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (f(&xp) - f(&xm)) / (2.0 * h);
                let a = analytic[[i, j]];
                assert!(
                    (fd - a).abs() <= 1e-6 * (1.0 + a.abs()),
                    "({i},{j}) fd={fd} analytic={a}"
                );
            }
        }
    }

    #[test]
    fn layer_norm_input_gradient() {
        let mut rng = seed::rng(0);
        let mut store = ParamStore::<f64>::new();
        let ln = LayerNorm::new(&mut store, "ln", 6);
        *store.get_mut(ln.gamma) = normal_init(1, 6, 1.0, &mut rng);
        let x: Array2<f64> = normal_init(3, 6, 2.0, &mut rng);
        let w: Array2<f64> = normal_init(3, 6, 1.0, &mut rng);
        let loss = |x: &Array2<f64>| (&ln.forward(&store, x).0 * &w).sum();
        let (_, cache) = ln.forward(&store, &x);
        let mut g = store.zero_grads();
        let dx = ln.backward(&store, &mut g, &cache, &w);
        fd_check(loss, &x, &dx);
    }

    #[test]
    fn attention_input_gradient() {
        let mut rng = seed::rng(1);
        let mut store = ParamStore::<f64>::new();
        let mha = MultiHeadAttention::new(&mut store, "att", 8, 2, &mut rng);
        let x: Array2<f64> = normal_init(2 * 3, 8, 1.0, &mut rng);
        let w: Array2<f64> = normal_init(2 * 3, 8, 1.0, &mut rng);
        let loss = |x: &Array2<f64>| (&mha.forward(&store, x, 2, 3).0 * &w).sum();
        let (_, cache) = mha.forward(&store, &x, 2, 3);
        let mut g = store.zero_grads();
        let dx = mha.backward(&store, &mut g, &cache, &w);
        fd_check(loss, &x, &dx);
    }

    #[test]
    fn gelu_gradient() {
        let x = Array2::from_shape_vec((1, 5), vec![-3.0, -0.5, 0.0, 0.7, 2.5]).unwrap();
        let dy = Array2::ones((1, 5));
        let loss = |x: &Array2<f64>| gelu(x).sum();
        fd_check(loss, &x, &gelu_backward(&x, &dy));
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let x = Array2::from_elem((4, 4), 2.0f32);
        let (y, mask) = dropout(x.clone(), 0.5, &mut Mode::Eval);
        assert_eq!(y, x);
        assert!(mask.is_none());
    }
}
