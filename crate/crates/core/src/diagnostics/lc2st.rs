//! Local classifier two-sample test.
//!
//! Class 0 are joint pairs `(x_i, theta_i)`, class 1 are `(x_i, theta_q)`
//! with `theta_q ~ q(theta | x_i)`. The statistic at `x_obs` is
//! `mean (d(x_obs, theta_j) - 1/2)^2` over posterior draws, where `d` is the
//! average class-1 probability of a cross-validated classifier ensemble.

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::glorot_uniform;
use crate::nets::layers::sigmoid;
use crate::seed::{self, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Lc2stConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub max_epochs: usize,
    /// Ensemble members; member `k` holds out fold `k` for early stopping.
    pub cv_folds: usize,
    /// Null replicates, each trained on freshly permuted labels.
    pub n_null: usize,
    pub n_cal: usize,
    pub n_posterior: usize,
}

impl Default for Lc2stConfig {
    fn default() -> Self {
        Lc2stConfig {
            hidden: vec![32, 32],
            learning_rate: 3e-4,
            batch_size: 100,
            patience: 100,
            min_delta: 1e-2,
            max_epochs: 1000,
            cv_folds: 10,
            n_null: 100,
            n_cal: 2000,
            n_posterior: 2000,
        }
    }
}

impl Lc2stConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| {
            Err(Error::Config {
                field: format!("lc2st.{f}"),
                message: m.into(),
            })
        };
        if self.cv_folds < 2 {
            return bad("cv_folds", "need at least 2 folds");
        }
        if self.n_null < 1 {
            return bad("n_null", "need at least one null classifier");
        }
        if self.n_cal < self.cv_folds || self.n_posterior == 0 {
            return bad("n_cal", "too few calibration or posterior samples");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size", "batch size and epochs must be positive");
        }
        Ok(())
    }
}

/// `mean (d - 1/2)^2`.
pub fn t_mse(probabilities: &[f64]) -> f64 {
    if probabilities.is_empty() {
        return 0.0;
    }
    probabilities.iter().map(|d| (d - 0.5).powi(2)).sum::<f64>() / probabilities.len() as f64
}

/// Fraction of null statistics at least as large as `t`.
pub fn p_value(t: f64, nulls: &[f64]) -> f64 {
    nulls.iter().filter(|&&n| n >= t).count() as f64 / nulls.len().max(1) as f64
}

/// Dense ReLU classifier emitting one logit. Trained with preallocated
/// buffers since thousands of them are fitted per test.
#[derive(Debug, Clone)]
struct Classifier {
    w: Vec<Array2<f32>>,
    b: Vec<Array1<f32>>,
}

struct Buffers {
    acts: Vec<Array2<f32>>,
    deltas: Vec<Array2<f32>>,
}

impl Classifier {
    fn new(d_in: usize, hidden: &[usize], rng: &mut seed::Rng) -> Self {
        let mut widths = vec![d_in];
        widths.extend(hidden);
        widths.push(1);
        let w = widths
            .windows(2)
            .map(|p| glorot_uniform::<f32>(p[0], p[1], rng))
            .collect();
        let b = widths[1..].iter().map(|&k| Array1::zeros(k)).collect();
        Classifier { w, b }
    }

    fn buffers(&self, rows: usize) -> Buffers {
        let mut acts = vec![Array2::zeros((rows, self.w[0].nrows()))];
        acts.extend(self.w.iter().map(|w| Array2::zeros((rows, w.ncols()))));
        let deltas = self
            .w
            .iter()
            .map(|w| Array2::zeros((rows, w.ncols())))
            .collect();
        Buffers { acts, deltas }
    }

    /// Forward pass over the first `m` rows of `buf.acts[0]`.
    fn forward(&self, buf: &mut Buffers, m: usize) {
        let n = self.w.len();
        for l in 0..n {
            let (lo, hi) = buf.acts.split_at_mut(l + 1);
            let input = lo[l].slice(s![..m, ..]);
            let mut out = hi[0].slice_mut(s![..m, ..]);
            out.assign(&self.b[l].view().insert_axis(Axis(0)));
            general_mat_mul(1.0, &input, &self.w[l], 1.0, &mut out);
            if l + 1 < n {
                out.mapv_inplace(|v| v.max(0.0));
            }
        }
    }

    /// Gradients of mean BCE for labels `y` into `gw`, `gb`.
    fn backward(
        &self,
        buf: &mut Buffers,
        m: usize,
        y: &[f32],
        gw: &mut [Array2<f32>],
        gb: &mut [Array1<f32>],
    ) {
        let n = self.w.len();
        {
            let z = buf.acts[n].slice(s![..m, ..]);
            let mut d = buf.deltas[n - 1].slice_mut(s![..m, ..]);
            for r in 0..m {
                d[[r, 0]] = (sigmoid(z[[r, 0]]) - y[r]) / m as f32;
            }
        }
        for l in (0..n).rev() {
            let input = buf.acts[l].slice(s![..m, ..]);
            let (dlo, dhi) = buf.deltas.split_at_mut(l);
            let d = dhi[0].slice(s![..m, ..]);
            general_mat_mul(1.0, &input.t(), &d, 0.0, &mut gw[l]);
            gb[l].assign(&d.sum_axis(Axis(0)));
            if l > 0 {
                let mut dp = dlo[l - 1].slice_mut(s![..m, ..]);
                general_mat_mul(1.0, &d, &self.w[l].t(), 0.0, &mut dp);
                Zip::from(&mut dp).and(&input).for_each(|g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
        }
    }

    fn logits(&self, x: &Array2<f32>) -> Array1<f32> {
        let mut buf = self.buffers(x.nrows());
        buf.acts[0].assign(x);
        self.forward(&mut buf, x.nrows());
        buf.acts[self.w.len()].column(0).to_owned()
    }

    fn prob(&self, x: &Array2<f32>) -> Result<Array1<f64>> {
        Ok(self.logits(x).mapv(|v| sigmoid(v as f64)))
    }
}

struct AdamState {
    lr: f32,
    step: i32,
    m: Vec<Array2<f32>>,
    v: Vec<Array2<f32>>,
    mb: Vec<Array1<f32>>,
    vb: Vec<Array1<f32>>,
}

impl AdamState {
    fn new(c: &Classifier, lr: f64) -> Self {
        AdamState {
            lr: lr as f32,
            step: 0,
            m: c.w.iter().map(|w| Array2::zeros(w.dim())).collect(),
            v: c.w.iter().map(|w| Array2::zeros(w.dim())).collect(),
            mb: c.b.iter().map(|b| Array1::zeros(b.dim())).collect(),
            vb: c.b.iter().map(|b| Array1::zeros(b.dim())).collect(),
        }
    }

    fn update(&mut self, c: &mut Classifier, gw: &[Array2<f32>], gb: &[Array1<f32>]) {
        self.step += 1;
        let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f32);
        let bc1 = 1.0 - b1.powi(self.step);
        let bc2 = 1.0 - b2.powi(self.step);
        let lr = self.lr * bc2.sqrt() / bc1;
        let e = eps * bc2.sqrt();
        let step = |p: &mut f32, m: &mut f32, v: &mut f32, g: f32| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * *m / (v.sqrt() + e);
        };
        for l in 0..c.w.len() {
            Zip::from(&mut c.w[l])
                .and(&mut self.m[l])
                .and(&mut self.v[l])
                .and(&gw[l])
                .for_each(|p, m, v, &g| step(p, m, v, g));
            Zip::from(&mut c.b[l])
                .and(&mut self.mb[l])
                .and(&mut self.vb[l])
                .and(&gb[l])
                .for_each(|p, m, v, &g| step(p, m, v, g));
        }
    }
}

/// Mean binary cross-entropy from logits.
fn bce(z: &Array1<f32>, y: &[f32]) -> f64 {
    z.iter()
        .zip(y)
        .map(|(&z, &y)| {
            let z = z as f64;
            z.max(0.0) - z * y as f64 + (-z.abs()).exp().ln_1p()
        })
        .sum::<f64>()
        / y.len().max(1) as f64
}

fn train_classifier(
    x: &Array2<f32>,
    y: &[f32],
    train: &[usize],
    val: &[usize],
    config: &Lc2stConfig,
    seed_: u64,
) -> Result<Classifier> {
    let mut rng = seed::rng_for(seed_, &[stream::INIT]);
    let mut clf = Classifier::new(x.ncols(), &config.hidden, &mut rng);
    let mut opt = AdamState::new(&clf, config.learning_rate);
    let mut gw: Vec<Array2<f32>> = clf.w.iter().map(|w| Array2::zeros(w.dim())).collect();
    let mut gb: Vec<Array1<f32>> = clf.b.iter().map(|b| Array1::zeros(b.dim())).collect();
    let bs = config.batch_size.min(train.len()).max(1);
    let mut buf = clf.buffers(bs);
    let mut yb = vec![0.0f32; bs];
    let xv = x.select(Axis(0), val);
    let yv: Vec<f32> = val.iter().map(|&i| y[i]).collect();
    let mut order = train.to_vec();
    let mut best: Option<(f64, Classifier)> = None;
    let mut since = 0usize;
    for epoch in 0..config.max_epochs {
        order.shuffle(&mut seed::rng_for(seed_, &[stream::SHUFFLE, epoch as u64]));
        for chunk in order.chunks(bs) {
            let m = chunk.len();
            for (r, &i) in chunk.iter().enumerate() {
                buf.acts[0].row_mut(r).assign(&x.row(i));
                yb[r] = y[i];
            }
            clf.forward(&mut buf, m);
            clf.backward(&mut buf, m, &yb[..m], &mut gw, &mut gb);
            opt.update(&mut clf, &gw, &gb);
        }
        let loss = if val.is_empty() {
            0.0
        } else {
            bce(&clf.logits(&xv), &yv)
        };
        if !loss.is_finite() {
            return Err(Error::Diagnostic(format!(
                "classifier loss diverged at epoch {epoch}"
            )));
        }
        match &best {
            Some((b, _)) if loss >= b - config.min_delta => {
                since += 1;
                if since >= config.patience {
                    break;
                }
            }
            _ => {
                best = Some((loss, clf.clone()));
                since = 0;
            }
        }
    }
    Ok(best.map(|b| b.1).unwrap_or(clf))
}

/// A cross-validated ensemble.
#[derive(Debug, Clone)]
struct Ensemble(Vec<Classifier>);

impl Ensemble {
    fn fit(x: &Array2<f32>, y: &[f32], config: &Lc2stConfig, seed_: u64) -> Result<Self> {
        let n = y.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut seed::rng_for(seed_, &[stream::SPLIT]));
        let k = config.cv_folds;
        let members = (0..k)
            .into_par_iter()
            .map(|f| {
                let lo = f * n / k;
                let hi = (f + 1) * n / k;
                let val = &idx[lo..hi];
                let train: Vec<usize> = idx[..lo].iter().chain(&idx[hi..]).copied().collect();
                train_classifier(x, y, &train, val, config, seed::derive(seed_, &[f as u64]))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Ensemble(members))
    }

    fn prob(&self, x: &Array2<f32>) -> Result<Array1<f64>> {
        let mut acc = Array1::zeros(x.nrows());
        for c in &self.0 {
            acc += &c.prob(x)?;
        }
        Ok(acc / self.0.len() as f64)
    }
}

/// Classifiers trained on one calibration set, reusable across
/// observations.
#[derive(Debug, Clone)]
pub struct Lc2stFit {
    mean: Array1<f64>,
    sd: Array1<f64>,
    ensemble: Ensemble,
    nulls: Vec<Ensemble>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lc2stResult {
    pub t_mse: f64,
    pub p_value: f64,
    pub null: Vec<f64>,
}

impl Lc2stResult {
    /// Empirical `q`-quantile of the null statistics.
    pub fn null_quantile(&self, q: f64) -> f64 {
        let mut v = self.null.clone();
        v.sort_by(f64::total_cmp);
        let k = ((v.len() as f64 * q).ceil() as usize).clamp(1, v.len()) - 1;
        v[k]
    }
}

impl Lc2stFit {
    /// Train the test ensemble and `n_null` permuted-label ensembles.
    /// `theta` are joint draws for the conditioning `x`, `theta_q` one
    /// approximate-posterior draw per row of `x`.
    pub fn fit(
        x: ArrayView2<f64>,
        theta: ArrayView2<f64>,
        theta_q: ArrayView2<f64>,
        config: &Lc2stConfig,
        seed_: u64,
    ) -> Result<Self> {
        config.validate()?;
        let n = x.nrows();
        if theta.nrows() != n || theta_q.nrows() != n || theta.ncols() != theta_q.ncols() {
            return Err(Error::shape("calibration arrays disagree"));
        }
        let joint = concatenate(Axis(1), &[x, theta]).map_err(|e| Error::shape(e.to_string()))?;
        let approx =
            concatenate(Axis(1), &[x, theta_q]).map_err(|e| Error::shape(e.to_string()))?;
        let feats = concatenate(Axis(0), &[joint.view(), approx.view()])
            .map_err(|e| Error::shape(e.to_string()))?;
        if feats.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diagnostic("non-finite calibration features".into()));
        }
        let mean = feats.mean_axis(Axis(0)).expect("non-empty");
        let sd = feats
            .std_axis(Axis(0), 0.0)
            .mapv(|s| if s > 1e-12 { s } else { 1.0 });
        let xs = ((&feats - &mean) / &sd).mapv(|v| v as f32);
        let labels: Vec<f32> = (0..2 * n).map(|i| if i < n { 0.0 } else { 1.0 }).collect();
        let ensemble = Ensemble::fit(&xs, &labels, config, seed::derive(seed_, &[0]))?;
        let nulls = (0..config.n_null)
            .map(|h| {
                let s_ = seed::derive(seed_, &[stream::PERMUTE, h as u64]);
                let mut perm = labels.clone();
                perm.shuffle(&mut seed::rng(s_));
                Ensemble::fit(&xs, &perm, config, s_)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Lc2stFit {
            mean,
            sd,
            ensemble,
            nulls,
        })
    }

    fn features(&self, x_obs: ArrayView1<f64>, theta: ArrayView2<f64>) -> Result<Array2<f32>> {
        let d = x_obs.len() + theta.ncols();
        if d != self.mean.len() {
            return Err(Error::shape(format!(
                "features of width {d}, classifier expects {}",
                self.mean.len()
            )));
        }
        let mut f = Array2::zeros((theta.nrows(), d));
        for mut row in f.rows_mut() {
            row.slice_mut(s![..x_obs.len()]).assign(&x_obs);
        }
        f.slice_mut(s![.., x_obs.len()..]).assign(&theta);
        Ok(((&f - &self.mean) / &self.sd).mapv(|v| v as f32))
    }

    /// Statistic and p-value at one observation from posterior draws.
    pub fn evaluate(
        &self,
        x_obs: ArrayView1<f64>,
        theta_post: ArrayView2<f64>,
    ) -> Result<Lc2stResult> {
        let f = self.features(x_obs, theta_post)?;
        let t = t_mse(self.ensemble.prob(&f)?.as_slice().expect("contiguous"));
        let null = self
            .nulls
            .iter()
            .map(|e| Ok(t_mse(e.prob(&f)?.as_slice().expect("contiguous"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Lc2stResult {
            t_mse: t,
            p_value: p_value(t, &null),
            null,
        })
    }
}

/// Run the whole protocol: `n_cal` joint draws, one approximate-posterior
/// draw for each, then `n_posterior` draws at every observation.
///
/// `joint(n, seed)` returns `(theta, x)`; `posterior(x, seed)` returns one
/// draw per row of `x`.
pub fn lc2st<J, P>(
    posterior: P,
    joint: J,
    x_obs: ArrayView2<f64>,
    config: &Lc2stConfig,
    seed_: u64,
) -> Result<Vec<Lc2stResult>>
where
    J: Fn(usize, u64) -> Result<(Array2<f64>, Array2<f64>)>,
    P: Fn(ArrayView2<f64>, u64) -> Result<Array2<f64>>,
{
    config.validate()?;
    let (theta, x) = joint(config.n_cal, seed::derive(seed_, &[stream::REFERENCE]))?;
    let theta_q = posterior(x.view(), seed::derive(seed_, &[stream::BASE]))?;
    let fit = Lc2stFit::fit(
        x.view(),
        theta.view(),
        theta_q.view(),
        config,
        seed::derive(seed_, &[stream::CLASSIFIER]),
    )?;
    x_obs
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, xo)| {
            let rep = xo
                .insert_axis(Axis(0))
                .broadcast((config.n_posterior, xo.len()))
                .expect("broadcast a row")
                .to_owned();
            let post = posterior(
                rep.view(),
                seed::derive(seed_, &[stream::OBSERVATION, i as u64]),
            )?;
            fit.evaluate(xo, post.view())
        })
        .collect()
}
