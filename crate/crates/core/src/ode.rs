//! Dormand-Prince 5(4) with embedded error control and dense output.
//!
//! The solver is batched: every row of the state matrix is an independent
//! system with its own time, step size and error norm. Right-hand sides are
//! evaluated for all still-active rows at once so that a neural vector field
//! can be called on a batch.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

// dense output (Hairer & Wanner, contd5)
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    pub safety: f64,
    pub min_factor: f64,
    pub max_factor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            rtol: 1e-5,
            atol: 1e-5,
            max_steps: 10_000,
            safety: 0.9,
            min_factor: 0.2,
            max_factor: 10.0,
        }
    }
}

impl SolverConfig {
    pub fn with_tolerance(tol: f64) -> Self {
        SolverConfig {
            rtol: tol,
            atol: tol,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::domain("solver tolerances must be positive"));
        }
        if self.max_steps == 0 {
            return Err(Error::domain("max_steps must be positive"));
        }
        Ok(())
    }
}

/// Result of a batched solve.
#[derive(Debug)]
pub struct BatchSolution {
    /// State at the final time, one row per system.
    pub y: Array2<f64>,
    /// Dense-output values, indexed `[eval point][row, dim]`.
    pub dense: Vec<Array2<f64>>,
    /// Accepted steps per row.
    pub steps: Vec<usize>,
    /// Rows that failed, with the reason. Their entries in `y` are not usable.
    pub failures: Vec<(usize, Error)>,
    pub evaluations: usize,
}

impl BatchSolution {
    pub fn failed_rows(&self) -> Vec<usize> {
        self.failures.iter().map(|(r, _)| *r).collect()
    }
}

struct RowState {
    t: f64,
    h: f64,
    steps: usize,
    rejected_last: bool,
    next_eval: usize,
}

fn rms_norm(err: &[f64], y0: &[f64], y1: &[f64], cfg: &SolverConfig) -> f64 {
    let n = err.len().max(1) as f64;
    let s: f64 = err
        .iter()
        .zip(y0.iter().zip(y1))
        .map(|(&e, (&a, &b))| {
            let sc = cfg.atol + cfg.rtol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (s / n).sqrt()
}

fn scaled_norm(v: &[f64], y: &[f64], cfg: &SolverConfig) -> f64 {
    let n = v.len().max(1) as f64;
    let s: f64 = v
        .iter()
        .zip(y)
        .map(|(&a, &b)| (a / (cfg.atol + cfg.rtol * b.abs())).powi(2))
        .sum();
    (s / n).sqrt()
}

fn gather(m: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    m.select(Axis(0), rows)
}

/// Integrate `dy/dt = f(t, y)` for every row of `y0` from `t0` to `t1`.
///
/// `f` receives the indices of the currently active rows, their times and
/// their states, and must return derivatives of the same shape. `t_eval` are shared
/// output times in `[t0, t1]`, sorted ascending, filled by dense output.
pub fn solve_batch<F>(
    mut f: F,
    t0: f64,
    t1: f64,
    y0: ArrayView2<f64>,
    t_eval: &[f64],
    cfg: &SolverConfig,
) -> Result<BatchSolution>
where
    F: FnMut(&[usize], &[f64], ArrayView2<f64>) -> Result<Array2<f64>>,
{
    cfg.validate()?;
    if !(t1 > t0) {
        return Err(Error::domain(format!(
            "empty integration span [{t0}, {t1}]"
        )));
    }
    if t_eval.windows(2).any(|w| w[1] < w[0]) || t_eval.iter().any(|&t| t < t0 || t > t1) {
        return Err(Error::domain("t_eval must be sorted and inside [t0, t1]"));
    }
    let (n, d) = y0.dim();
    let mut y = y0.to_owned();
    let mut dense: Vec<Array2<f64>> = t_eval.iter().map(|_| Array2::zeros((n, d))).collect();
    let mut failures: Vec<(usize, Error)> = Vec::new();
    let mut evaluations = 0usize;

    let mut states: Vec<RowState> = (0..n)
        .map(|_| RowState {
            t: t0,
            h: 0.0,
            steps: 0,
            rejected_last: false,
            next_eval: 0,
        })
        .collect();
    // evaluation points that coincide with t0
    for (k, &te) in t_eval.iter().enumerate() {
        if te == t0 {
            dense[k].assign(&y);
            for s in states.iter_mut() {
                s.next_eval = k + 1;
            }
        }
    }

    let all: Vec<usize> = (0..n).collect();
    let ts = vec![t0; n];
    let mut k1 = f(&all, &ts, y.view())?;
    evaluations += 1;
    check_shape(&k1, n, d)?;

    // initial step size (Hairer's heuristic), batched
    {
        let mut h0s = vec![0.0; n];
        let mut y_probe = y.clone();
        for i in 0..n {
            let yi = y.row(i);
            let fi = k1.row(i);
            let d0 = scaled_norm(yi.as_slice().unwrap(), yi.as_slice().unwrap(), cfg);
            let d1 = scaled_norm(&fi.to_vec(), yi.as_slice().unwrap(), cfg);
            let h0 = if d0 < 1e-5 || d1 < 1e-5 {
                1e-6
            } else {
                0.01 * d0 / d1
            };
            let h0 = h0.min(t1 - t0);
            h0s[i] = h0;
            for j in 0..d {
                y_probe[[i, j]] = y[[i, j]] + h0 * k1[[i, j]];
            }
        }
        let tp: Vec<f64> = h0s.iter().map(|h| t0 + h).collect();
        let f1 = f(&all, &tp, y_probe.view())?;
        evaluations += 1;
        for i in 0..n {
            let yi = y.row(i).to_vec();
            let diff: Vec<f64> = (0..d).map(|j| (f1[[i, j]] - k1[[i, j]]) / h0s[i]).collect();
            let d1 = scaled_norm(&k1.row(i).to_vec(), &yi, cfg);
            let d2 = scaled_norm(&diff, &yi, cfg);
            let m = d1.max(d2);
            let h1 = if m <= 1e-15 {
                (h0s[i] * 1e-3).max(1e-6)
            } else {
                (0.01 / m).powf(0.2)
            };
            states[i].h = (100.0 * h0s[i]).min(h1).min(t1 - t0);
        }
    }

    let mut active: Vec<usize> = all.clone();
    while !active.is_empty() {
        let m = active.len();
        let hs: Vec<f64> = active
            .iter()
            .map(|&i| states[i].h.min(t1 - states[i].t))
            .collect();
        let tt: Vec<f64> = active.iter().map(|&i| states[i].t).collect();
        let ya = gather(&y, &active);
        let ka1 = gather(&k1, &active);

        let stage = |coef: &[(f64, &Array2<f64>)]| -> Array2<f64> {
            let mut out = ya.clone();
            for (r, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
                let h = hs[r];
                for &(c, k) in coef {
                    if c != 0.0 {
                        row.scaled_add(h * c, &k.row(r));
                    }
                }
            }
            out
        };
        let at = |c: f64| -> Vec<f64> { tt.iter().zip(&hs).map(|(t, h)| t + c * h).collect() };

        let y2 = stage(&[(A21, &ka1)]);
        let k2 = f(&active, &at(C2), y2.view())?;
        let y3 = stage(&[(A31, &ka1), (A32, &k2)]);
        let k3 = f(&active, &at(C3), y3.view())?;
        let y4 = stage(&[(A41, &ka1), (A42, &k2), (A43, &k3)]);
        let k4 = f(&active, &at(C4), y4.view())?;
        let y5 = stage(&[(A51, &ka1), (A52, &k2), (A53, &k3), (A54, &k4)]);
        let k5 = f(&active, &at(C5), y5.view())?;
        let y6 = stage(&[(A61, &ka1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]);
        let k6 = f(&active, &at(1.0), y6.view())?;
        let y7 = stage(&[(A71, &ka1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)]);
        let tn: Vec<f64> = tt.iter().zip(&hs).map(|(t, h)| t + h).collect();
        let k7 = f(&active, &tn, y7.view())?;
        evaluations += 6;

        let mut still_active = Vec::with_capacity(m);
        for r in 0..m {
            let i = active[r];
            let h = hs[r];
            let y_old = ya.row(r);
            let y_new = y7.row(r);
            let err: Vec<f64> = (0..d)
                .map(|j| {
                    h * (E1 * ka1[[r, j]]
                        + E3 * k3[[r, j]]
                        + E4 * k4[[r, j]]
                        + E5 * k5[[r, j]]
                        + E6 * k6[[r, j]]
                        + E7 * k7[[r, j]])
                })
                .collect();
            let finite =
                y_new.iter().all(|v| v.is_finite()) && k7.row(r).iter().all(|v| v.is_finite());
            let st = &mut states[i];
            if !finite {
                failures.push((
                    i,
                    Error::Integration {
                        t: st.t,
                        steps: st.steps,
                        reason: "non-finite state or derivative".into(),
                    },
                ));
                continue;
            }
            let en = rms_norm(&err, &y_old.to_vec(), &y_new.to_vec(), cfg);
            if en <= 1.0 {
                // accepted: dense output for eval points in (t, t + h]
                let t_new = tt[r] + h;
                while st.next_eval < t_eval.len() && t_eval[st.next_eval] <= t_new {
                    let theta = (t_eval[st.next_eval] - tt[r]) / h;
                    let th1 = 1.0 - theta;
                    let out = &mut dense[st.next_eval];
                    for j in 0..d {
                        let ydiff = y_new[j] - y_old[j];
                        let bspl = h * ka1[[r, j]] - ydiff;
                        let r4 = ydiff - h * k7[[r, j]] - bspl;
                        let r5 = h
                            * (D1 * ka1[[r, j]]
                                + D3 * k3[[r, j]]
                                + D4 * k4[[r, j]]
                                + D5 * k5[[r, j]]
                                + D6 * k6[[r, j]]
                                + D7 * k7[[r, j]]);
                        out[[i, j]] =
                            y_old[j] + theta * (ydiff + th1 * (bspl + theta * (r4 + th1 * r5)));
                    }
                    st.next_eval += 1;
                }
                y.row_mut(i).assign(&y_new);
                k1.row_mut(i).assign(&k7.row(r));
                st.t = if (t1 - t_new).abs() <= 1e-14 * t1.abs().max(1.0) {
                    t1
                } else {
                    t_new
                };
                st.steps += 1;
                let mut fac =
                    (cfg.safety * en.max(1e-10).powf(-0.2)).clamp(cfg.min_factor, cfg.max_factor);
                if st.rejected_last {
                    fac = fac.min(1.0);
                }
                st.rejected_last = false;
                st.h = h * fac;
                if st.t >= t1 {
                    continue;
                }
            } else {
                let fac = (cfg.safety * en.powf(-0.2)).clamp(cfg.min_factor, 1.0);
                st.h = h * fac;
                st.rejected_last = true;
            }
            if st.steps >= cfg.max_steps {
                failures.push((
                    i,
                    Error::Integration {
                        t: st.t,
                        steps: st.steps,
                        reason: format!("exceeded max_steps = {}", cfg.max_steps),
                    },
                ));
                continue;
            }
            if st.h <= 16.0 * f64::EPSILON * st.t.abs().max(1.0) {
                failures.push((
                    i,
                    Error::Integration {
                        t: st.t,
                        steps: st.steps,
                        reason: format!("step size underflow (h = {:e})", st.h),
                    },
                ));
                continue;
            }
            still_active.push(i);
        }
        active = still_active;
    }

    failures.sort_by_key(|(r, _)| *r);
    Ok(BatchSolution {
        y,
        dense,
        steps: states.iter().map(|s| s.steps).collect(),
        failures,
        evaluations,
    })
}

fn check_shape(k: &Array2<f64>, n: usize, d: usize) -> Result<()> {
    if k.dim() != (n, d) {
        return Err(Error::shape(format!(
            "vector field returned {:?}, expected ({n}, {d})",
            k.dim()
        )));
    }
    Ok(())
}

/// Solve a single system and return the state at each `t_eval` time.
pub fn solve_dense<F>(
    mut f: F,
    t0: f64,
    y0: &[f64],
    t_eval: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let d = y0.len();
    let t1 = t_eval.last().copied().unwrap_or(t0);
    if t1 <= t0 {
        // every requested time is t0
        return Ok(t_eval.iter().map(|_| y0.to_vec()).collect());
    }
    let y0 =
        Array2::from_shape_vec((1, d), y0.to_vec()).map_err(|e| Error::shape(e.to_string()))?;
    let sol = solve_batch(
        |_, ts, ys| {
            let mut out = Array2::zeros(ys.dim());
            for (r, row) in ys.axis_iter(Axis(0)).enumerate() {
                let yv = row.to_vec();
                let mut dy = vec![0.0; d];
                f(ts[r], &yv, &mut dy);
                out.row_mut(r).assign(&ndarray::ArrayView1::from(&dy));
            }
            Ok(out)
        },
        t0,
        t1,
        y0.view(),
        t_eval,
        cfg,
    )?;
    if let Some((_, e)) = sol.failures.into_iter().next() {
        return Err(e);
    }
    Ok(sol.dense.iter().map(|m| m.row(0).to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn exponential_growth_to_tolerance() {
        let cfg = SolverConfig::default();
        let out = solve_dense(|_, y, dy| dy[0] = y[0], 0.0, &[1.0], &[1.0], &cfg).unwrap();
        let e = std::f64::consts::E;
        assert!((out[0][0] - e).abs() / e < 1e-5);
    }

    #[test]
    fn dense_output_matches_closed_form() {
        let cfg = SolverConfig::with_tolerance(1e-8);
        let ts: Vec<f64> = (0..=20).map(|k| k as f64 * 0.25).collect();
        let out = solve_dense(
            |_, y, dy| {
                dy[0] = y[1];
                dy[1] = -y[0];
            },
            0.0,
            &[1.0, 0.0],
            &ts,
            &cfg,
        )
        .unwrap();
        for (t, y) in ts.iter().zip(&out) {
            assert!((y[0] - t.cos()).abs() < 1e-6, "t={t} y={y:?}");
            assert!((y[1] + t.sin()).abs() < 1e-6);
        }
    }

    #[test]
    fn rows_adapt_independently() {
        // one stiff-ish fast row and one trivial row
        let y0 = array![[1.0], [1.0]];
        let rates = [30.0, 0.0];
        let sol = solve_batch(
            |_, _, ys| {
                let mut out = ys.to_owned();
                for (r, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
                    row.mapv_inplace(|v| -rates[r] * v);
                }
                Ok(out)
            },
            0.0,
            1.0,
            y0.view(),
            &[],
            &SolverConfig::default(),
        )
        .unwrap();
        assert!(sol.failures.is_empty());
        assert!((sol.y[[0, 0]] - (-30.0f64).exp()).abs() < 1e-5);
        assert_eq!(sol.y[[1, 0]], 1.0);
        assert!(sol.steps[0] > sol.steps[1]);
    }

    #[test]
    fn time_dependent_field_uses_row_times() {
        // dy/dt = 2t  =>  y(1) = y0 + 1
        let y0 = array![[0.0], [5.0]];
        let sol = solve_batch(
            |_, ts, ys| {
                let mut out = Array2::zeros(ys.dim());
                for r in 0..ys.nrows() {
                    out[[r, 0]] = 2.0 * ts[r];
                }
                Ok(out)
            },
            0.0,
            1.0,
            y0.view(),
            &[0.5],
            &SolverConfig::default(),
        )
        .unwrap();
        assert!((sol.y[[0, 0]] - 1.0).abs() < 1e-9);
        assert!((sol.y[[1, 0]] - 6.0).abs() < 1e-9);
        assert!((sol.dense[0][[1, 0]] - 5.25).abs() < 1e-9);
    }

    #[test]
    fn blow_up_is_reported_not_hidden() {
        // y' = y^2, y(0) = 1 blows up at t = 1
        let y0 = array![[1.0]];
        let cfg = SolverConfig {
            max_steps: 500,
            ..SolverConfig::default()
        };
        let sol = solve_batch(
            |_, _, ys| Ok(ys.mapv(|v| v * v)),
            0.0,
            2.0,
            y0.view(),
            &[],
            &cfg,
        )
        .unwrap();
        assert_eq!(sol.failed_rows(), vec![0]);
        assert!(matches!(sol.failures[0].1, Error::Integration { .. }));
    }

    #[test]
    fn halving_tolerance_moves_solution_less_than_tolerance() {
        // forced, non-expanding system, like a trained flow near its data
        let f = |t: f64, y: &[f64], dy: &mut [f64]| {
            dy[0] = -y[0] + (3.0 * t).sin();
            dy[1] = y[0] - 0.5 * y[1];
        };
        let a = solve_dense(
            f,
            0.0,
            &[2.0, -1.0],
            &[1.0],
            &SolverConfig::with_tolerance(1e-5),
        )
        .unwrap();
        let b = solve_dense(
            f,
            0.0,
            &[2.0, -1.0],
            &[1.0],
            &SolverConfig::with_tolerance(5e-6),
        )
        .unwrap();
        for j in 0..2 {
            assert!((a[0][j] - b[0][j]).abs() < 1e-5 * (1.0 + a[0][j].abs()));
        }
    }
}
