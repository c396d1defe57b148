//! Kernel two-sample test.

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdResult {
    pub mmd2: f64,
    pub p_value: f64,
    pub bandwidth: f64,
    pub n_permutations: usize,
}

fn sq_dists(x: ArrayView2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (&x.row(i) - &x.row(j)).mapv(|v| v * v).sum();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Unbiased MMD^2 of the split `idx[..m]` vs `idx[m..]` under kernel `k`.
fn unbiased(k: &Array2<f64>, idx: &[usize], m: usize) -> f64 {
    let (a, b) = idx.split_at(m);
    let within = |s: &[usize]| {
        let mut t = 0.0;
        for (p, &i) in s.iter().enumerate() {
            for &j in &s[p + 1..] {
                t += k[[i, j]];
            }
        }
        2.0 * t / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for &i in a {
        for &j in b {
            cross += k[[i, j]];
        }
    }
    within(a) + within(b) - 2.0 * cross / (a.len() * b.len()) as f64
}

/// RBF-kernel MMD^2 with a median-heuristic bandwidth on the pooled set and
/// a permutation p-value `(1 + #{perm >= obs}) / (1 + n_permutations)`.
pub fn mmd2(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    n_permutations: usize,
    seed_: u64,
) -> Result<MmdResult> {
    if n_permutations == 0 {
        return Err(Error::Diagnostic(
            "permutation p-value needs at least one permutation".into(),
        ));
    }
    if a.nrows() < 2 || b.nrows() < 2 || a.ncols() != b.ncols() {
        return Err(Error::Diagnostic(
            "both sample sets need at least 2 rows of equal width".into(),
        ));
    }
    let pooled = concatenate(Axis(0), &[a, b]).map_err(|e| Error::shape(e.to_string()))?;
    let d2 = sq_dists(pooled.view());
    let n = pooled.nrows();
    let mut off: Vec<f64> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| d2[[i, j]].sqrt())
        .collect();
    off.sort_by(f64::total_cmp);
    let mid = off.len() / 2;
    let mut bw = if off.len() % 2 == 1 {
        off[mid]
    } else {
        0.5 * (off[mid - 1] + off[mid])
    };
    if !(bw > 0.0) {
        bw = 1.0;
    }
    let k = d2.mapv(|v| (-v / (2.0 * bw * bw)).exp());
    let m = a.nrows();
    let mut idx: Vec<usize> = (0..n).collect();
    let obs = unbiased(&k, &idx, m);
    let mut rng = seed::rng(seed_);
    let mut hits = 0usize;
    for _ in 0..n_permutations {
        idx.shuffle(&mut rng);
        // tolerance absorbs summation-order noise between equal statistics
        if unbiased(&k, &idx, m) >= obs - 1e-12 {
            hits += 1;
        }
    }
    Ok(MmdResult {
        mmd2: obs,
        p_value: (1 + hits) as f64 / (1 + n_permutations) as f64,
        bandwidth: bw,
        n_permutations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(n: usize, shift: f64, seed_: u64) -> Array2<f64> {
        let mut rng = seed::rng(seed_);
        Array2::from_shape_fn((n, 1), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            shift + z
        })
    }

    #[test]
    fn identical_sets() {
        let a = normal(100, 0.0, 1);
        let r = mmd2(a.view(), a.view(), 200, 2).unwrap();
        assert!(r.mmd2 <= 1e-12);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn separated_sets() {
        let r = mmd2(
            normal(400, 0.0, 1).view(),
            normal(400, 5.0, 2).view(),
            200,
            3,
        )
        .unwrap();
        assert!(r.p_value <= 1.0 / 201.0 + 1e-15);
        assert!(r.mmd2 > 0.5);
    }

    #[test]
    fn zero_permutations_is_an_error() {
        let a = normal(10, 0.0, 1);
        assert!(mmd2(a.view(), a.view(), 0, 0).is_err());
    }

    #[test]
    fn null_p_values_are_uniform() {
        // equal-size draws from one pool; bin p on [0,1] into quintiles
        let reps = 200;
        let mut bins = [0usize; 5];
        for r in 0..reps {
            let pool = normal(60, 0.0, 1000 + r);
            let res = mmd2(
                pool.slice(ndarray::s![..30, ..]),
                pool.slice(ndarray::s![30.., ..]),
                99,
                r,
            )
            .unwrap();
            bins[((res.p_value * 5.0).ceil() as usize).clamp(1, 5) - 1] += 1;
        }
        let e = reps as f64 / 5.0;
        let chi2: f64 = bins.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
        // chi-square 4 df, 1% critical value
        assert!(chi2 < 13.28, "bins {bins:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn p_value_on_grid(seed_ in 0u64..1000, perms in 1usize..50) {
            let r = mmd2(normal(12, 0.0, seed_).view(), normal(9, 0.3, seed_ + 1).view(), perms, seed_).unwrap();
            let k = r.p_value * (perms + 1) as f64;
            prop_assert!((k - k.round()).abs() < 1e-9);
            prop_assert!(r.p_value > 0.0 && r.p_value <= 1.0);
        }
    }
}
