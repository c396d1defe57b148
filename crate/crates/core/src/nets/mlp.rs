use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::layers::{dropout, relu, relu_backward};
use super::{Grads, Linear, Mode, ParamStore, Scalar};
use crate::error::{Error, Result};
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: vec![256, 256],
            dropout: 0.1,
        }
    }
}

/// ReLU perceptron with inverted dropout after every hidden layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub config: MlpConfig,
    pub d_in: usize,
    pub d_out: usize,
    layers: Vec<Linear>,
}

pub struct MlpCache<S> {
    inputs: Vec<Array2<S>>,
    pre: Vec<Array2<S>>,
    masks: Vec<Option<Array2<S>>>,
}

impl Mlp {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        d_in: usize,
        d_out: usize,
        config: MlpConfig,
        rng: &mut Rng,
    ) -> Self {
        let mut widths = vec![d_in];
        widths.extend(&config.hidden);
        widths.push(d_out);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.l{i}"), w[0], w[1], true, rng))
            .collect();
        Mlp {
            config,
            d_in,
            d_out,
            layers,
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        p: &ParamStore<S>,
        x: &Array2<S>,
        mode: &mut Mode<'_>,
    ) -> Result<(Array2<S>, MlpCache<S>)> {
        if x.ncols() != self.d_in {
            return Err(Error::shape(format!(
                "MLP input width {} (expected {})",
                x.ncols(),
                self.d_in
            )));
        }
        let n = self.layers.len();
        let mut inputs = vec![x.clone()];
        let mut pre = Vec::new();
        let mut masks = Vec::new();
        let mut out = Array2::zeros((0, 0));
        for (l, lin) in self.layers.iter().enumerate() {
            let z = lin.forward(p, inputs.last().unwrap());
            if l + 1 < n {
                let (a, mask) = dropout(relu(&z), self.config.dropout, mode);
                pre.push(z);
                masks.push(mask);
                inputs.push(a);
            } else {
                out = z;
            }
        }
        Ok((out, MlpCache { inputs, pre, masks }))
    }

    /// Backpropagate `dy`; returns `dL/dx`.
    pub fn backward<S: Scalar>(
        &self,
        p: &ParamStore<S>,
        g: &mut Grads<S>,
        cache: &MlpCache<S>,
        dy: &Array2<S>,
    ) -> Array2<S> {
        let mut d = dy.clone();
        for l in (0..self.layers.len()).rev() {
            d = self.layers[l].backward(p, g, &cache.inputs[l], &d);
            if l > 0 {
                if let Some(mask) = &cache.masks[l - 1] {
                    d *= mask;
                }
                d = relu_backward(&cache.pre[l - 1], &d);
            }
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn zero_weights_give_final_bias() {
        let mut rng = seed::rng(3);
        let mut store = ParamStore::<f64>::new();
        let mlp = Mlp::new(&mut store, "m", 4, 3, MlpConfig::default(), &mut rng);
        for i in 0..store.len() {
            store.get_mut(super::super::ParamId(i)).fill(0.0);
        }
        let last_bias = mlp.layers.last().unwrap().b.unwrap();
        store
            .get_mut(last_bias)
            .assign(&ndarray::array![[1.0, -2.0, 0.5]]);
        let x = Array2::from_elem((2, 4), 7.0);
        let (y, _) = mlp.forward(&store, &x, &mut Mode::Eval).unwrap();
        assert_eq!(y, ndarray::array![[1.0, -2.0, 0.5], [1.0, -2.0, 0.5]]);
    }

    #[test]
    fn eval_mode_is_deterministic_and_train_mode_is_not() {
        let mut rng = seed::rng(4);
        let mut store = ParamStore::<f32>::new();
        let mlp = Mlp::new(&mut store, "m", 4, 2, MlpConfig::default(), &mut rng);
        let x = Array2::from_elem((5, 4), 0.3f32);
        let a = mlp.forward(&store, &x, &mut Mode::Eval).unwrap().0;
        let b = mlp.forward(&store, &x, &mut Mode::Eval).unwrap().0;
        assert_eq!(a, b);
        let mut r = seed::rng(9);
        let c = mlp.forward(&store, &x, &mut Mode::Train(&mut r)).unwrap().0;
        assert_ne!(a, c);
        assert!(mlp
            .forward(&store, &Array2::zeros((1, 3)), &mut Mode::Eval)
            .is_err());
    }
}
