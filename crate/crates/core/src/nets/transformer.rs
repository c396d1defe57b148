use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::layers::{gelu, gelu_backward, AttentionCache, LayerNormCache};
use super::{Grads, LayerNorm, Linear, MultiHeadAttention, ParamStore, Scalar};
use crate::error::{Error, Result};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub n_ff_layers: usize,
    pub d_lat: usize,
    /// Hidden width of the feedforward sub-layers relative to `d_lat`.
    pub ff_expansion: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            n_blocks: 2,
            n_heads: 16,
            n_ff_layers: 2,
            d_lat: 256,
            ff_expansion: 4,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_lat % self.n_heads != 0 {
            return Err(Error::Config {
                field: "transformer.n_heads".into(),
                message: format!(
                    "d_lat = {} is not divisible by n_heads = {}",
                    self.d_lat, self.n_heads
                ),
            });
        }
        if self.n_ff_layers == 0 || self.n_blocks == 0 {
            return Err(Error::Config {
                field: "transformer".into(),
                message: "n_blocks and n_ff_layers must be positive".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: Vec<Linear>,
}

struct BlockCache<S> {
    ln1: LayerNormCache<S>,
    attn: AttentionCache<S>,
    ln2: LayerNormCache<S>,
    /// Inputs of each feedforward linear layer; entries after the first are
    /// post-activation, with the matching pre-activation in `ff_pre`.
    ff_in: Vec<Array2<S>>,
    ff_pre: Vec<Array2<S>>,
}

/// Pre-norm encoder stack with a final layer norm. No sequence-order signal
/// is injected, so the map is equivariant to row permutations within each
/// sequence.
#[derive(Debug, Clone)]
pub struct Transformer {
    pub config: TransformerConfig,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
}

pub struct TransformerCache<S> {
    blocks: Vec<BlockCache<S>>,
    final_ln: LayerNormCache<S>,
}

impl Transformer {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        config: TransformerConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_lat;
        let hidden = d * config.ff_expansion;
        let blocks = (0..config.n_blocks)
            .map(|i| {
                let pre = format!("{name}.block{i}");
                let mut ff = Vec::new();
                for l in 0..config.n_ff_layers {
                    let d_in = if l == 0 { d } else { hidden };
                    let d_out = if l + 1 == config.n_ff_layers {
                        d
                    } else {
                        hidden
                    };
                    ff.push(Linear::new(
                        store,
                        &format!("{pre}.ff{l}"),
                        d_in,
                        d_out,
                        true,
                        rng,
                    ));
                }
                Block {
                    ln1: LayerNorm::new(store, &format!("{pre}.ln1"), d),
                    attn: MultiHeadAttention::new(
                        store,
                        &format!("{pre}.attn"),
                        d,
                        config.n_heads,
                        rng,
                    ),
                    ln2: LayerNorm::new(store, &format!("{pre}.ln2"), d),
                    ff,
                }
            })
            .collect();
        let final_ln = LayerNorm::new(store, &format!("{name}.ln_f"), d);
        Ok(Transformer {
            config,
            blocks,
            final_ln,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        p: &ParamStore<S>,
        h0: &Array2<S>,
        batch: usize,
        seq: usize,
    ) -> Result<(Array2<S>, TransformerCache<S>)> {
        if h0.dim() != (batch * seq, self.config.d_lat) {
            return Err(Error::shape(format!(
                "transformer input {:?}, expected ({}, {})",
                h0.dim(),
                batch * seq,
                self.config.d_lat
            )));
        }
        if h0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite transformer input".into()));
        }
        let mut x = h0.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (a, ln1) = blk.ln1.forward(p, &x);
            let (m, attn) = blk.attn.forward(p, &a, batch, seq);
            x += &m;
            let (c, ln2) = blk.ln2.forward(p, &x);
            let mut ff_in = vec![c];
            let mut ff_pre = Vec::new();
            let n = blk.ff.len();
            let mut f = Array2::zeros((0, 0));
            for (l, lin) in blk.ff.iter().enumerate() {
                let z = lin.forward(p, ff_in.last().unwrap());
                if l + 1 < n {
                    let act = gelu(&z);
                    ff_pre.push(z);
                    ff_in.push(act);
                } else {
                    f = z;
                }
            }
            x += &f;
            caches.push(BlockCache {
                ln1,
                attn,
                ln2,
                ff_in,
                ff_pre,
            });
        }
        let (out, final_ln) = self.final_ln.forward(p, &x);
        Ok((
            out,
            TransformerCache {
                blocks: caches,
                final_ln,
            },
        ))
    }

    pub fn backward<S: Scalar>(
        &self,
        p: &ParamStore<S>,
        g: &mut Grads<S>,
        cache: &TransformerCache<S>,
        dout: &Array2<S>,
    ) -> Array2<S> {
        let mut dx = self.final_ln.backward(p, g, &cache.final_ln, dout);
        for (blk, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            // feedforward residual branch
            let n = blk.ff.len();
            let mut df = dx.clone();
            for l in (0..n).rev() {
                df = blk.ff[l].backward(p, g, &bc.ff_in[l], &df);
                if l > 0 {
                    df = gelu_backward(&bc.ff_pre[l - 1], &df);
                }
            }
            dx += &blk.ln2.backward(p, g, &bc.ln2, &df);
            // attention residual branch
            let da = blk.attn.backward(p, g, &bc.attn, &dx);
            dx += &blk.ln1.backward(p, g, &bc.ln1, &da);
        }
        dx
    }
}
