//! Building blocks shared by the prompt module and the backbone: multi-head
//! attention, layer normalization and the position-wise MLP.

use rand::Rng;

use crate::autodiff::{Mask, Var};
use crate::params::{Graph, ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Debug, Clone)]
pub struct AttnParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub n_heads: usize,
}

impl AttnParams {
    /// Bias-free projections, Xavier-uniform.
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, n_heads: usize, rng: &mut R) -> Self {
        assert!(n_heads >= 1 && d % n_heads == 0, "d_model must divide into heads");
        AttnParams {
            wq: store.add(format!("{prefix}.wq"), Mat::xavier(d, d, rng)),
            wk: store.add(format!("{prefix}.wk"), Mat::xavier(d, d, rng)),
            wv: store.add(format!("{prefix}.wv"), Mat::xavier(d, d, rng)),
            wo: store.add(format!("{prefix}.wo"), Mat::xavier(d, d, rng)),
            n_heads,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        LayerNormParams {
            gamma: store.add(format!("{prefix}.gamma"), Mat::filled(1, d, 1.0)),
            beta: store.add(format!("{prefix}.beta"), Mat::zeros(1, d)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MlpParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl MlpParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        MlpParams {
            w1: store.add(format!("{prefix}.w1"), Mat::xavier(d_in, d_hidden, rng)),
            b1: store.add(format!("{prefix}.b1"), Mat::zeros(1, d_hidden)),
            w2: store.add(format!("{prefix}.w2"), Mat::xavier(d_hidden, d_out, rng)),
            b2: store.add(format!("{prefix}.b2"), Mat::zeros(1, d_out)),
        }
    }
}

pub fn layer_norm(g: &mut Graph, p: &LayerNormParams, x: Var, eps: f64) -> Var {
    let gamma = g.param(p.gamma);
    let beta = g.param(p.beta);
    g.tape.layer_norm(x, gamma, beta, eps)
}

/// `W2 · gelu(W1 x + b1) + b2`, applied to each row.
pub fn mlp(g: &mut Graph, p: &MlpParams, x: Var) -> Var {
    let (w1, b1, w2, b2) = (g.param(p.w1), g.param(p.b1), g.param(p.w2), g.param(p.b2));
    let h = g.tape.affine(x, w1, b1);
    let h = g.tape.gelu(h);
    g.tape.affine(h, w2, b2)
}

/// Attention output plus the per-head weight matrices (rows are queries).
pub struct AttnOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention of `queries` over `keys_values`.
pub fn attention(
    g: &mut Graph,
    p: &AttnParams,
    queries: Var,
    keys_values: Var,
    mask: Option<&Mask>,
) -> AttnOutput {
    let (wq, wk, wv, wo) = (g.param(p.wq), g.param(p.wk), g.param(p.wv), g.param(p.wo));
    let q = g.tape.matmul(queries, wq);
    let k = g.tape.matmul(keys_values, wk);
    let v = g.tape.matmul(keys_values, wv);
    let d = g.tape.shape(q).1;
    let dh = d / p.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut heads = Vec::with_capacity(p.n_heads);
    let mut weights = Vec::with_capacity(p.n_heads);
    for h in 0..p.n_heads {
        let (qh, kh, vh) = if p.n_heads == 1 {
            (q, k, v)
        } else {
            (
                g.tape.slice_cols(q, h * dh, dh),
                g.tape.slice_cols(k, h * dh, dh),
                g.tape.slice_cols(v, h * dh, dh),
            )
        };
        let scores = g.tape.matmul_t(qh, kh);
        let scores = g.tape.scale(scores, scale);
        let w = g.tape.softmax_rows(scores, mask);
        weights.push(w);
        heads.push(g.tape.matmul(w, vh));
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.tape.concat_cols(&heads)
    };
    AttnOutput {
        out: g.tape.matmul(merged, wo),
        weights,
    }
}
