//! Meta-fusion prompting: learnable prompt tokens refined by cross-attention
//! first over the variable-averaged sequence, then over the time-averaged
//! per-variable summaries.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{attention, layer_norm, AttnParams, LayerNormParams};
use crate::params::{Graph, ParamId, ParamStore};
use crate::tensor::Mat;

pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct PromptParams {
    /// `[K x d_model]`
    pub tokens: ParamId,
    pub attn_time: AttnParams,
    pub attn_vars: AttnParams,
    pub ln_time: LayerNormParams,
    pub ln_vars: LayerNormParams,
    pub ln_eps: f64,
}

impl PromptParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        n_prompts: usize,
        d_model: usize,
        n_heads: usize,
        ln_eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if n_prompts == 0 {
            return Err(Error::InvalidConfig("need at least one prompt token".into()));
        }
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "prompt heads ({n_heads}) must divide d_model ({d_model})"
            )));
        }
        Ok(PromptParams {
            tokens: store.add(
                "prompt.tokens",
                Mat::randn(n_prompts, d_model, PROMPT_INIT_STD, rng),
            ),
            attn_time: AttnParams::init(store, "prompt.attn_time", d_model, n_heads, rng),
            attn_vars: AttnParams::init(store, "prompt.attn_vars", d_model, n_heads, rng),
            ln_time: LayerNormParams::init(store, "prompt.ln_time", d_model),
            ln_vars: LayerNormParams::init(store, "prompt.ln_vars", d_model),
            ln_eps,
        })
    }
}

/// Row groups that average `[C·L x d]` (rows ordered `(c, l)`) over the
/// variable axis, one group per timestep.
pub fn variable_groups(c: usize, l: usize) -> Arc<Vec<Vec<usize>>> {
    Arc::new((0..l).map(|t| (0..c).map(|v| v * l + t).collect()).collect())
}

/// Row groups averaging over the time axis, one group per variable.
pub fn time_groups(c: usize, l: usize) -> Arc<Vec<Vec<usize>>> {
    Arc::new((0..c).map(|v| (0..l).map(|t| v * l + t).collect()).collect())
}

fn check_axes(g: &Graph, s: Var, c: usize, l: usize) -> Result<()> {
    if c == 0 || l == 0 {
        return Err(Error::invalid("aggregation over an empty axis"));
    }
    if g.tape.shape(s).0 != c * l {
        return Err(Error::shape(format!(
            "expected {} rows for C={c}, L={l}, got {}",
            c * l,
            g.tape.shape(s).0
        )));
    }
    Ok(())
}

/// Mean over variables: `[C·L x d] -> [L x d]`.
pub fn aggregate_variables(g: &mut Graph, s: Var, c: usize, l: usize) -> Result<Var> {
    check_axes(g, s, c, l)?;
    Ok(g.tape.mean_row_groups(s, variable_groups(c, l)))
}

/// Mean over time: `[C·L x d] -> [C x d]`.
pub fn aggregate_time(g: &mut Graph, s: Var, c: usize, l: usize) -> Result<Var> {
    check_axes(g, s, c, l)?;
    Ok(g.tape.mean_row_groups(s, time_groups(c, l)))
}

/// Refined prompts plus the attention weights of both stages.
pub struct FusionOutput {
    pub prompts: Var,
    pub time_weights: Vec<Var>,
    pub var_weights: Vec<Var>,
}

/// `P' = LN(CrossAttn(P, S_t, S_t) + P)`, then
/// `P~ = LN(CrossAttn(P', S_c, S_c) + P')`.
pub fn meta_fusion(g: &mut Graph, p: &PromptParams, s: Var, c: usize, l: usize) -> Result<FusionOutput> {
    let d = g.store().get(p.tokens).cols;
    if g.tape.shape(s).1 != d {
        return Err(Error::shape(format!(
            "representation width {} differs from prompt width {d}",
            g.tape.shape(s).1
        )));
    }
    let s_time = aggregate_variables(g, s, c, l)?;
    let s_vars = aggregate_time(g, s, c, l)?;
    Ok(fuse_with(g, p, s_time, s_vars))
}

/// The two attention stages over already-aggregated inputs.
pub fn fuse_with(g: &mut Graph, p: &PromptParams, s_time: Var, s_vars: Var) -> FusionOutput {
    let tokens = g.param(p.tokens);
    let a1 = attention(g, &p.attn_time, tokens, s_time, None);
    let r1 = g.tape.add(a1.out, tokens);
    let p1 = layer_norm(g, &p.ln_time, r1, p.ln_eps);

    let a2 = attention(g, &p.attn_vars, p1, s_vars, None);
    let r2 = g.tape.add(a2.out, p1);
    let p2 = layer_norm(g, &p.ln_vars, r2, p.ln_eps);
    FusionOutput {
        prompts: p2,
        time_weights: a1.weights,
        var_weights: a2.weights,
    }
}
