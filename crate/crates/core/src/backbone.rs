//! Decoder-only transformer over `[prompt tokens ; timestep tokens]` and the
//! output head that maps the final hidden state back to retained spectral
//! bins.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Mask, Var};
use crate::error::{Error, Result};
use crate::layers::{attention, layer_norm, mlp, AttnParams, LayerNormParams, MlpParams};
use crate::params::{Graph, ParamId, ParamStore};
use crate::prompt::variable_groups;
use crate::tensor::Mat;

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub attn: AttnParams,
    pub ln2: LayerNormParams,
    pub mlp: MlpParams,
}

#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub d_model: usize,
    pub n_vars: usize,
    pub n_bins: usize,
    pub d_latent: usize,
    /// One `(weight [n_bins·d x d_model], bias)` pair per variable.
    pub in_proj: Vec<(ParamId, ParamId)>,
    /// Learned encoding per history position, `[L x d_model]`.
    pub time_table: ParamId,
    pub blocks: Vec<BlockParams>,
    pub ln_f: LayerNormParams,
    /// `[d_model x n_vars·n_bins·2]`
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub ln_eps: f64,
}

pub struct BackboneShape {
    pub n_vars: usize,
    pub n_bins: usize,
    pub d_latent: usize,
    pub history_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub ln_eps: f64,
}

impl BackboneParams {
    pub fn init<R: Rng>(store: &mut ParamStore, s: &BackboneShape, rng: &mut R) -> Result<Self> {
        if s.n_heads == 0 || s.d_model % s.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "n_heads ({}) must divide d_model ({})",
                s.n_heads, s.d_model
            )));
        }
        let width = s.n_bins * s.d_latent;
        let in_proj = (0..s.n_vars)
            .map(|c| {
                (
                    store.add(
                        format!("backbone.in_proj{c}.w"),
                        Mat::xavier(width, s.d_model, rng),
                    ),
                    store.add(format!("backbone.in_proj{c}.b"), Mat::zeros(1, s.d_model)),
                )
            })
            .collect();
        let time_table = store.add("backbone.time", Mat::randn(s.history_len, s.d_model, 0.02, rng));
        let blocks = (0..s.n_layers)
            .map(|i| {
                let pre = format!("backbone.block{i}");
                BlockParams {
                    ln1: LayerNormParams::init(store, &format!("{pre}.ln1"), s.d_model),
                    attn: AttnParams::init(store, &format!("{pre}.attn"), s.d_model, s.n_heads, rng),
                    ln2: LayerNormParams::init(store, &format!("{pre}.ln2"), s.d_model),
                    mlp: MlpParams::init(
                        store,
                        &format!("{pre}.mlp"),
                        s.d_model,
                        s.mlp_ratio * s.d_model,
                        s.d_model,
                        rng,
                    ),
                }
            })
            .collect();
        let out = s.n_vars * s.n_bins * 2;
        Ok(BackboneParams {
            d_model: s.d_model,
            n_vars: s.n_vars,
            n_bins: s.n_bins,
            d_latent: s.d_latent,
            in_proj,
            time_table,
            blocks,
            ln_f: LayerNormParams::init(store, "head.ln", s.d_model),
            head_w: store.add("head.w", Mat::randn(s.d_model, out, 0.02, rng)),
            head_b: store.add("head.b", Mat::zeros(1, out)),
            ln_eps: s.ln_eps,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Prompt,
    Timestep,
}

/// `[(K + T) x d_model]` input to the transformer.
#[derive(Debug, Clone, Copy)]
pub struct TokenSequence {
    pub tokens: Var,
    pub n_prompt: usize,
    pub n_time: usize,
}

impl TokenSequence {
    pub fn segments(&self) -> Vec<Segment> {
        std::iter::repeat_n(Segment::Prompt, self.n_prompt)
            .chain(std::iter::repeat_n(Segment::Timestep, self.n_time))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.n_prompt + self.n_time
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-(variable, timestep) projections and the per-timestep tokens.
pub struct Tokenized {
    /// `[C·T x d_model]`, rows ordered `(c, t)`.
    pub per_variable: Var,
    /// Variable mean of `per_variable`, before the time encoding.
    pub pooled: Var,
    /// `pooled` plus the time encoding, `[T x d_model]`.
    pub tokens: Var,
}

/// Flattens each `(variable, timestep)` latent block `[n_bins x d]` and
/// projects it with that variable's input map.
pub fn tokenize_per_variable(
    g: &mut Graph,
    p: &BackboneParams,
    latent: Var,
    n_steps: usize,
) -> Result<Tokenized> {
    let c = p.n_vars;
    let width = p.n_bins * p.d_latent;
    let (rows, cols) = g.tape.shape(latent);
    if rows != c * n_steps * p.n_bins || cols != p.d_latent {
        return Err(Error::shape(format!(
            "latent is {rows}x{cols}, expected {}x{} (C={c}, T={n_steps}, bins={})",
            c * n_steps * p.n_bins,
            p.d_latent,
            p.n_bins
        )));
    }
    let table_rows = g.store().get(p.time_table).rows;
    if n_steps == 0 || n_steps > table_rows {
        return Err(Error::shape(format!(
            "{n_steps} timesteps, time encoding covers {table_rows}"
        )));
    }
    let flat = g.tape.reshape(latent, c * n_steps, width);
    let mut parts = Vec::with_capacity(c);
    for (v, &(w, b)) in p.in_proj.iter().enumerate() {
        let rows = g.tape.slice_rows(flat, v * n_steps, n_steps);
        let (w, b) = (g.param(w), g.param(b));
        parts.push(g.tape.affine(rows, w, b));
    }
    let per_variable = if parts.len() == 1 {
        parts[0]
    } else {
        g.tape.concat_rows(&parts)
    };
    let pooled = g.tape.mean_row_groups(per_variable, variable_groups(c, n_steps));
    let table = g.param(p.time_table);
    let enc = g.tape.slice_rows(table, 0, n_steps);
    let tokens = g.tape.add(pooled, enc);
    Ok(Tokenized {
        per_variable,
        pooled,
        tokens,
    })
}

/// Prompts form a prefix; timestep `t` sees all prompts and timesteps
/// `<= t`. Prompts see every prompt, and every timestep only when
/// `prompt_sees_time` is set.
pub fn sequence_mask(n_prompt: usize, n_time: usize, prompt_sees_time: bool) -> Mask {
    let n = n_prompt + n_time;
    let mut mask = Mask::full(n, n);
    for r in 0..n {
        for c in 0..n {
            let allowed = match (r < n_prompt, c < n_prompt) {
                (true, true) => true,
                (true, false) => prompt_sees_time,
                (false, true) => true,
                (false, false) => c <= r,
            };
            mask.allowed[r * n + c] = allowed;
        }
    }
    mask
}

pub struct BackboneOutput {
    pub hidden: Var,
    /// Per layer, per head attention weights.
    pub attention: Vec<Vec<Var>>,
}

/// Pre-norm transformer stack. The final layer norm belongs to the head.
pub fn backbone_forward(
    g: &mut Graph,
    p: &BackboneParams,
    seq: &TokenSequence,
    mask: &Mask,
) -> Result<BackboneOutput> {
    let (rows, cols) = g.tape.shape(seq.tokens);
    if rows != seq.len() || cols != p.d_model {
        return Err(Error::shape(format!(
            "token sequence is {rows}x{cols}, expected {}x{}",
            seq.len(),
            p.d_model
        )));
    }
    if !g.value(seq.tokens).is_finite() {
        return Err(Error::invalid("token sequence contains non-finite values"));
    }
    let mut x = seq.tokens;
    let mut weights = Vec::with_capacity(p.blocks.len());
    for block in &p.blocks {
        let h = layer_norm(g, &block.ln1, x, p.ln_eps);
        let a = attention(g, &block.attn, h, h, Some(mask));
        weights.push(a.weights);
        x = g.tape.add(x, a.out);
        let h = layer_norm(g, &block.ln2, x, p.ln_eps);
        let m = mlp(g, &block.mlp, h);
        x = g.tape.add(x, m);
    }
    Ok(BackboneOutput {
        hidden: x,
        attention: weights,
    })
}

/// Final layer norm and linear head: `[1 x d_model] -> [C·n_bins x 2]`
/// (re, im per retained bin, variable-major).
pub fn project_to_spectrum(g: &mut Graph, p: &BackboneParams, hidden_last: Var) -> Var {
    let h = layer_norm(g, &p.ln_f, hidden_last, p.ln_eps);
    let (w, b) = (g.param(p.head_w), g.param(p.head_b));
    let out = g.tape.affine(h, w, b);
    g.tape.reshape(out, p.n_vars * p.n_bins, 2)
}

/// Index list selecting the last row of a `[n x d]` matrix.
pub fn last_row(n: usize) -> Arc<Vec<usize>> {
    Arc::new(vec![n - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gelu, softmax_rows};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(n_layers: usize, d_model: usize, n_heads: usize) -> BackboneShape {
        BackboneShape {
            n_vars: 2,
            n_bins: 3,
            d_latent: 2,
            history_len: 4,
            d_model,
            n_layers,
            n_heads,
            mlp_ratio: 4,
            ln_eps: 1e-5,
        }
    }

    fn setup(s: &BackboneShape, seed: u64) -> (ParamStore, BackboneParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = BackboneParams::init(&mut store, s, &mut rng).unwrap();
        (store, p)
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(BackboneParams::init(&mut store, &shape(1, 6, 4), &mut rng).is_err());
    }

    #[test]
    fn mask_structure() {
        let m = sequence_mask(2, 3, true);
        let row = |r: usize| m.allowed[r * 5..(r + 1) * 5].to_vec();
        assert_eq!(row(0), vec![true; 5]);
        assert_eq!(row(2), vec![true, true, true, false, false]);
        assert_eq!(row(4), vec![true; 5]);
        let m = sequence_mask(2, 3, false);
        assert_eq!(m.allowed[..5].to_vec(), vec![true, true, false, false, false]);
    }

    #[test]
    fn zero_latent_gives_time_encoding() {
        let s = shape(1, 8, 2);
        let (store, p) = setup(&s, 1);
        let mut g = Graph::new(&store);
        let z = g.constant(Mat::zeros(2 * 3 * 3, 2));
        let t = tokenize_per_variable(&mut g, &p, z, 3).unwrap();
        let table = store.get(p.time_table);
        for r in 0..3 {
            assert_eq!(g.value(t.tokens).row(r), table.row(r));
        }
    }

    #[test]
    fn identity_projection_passes_latent_through() {
        let s = BackboneShape {
            n_vars: 1,
            n_bins: 3,
            d_latent: 2,
            history_len: 1,
            d_model: 6,
            n_layers: 1,
            n_heads: 1,
            mlp_ratio: 4,
            ln_eps: 1e-5,
        };
        let (mut store, p) = setup(&s, 2);
        *store.get_mut(p.in_proj[0].0) = Mat::identity(6);
        let lat = Mat::randn(3, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let mut g = Graph::new(&store);
        let z = g.constant(lat.clone());
        let t = tokenize_per_variable(&mut g, &p, z, 1).unwrap();
        let table = store.get(p.time_table);
        for j in 0..6 {
            assert_eq!(g.value(t.tokens).at(0, j), lat.data[j] + table.at(0, j));
        }
    }

    #[test]
    fn tokenize_matches_flatten_then_matmul() {
        let s = shape(1, 8, 2);
        let (mut store, p) = setup(&s, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(_, b) in &p.in_proj {
            *store.get_mut(b) = Mat::randn(1, 8, 1.0, &mut rng);
        }
        let t_steps = 3;
        let lat = Mat::randn(2 * t_steps * 3, 2, 1.0, &mut rng);
        let mut g = Graph::new(&store);
        let z = g.constant(lat.clone());
        let out = tokenize_per_variable(&mut g, &p, z, t_steps).unwrap();
        let mut pooled = Mat::zeros(t_steps, 8);
        for c in 0..2 {
            let (w, b) = (store.get(p.in_proj[c].0), store.get(p.in_proj[c].1));
            for t in 0..t_steps {
                let flat: Vec<f64> = (0..3)
                    .flat_map(|k| lat.row((c * t_steps + t) * 3 + k).to_vec())
                    .collect();
                for j in 0..8 {
                    let e: f64 = (0..6).map(|i| flat[i] * w.at(i, j)).sum::<f64>() + b.data[j];
                    let got = g.value(out.per_variable).at(c * t_steps + t, j);
                    assert!((got - e).abs() <= 1e-9 * e.abs().max(1.0));
                    pooled.data[t * 8 + j] += e / 2.0;
                }
            }
        }
        assert!(g.value(out.pooled).max_abs_diff(&pooled) <= 1e-9);
        let bad = g.constant(Mat::zeros(5, 2));
        assert!(tokenize_per_variable(&mut g, &p, bad, t_steps).is_err());
    }

    #[test]
    fn zero_layers_is_identity() {
        let s = shape(0, 8, 2);
        let (store, p) = setup(&s, 6);
        let mut g = Graph::new(&store);
        let x = Mat::randn(5, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(7));
        let tokens = g.constant(x.clone());
        let seq = TokenSequence {
            tokens,
            n_prompt: 2,
            n_time: 3,
        };
        let out = backbone_forward(&mut g, &p, &seq, &sequence_mask(2, 3, true)).unwrap();
        assert_eq!(g.value(out.hidden), &x);
    }

    fn ln(x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
    }

    fn vecmat(x: &[f64], w: &Mat) -> Vec<f64> {
        (0..w.cols)
            .map(|j| (0..w.rows).map(|i| x[i] * w.at(i, j)).sum())
            .collect()
    }

    #[test]
    fn single_token_matches_dense_reference() {
        let s = shape(1, 4, 1);
        let (store, p) = setup(&s, 8);
        let x = vec![0.3, -1.2, 0.8, 0.5];
        let mut g = Graph::new(&store);
        let tokens = g.constant(Mat::from_vec(1, 4, x.clone()));
        let seq = TokenSequence {
            tokens,
            n_prompt: 0,
            n_time: 1,
        };
        let out = backbone_forward(&mut g, &p, &seq, &sequence_mask(0, 1, true)).unwrap();

        let b = &p.blocks[0];
        let w = |id| store.get(id);
        let h = ln(&x);
        // one key: softmax weight is 1, attention returns its value row
        let v = vecmat(&h, w(b.attn.wv));
        let a = vecmat(&v, w(b.attn.wo));
        let x1: Vec<f64> = x.iter().zip(&a).map(|(p, q)| p + q).collect();
        let h2 = ln(&x1);
        let hid: Vec<f64> = vecmat(&h2, w(b.mlp.w1))
            .iter()
            .zip(&w(b.mlp.b1).data)
            .map(|(u, bb)| gelu(u + bb))
            .collect();
        let m: Vec<f64> = vecmat(&hid, w(b.mlp.w2))
            .iter()
            .zip(&w(b.mlp.b2).data)
            .map(|(u, bb)| u + bb)
            .collect();
        let expected: Vec<f64> = x1.iter().zip(&m).map(|(p, q)| p + q).collect();
        for (a, e) in g.value(out.hidden).data.iter().zip(&expected) {
            assert!((a - e).abs() <= 1e-8);
        }
        assert_eq!(softmax_rows(&Mat::scalar(0.7), None).data, vec![1.0]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let s = shape(2, 8, 2);
        let (store, p) = setup(&s, 9);
        let mut g = Graph::new(&store);
        let tokens = g.constant(Mat::randn(6, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(10)));
        let seq = TokenSequence {
            tokens,
            n_prompt: 2,
            n_time: 4,
        };
        let out = backbone_forward(&mut g, &p, &seq, &sequence_mask(2, 4, true)).unwrap();
        for layer in &out.attention {
            for &w in layer {
                let m = g.value(w);
                for r in 0..m.rows {
                    assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn causal_perturbation() {
        let s = shape(2, 8, 2);
        let (store, p) = setup(&s, 11);
        let (k, t) = (2, 5);
        let base = Mat::randn(k + t, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(12));
        let run = |x: &Mat| {
            let mut g = Graph::new(&store);
            let tokens = g.constant(x.clone());
            let seq = TokenSequence {
                tokens,
                n_prompt: k,
                n_time: t,
            };
            let out = backbone_forward(&mut g, &p, &seq, &sequence_mask(k, t, false)).unwrap();
            g.value(out.hidden).clone()
        };
        let h0 = run(&base);
        for perturbed in 0..t {
            let mut x = base.clone();
            x.row_mut(k + perturbed)[3] += 0.5;
            let h1 = run(&x);
            for pos in 0..k + t {
                let changed = h0.row(pos) != h1.row(pos);
                let expect = pos >= k && pos >= k + perturbed;
                assert_eq!(changed, expect, "perturb {perturbed}, position {pos}");
            }
        }
    }

    #[test]
    fn head_zero_and_bias_only() {
        let s = shape(1, 8, 2);
        let (mut store, p) = setup(&s, 13);
        let mut g = Graph::new(&store);
        let h = g.constant(Mat::zeros(1, 8));
        let out = project_to_spectrum(&mut g, &p, h);
        assert!(g.value(out).data.iter().all(|&x| x == 0.0));

        let bias = Mat::randn(1, 12, 1.0, &mut ChaCha8Rng::seed_from_u64(14));
        *store.get_mut(p.head_w) = Mat::zeros(8, 12);
        *store.get_mut(p.head_b) = bias.clone();
        let mut g = Graph::new(&store);
        let h = g.constant(Mat::randn(1, 8, 3.0, &mut ChaCha8Rng::seed_from_u64(15)));
        let out = project_to_spectrum(&mut g, &p, h);
        assert_eq!(g.tape.shape(out), (6, 2));
        assert_eq!(g.value(out).data, bias.data);
    }
}
