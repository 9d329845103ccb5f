//! End-to-end forecaster: normalization, spectral transform, mixture of
//! experts, prompting, backbone, head and inverse transform.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{LinearMap, Var};
use crate::backbone::{
    backbone_forward, last_row, project_to_spectrum, sequence_mask, tokenize_per_variable, BackboneParams,
    BackboneShape, TokenSequence,
};
use crate::error::{Error, Result, StageExt};
use crate::fmoe::{moe_forward, BandLayout, FmoeParams};
use crate::grid::{compute_norm_stats, normalize, GridField, GridSpec, HistoryWindow, NormStats};
use crate::params::{Graph, ParamStore};
use crate::prompt::{meta_fusion, PromptParams};
use crate::spectral::{dft2_plane, kept_bins, SpectrumToField};
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of input timesteps `L`.
    pub history_len: usize,
    /// Retained bins satisfy `|k_m| < k_max` and `|k_n| < k_max` (signed).
    pub k_max: usize,
    pub d_latent: usize,
    pub n_experts: usize,
    pub n_bands: usize,
    pub n_prompts: usize,
    pub prompt_heads: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub epsilon: f64,
    pub ln_eps: f64,
    /// Prompt tokens may attend to timestep tokens.
    pub prompt_sees_time: bool,
    pub use_fft: bool,
    pub use_prompt: bool,
    pub use_moe: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            history_len: 4,
            k_max: 4,
            d_latent: 16,
            n_experts: 4,
            n_bands: 3,
            n_prompts: 4,
            prompt_heads: 2,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            mlp_ratio: 4,
            epsilon: crate::grid::DEFAULT_EPSILON,
            ln_eps: 1e-5,
            prompt_sees_time: true,
            use_fft: true,
            use_prompt: true,
            use_moe: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.history_len == 0 {
            return bad("history_len must be >= 1".into());
        }
        if self.d_model == 0 || self.d_latent == 0 || self.mlp_ratio == 0 {
            return bad("model widths must be >= 1".into());
        }
        if self.n_experts == 0 || self.n_bands == 0 {
            return bad("n_experts and n_bands must be >= 1".into());
        }
        if self.n_prompts == 0 {
            return bad("n_prompts must be >= 1".into());
        }
        if !(self.epsilon > 0.0) || !(self.ln_eps > 0.0) {
            return bad("epsilon values must be positive".into());
        }
        let limit = grid.n_lat().min(grid.n_lon()) / 2;
        if self.use_fft && (self.k_max == 0 || self.k_max > limit) {
            return bad(format!(
                "k_max {} outside 1..={limit} for a {}x{} grid",
                self.k_max,
                grid.n_lon(),
                grid.n_lat()
            ));
        }
        Ok(())
    }

    /// Bins each plane contributes to the model.
    pub fn resolved_bins(&self, grid: &GridSpec) -> Vec<usize> {
        if self.use_fft {
            kept_bins(grid.n_lat(), grid.n_lon(), self.k_max)
        } else {
            (0..grid.plane()).collect()
        }
    }
}

/// Model inputs derived from one history window.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub stats: NormStats,
    /// `[C·L·n_bins x 2]` (re, im), planes ordered `(variable, timestep)`.
    pub bins: Mat,
    /// `[C·L x B]` band features.
    pub features: Mat,
}

/// Graph handles produced by one forward pass.
pub struct Forward {
    /// Denormalized forecast `[C·M x N]`.
    pub prediction: Var,
    /// Head output `[C·n_bins x 2]` in token units.
    pub spectrum: Var,
    pub gate: Option<Var>,
    pub prompts: Option<Var>,
    pub attention: Vec<Vec<Var>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub grid: Arc<GridSpec>,
    pub store: ParamStore,
    pub fmoe: FmoeParams,
    pub prompt: PromptParams,
    pub backbone: BackboneParams,
    bins: Arc<Vec<usize>>,
    to_field: Arc<SpectrumToField>,
}

impl Model {
    pub fn new(config: ModelConfig, grid: Arc<GridSpec>, seed: u64) -> Result<Self> {
        config.validate(&grid)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, n) = (grid.n_lat(), grid.n_lon());
        let bins = Arc::new(config.resolved_bins(&grid));
        let bands = BandLayout::radial(m, n, config.n_bands, &bins)?;
        let mut store = ParamStore::new();
        let fmoe = FmoeParams::init(&mut store, config.d_latent, config.n_experts, bands, &mut rng)?;
        let prompt = PromptParams::init(
            &mut store,
            config.n_prompts,
            config.d_model,
            config.prompt_heads,
            config.ln_eps,
            &mut rng,
        )?;
        let shape = BackboneShape {
            n_vars: grid.n_vars(),
            n_bins: bins.len(),
            d_latent: config.d_latent,
            history_len: config.history_len,
            d_model: config.d_model,
            n_layers: config.n_layers,
            n_heads: config.n_heads,
            mlp_ratio: config.mlp_ratio,
            ln_eps: config.ln_eps,
        };
        let backbone = BackboneParams::init(&mut store, &shape, &mut rng)?;
        let to_field = Arc::new(SpectrumToField::new(m, n, bins.clone()));
        Ok(Model {
            config,
            grid,
            store,
            fmoe,
            prompt,
            backbone,
            bins,
            to_field,
        })
    }

    /// Rebuilds the layout for `config` and adopts `store`, which must hold
    /// exactly the same named parameters with the same shapes.
    pub fn with_store(config: ModelConfig, grid: Arc<GridSpec>, store: ParamStore) -> Result<Self> {
        let mut model = Model::new(config, grid, 0)?;
        if model.store.len() != store.len() {
            return Err(Error::shape(format!(
                "expected {} parameter blocks, found {}",
                model.store.len(),
                store.len()
            )));
        }
        for ((_, name, a), (_, other, b)) in model.store.iter().zip(store.iter()) {
            if name != other || a.shape() != b.shape() {
                return Err(Error::shape(format!(
                    "parameter {name} {:?} does not match {other} {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        model.store = store;
        Ok(model)
    }

    pub fn resolved_bins(&self) -> &[usize] {
        &self.bins
    }

    pub fn n_params(&self) -> usize {
        self.store.count()
    }

    fn check_window(&self, window: &HistoryWindow) -> Result<()> {
        if window.len() != self.config.history_len {
            return Err(Error::shape(format!(
                "history has {} steps, model expects {}",
                window.len(),
                self.config.history_len
            )));
        }
        let g = window.grid();
        if g.n_vars() != self.grid.n_vars()
            || g.n_lat() != self.grid.n_lat()
            || g.n_lon() != self.grid.n_lon()
        {
            return Err(Error::shape(format!(
                "history grid {}x{}x{} differs from model grid {}x{}x{}",
                g.n_vars(),
                g.n_lat(),
                g.n_lon(),
                self.grid.n_vars(),
                self.grid.n_lat(),
                self.grid.n_lon()
            )));
        }
        Ok(())
    }

    /// Normalizes the window with its own statistics and extracts the
    /// retained bins and band features of every plane.
    pub fn prepare(&self, window: &HistoryWindow) -> Result<Prepared> {
        self.check_window(window)?;
        let stats = compute_norm_stats(window, self.config.epsilon).stage("normalize")?;
        let normed = window
            .steps
            .iter()
            .map(|f| normalize(f, &stats))
            .collect::<Result<Vec<_>>>()
            .stage("normalize")?;
        let (m, n) = (self.grid.n_lat(), self.grid.n_lon());
        let (c, l) = (self.grid.n_vars(), window.len());
        let nk = self.bins.len();
        let scale = 1.0 / ((m * n) as f64).sqrt();
        let mut bins = Mat::zeros(c * l * nk, 2);
        let mut features = Mat::zeros(c * l, self.fmoe.bands.n_bands());
        for v in 0..c {
            for (t, field) in normed.iter().enumerate() {
                let plane = field.var(v);
                let (re, im): (Vec<f64>, Vec<f64>) = if self.config.use_fft {
                    dft2_plane(plane, m, n)
                        .iter()
                        .map(|z| (z.re * scale, z.im * scale))
                        .unzip()
                } else {
                    (plane.to_vec(), vec![0.0; plane.len()])
                };
                let p = v * l + t;
                for (j, &k) in self.bins.iter().enumerate() {
                    bins.set(p * nk + j, 0, re[k]);
                    bins.set(p * nk + j, 1, im[k]);
                }
                features
                    .row_mut(p)
                    .copy_from_slice(&self.fmoe.bands.features(&re, &im));
            }
        }
        if !bins.is_finite() {
            return Err(Error::invalid("non-finite spectral coefficients").in_stage("transform"));
        }
        Ok(Prepared {
            stats,
            bins,
            features,
        })
    }

    /// Builds the forward graph on `g`, whose store must share this
    /// model's layout.
    pub fn forward(&self, g: &mut Graph, prep: &Prepared) -> Result<Forward> {
        let cfg = &self.config;
        let (c, l) = (self.grid.n_vars(), cfg.history_len);
        let (m, n) = (self.grid.n_lat(), self.grid.n_lon());
        let bins = g.constant(prep.bins.clone());
        let moe = moe_forward(g, &self.fmoe, bins, &self.bins, &prep.features, cfg.use_moe);
        let tok = tokenize_per_variable(g, &self.backbone, moe.latent, l).stage("backbone")?;

        let (seq, prompts) = if cfg.use_prompt {
            let fused = meta_fusion(g, &self.prompt, tok.per_variable, c, l).stage("prompt")?;
            let seq = g.tape.concat_rows(&[fused.prompts, tok.tokens]);
            (
                TokenSequence {
                    tokens: seq,
                    n_prompt: cfg.n_prompts,
                    n_time: l,
                },
                Some(fused.prompts),
            )
        } else {
            (
                TokenSequence {
                    tokens: tok.tokens,
                    n_prompt: 0,
                    n_time: l,
                },
                None,
            )
        };
        let mask = sequence_mask(seq.n_prompt, seq.n_time, cfg.prompt_sees_time);
        let out = backbone_forward(g, &self.backbone, &seq, &mask).stage("backbone")?;
        let last = g.tape.gather_rows(out.hidden, last_row(seq.len()));
        let spectrum = project_to_spectrum(g, &self.backbone, last);

        let nk = self.bins.len();
        let unscale = ((m * n) as f64).sqrt();
        let mut planes = Vec::with_capacity(c);
        for v in 0..c {
            let s = g.tape.slice_rows(spectrum, v * nk, nk);
            let field = if cfg.use_fft {
                let s = g.tape.scale(s, unscale);
                g.tape.linear(s, self.to_field.clone() as Arc<dyn LinearMap>)
            } else {
                let re = g.tape.slice_cols(s, 0, 1);
                g.tape.reshape(re, m, n)
            };
            let field = g.tape.scale(field, prep.stats.scale(v));
            planes.push(g.tape.add_scalar(field, prep.stats.mu[v]));
        }
        let prediction = if planes.len() == 1 {
            planes[0]
        } else {
            g.tape.concat_rows(&planes)
        };
        if !g.value(prediction).is_finite() {
            return Err(Error::invalid("non-finite forecast").in_stage("inverse"));
        }
        Ok(Forward {
            prediction,
            spectrum,
            gate: moe.gate,
            prompts,
            attention: out.attention,
        })
    }

    /// One-step forecast from the last `history_len` states.
    pub fn forecast(&self, window: &HistoryWindow) -> Result<GridField> {
        let prep = self.prepare(window)?;
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, &prep)?;
        GridField::new(window.grid().clone(), g.value(out.prediction).data.clone())
    }

    /// Autoregressive rollout; each forecast is appended to the window and
    /// the oldest state dropped.
    pub fn rollout(&self, window: &HistoryWindow, steps: usize, dt_hours: f64) -> Result<Vec<GridField>> {
        let mut w = window.clone();
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let next = self.forecast(&w)?;
            w = w.advance(next.clone(), dt_hours)?;
            out.push(next);
        }
        Ok(out)
    }
}
