#![allow(dead_code)]

use specast::dataio::{generate_synthetic, Dataset, SyntheticConfig};
use specast::ModelConfig;

/// A model small enough for many training runs per test.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        history_len: 2,
        k_max: 2,
        d_latent: 4,
        n_experts: 2,
        n_bands: 2,
        n_prompts: 2,
        prompt_heads: 1,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        mlp_ratio: 2,
        ..ModelConfig::default()
    }
}

pub fn synth(n_steps: usize, seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        n_lat: 8,
        n_lon: 16,
        n_steps,
        seed,
        ..SyntheticConfig::default()
    }
}

/// Advecting fixture on the 16x8 grid.
pub fn moving(n_steps: usize, seed: u64) -> Dataset {
    generate_synthetic(&synth(n_steps, seed)).unwrap()
}

/// Spatially varying but time-constant fixture.
pub fn frozen(n_steps: usize, seed: u64) -> Dataset {
    generate_synthetic(&SyntheticConfig {
        velocity: [0.0, 0.0],
        velocity_spread: 0.0,
        diffusion: 0.0,
        damping: 0.0,
        forcing: 0.0,
        noise_amplitude: 0.0,
        extreme_rate: 0.0,
        ..synth(n_steps, seed)
    })
    .unwrap()
}
