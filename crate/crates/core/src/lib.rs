//! Spectral mixture-of-experts weather forecasting on regular lat/lon grids.
//!
//! The pipeline normalizes a history window, moves each plane to the 2-D
//! Fourier domain, lifts retained bins through a gated mixture of experts,
//! fuses the result into learned prompts, runs a decoder-only transformer
//! and maps its last hidden state back to a physical field.

pub mod ablation;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod exec;
pub mod fmoe;
pub mod grid;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod prompt;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use dataio::{Dataset, Split, SyntheticConfig};
pub use error::{Error, Result};
pub use exec::Exec;
pub use grid::{GridField, GridSpec, HistoryWindow, NormStats};
pub use metrics::{EvalOptions, EvalReport};
pub use model::{Model, ModelConfig};
pub use tensor::Mat;
pub use train::{LossVariant, TrainConfig, TrainOptions};
