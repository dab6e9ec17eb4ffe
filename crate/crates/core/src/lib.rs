//! Structural Dropout: train one MLP whose width-`k` prefixes are usable
//! models on their own, then slice it to any `k` without retraining.
//!
//! A dropout layer of width `N` keeps a random prefix of its features during
//! training and a fixed prefix `k` at inference, rescaling by `N / k`. The
//! features past `k` are exactly zero, so [`prune()`] can drop the
//! corresponding weight rows and columns and produce a physically smaller
//! network with the same outputs.

pub mod data;
pub mod error;
pub mod network;
pub mod prune;
pub mod sd;
pub mod sweep;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use network::{Activation, LayerSpec, ModelSpec, Network, Widths};
pub use prune::{flop_estimate, param_count, prune, PrunedNetwork};
pub use sd::{SdConfig, SdDecision};
pub use sweep::{select_width, sweep, SelectPolicy, SweepPlan, SweepRecord};
pub use tensor::Tensor;
pub use train::{train, RunLog, TrainConfig};
