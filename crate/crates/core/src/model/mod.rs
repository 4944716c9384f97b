//! Minimal autoregressive decoder with MHA/GQA attention, RoPE and a paged
//! KV-cache.

mod cache;
mod config;
pub mod echo;
mod forward;
mod weights;

pub use cache::{BlockState, KvBlock, PagedKvCache};
pub use config::ModelConfig;
pub use forward::{argmax, rms_norm, softmax_in_place, AttentionOutput, Model};
pub use weights::{init_weights, LayerWeights, MlpWeights, Weights};
