//! KV-cache privacy laboratory.
//!
//! A toy transformer decoder with a paged KV-cache, three input
//! reconstruction attacks against the cache (inversion, collision,
//! injection), the KV-Cloak reversible obfuscation with operator fusion, a
//! Gaussian-noise baseline, and an experiment harness.
//!
//! Numeric code is generic over [`Scalar`] (`f32` and `f64`). Key material
//! is always `f64`; cache payloads are `f32` on the production path.

pub mod attacks;
pub mod cloak;
pub mod container;
pub mod dp;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = linalg::Matrix<f64>;
pub type Matrix32 = linalg::Matrix<f32>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Cache32 = model::PagedKvCache<f32>;
pub type Cache64 = model::PagedKvCache<f64>;
pub type Block32 = model::KvBlock<f32>;
