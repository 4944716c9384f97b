//! Multiplication counts of online obfuscation against re-computing a
//! block's keys from hidden states.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopModel {
    pub block_size: u64,
    pub head_dim: u64,
    pub hidden: u64,
    /// `b³ + 2b²d + 2bd²`: `S·P̂` mixing plus both `M` products online.
    pub naive_mults: u64,
    /// `b³ + 2b²d`: with `M1`/`M2` folded into the weights.
    pub fused_mults: u64,
    /// `b·D·d`: projecting the block's hidden states again.
    pub recompute_mults: u64,
    pub naive_ratio: f64,
    pub fused_ratio: f64,
    pub fused_over_naive: f64,
}

pub fn flop_model(block_size: u64, head_dim: u64, hidden: u64) -> FlopModel {
    let (b, d) = (block_size, head_dim);
    let fused = b.pow(3) + 2 * b * b * d;
    let naive = fused + 2 * b * d * d;
    let recompute = b * hidden * d;
    FlopModel {
        block_size,
        head_dim,
        hidden,
        naive_mults: naive,
        fused_mults: fused,
        recompute_mults: recompute,
        naive_ratio: naive as f64 / recompute as f64,
        fused_ratio: fused as f64 / recompute as f64,
        fused_over_naive: fused as f64 / naive as f64,
    }
}
