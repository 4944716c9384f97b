//! Reversible cache obfuscation `K' = S·P̂·(K·M1 + A)` with `M1`/`M2`
//! folded into the attention weights.

mod block;
mod flops;
mod fusion;
mod key;
mod naive;
mod session;

pub use block::{
    deobfuscate_block, deobfuscate_block_unfused, deobfuscate_block_with, obfuscate_block, obfuscate_block_unfused,
    obfuscate_block_with, Deobfuscated, ObfuscateOptions, PaddingRule,
};
pub use flops::{flop_model, FlopModel};
pub use fusion::{fuse_weights, FusedWeights};
pub use key::{keygen, max_abs_kv, CloakKey, KeyMaterial, KeyParams, KeyScope, LayerKey, LayerMaterial};
pub use naive::{cpa_break_naive, obfuscate_naive, RecoveredKey};
pub use session::{
    calibrate, cloak_cache, cloak_cache_with, decloak_cache, decloak_cache_with, provision, CloakPath,
    ProtectedSession, RowOrder,
};
