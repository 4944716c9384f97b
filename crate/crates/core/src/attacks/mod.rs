//! Input reconstruction attacks on leaked caches.

mod collision;
mod injection;
mod inversion;
mod metrics;
mod report;
mod slices;
mod threshold;

pub use collision::{
    calibrate_enhanced, candidate_order, collision_attack, collision_distance, CollisionParams, DistanceParts,
    EnhancedCalibration, StatsWindow, ThresholdMode, TokenSlice,
};
pub use injection::{injection_attack, InjectionOutcome};
pub use inversion::{invert_hidden, inversion_attack, nearest_embedding, InversionMode, Inverted};
pub use metrics::{exact_match, lcs_len, rouge_l};
pub use report::{AttackReport, Decision, PositionRecord};
pub use slices::LayerSlices;
pub use threshold::{
    enhanced_threshold, log_normal_cdf, log_success, DistanceStats, RunningStats, ThresholdChoice, THRESHOLD_GRID,
};
