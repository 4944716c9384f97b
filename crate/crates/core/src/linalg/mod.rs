//! Dense real linear algebra: matrices, orthogonal and permutation sampling,
//! RoPE and the rotation-scaling keys that commute with it, inversion and
//! least squares.

mod decompose;
mod matrix;
mod permutation;
mod rope;

pub use decompose::{householder_qr, invert, rank, sample_orthogonal, solve_least_squares, svd, LeastSquares, Svd};
pub use matrix::Matrix;
pub use permutation::Permutation;
pub use rope::{make_commuting_key, rope_matrix, Rope, RotationScalingKey, DEFAULT_ROPE_BASE};
