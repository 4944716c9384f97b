//! Rotary position embedding and the rotation-scaling matrices that commute
//! with it.
//!
//! Both use the half-split layout: dimension `j` pairs with `j + d/2`, and a
//! row vector is multiplied from the left (`x · R`).

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

fn check_even(d: usize) -> Result<()> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::InvalidDimension(format!("rotary dimension must be even and positive, got {d}")));
    }
    Ok(())
}

/// Per-pair angular frequencies `θ_j = base^(−2j/d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rope {
    dim: usize,
    inv_freq: Vec<f64>,
}

impl Rope {
    pub fn new(dim: usize, base: f64) -> Result<Self> {
        check_even(dim)?;
        if !(base > 0.0) || !base.is_finite() {
            return Err(Error::InvalidConfig(format!("rope base must be positive, got {base}")));
        }
        let half = dim / 2;
        let inv_freq = (0..half).map(|j| base.powf(-2.0 * j as f64 / dim as f64)).collect();
        Ok(Self { dim, inv_freq })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.inv_freq
    }

    /// `(cos, sin)` of every pair angle at `pos`, evaluated in double precision.
    pub fn rotation<T: Scalar>(&self, pos: usize) -> Vec<(T, T)> {
        self.inv_freq
            .iter()
            .map(|&f| {
                let (s, c) = (pos as f64 * f).sin_cos();
                (T::from_f64_lossy(c), T::from_f64_lossy(s))
            })
            .collect()
    }

    /// In-place `x ← x · R`.
    #[inline]
    pub fn apply<T: Scalar>(x: &mut [T], rotation: &[(T, T)]) {
        let half = rotation.len();
        debug_assert_eq!(x.len(), 2 * half);
        for (j, &(c, s)) in rotation.iter().enumerate() {
            let a = x[j];
            let b = x[j + half];
            x[j] = a * c + b * s;
            x[j + half] = b * c - a * s;
        }
    }

    /// In-place `x ← x · Rᵀ`, the inverse rotation.
    #[inline]
    pub fn apply_inverse<T: Scalar>(x: &mut [T], rotation: &[(T, T)]) {
        let half = rotation.len();
        debug_assert_eq!(x.len(), 2 * half);
        for (j, &(c, s)) in rotation.iter().enumerate() {
            let a = x[j];
            let b = x[j + half];
            x[j] = a * c - b * s;
            x[j + half] = b * c + a * s;
        }
    }
}

/// The dense `d × d` RoPE matrix for position `pos`, blocks `[[C, −S], [S, C]]`.
pub fn rope_matrix<T: Scalar>(d: usize, pos: usize, base: f64) -> Result<Matrix<T>> {
    let rope = Rope::new(d, base)?;
    let half = d / 2;
    let mut m = Matrix::zeros(d, d);
    for (j, (c, s)) in rope.rotation::<T>(pos).into_iter().enumerate() {
        m.set(j, j, c);
        m.set(j, j + half, -s);
        m.set(j + half, j, s);
        m.set(j + half, j + half, c);
    }
    Ok(m)
}

/// Block-diagonal rotation-scaling matrix with the same pairing as RoPE:
/// `t` on both diagonal halves, `−u` in the upper-right and `u` in the
/// lower-left half. Such matrices commute with every RoPE matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationScalingKey {
    t: Vec<f64>,
    u: Vec<f64>,
    scale_bounds: (f64, f64),
}

impl RotationScalingKey {
    pub fn new(t: Vec<f64>, u: Vec<f64>, scale_bounds: (f64, f64)) -> Result<Self> {
        if t.len() != u.len() || t.is_empty() {
            return Err(Error::InvalidDimension(format!(
                "coefficient vectors of length {} and {}",
                t.len(),
                u.len()
            )));
        }
        let (lo, hi) = scale_bounds;
        for (j, (&a, &b)) in t.iter().zip(&u).enumerate() {
            let scale = a.hypot(b);
            if !(scale > 0.0) || !scale.is_finite() {
                return Err(Error::Key(format!("block {j} is not invertible")));
            }
            if scale < lo * (1.0 - 1e-12) || scale > hi * (1.0 + 1e-12) {
                return Err(Error::Key(format!("block {j} scale {scale} outside [{lo}, {hi}]")));
            }
        }
        Ok(Self { t, u, scale_bounds })
    }

    pub fn identity(dim: usize) -> Result<Self> {
        check_even(dim)?;
        Self::new(vec![1.0; dim / 2], vec![0.0; dim / 2], (1.0, 1.0))
    }

    pub fn dim(&self) -> usize {
        2 * self.t.len()
    }
    pub fn t(&self) -> &[f64] {
        &self.t
    }
    pub fn u(&self) -> &[f64] {
        &self.u
    }
    pub fn scale_bounds(&self) -> (f64, f64) {
        self.scale_bounds
    }

    pub fn materialize(&self) -> Matrix<f64> {
        let half = self.t.len();
        let mut m = Matrix::zeros(2 * half, 2 * half);
        for j in 0..half {
            m.set(j, j, self.t[j]);
            m.set(j, j + half, -self.u[j]);
            m.set(j + half, j, self.u[j]);
            m.set(j + half, j + half, self.t[j]);
        }
        m
    }

    /// Key of the inverse matrix, per 2×2 block `t' = t/ρ²`, `u' = −u/ρ²`.
    pub fn invert(&self) -> Self {
        let (t, u) = self
            .t
            .iter()
            .zip(&self.u)
            .map(|(&a, &b)| {
                let r2 = a * a + b * b;
                (a / r2, -b / r2)
            })
            .unzip();
        let (lo, hi) = self.scale_bounds;
        Self { t, u, scale_bounds: (1.0 / hi, 1.0 / lo) }
    }

    /// Key of the transposed matrix.
    pub fn transpose(&self) -> Self {
        Self { t: self.t.clone(), u: self.u.iter().map(|v| -v).collect(), scale_bounds: self.scale_bounds }
    }
}

/// Samples a rotation-scaling key whose per-block scale is uniform in
/// `scale_bounds` and whose angle is uniform on the circle.
pub fn make_commuting_key<R: Rng + ?Sized>(
    d: usize,
    rng: &mut R,
    scale_bounds: (f64, f64),
) -> Result<RotationScalingKey> {
    check_even(d)?;
    let (lo, hi) = scale_bounds;
    if !(lo > 0.0) || !(lo <= hi) || !hi.is_finite() {
        return Err(Error::InvalidConfig(format!("empty or non-positive scale bounds [{lo}, {hi}]")));
    }
    let half = d / 2;
    let mut t = Vec::with_capacity(half);
    let mut u = Vec::with_capacity(half);
    for _ in 0..half {
        let scale = if lo == hi { lo } else { rng.random_range(lo..=hi) };
        let angle = rng.random_range(0.0..2.0 * PI);
        t.push(scale * angle.cos());
        u.push(scale * angle.sin());
    }
    RotationScalingKey::new(t, u, scale_bounds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::invert;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rope_at_zero_is_identity() {
        let r = rope_matrix::<f64>(8, 0, DEFAULT_ROPE_BASE).unwrap();
        assert_eq!(r, Matrix::identity(8));
    }

    #[test]
    fn rope_two_dim_position_one() {
        let r = rope_matrix::<f64>(2, 1, DEFAULT_ROPE_BASE).unwrap();
        let (s, c) = 1f64.sin_cos();
        let expected = Matrix::new(2, 2, vec![c, -s, s, c]).unwrap();
        assert!(r.max_abs_diff(&expected) == 0.0);
    }

    #[test]
    fn rope_orthogonal_and_rejects_odd() {
        for (d, pos) in [(2, 3), (8, 17), (64, 511)] {
            let r = rope_matrix::<f64>(d, pos, DEFAULT_ROPE_BASE).unwrap();
            let g = r.matmul(&r.transpose()).unwrap();
            assert!(g.max_abs_diff(&Matrix::identity(d)) <= 1e-12);
        }
        assert!(matches!(rope_matrix::<f64>(7, 1, 1e4), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn fast_rotation_matches_dense() {
        let d = 16;
        let rope = Rope::new(d, DEFAULT_ROPE_BASE).unwrap();
        let x: Vec<f64> = (0..d).map(|i| (i as f64 * 0.37).sin()).collect();
        let dense = rope_matrix::<f64>(d, 9, DEFAULT_ROPE_BASE).unwrap().vec_mul(&x);
        let mut fast = x.clone();
        let rot = rope.rotation::<f64>(9);
        Rope::apply(&mut fast, &rot);
        for (a, b) in dense.iter().zip(&fast) {
            assert!((a - b).abs() < 1e-14);
        }
        Rope::apply_inverse(&mut fast, &rot);
        for (a, b) in x.iter().zip(&fast) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn unit_key_materializes_to_identity() {
        let k = RotationScalingKey::identity(6).unwrap();
        assert_eq!(k.materialize(), Matrix::identity(6));
    }

    #[test]
    fn scaling_only_block() {
        let k = RotationScalingKey::new(vec![2.0], vec![0.0], (0.5, 2.0)).unwrap();
        assert_eq!(k.materialize(), Matrix::new(2, 2, vec![2.0, 0.0, 0.0, 2.0]).unwrap());
    }

    #[test]
    fn commuting_key_commutes_with_rope() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let key = make_commuting_key(8, &mut rng, (0.5, 2.0)).unwrap();
        let m = key.materialize();
        for pos in [0, 1, 5, 127] {
            let r = rope_matrix::<f64>(8, pos, DEFAULT_ROPE_BASE).unwrap();
            let diff = m.matmul(&r).unwrap().max_abs_diff(&r.matmul(&m).unwrap());
            assert!(diff <= 1e-12, "pos {pos}: {diff}");
        }
        let inv = invert(&m).unwrap();
        assert!(m.matmul(&inv).unwrap().max_abs_diff(&Matrix::identity(8)) <= 1e-10);
    }

    #[test]
    fn inverted_key_is_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let key = make_commuting_key(12, &mut rng, (0.5, 2.0)).unwrap();
        let prod = key.materialize().matmul(&key.invert().materialize()).unwrap();
        assert!(prod.max_abs_diff(&Matrix::identity(12)) <= 1e-12);
        let tr = key.transpose().materialize();
        assert_eq!(tr, key.materialize().transpose());
    }

    #[test]
    fn materialized_structure_has_two_diagonals() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let key = make_commuting_key(4, &mut rng, (0.5, 2.0)).unwrap();
        let m = key.materialize();
        for r in 0..4 {
            for c in 0..4 {
                if r != c && (r as isize - c as isize).abs() != 2 {
                    assert_eq!(m.get(r, c), 0.0);
                }
            }
        }
        assert_eq!(m.get(0, 0), key.t()[0]);
        assert_eq!(m.get(2, 2), key.t()[0]);
        assert_eq!(m.get(0, 2), -key.u()[0]);
        assert_eq!(m.get(2, 0), key.u()[0]);
    }

    #[test]
    fn key_scales_respect_bounds_and_empty_bounds_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let key = make_commuting_key(64, &mut rng, (0.5, 2.0)).unwrap();
        for (a, b) in key.t().iter().zip(key.u()) {
            let s = a.hypot(*b);
            assert!((0.5..=2.0).contains(&s));
        }
        assert!(matches!(make_commuting_key(4, &mut rng, (2.0, 1.0)), Err(Error::InvalidConfig(_))));
        assert!(matches!(make_commuting_key(4, &mut rng, (0.0, 1.0)), Err(Error::InvalidConfig(_))));
    }
}
