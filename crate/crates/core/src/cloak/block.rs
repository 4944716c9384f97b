//! Per-block obfuscation `K' = S·P̂·(K + A)` and its inverse.

use rand::Rng;

use super::key::{CloakKey, LayerKey};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Permutation};
use crate::model::{BlockState, KvBlock};
use crate::scalar::Scalar;

/// How padding rows are told apart from data rows during recovery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PaddingRule {
    /// Rows whose identifier index is `>= fill`.
    #[default]
    FillMetadata,
    /// Rows whose entries all lie within `[1.25θ, 1.75θ]` after identifier
    /// removal, for blocks that arrive without fill metadata.
    MagnitudeBand,
}

/// Options of a single obfuscation, mainly for degenerate debug paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ObfuscateOptions {
    pub identity_permutation: bool,
}

fn widen<T: Scalar>(m: &Matrix<T>) -> Matrix<f64> {
    m.cast()
}

/// Identifier and padding magnitudes for one tensor of a block.
struct MaskLevels<'a> {
    identifiers: &'a [f64],
    pad: f64,
    /// Outlier threshold `outlier_factor · θ`.
    limit: f64,
}

/// `S · P̂(X + A)` where rows `>= fill` of `X` are replaced by `pad`. Fails
/// when a valid row could not be recovered: an entry other than the
/// identifier reaches the outlier threshold, or the identifier drops below it.
fn mask_shuffle_mix(
    x: &Matrix<f64>,
    fill: usize,
    levels: &MaskLevels<'_>,
    perm: &Permutation,
    s: &Matrix<f64>,
) -> Result<Matrix<f64>> {
    let mut masked = x.clone();
    for r in 0..masked.rows() {
        if r >= fill {
            masked.row_mut(r).fill(levels.pad);
        }
        let v = masked.get(r, r) + levels.identifiers[r];
        masked.set(r, r, v);
        if r < fill {
            let row = masked.row(r);
            let worst = row.iter().enumerate().filter(|&(c, _)| c != r).map(|(_, v)| v.abs()).fold(0.0, f64::max);
            if worst >= levels.limit {
                return Err(Error::OutOfCalibratedRange { row: r, magnitude: worst, limit: levels.limit });
            }
            if row[r].abs() <= levels.limit {
                return Err(Error::OutOfCalibratedRange { row: r, magnitude: x.get(r, r).abs(), limit: levels.limit });
            }
        }
    }
    s.matmul(&perm.apply_rows(&masked)?)
}

fn check_layout<T: Scalar>(block: &KvBlock<T>, key: &CloakKey) -> Result<()> {
    if block.block_size() != key.block_size || block.head_dim() != key.head_dim {
        return Err(Error::Key(format!(
            "block {}x{} for key {}x{}",
            block.block_size(),
            block.head_dim(),
            key.block_size,
            key.head_dim
        )));
    }
    Ok(())
}

/// Obfuscates a fused-domain block with a fresh one-time permutation drawn
/// from `rng`, shared by keys and values. The permutation is not retained.
pub fn obfuscate_block<T: Scalar, R: Rng + ?Sized>(
    block: &KvBlock<T>,
    key: &CloakKey,
    rng: &mut R,
) -> Result<KvBlock<T>> {
    obfuscate_block_with(block, key, rng, ObfuscateOptions::default())
}

pub fn obfuscate_block_with<T: Scalar, R: Rng + ?Sized>(
    block: &KvBlock<T>,
    key: &CloakKey,
    rng: &mut R,
    options: ObfuscateOptions,
) -> Result<KvBlock<T>> {
    if block.state != BlockState::Plaintext {
        return Err(Error::DoubleObfuscation { layer: block.layer, head: block.head });
    }
    check_layout(block, key)?;
    let lk = key.for_layer(block.layer)?;
    let b = key.block_size;
    let perm = if options.identity_permutation { Permutation::identity(b) } else { Permutation::sample(b, rng)? };
    let (pad, factor) = (key.params.pad_value_factor, key.params.outlier_factor);
    let levels_k = MaskLevels { identifiers: &lk.a_k, pad: pad * lk.theta_k, limit: factor * lk.theta_k };
    let levels_v = MaskLevels { identifiers: &lk.a_v, pad: pad * lk.theta_v, limit: factor * lk.theta_v };
    let keys = mask_shuffle_mix(&widen(&block.keys), block.fill, &levels_k, &perm, &lk.s)?;
    let values = mask_shuffle_mix(&widen(&block.values), block.fill, &levels_v, &perm, &lk.s)?;
    Ok(KvBlock {
        layer: block.layer,
        head: block.head,
        keys: keys.cast(),
        values: values.cast(),
        fill: block.fill,
        state: BlockState::Cloaked,
    })
}

/// Original slot index of every row of `x = P̂(X + A)`, or the row that
/// breaks the identifier structure.
fn identifier_columns(x: &Matrix<f64>, threshold: f64) -> Result<Vec<usize>> {
    let b = x.rows();
    let mut seen = vec![false; b];
    let mut cols = Vec::with_capacity(b);
    for r in 0..b {
        let mut hits = x.row(r).iter().enumerate().filter(|(_, v)| v.abs() > threshold).map(|(c, _)| c);
        let col = hits.next().ok_or_else(|| Error::Corruption { row: r, reason: "no identifier".into() })?;
        if hits.next().is_some() {
            return Err(Error::Corruption { row: r, reason: "more than one identifier".into() });
        }
        if col >= b {
            return Err(Error::Corruption { row: r, reason: format!("identifier in column {col} beyond the block") });
        }
        if std::mem::replace(&mut seen[col], true) {
            return Err(Error::Corruption { row: r, reason: format!("duplicate identifier {col}") });
        }
        cols.push(col);
    }
    Ok(cols)
}

fn strip_identifiers(x: &mut Matrix<f64>, cols: &[usize], identifiers: &[f64]) {
    for (r, &c) in cols.iter().enumerate() {
        let v = x.get(r, c) - identifiers[c];
        x.set(r, c, v);
    }
}

fn is_padding_row(row: &[f64], theta: f64) -> bool {
    row.iter().all(|v| (1.25 * theta..=1.75 * theta).contains(v))
}

/// Recovered block and the original slot of each of its valid rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Deobfuscated<T> {
    pub block: KvBlock<T>,
    /// `slot_map.mapping()[r]` is the original slot of recovered row `r`.
    pub slot_map: Permutation,
}

pub fn deobfuscate_block<T: Scalar>(block: &KvBlock<T>, key: &CloakKey) -> Result<Deobfuscated<T>> {
    deobfuscate_block_with(block, key, PaddingRule::FillMetadata)
}

/// Removes `S` and the mask. Rows come back in the permuted order, which
/// attention consumes directly.
pub fn deobfuscate_block_with<T: Scalar>(
    block: &KvBlock<T>,
    key: &CloakKey,
    rule: PaddingRule,
) -> Result<Deobfuscated<T>> {
    if block.state != BlockState::Cloaked {
        return Err(Error::BlockState(format!("expected a cloaked block, found {:?}", block.state)));
    }
    check_layout(block, key)?;
    let lk: &LayerKey = key.for_layer(block.layer)?;
    let st = lk.s.transpose();
    let mut xk = st.matmul(&widen(&block.keys))?;
    let mut xv = st.matmul(&widen(&block.values))?;
    let factor = key.params.outlier_factor;
    let cols = identifier_columns(&xk, factor * lk.theta_k)?;
    let cols_v = identifier_columns(&xv, factor * lk.theta_v)?;
    if let Some(r) = cols.iter().zip(&cols_v).position(|(a, b)| a != b) {
        return Err(Error::Corruption { row: r, reason: "key and value identifiers disagree".into() });
    }
    strip_identifiers(&mut xk, &cols, &lk.a_k);
    strip_identifiers(&mut xv, &cols, &lk.a_v);
    let keep: Vec<usize> = (0..cols.len())
        .filter(|&r| match rule {
            PaddingRule::FillMetadata => cols[r] < block.fill,
            PaddingRule::MagnitudeBand => {
                !(is_padding_row(xk.row(r), lk.theta_k) && is_padding_row(xv.row(r), lk.theta_v))
            }
        })
        .collect();
    let mut out = KvBlock::empty(block.layer, block.head, key.block_size, key.head_dim);
    for (dst, &r) in keep.iter().enumerate() {
        out.keys.row_mut(dst).iter_mut().zip(xk.row(r)).for_each(|(o, &v)| *o = T::from_f64_lossy(v));
        out.values.row_mut(dst).iter_mut().zip(xv.row(r)).for_each(|(o, &v)| *o = T::from_f64_lossy(v));
    }
    out.fill = keep.len();
    let mut slots: Vec<usize> = keep.iter().map(|&r| cols[r]).collect();
    // Slots of a band-detected block are compacted to 0..fill.
    let mut order: Vec<usize> = (0..slots.len()).collect();
    order.sort_by_key(|&i| slots[i]);
    for (rank, &i) in order.iter().enumerate() {
        slots[i] = rank;
    }
    Ok(Deobfuscated { block: out, slot_map: Permutation::from_mapping(slots)? })
}

/// Unfused variant: the column transforms are applied online,
/// `K' = S·P̂·(K·M1 + A)` on plaintext-domain blocks.
pub fn obfuscate_block_unfused<T: Scalar, R: Rng + ?Sized>(
    block: &KvBlock<T>,
    key: &CloakKey,
    rng: &mut R,
) -> Result<KvBlock<T>> {
    let lk = key.for_layer(block.layer)?;
    let mut fused = block.clone();
    fused.keys = widen(&block.keys).matmul(&lk.m1.materialize())?.cast();
    fused.values = widen(&block.values).matmul(&lk.m2.materialize())?.cast();
    obfuscate_block(&fused, key, rng)
}

/// Inverse of [`obfuscate_block_unfused`], returning plaintext-domain rows.
pub fn deobfuscate_block_unfused<T: Scalar>(block: &KvBlock<T>, key: &CloakKey) -> Result<Deobfuscated<T>> {
    let lk = key.for_layer(block.layer)?;
    let mut d = deobfuscate_block(block, key)?;
    d.block.keys = widen(&d.block.keys).matmul(&lk.m1.invert().materialize())?.cast();
    d.block.values = widen(&d.block.values).matmul(&lk.m2.invert().materialize())?.cast();
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloak::key::{keygen, KeyMaterial, KeyParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_block(rng: &mut ChaCha8Rng, fill: usize) -> KvBlock<f64> {
        let mut b = KvBlock::empty(0, 0, 8, 16);
        for r in 0..fill {
            for c in 0..16 {
                b.keys.set(r, c, rng.random_range(-1.0..1.0));
                b.values.set(r, c, rng.random_range(-0.5..0.5));
            }
        }
        b.fill = fill;
        b
    }

    fn key(rng: &mut ChaCha8Rng) -> CloakKey {
        let mat = KeyMaterial::sample(8, 16, 1, &KeyParams::default(), rng).unwrap();
        let mut cal = KvBlock::empty(0, 0, 8, 16);
        cal.keys.row_mut(0).fill(1.0);
        cal.values.row_mut(0).fill(0.5);
        cal.fill = 1;
        keygen(&mat, &[cal], rng).unwrap()
    }

    #[test]
    fn roundtrip_recovers_a_row_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let key = key(&mut rng);
        for fill in [8, 5, 1] {
            let b = random_block(&mut rng, fill);
            let c = obfuscate_block(&b, &key, &mut rng).unwrap();
            let d = deobfuscate_block(&c, &key).unwrap();
            assert_eq!(d.block.fill, fill);
            for (r, &slot) in d.slot_map.mapping().iter().enumerate() {
                for col in 0..16 {
                    assert!((d.block.keys.get(r, col) - b.keys.get(slot, col)).abs() < 1e-12);
                    assert!((d.block.values.get(r, col) - b.values.get(slot, col)).abs() < 1e-12);
                }
            }
            let band = deobfuscate_block_with(&c, &key, PaddingRule::MagnitudeBand).unwrap();
            assert_eq!(band, d);
        }
    }

    #[test]
    fn double_obfuscation_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let key = key(&mut rng);
        let c = obfuscate_block(&random_block(&mut rng, 4), &key, &mut rng).unwrap();
        assert!(matches!(obfuscate_block(&c, &key, &mut rng), Err(Error::DoubleObfuscation { .. })));
    }

    #[test]
    fn data_beyond_calibration_is_rejected_before_cloaking() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let key = key(&mut rng);
        let mut b = random_block(&mut rng, 4);
        // θ_K = 1, so 2.5 reaches the outlier threshold off the identifier column.
        b.keys.set(1, 7, 2.5);
        match obfuscate_block(&b, &key, &mut rng) {
            Err(Error::OutOfCalibratedRange { row, .. }) => assert_eq!(row, 1),
            other => panic!("expected a range error, got {other:?}"),
        }
        let mut b = random_block(&mut rng, 4);
        // A large negative entry on the identifier column cancels the identifier.
        b.values.set(3, 3, -key.layers[0].a_v[3]);
        assert!(matches!(obfuscate_block(&b, &key, &mut rng), Err(Error::OutOfCalibratedRange { row: 3, .. })));
    }

    #[test]
    fn zeroed_identifier_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let key = key(&mut rng);
        let c = obfuscate_block(&random_block(&mut rng, 8), &key, &mut rng).unwrap();
        let lk = &key.layers[0];
        let mut x = lk.s.transpose().matmul(&c.keys).unwrap();
        let col = (0..16).max_by(|&a, &b| x.get(2, a).abs().partial_cmp(&x.get(2, b).abs()).unwrap()).unwrap();
        x.set(2, col, 0.0);
        let mut tampered = c.clone();
        tampered.keys = lk.s.matmul(&x).unwrap();
        match deobfuscate_block(&tampered, &key) {
            Err(Error::Corruption { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected corruption, got {other:?}"),
        }
    }

    #[test]
    fn unfused_roundtrip_returns_plaintext_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let key = key(&mut rng);
        // Bounded so that K·M1 stays under θ = 1.
        let mut b = random_block(&mut rng, 6);
        b.keys = b.keys.scale(0.25);
        b.values = b.values.scale(0.25);
        let c = obfuscate_block_unfused(&b, &key, &mut rng).unwrap();
        let d = deobfuscate_block_unfused(&c, &key).unwrap();
        for (r, &slot) in d.slot_map.mapping().iter().enumerate() {
            for col in 0..16 {
                assert!((d.block.keys.get(r, col) - b.keys.get(slot, col)).abs() < 1e-10);
            }
        }
    }
}
