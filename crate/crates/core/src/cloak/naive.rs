//! The two-sided scheme `K' = S·K·M` without mask or one-time permutation,
//! and the chosen-plaintext attack that recovers it.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub fn obfuscate_naive(keys: &Matrix<f64>, s: &Matrix<f64>, m: &Matrix<f64>) -> Result<Matrix<f64>> {
    let (b, d) = keys.shape();
    if s.shape() != (b, b) || m.shape() != (d, d) {
        return Err(Error::DimensionMismatch(format!(
            "S {:?} and M {:?} for a {b}x{d} block",
            s.shape(),
            m.shape()
        )));
    }
    s.matmul(keys)?.matmul(m)
}

/// Factors recovered by [`cpa_break_naive`]: `Ŝ = S/c`, `M̂ = c·M`.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveredKey {
    pub s: Matrix<f64>,
    pub m: Matrix<f64>,
    pub queries: usize,
}

impl RecoveredKey {
    /// Predicted ciphertext of `keys`.
    pub fn encrypt(&self, keys: &Matrix<f64>) -> Result<Matrix<f64>> {
        obfuscate_naive(keys, &self.s, &self.m)
    }
}

fn unit(rows: usize, cols: usize, r: usize, c: usize) -> Matrix<f64> {
    let mut e = Matrix::zeros(rows, cols);
    e.set(r, c, 1.0);
    e
}

/// Chosen-plaintext recovery from `b + d − 1` standard-basis queries.
///
/// `oracle(E_pq) = S[:,p]·M[q,:]`. Column 0 of `Ŝ` is the unit-norm
/// direction of `oracle(E_00)`; rows of `M̂` follow from `oracle(E_0q)` and
/// the remaining columns of `Ŝ` from `oracle(E_p0)`.
pub fn cpa_break_naive<F>(block_size: usize, head_dim: usize, mut oracle: F) -> Result<RecoveredKey>
where
    F: FnMut(&Matrix<f64>) -> Result<Matrix<f64>>,
{
    let (b, d) = (block_size, head_dim);
    let mut query = |p: usize, q: usize| -> Result<Matrix<f64>> {
        let out = oracle(&unit(b, d, p, q))?;
        if out.shape() != (b, d) {
            return Err(Error::Inconsistency(format!("oracle returned {:?} for a {b}x{d} query", out.shape())));
        }
        if out.frobenius_norm() == 0.0 {
            return Err(Error::Inconsistency(format!("zero response to basis query ({p}, {q})")));
        }
        Ok(out)
    };

    let o00 = query(0, 0)?;
    let column_norm = |m: &Matrix<f64>, c: usize| (0..m.rows()).map(|r| m.get(r, c).powi(2)).sum::<f64>().sqrt();
    let pivot = (0..d)
        .max_by(|&a, &b| column_norm(&o00, a).total_cmp(&column_norm(&o00, b)))
        .expect("head_dim > 0");
    let pivot_norm = column_norm(&o00, pivot);
    let s0: Vec<f64> = (0..b).map(|r| o00.get(r, pivot) / pivot_norm).collect();

    // M̂[q,:] = ŝ0ᵀ·oracle(E_0q)
    let mut m_hat = Matrix::zeros(d, d);
    for q in 0..d {
        let o = if q == 0 { o00.clone() } else { query(0, q)? };
        for c in 0..d {
            m_hat.set(q, c, (0..b).map(|r| s0[r] * o.get(r, c)).sum());
        }
    }
    let m0: Vec<f64> = m_hat.row(0).to_vec();
    let m0_sq: f64 = m0.iter().map(|v| v * v).sum();
    if m0_sq == 0.0 {
        return Err(Error::Inconsistency("recovered first row of M is zero".into()));
    }

    // Ŝ[:,p] = oracle(E_p0)·m̂0ᵀ / ‖m̂0‖²
    let mut s_hat = Matrix::zeros(b, b);
    for p in 0..b {
        let o = if p == 0 { o00.clone() } else { query(p, 0)? };
        for r in 0..b {
            let v: f64 = o.row(r).iter().zip(&m0).map(|(x, y)| x * y).sum();
            s_hat.set(r, p, v / m0_sq);
        }
    }
    Ok(RecoveredKey { s: s_hat, m: m_hat, queries: b + d - 1 })
}
