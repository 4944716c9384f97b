//! Factorizations on `f64` matrices: Householder QR, LU inversion and a
//! one-sided Jacobi SVD used for minimum-norm least squares.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Matrix;
use crate::error::{Error, Result};

/// Householder QR of an `m × n` matrix with `m ≥ n`.
///
/// Returns the thin factors `Q` (`m × n`, orthonormal columns) and `R`
/// (`n × n`, upper triangular).
pub fn householder_qr(a: &Matrix<f64>) -> Result<(Matrix<f64>, Matrix<f64>)> {
    let (m, n) = a.shape();
    if m < n || n == 0 {
        return Err(Error::InvalidDimension(format!("QR needs m >= n >= 1, got {m}x{n}")));
    }
    let mut r = a.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let mut v: Vec<f64> = (k..m).map(|i| r.get(i, k)).collect();
        let alpha = crate::scalar::norm(&v);
        let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
        v[0] += sign * alpha;
        let vnorm = crate::scalar::norm(&v);
        if vnorm > 0.0 {
            for x in &mut v {
                *x /= vnorm;
            }
            for j in k..n {
                let s: f64 = (k..m).map(|i| v[i - k] * r.get(i, j)).sum();
                for i in k..m {
                    r.set(i, j, r.get(i, j) - 2.0 * v[i - k] * s);
                }
            }
        }
        reflectors.push(v);
    }
    // Accumulate Q = H_0 H_1 ... H_{n-1} applied to the first n columns of I.
    let mut q = Matrix::from_fn(m, n, |i, j| if i == j { 1.0 } else { 0.0 });
    for k in (0..n).rev() {
        let v = &reflectors[k];
        for j in 0..n {
            let s: f64 = (k..m).map(|i| v[i - k] * q.get(i, j)).sum();
            for i in k..m {
                q.set(i, j, q.get(i, j) - 2.0 * v[i - k] * s);
            }
        }
    }
    let r = Matrix::from_fn(n, n, |i, j| if j >= i { r.get(i, j) } else { 0.0 });
    Ok((q, r))
}

/// Samples a Haar-distributed orthogonal `n × n` matrix: QR of an i.i.d.
/// standard-normal matrix with the signs of `R`'s diagonal folded into `Q`.
pub fn sample_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Matrix<f64>> {
    if n == 0 {
        return Err(Error::InvalidDimension("orthogonal matrix of size 0".into()));
    }
    let g = Matrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let (mut q, r) = householder_qr(&g)?;
    for j in 0..n {
        if r.get(j, j) < 0.0 {
            for i in 0..n {
                q.set(i, j, -q.get(i, j));
            }
        }
    }
    Ok(q)
}

/// Inverse of a square matrix by LU with partial pivoting.
pub fn invert(a: &Matrix<f64>) -> Result<Matrix<f64>> {
    let (n, c) = a.shape();
    if n != c {
        return Err(Error::DimensionMismatch(format!("cannot invert a {n}x{c} matrix")));
    }
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    let mut lu = a.clone();
    let mut inv = Matrix::<f64>::identity(n);
    for k in 0..n {
        let (piv, pval) = (k..n)
            .map(|i| (i, lu.get(i, k).abs()))
            .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pval <= scale * 1e-13 {
            return Err(Error::SingularMatrix(format!("pivot {k} is {pval:e}")));
        }
        if piv != k {
            for j in 0..n {
                let t = lu.get(k, j);
                lu.set(k, j, lu.get(piv, j));
                lu.set(piv, j, t);
                let t = inv.get(k, j);
                inv.set(k, j, inv.get(piv, j));
                inv.set(piv, j, t);
            }
        }
        let d = lu.get(k, k);
        for i in 0..n {
            if i == k {
                continue;
            }
            let f = lu.get(i, k) / d;
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                lu.set(i, j, lu.get(i, j) - f * lu.get(k, j));
                inv.set(i, j, inv.get(i, j) - f * inv.get(k, j));
            }
        }
    }
    for i in 0..n {
        let d = lu.get(i, i);
        for j in 0..n {
            inv.set(i, j, inv.get(i, j) / d);
        }
    }
    Ok(inv)
}

/// Thin singular value decomposition `A = U Σ Vᵀ`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix<f64>,
    pub sigma: Vec<f64>,
    pub v: Matrix<f64>,
}

/// One-sided Jacobi SVD. Works for any shape; wide inputs are transposed
/// internally.
pub fn svd(a: &Matrix<f64>) -> Result<Svd> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Err(Error::InvalidDimension(format!("SVD of a {m}x{n} matrix")));
    }
    if m < n {
        let t = svd(&a.transpose())?;
        return Ok(Svd { u: t.v, sigma: t.sigma, v: t.u });
    }
    // Work on columns: store Aᵀ row-major so each column is contiguous.
    let mut cols = a.transpose();
    let mut v = Matrix::<f64>::identity(n);
    let eps = f64::EPSILON;
    for _sweep in 0..80 {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let (alpha, beta, gamma) = {
                    let ci = cols.row(i);
                    let cj = cols.row(j);
                    (crate::scalar::dot(ci, ci), crate::scalar::dot(cj, cj), crate::scalar::dot(ci, cj))
                };
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut cols, i, j, c, s);
                rotate_rows_of_transpose(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sigma = Vec::with_capacity(n);
    let mut u = Matrix::zeros(m, n);
    for k in 0..n {
        let s = crate::scalar::norm(cols.row(k));
        sigma.push(s);
        if s > 0.0 {
            for i in 0..m {
                u.set(i, k, cols.get(k, i) / s);
            }
        }
    }
    Ok(Svd { u, sigma, v })
}

fn rotate_rows(m: &mut Matrix<f64>, i: usize, j: usize, c: f64, s: f64) {
    for k in 0..m.cols() {
        let a = m.get(i, k);
        let b = m.get(j, k);
        m.set(i, k, c * a - s * b);
        m.set(j, k, s * a + c * b);
    }
}

fn rotate_rows_of_transpose(v: &mut Matrix<f64>, i: usize, j: usize, c: f64, s: f64) {
    for k in 0..v.rows() {
        let a = v.get(k, i);
        let b = v.get(k, j);
        v.set(k, i, c * a - s * b);
        v.set(k, j, s * a + c * b);
    }
}

impl Svd {
    /// Singular values above `max(m, n) · ε · σ_max`.
    pub fn rank_tolerance(&self) -> f64 {
        let smax = self.sigma.iter().cloned().fold(0.0, f64::max);
        self.u.rows().max(self.v.rows()) as f64 * f64::EPSILON * smax
    }

    pub fn rank(&self) -> usize {
        let tol = self.rank_tolerance();
        self.sigma.iter().filter(|&&s| s > tol).count()
    }

    /// Moore–Penrose pseudo-inverse `V Σ⁺ Uᵀ`.
    pub fn pseudo_inverse(&self) -> Matrix<f64> {
        let tol = self.rank_tolerance();
        let (m, k) = self.u.shape();
        let n = self.v.rows();
        let mut out = Matrix::zeros(n, m);
        for (idx, &s) in self.sigma.iter().enumerate().take(k) {
            if s <= tol {
                continue;
            }
            for r in 0..n {
                let vr = self.v.get(r, idx) / s;
                if vr == 0.0 {
                    continue;
                }
                for c in 0..m {
                    out.set(r, c, out.get(r, c) + vr * self.u.get(c, idx));
                }
            }
        }
        out
    }
}

pub fn rank(a: &Matrix<f64>) -> Result<usize> {
    Ok(svd(a)?.rank())
}

/// Solution of `min ‖A X − B‖_F`.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    pub solution: Matrix<f64>,
    pub rank: usize,
    /// Set when `A` lacks full column rank; `solution` is then the
    /// minimum-norm minimizer.
    pub rank_deficient: bool,
}

/// Least squares through the SVD pseudo-inverse, which yields the
/// minimum-norm solution when `A` is rank deficient.
pub fn solve_least_squares(a: &Matrix<f64>, b: &Matrix<f64>) -> Result<LeastSquares> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Err(Error::InvalidDimension(format!("least squares with a {m}x{n} system")));
    }
    if b.rows() != m {
        return Err(Error::DimensionMismatch(format!(
            "A has {m} rows but B has {}",
            b.rows()
        )));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::InvalidDimension("non-finite least-squares input".into()));
    }
    let decomposition = svd(a)?;
    let rank = decomposition.rank();
    let solution = decomposition.pseudo_inverse().matmul(b)?;
    Ok(LeastSquares { solution, rank, rank_deficient: rank < n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gram_error(q: &Matrix<f64>) -> f64 {
        q.transpose().matmul(q).unwrap().max_abs_diff(&Matrix::identity(q.cols()))
    }

    #[test]
    fn orthogonal_one_by_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = sample_orthogonal(1, &mut rng).unwrap();
        assert_eq!(q.get(0, 0).abs(), 1.0);
    }

    #[test]
    fn orthogonal_is_orthogonal_and_deterministic() {
        for seed in 0..5 {
            let q = sample_orthogonal(8, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!(gram_error(&q) <= 1e-12);
        }
        let a = sample_orthogonal(8, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = sample_orthogonal(8, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn orthogonal_large() {
        let q = sample_orthogonal(256, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(gram_error(&q) <= 1e-12);
    }

    #[test]
    fn orthogonal_rejects_zero() {
        assert!(matches!(
            sample_orthogonal(0, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::InvalidDimension(_))
        ));
    }

    #[test]
    fn inverse_roundtrip_and_singular() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::from_fn(10, 10, |_, _| StandardNormal.sample(&mut rng));
        let inv = invert(&a).unwrap();
        assert!(a.matmul(&inv).unwrap().max_abs_diff(&Matrix::identity(10)) < 1e-10);
        let s = Matrix::new(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(matches!(invert(&s), Err(Error::SingularMatrix(_))));
    }

    #[test]
    fn least_squares_examples() {
        // exact square system
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Matrix::from_fn(6, 6, |_, _| StandardNormal.sample(&mut rng));
        let x0 = Matrix::from_fn(6, 2, |_, _| StandardNormal.sample(&mut rng));
        let b = a.matmul(&x0).unwrap();
        let ls = solve_least_squares(&a, &b).unwrap();
        assert!(ls.solution.max_abs_diff(&x0) < 1e-8);
        assert!(!ls.rank_deficient);

        // mean of residuals
        let a = Matrix::new(2, 1, vec![1.0, 1.0]).unwrap();
        let b = Matrix::new(2, 1, vec![0.0, 2.0]).unwrap();
        let ls = solve_least_squares(&a, &b).unwrap();
        assert!((ls.solution.get(0, 0) - 1.0).abs() < 1e-12);

        // tall full-rank 12x8
        let a = Matrix::from_fn(12, 8, |_, _| StandardNormal.sample(&mut rng));
        let x0 = Matrix::from_fn(8, 3, |_, _| StandardNormal.sample(&mut rng));
        let ls = solve_least_squares(&a, &a.matmul(&x0).unwrap()).unwrap();
        assert!(ls.solution.max_abs_diff(&x0) < 1e-8);
        assert_eq!(ls.rank, 8);
    }

    #[test]
    fn least_squares_rank_deficient_minimum_norm() {
        // x + y = 2 has minimum-norm solution (1, 1).
        let a = Matrix::new(1, 2, vec![1.0, 1.0]).unwrap();
        let b = Matrix::new(1, 1, vec![2.0]).unwrap();
        let ls = solve_least_squares(&a, &b).unwrap();
        assert!(ls.rank_deficient);
        assert!((ls.solution.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((ls.solution.get(1, 0) - 1.0).abs() < 1e-12);

        // duplicated column
        let a = Matrix::new(3, 2, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]).unwrap();
        let b = Matrix::new(3, 1, vec![2.0, 4.0, 6.0]).unwrap();
        let ls = solve_least_squares(&a, &b).unwrap();
        assert_eq!(ls.rank, 1);
        assert!(ls.rank_deficient);
        assert!(ls.solution.max_abs_diff(&Matrix::new(2, 1, vec![1.0, 1.0]).unwrap()) < 1e-12);
    }

    #[test]
    fn svd_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (m, n) in [(7, 4), (4, 7), (5, 5)] {
            let a = Matrix::from_fn(m, n, |_, _| StandardNormal.sample(&mut rng));
            let s = svd(&a).unwrap();
            let k = s.sigma.len();
            let sig = Matrix::from_fn(k, k, |i, j| if i == j { s.sigma[i] } else { 0.0 });
            let rec = s.u.matmul(&sig).unwrap().matmul(&s.v.transpose()).unwrap();
            assert!(rec.max_abs_diff(&a) < 1e-12, "{m}x{n}");
        }
    }
}
