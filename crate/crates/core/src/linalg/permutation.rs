use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row permutation: `apply_rows(X)[i] = X[mapping[i]]`, i.e. the matrix with
/// a one at `(i, mapping[i])`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl Permutation {
    pub fn identity(size: usize) -> Self {
        Self { mapping: (0..size).collect() }
    }

    pub fn from_mapping(mapping: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; mapping.len()];
        for &m in &mapping {
            if m >= mapping.len() || std::mem::replace(&mut seen[m], true) {
                return Err(Error::InvalidDimension(format!("{mapping:?} is not a bijection")));
            }
        }
        Ok(Self { mapping })
    }

    /// Uniform permutation by Fisher–Yates shuffle over the given stream.
    pub fn sample<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidDimension("permutation of size 0".into()));
        }
        let mut mapping: Vec<usize> = (0..size).collect();
        mapping.shuffle(rng);
        Ok(Self { mapping })
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.iter().enumerate().all(|(i, &m)| i == m)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.mapping.len()];
        for (i, &m) in self.mapping.iter().enumerate() {
            inv[m] = i;
        }
        Self { mapping: inv }
    }

    /// `self · other` as matrices: applying the result equals applying
    /// `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::DimensionMismatch(format!(
                "composing permutations of size {} and {}",
                self.len(),
                other.len()
            )));
        }
        Ok(Self { mapping: self.mapping.iter().map(|&i| other.mapping[i]).collect() })
    }

    pub fn apply_rows<T: Scalar>(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.rows() != self.len() {
            return Err(Error::DimensionMismatch(format!(
                "permutation of size {} applied to {} rows",
                self.len(),
                x.rows()
            )));
        }
        let mut data = Vec::with_capacity(x.data().len());
        for &src in &self.mapping {
            data.extend_from_slice(x.row(src));
        }
        Matrix::new(x.rows(), x.cols(), data)
    }

    pub fn to_matrix<T: Scalar>(&self) -> Matrix<T> {
        let n = self.len();
        Matrix::from_fn(n, n, |r, c| if self.mapping[r] == c { T::one() } else { T::zero() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn size_one_is_identity() {
        let p = Permutation::sample(1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(p.is_identity());
    }

    #[test]
    fn deterministic_given_seed() {
        let a = Permutation::sample(16, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = Permutation::sample(16, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn apply_rows_matches_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Permutation::sample(5, &mut rng).unwrap();
        let x = Matrix::from_fn(5, 3, |r, c| (r * 3 + c) as f64);
        let via_matrix = p.to_matrix::<f64>().matmul(&x).unwrap();
        assert_eq!(p.apply_rows(&x).unwrap(), via_matrix);
        let back = p.apply_rows(&p.inverse().apply_rows(&x).unwrap()).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Permutation::from_mapping(vec![0, 0, 1]).is_err());
        assert!(Permutation::from_mapping(vec![0, 3]).is_err());
        let p = Permutation::identity(3);
        assert!(matches!(p.apply_rows(&Matrix::<f64>::zeros(4, 2)), Err(Error::DimensionMismatch(_))));
    }
}
