use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// A batch of point sets sharing the ambient dimension `d`. Each set is an
/// `N × d` matrix whose rows are the points of an empirical measure; `N`
/// may differ between sets.
#[derive(Clone, Debug, PartialEq)]
pub struct SetBatch {
    dim: usize,
    sets: Vec<Matrix>,
}

impl SetBatch {
    pub fn new(dim: usize, sets: Vec<Matrix>) -> Result<Self> {
        for (i, s) in sets.iter().enumerate() {
            if s.cols() != dim {
                return Err(Error::dim(format!(
                    "set {i} has points in R^{}, batch is R^{dim}",
                    s.cols()
                )));
            }
            if s.rows() == 0 {
                return Err(Error::usage(format!("set {i} is empty")));
            }
        }
        Ok(SetBatch { dim, sets })
    }

    pub fn single(set: Matrix) -> Result<Self> {
        SetBatch::new(set.cols(), vec![set])
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn sets(&self) -> &[Matrix] {
        &self.sets
    }

    pub fn get(&self, i: usize) -> &Matrix {
        &self.sets[i]
    }

    pub fn total_points(&self) -> usize {
        self.sets.iter().map(Matrix::rows).sum()
    }

    pub fn into_sets(self) -> Vec<Matrix> {
        self.sets
    }

    /// Sub-batch made of the listed sets.
    pub fn select(&self, idx: &[usize]) -> SetBatch {
        SetBatch {
            dim: self.dim,
            sets: idx.iter().map(|&i| self.sets[i].clone()).collect(),
        }
    }

    /// Every set replaced by `k` concatenated copies of itself.
    pub fn duplicated(&self, k: usize) -> SetBatch {
        SetBatch {
            dim: self.dim,
            sets: self.sets.iter().map(|s| duplicate_set(s, k)).collect(),
        }
    }
}

/// `k` stacked copies of `set` (the map Δ_k on point tuples).
pub fn duplicate_set(set: &Matrix, k: usize) -> Matrix {
    Matrix::vstack(std::iter::repeat(set).take(k)).expect("copies share a width")
}
