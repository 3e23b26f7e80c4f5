//! Parameter-free layer propagation with layer-mean readout.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::SparseAdjacency;
use crate::matrix::{axpy, Matrix};

/// Rows handed to one rayon task in the sparse-dense kernel.
const ROWS_PER_TASK: usize = 64;

/// `out = a * x`, parallel over output rows.
pub fn spmm(a: &SparseAdjacency, x: &Matrix) -> Matrix {
    debug_assert_eq!(a.n_cols(), x.rows());
    let mut out = Matrix::zeros(a.n_rows(), x.cols());
    if x.cols() == 0 {
        return out;
    }
    out.par_rows_mut()
        .with_min_len(ROWS_PER_TASK)
        .enumerate()
        .for_each(|(r, row)| {
            let (cols, vals) = a.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                axpy(row, v, x.row(c as usize));
            }
        });
    out
}

/// Normalized propagation matrix together with its transpose, which the
/// backward pass traverses. Symmetric matrices share one copy.
#[derive(Debug, Clone)]
pub struct PropagationOperator {
    forward: SparseAdjacency,
    adjoint: Option<SparseAdjacency>,
}

impl PropagationOperator {
    pub fn new(a_hat: SparseAdjacency) -> Result<Self> {
        if !a_hat.is_square() {
            return Err(Error::DimensionMismatch {
                context: "propagation matrix columns",
                expected: a_hat.n_rows(),
                actual: a_hat.n_cols(),
            });
        }
        let t = a_hat.transpose();
        let adjoint = if t == a_hat { None } else { Some(t) };
        Ok(Self {
            forward: a_hat,
            adjoint,
        })
    }

    pub fn matrix(&self) -> &SparseAdjacency {
        &self.forward
    }

    pub fn transpose(&self) -> &SparseAdjacency {
        self.adjoint.as_ref().unwrap_or(&self.forward)
    }

    pub fn n(&self) -> usize {
        self.forward.n_rows()
    }

    fn check(&self, x: &Matrix) -> Result<()> {
        if x.rows() != self.n() {
            return Err(Error::DimensionMismatch {
                context: "propagation input rows",
                expected: self.n(),
                actual: x.rows(),
            });
        }
        Ok(())
    }

    /// `(1 / (L + 1)) * sum_{l=0..L} A^l * h0`.
    pub fn forward(&self, h0: &Matrix, layers: usize) -> Result<Matrix> {
        self.check(h0)?;
        Ok(layer_mean(&self.forward, h0, layers))
    }

    /// `(1 / (L + 1)) * sum_{l=0..L} (A^T)^l * grad`, the adjoint of [`Self::forward`].
    pub fn backward(&self, grad: &Matrix, layers: usize) -> Result<Matrix> {
        self.check(grad)?;
        Ok(layer_mean(self.transpose(), grad, layers))
    }
}

fn layer_mean(a: &SparseAdjacency, h0: &Matrix, layers: usize) -> Matrix {
    let mut acc = h0.clone();
    let mut h = h0.clone();
    for _ in 0..layers {
        h = spmm(a, &h);
        acc.add_scaled(&h, 1.0);
    }
    acc.scale(1.0 / (layers + 1) as f64);
    acc
}

pub fn propagate(a_hat: &SparseAdjacency, h0: &Matrix, layers: usize) -> Result<Matrix> {
    if !a_hat.is_square() || a_hat.n_rows() != h0.rows() {
        return Err(Error::DimensionMismatch {
            context: "propagation input rows",
            expected: a_hat.n_cols(),
            actual: h0.rows(),
        });
    }
    Ok(layer_mean(a_hat, h0, layers))
}

pub fn propagate_backward(a_hat: &SparseAdjacency, grad: &Matrix, layers: usize) -> Result<Matrix> {
    if !a_hat.is_square() || a_hat.n_rows() != grad.rows() {
        return Err(Error::DimensionMismatch {
            context: "propagation gradient rows",
            expected: a_hat.n_rows(),
            actual: grad.rows(),
        });
    }
    Ok(layer_mean(&a_hat.transpose(), grad, layers))
}

/// Multiply-accumulate count of `layers` propagation steps: one per stored
/// nonzero per embedding column per layer.
pub fn count_macs(a_hat: &SparseAdjacency, d: usize, layers: usize) -> u64 {
    macs_for_nnz(a_hat.nnz() as u64, d as u64, layers as u64)
}

pub fn macs_for_nnz(nnz: u64, d: u64, layers: u64) -> u64 {
    layers * nnz * d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_layers_is_identity() {
        let a = SparseAdjacency::from_triplets(2, 2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let h0 = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(propagate(&a, &h0, 0).unwrap(), h0);
        assert_eq!(propagate_backward(&a, &h0, 0).unwrap(), h0);
    }

    #[test]
    fn identity_is_a_fixed_point() {
        let h0 = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 4.0], vec![0.0, 1.0]]).unwrap();
        let out = propagate(&SparseAdjacency::identity(3), &h0, 3).unwrap();
        for (x, y) in out.as_slice().iter().zip(h0.as_slice()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn two_node_swap() {
        let a = SparseAdjacency::from_triplets(2, 2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let h0 = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let out = propagate(&a, &h0, 1).unwrap();
        assert_eq!(out, Matrix::from_rows(&[vec![0.5, 0.0], vec![0.5, 0.0]]).unwrap());
    }

    #[test]
    fn symmetric_adjoint_matches_forward() {
        let a = SparseAdjacency::from_triplets(3, 3, &[(0, 1, 0.5), (1, 0, 0.5), (1, 2, 0.25), (2, 1, 0.25)]).unwrap();
        let g = Matrix::from_rows(&[vec![1.0], vec![-2.0], vec![3.0]]).unwrap();
        assert_eq!(propagate(&a, &g, 2).unwrap(), propagate_backward(&a, &g, 2).unwrap());
    }

    #[test]
    fn mac_counts() {
        let a = SparseAdjacency::from_triplets(2, 2, &[(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0)]).unwrap();
        assert_eq!(count_macs(&a, 2, 1), 8);
        assert_eq!(macs_for_nnz(2 * 26_069_309, 128, 1), 6_673_743_104);
    }

    #[test]
    fn rejects_shape_mismatch() {
        let a = SparseAdjacency::identity(3);
        assert!(propagate(&a, &Matrix::zeros(2, 1), 1).is_err());
        assert!(PropagationOperator::new(SparseAdjacency::zeros(2, 3)).is_err());
    }
}
