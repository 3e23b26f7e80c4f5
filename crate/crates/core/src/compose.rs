//! Compositional embedding table: a small codebook of meta-embeddings and a
//! frozen two-per-row assignment from entities to meta-embeddings.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{LeReader, LeWriter, MAX_LEN};
use crate::error::{argument, Error, Result};
use crate::matrix::{axpy, Matrix};
use crate::partition::PartitionLabels;

/// Dense `c x d` table of meta-embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    weights: Matrix,
}

impl Codebook {
    pub fn new(weights: Matrix) -> Result<Self> {
        if weights.rows() < 2 || weights.cols() < 1 {
            return Err(argument(format!(
                "codebook must be at least 2x1, got {}x{}",
                weights.rows(),
                weights.cols()
            )));
        }
        if !weights.is_finite() {
            return Err(argument("codebook contains non-finite entries"));
        }
        Ok(Self { weights })
    }

    /// Uniform initialization in `[-a, a]` with `a = sqrt(6 / (c + d))`.
    pub fn uniform(c: usize, d: usize, seed: u64) -> Result<Self> {
        let bound = (6.0 / (c + d) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * d).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self::new(Matrix::from_vec(c, d, data)?)
    }

    pub fn c(&self) -> usize {
        self.weights.rows()
    }

    pub fn d(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    pub fn into_weights(self) -> Matrix {
        self.weights
    }
}

/// Sparse `N x c` assignment with exactly two logical nonzeros per row:
/// `anchor_weight` at the anchor column and `1 - anchor_weight` at the
/// auxiliary column.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    c: usize,
    anchor: Vec<u32>,
    aux: Vec<u32>,
    anchor_weight: f64,
}

const ASSIGNMENT_MAGIC: &[u8; 8] = b"LERGASGN";
const ASSIGNMENT_VERSION: u32 = 1;

impl AssignmentMatrix {
    pub fn new(c: usize, anchor: Vec<u32>, aux: Vec<u32>, anchor_weight: f64) -> Result<Self> {
        if c == 0 {
            return Err(argument("assignment needs at least one column"));
        }
        if anchor.len() != aux.len() {
            return Err(Error::DimensionMismatch {
                context: "assignment index arrays",
                expected: anchor.len(),
                actual: aux.len(),
            });
        }
        // Weight 1 is accepted so the anchor-only composition can be exercised.
        if !(anchor_weight > 0.0 && anchor_weight <= 1.0) {
            return Err(argument(format!("anchor weight {anchor_weight} outside (0, 1]")));
        }
        for (p, (&a, &q)) in anchor.iter().zip(&aux).enumerate() {
            if a as usize >= c || q as usize >= c {
                return Err(argument(format!("entity {p}: meta index out of range for c = {c}")));
            }
            if a == q && c > 1 {
                return Err(argument(format!("entity {p}: anchor and auxiliary coincide")));
            }
        }
        Ok(Self {
            c,
            anchor,
            aux,
            anchor_weight,
        })
    }

    pub fn n(&self) -> usize {
        self.anchor.len()
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn anchor(&self) -> &[u32] {
        &self.anchor
    }

    pub fn aux(&self) -> &[u32] {
        &self.aux
    }

    pub fn anchor_weight(&self) -> f64 {
        self.anchor_weight
    }

    pub fn aux_weight(&self) -> f64 {
        1.0 - self.anchor_weight
    }

    /// Rows for the listed entities, in order.
    pub fn restrict(&self, entities: &[usize]) -> AssignmentMatrix {
        AssignmentMatrix {
            c: self.c,
            anchor: entities.iter().map(|&p| self.anchor[p]).collect(),
            aux: entities.iter().map(|&p| self.aux[p]).collect(),
            anchor_weight: self.anchor_weight,
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.n())
            .map(|p| {
                let mut row = vec![0.0; self.c];
                row[self.anchor[p] as usize] += self.anchor_weight;
                row[self.aux[p] as usize] += self.aux_weight();
                row
            })
            .collect()
    }

    /// Adjoint of [`infer_full_table`]: `S^T * grad_rows`.
    pub fn scatter_adjoint(&self, grad_rows: &Matrix) -> Result<Matrix> {
        if grad_rows.rows() != self.n() {
            return Err(Error::DimensionMismatch {
                context: "assignment adjoint rows",
                expected: self.n(),
                actual: grad_rows.rows(),
            });
        }
        let mut out = Matrix::zeros(self.c, grad_rows.cols());
        let (wa, wq) = (self.anchor_weight, self.aux_weight());
        for p in 0..self.n() {
            let g = grad_rows.row(p);
            axpy(out.row_mut(self.anchor[p] as usize), wa, g);
            axpy(out.row_mut(self.aux[p] as usize), wq, g);
        }
        Ok(out)
    }

    /// Layout: magic, version u32, N u64, c u64, anchor weight f64, then N
    /// anchor u32 and N auxiliary u32.
    pub fn write_to(&self, w: impl Write) -> Result<()> {
        let mut w = LeWriter::new(w);
        w.bytes(ASSIGNMENT_MAGIC)?;
        w.u32(ASSIGNMENT_VERSION)?;
        w.u64(self.n() as u64)?;
        w.u64(self.c as u64)?;
        w.f64(self.anchor_weight)?;
        for &a in &self.anchor {
            w.u32(a)?;
        }
        for &q in &self.aux {
            w.u32(q)?;
        }
        w.finish()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = LeReader::new(r, "assignment");
        r.magic(ASSIGNMENT_MAGIC)?;
        r.version(ASSIGNMENT_VERSION)?;
        let n = r.len("N", MAX_LEN)?;
        let c = r.len("c", u32::MAX as u64)?;
        let w = r.f64()?;
        let anchor = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let aux = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        r.expect_eof()?;
        Self::new(c, anchor, aux, w).map_err(|e| r.format_error(e.to_string()))
    }
}

/// Anchor = partition label; auxiliary drawn uniformly from the other
/// `c - 1` meta-embeddings.
pub fn init_assignment(parts: &PartitionLabels, c: usize, anchor_weight: f64, seed: u64) -> Result<AssignmentMatrix> {
    if !(anchor_weight > 0.0 && anchor_weight < 1.0) {
        return Err(argument(format!("anchor weight {anchor_weight} outside (0, 1)")));
    }
    if parts.num_parts() != c {
        return Err(Error::DimensionMismatch {
            context: "partition count vs codebook size",
            expected: c,
            actual: parts.num_parts(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchor = parts.labels().to_vec();
    let aux = anchor
        .iter()
        .map(|&label| {
            if c == 1 {
                return label;
            }
            let draw = rng.gen_range(0..c as u32 - 1);
            if draw >= label {
                draw + 1
            } else {
                draw
            }
        })
        .collect();
    AssignmentMatrix::new(c, anchor, aux, anchor_weight)
}

/// `S * meta` as a per-row gather-scale-add.
pub fn infer_full_table(s: &AssignmentMatrix, meta: &Matrix) -> Result<Matrix> {
    if meta.rows() != s.c() {
        return Err(Error::DimensionMismatch {
            context: "assignment columns vs codebook rows",
            expected: s.c(),
            actual: meta.rows(),
        });
    }
    let (wa, wq) = (s.anchor_weight(), s.aux_weight());
    let mut out = Matrix::zeros(s.n(), meta.cols());
    for p in 0..s.n() {
        let row = out.row_mut(p);
        let (a, q) = (meta.row(s.anchor[p] as usize), meta.row(s.aux[p] as usize));
        for ((o, x), y) in row.iter_mut().zip(a).zip(q) {
            *o = wa * x + wq * y;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(c: usize, l: Vec<u32>) -> PartitionLabels {
        PartitionLabels::new(l, c).unwrap()
    }

    #[test]
    fn init_assignment_weights_and_sparsity() {
        let parts = labels(4, vec![0, 1, 2, 3, 0, 1]);
        let s = init_assignment(&parts, 4, 0.9, 11).unwrap();
        assert_eq!(s.anchor(), parts.labels());
        let dense = s.to_dense();
        let nonzeros: usize = dense.iter().map(|r| r.iter().filter(|&&v| v != 0.0).count()).sum();
        assert_eq!(nonzeros, 2 * 6);
        for (p, row) in dense.iter().enumerate() {
            assert_eq!(row[s.anchor()[p] as usize], 0.9);
            assert!((row[s.aux()[p] as usize] - 0.1).abs() < 1e-15);
            assert_eq!(row.iter().sum::<f64>(), 0.9 + (1.0 - 0.9));
        }
    }

    #[test]
    fn two_columns_force_the_complement() {
        let parts = labels(2, vec![0, 1, 0]);
        let s = init_assignment(&parts, 2, 0.9, 3).unwrap();
        assert_eq!(s.aux(), &[1, 0, 1]);
    }

    #[test]
    fn init_is_deterministic() {
        let parts = labels(5, (0..50).map(|p| p % 5).collect());
        assert_eq!(
            init_assignment(&parts, 5, 0.9, 9).unwrap(),
            init_assignment(&parts, 5, 0.9, 9).unwrap()
        );
        assert!(init_assignment(&parts, 5, 1.0, 9).is_err());
    }

    #[test]
    fn composed_row_by_hand() {
        let meta = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let s = AssignmentMatrix::new(2, vec![0], vec![1], 0.9).unwrap();
        let full = infer_full_table(&s, &meta).unwrap();
        assert_eq!(full.row(0), &[0.9, 1.0 - 0.9]);

        let anchor_only = AssignmentMatrix::new(2, vec![1, 0], vec![0, 1], 1.0).unwrap();
        let full = infer_full_table(&anchor_only, &meta).unwrap();
        assert_eq!(full.row(0), meta.row(1));
        assert_eq!(full.row(1), meta.row(0));
    }

    #[test]
    fn colliding_entities_get_identical_rows() {
        let meta = Matrix::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.5], vec![1.0, 1.0]]).unwrap();
        let s = AssignmentMatrix::new(3, vec![2, 2], vec![0, 0], 0.9).unwrap();
        let full = infer_full_table(&s, &meta).unwrap();
        assert_eq!(full.row(0), full.row(1));
    }

    #[test]
    fn dimension_mismatch() {
        let meta = Matrix::zeros(3, 2);
        let s = AssignmentMatrix::new(2, vec![0], vec![1], 0.9).unwrap();
        assert!(matches!(
            infer_full_table(&s, &meta),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn assignment_binary_layout() {
        let s = AssignmentMatrix::new(3, vec![0, 2], vec![1, 0], 0.9).unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"LERGASGN");
        assert_eq!(buf.len(), 8 + 4 + 8 + 8 + 8 + 2 * 4 * 2);
        assert_eq!(u64::from_le_bytes(buf[12..20].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(buf[28..36].try_into().unwrap()), 0.9);
        assert_eq!(AssignmentMatrix::read_from(&buf[..]).unwrap(), s);
        assert!(AssignmentMatrix::read_from(&buf[..buf.len() - 1]).is_err());
    }
}
