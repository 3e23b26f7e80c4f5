//! Contribution-based entity retention and graph rewiring.
//!
//! Entities are ranked by how much their propagated embedding contributes
//! to all pairwise affinities, the top share is kept, and edges into pruned
//! entities are removed. Rows left empty are reconnected to retained
//! entities a few hops away.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{LeReader, LeWriter, MAX_LEN};
use crate::error::{argument, Error, Result};
use crate::graph::{HopScratch, SparseAdjacency};
use crate::matrix::{dot, Matrix};

const REWIRED_MAGIC: &[u8; 8] = b"LERGRWGR";
const REWIRED_VERSION: u32 = 1;

/// Default hop limit for reconnecting emptied rows.
pub const DEFAULT_MAX_HOPS: usize = 4;

/// `s_j = <H[j], sum_k H[k]>`, the summed affinity of entity `j` with every
/// entity (itself included).
pub fn contribution_scores(h: &Matrix) -> Vec<f64> {
    let mut total = vec![0.0; h.cols()];
    for j in 0..h.rows() {
        for (t, x) in total.iter_mut().zip(h.row(j)) {
            *t += x;
        }
    }
    (0..h.rows()).map(|j| dot(h.row(j), &total)).collect()
}

/// Number of retained entities for a retention ratio, `floor(ratio * n)`
/// but at least one.
pub fn retained_count(ratio: f64, n: usize) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(argument(format!("retention ratio {ratio} outside (0, 1]")));
    }
    if n == 0 {
        return Err(argument("no entities to retain"));
    }
    // The epsilon absorbs products like 0.29 * 100 = 28.999999999999996.
    let m = (ratio * n as f64 + 1e-9).floor() as usize;
    Ok(m.clamp(1, n))
}

/// Which entities survive pruning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionPlan {
    n: usize,
    retained: Vec<u32>,
    pruned: Vec<u32>,
    /// Contribution scores the plan was built from; empty when the plan was
    /// reconstructed from a retention mask.
    scores: Vec<f64>,
}

impl RetentionPlan {
    /// Plan from a per-entity retention mask.
    pub fn from_mask(mask: &[bool]) -> Result<Self> {
        let retained: Vec<u32> = (0..mask.len() as u32).filter(|&j| mask[j as usize]).collect();
        if retained.is_empty() {
            return Err(argument("retention mask keeps no entity"));
        }
        let pruned = (0..mask.len() as u32).filter(|&j| !mask[j as usize]).collect();
        Ok(Self {
            n: mask.len(),
            retained,
            pruned,
            scores: Vec::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.retained.len()
    }

    pub fn retention_ratio(&self) -> f64 {
        self.m() as f64 / self.n as f64
    }

    /// Retained entity IDs, ascending.
    pub fn retained(&self) -> &[u32] {
        &self.retained
    }

    /// Pruned entity IDs, ascending.
    pub fn pruned(&self) -> &[u32] {
        &self.pruned
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n];
        for &j in &self.retained {
            mask[j as usize] = true;
        }
        mask
    }
}

/// Keeps the `m` highest-scoring entities (ties go to the smaller ID).
///
/// This is the optimum of the relaxed selection program `max s.x` subject
/// to `sum x = m`, `0 <= x <= 1`: a top-`m` selection is integral, so any
/// rounding boundary `o` in `[0, 1)` reproduces it exactly.
pub fn select_retained(scores: &[f64], m: usize, rounding_boundary: f64) -> Result<RetentionPlan> {
    let n = scores.len();
    if m == 0 || m > n {
        return Err(argument(format!("cannot retain {m} of {n} entities")));
    }
    if !(0.0..1.0).contains(&rounding_boundary) {
        return Err(argument(format!(
            "rounding boundary {rounding_boundary} outside [0, 1)"
        )));
    }
    if let Some(j) = scores.iter().position(|s| !s.is_finite()) {
        return Err(argument(format!("score of entity {j} is not finite")));
    }
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_by(|&a, &b| scores[b as usize].total_cmp(&scores[a as usize]).then(a.cmp(&b)));

    // The relaxed solution is the indicator of the top m; round it.
    let mut x = vec![0.0; n];
    for &j in &order[..m] {
        x[j as usize] = 1.0;
    }
    let mask: Vec<bool> = x.iter().map(|&v| v > rounding_boundary).collect();
    let mut plan = RetentionPlan::from_mask(&mask)?;
    plan.scores = scores.to_vec();
    Ok(plan)
}

/// Drops every stored entry whose column is a pruned entity.
pub fn prune_columns(a: &SparseAdjacency, plan: &RetentionPlan) -> Result<SparseAdjacency> {
    if a.n_cols() != plan.n() {
        return Err(Error::DimensionMismatch {
            context: "adjacency columns vs plan entities",
            expected: plan.n(),
            actual: a.n_cols(),
        });
    }
    let mask = plan.mask();
    Ok(a.filter(|_, col| mask[col]))
}

/// Column-pruned adjacency with emptied rows reconnected.
#[derive(Debug, Clone, PartialEq)]
pub struct RewiredGraph {
    adjacency: SparseAdjacency,
    retained: Vec<bool>,
    /// `(entity, hops)` for every row that was reconnected.
    fill_hops: Vec<(u32, u8)>,
}

impl RewiredGraph {
    pub fn adjacency(&self) -> &SparseAdjacency {
        &self.adjacency
    }

    pub fn retained_mask(&self) -> &[bool] {
        &self.retained
    }

    pub fn plan(&self) -> Result<RetentionPlan> {
        RetentionPlan::from_mask(&self.retained)
    }

    pub fn fill_hops(&self) -> &[(u32, u8)] {
        &self.fill_hops
    }

    /// Entities whose row is empty.
    pub fn empty_rows(&self) -> Vec<u32> {
        (0..self.adjacency.n_rows() as u32)
            .filter(|&j| self.adjacency.row_nnz(j as usize) == 0)
            .collect()
    }

    /// Layout: magic, version u32, N u64, nnz u64, row offsets u64 x (N + 1),
    /// column indices u32 x nnz, values f32 x nnz, then the retention mask as
    /// a bitmap of `ceil(N / 8)` bytes (entity `j` is bit `j % 8` of byte
    /// `j / 8`, least significant first).
    pub fn write_to(&self, w: impl Write) -> Result<()> {
        let a = &self.adjacency;
        let mut w = LeWriter::new(w);
        w.bytes(REWIRED_MAGIC)?;
        w.u32(REWIRED_VERSION)?;
        w.u64(a.n_rows() as u64)?;
        w.u64(a.nnz() as u64)?;
        for &o in a.row_offsets() {
            w.u64(o as u64)?;
        }
        for &c in a.col_indices() {
            w.u32(c)?;
        }
        for &v in a.values() {
            w.f32(v as f32)?;
        }
        let mut bitmap = vec![0u8; a.n_rows().div_ceil(8)];
        for (j, _) in self.retained.iter().enumerate().filter(|(_, &keep)| keep) {
            bitmap[j / 8] |= 1 << (j % 8);
        }
        w.bytes(&bitmap)?;
        w.finish()?;
        Ok(())
    }

    /// Reads a graph written by [`Self::write_to`]. Fill depths are not
    /// stored and come back empty.
    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = LeReader::new(r, "rewired graph");
        r.magic(REWIRED_MAGIC)?;
        r.version(REWIRED_VERSION)?;
        let n = r.len("N", u32::MAX as u64)?;
        let nnz = r.len("nnz", MAX_LEN)?;
        let offsets = (0..=n)
            .map(|_| r.u64().map(|o| o as usize))
            .collect::<Result<Vec<_>>>()?;
        let cols = (0..nnz).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let values = (0..nnz).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
        let mut bitmap = vec![0u8; n.div_ceil(8)];
        r.fill(&mut bitmap)?;
        r.expect_eof()?;
        let adjacency =
            SparseAdjacency::from_csr(n, n, offsets, cols, values).map_err(|e| r.format_error(e.to_string()))?;
        let retained: Vec<bool> = (0..n).map(|j| bitmap[j / 8] >> (j % 8) & 1 == 1).collect();
        if !retained.iter().any(|&k| k) {
            return Err(r.format_error("retention bitmap is empty"));
        }
        Ok(Self {
            adjacency,
            retained,
            fill_hops: Vec::new(),
        })
    }
}

/// Prunes columns of pruned entities, then reconnects every empty row `j`
/// to the retained entities within `t` hops of `j` in the original graph,
/// for the smallest `t` in `2..=max_hops` that reaches any. Reconnected
/// entries have weight 1. Rows with no retained entity in reach stay empty.
pub fn rewire(a: &SparseAdjacency, plan: &RetentionPlan, max_hops: usize) -> Result<RewiredGraph> {
    if !a.is_square() {
        return Err(argument("rewiring needs a square adjacency"));
    }
    if max_hops > u8::MAX as usize {
        return Err(argument(format!("max_hops {max_hops} exceeds {}", u8::MAX)));
    }
    let pruned = prune_columns(a, plan)?;
    let mask = plan.mask();
    let n = a.n_rows();

    let fills: Vec<Option<(u8, Vec<u32>)>> = (0..n)
        .into_par_iter()
        .map_init(
            || HopScratch::new(n),
            |scratch, j| {
                if pruned.row_nnz(j) > 0 {
                    return None;
                }
                (2..=max_hops).find_map(|t| {
                    let reach: Vec<u32> = scratch
                        .within_hops(a, j, t)
                        .into_iter()
                        .filter(|&k| mask[k as usize])
                        .collect();
                    (!reach.is_empty()).then_some((t as u8, reach))
                })
            },
        )
        .collect();

    let mut offsets = Vec::with_capacity(n + 1);
    let mut cols = Vec::with_capacity(pruned.nnz());
    let mut values = Vec::with_capacity(pruned.nnz());
    let mut fill_hops = Vec::new();
    offsets.push(0);
    for (j, fill) in fills.into_iter().enumerate() {
        match fill {
            Some((t, reach)) => {
                fill_hops.push((j as u32, t));
                values.extend(std::iter::repeat_n(1.0, reach.len()));
                cols.extend(reach);
            }
            None => {
                let (c, v) = pruned.row(j);
                cols.extend_from_slice(c);
                values.extend(v.iter().map(|x| x.signum()));
            }
        }
        offsets.push(cols.len());
    }
    let adjacency = SparseAdjacency::from_csr(n, n, offsets, cols, values)?;
    Ok(RewiredGraph {
        adjacency,
        retained: mask,
        fill_hops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn star(leaves: usize) -> SparseAdjacency {
        let mut e = Vec::new();
        for k in 1..=leaves as u32 {
            e.push((0, k, 1.0));
            e.push((k, 0, 1.0));
        }
        SparseAdjacency::from_triplets(leaves + 1, leaves + 1, &e).unwrap()
    }

    #[test]
    fn scores_match_dense_affinity_sums() {
        let h = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.5, 2.0], vec![-1.0, 1.0]]).unwrap();
        let s = contribution_scores(&h);
        for (j, &got) in s.iter().enumerate() {
            let expect: f64 = (0..3).map(|k| dot(h.row(j), h.row(k))).sum();
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn selection_breaks_ties_by_id() {
        let plan = select_retained(&[1.0, 3.0, 3.0, 0.5], 2, 0.5).unwrap();
        assert_eq!(plan.retained(), &[1, 2]);
        assert_eq!(plan.pruned(), &[0, 3]);
        let plan = select_retained(&[2.0, 2.0, 2.0], 2, 0.0).unwrap();
        assert_eq!(plan.retained(), &[0, 1]);
        assert!(select_retained(&[1.0], 1, 1.0).is_err());
        assert!(select_retained(&[1.0], 2, 0.5).is_err());
        assert!(select_retained(&[f64::NAN], 1, 0.5).is_err());
    }

    #[test]
    fn retained_counts() {
        assert_eq!(retained_count(0.7, 116_198).unwrap(), 81_338);
        assert_eq!(retained_count(0.29, 100).unwrap(), 29);
        assert_eq!(retained_count(0.01, 10).unwrap(), 1);
        assert_eq!(retained_count(1.0, 7).unwrap(), 7);
        assert!(retained_count(0.0, 7).is_err());
        assert!(retained_count(1.5, 7).is_err());
    }

    #[test]
    fn pruning_the_hub_of_a_star_reconnects_leaves_at_two_hops() {
        // Hub 0 with leaves 1..=4; pruning the hub empties every leaf row.
        let a = star(4);
        let plan = RetentionPlan::from_mask(&[false, true, true, true, true]).unwrap();
        let g = rewire(&a, &plan, 4).unwrap();
        let adj = g.adjacency();
        for leaf in 1..=4usize {
            let expect: Vec<u32> = (1..=4).filter(|&k| k != leaf as u32).collect();
            assert_eq!(adj.row(leaf).0, expect.as_slice());
            assert!(adj.row(leaf).1.iter().all(|&v| v == 1.0));
        }
        // The hub row keeps its retained neighbours.
        assert_eq!(adj.row(0).0, &[1, 2, 3, 4]);
        assert_eq!(g.fill_hops(), &[(1, 2), (2, 2), (3, 2), (4, 2)]);
        assert!(g.empty_rows().is_empty());
    }

    #[test]
    fn unreachable_rows_stay_empty() {
        // Path 0-1-2-3-4-5 with only 5 retained: row 0 needs five hops.
        let e: Vec<(u32, u32, f64)> = (0..5u32).flat_map(|k| [(k, k + 1, 1.0), (k + 1, k, 1.0)]).collect();
        let a = SparseAdjacency::from_triplets(6, 6, &e).unwrap();
        let plan = RetentionPlan::from_mask(&[false, false, false, false, false, true]).unwrap();
        let g = rewire(&a, &plan, 4).unwrap();
        assert_eq!(g.adjacency().row(4).0, &[5]);
        assert_eq!(g.adjacency().row(3).0, &[5]);
        assert_eq!(g.adjacency().row(1).0, &[5]);
        assert_eq!(g.adjacency().row_nnz(0), 0);
        assert_eq!(g.empty_rows(), vec![0, 5]);
        let hops: Vec<u8> = g.fill_hops().iter().map(|&(_, t)| t).collect();
        assert_eq!(hops, vec![4, 3, 2]);
    }

    #[test]
    fn full_retention_keeps_the_graph() {
        let a = star(3);
        let plan = RetentionPlan::from_mask(&[true; 4]).unwrap();
        let g = rewire(&a, &plan, 4).unwrap();
        assert_eq!(g.adjacency(), &a);
        assert!(g.fill_hops().is_empty());
    }

    #[test]
    fn serialization_round_trip() {
        let a = star(9);
        let mut mask = vec![true; 10];
        mask[0] = false;
        mask[7] = false;
        let plan = RetentionPlan::from_mask(&mask).unwrap();
        let g = rewire(&a, &plan, 4).unwrap();
        let mut buf = Vec::new();
        g.write_to(&mut buf).unwrap();
        let nnz = g.adjacency().nnz();
        assert_eq!(buf.len(), 8 + 4 + 8 + 8 + 8 * 11 + 4 * nnz + 4 * nnz + 2);
        assert_eq!(&buf[buf.len() - 2..], &[0b0111_1110, 0b0000_0011]);
        let back = RewiredGraph::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.adjacency(), g.adjacency());
        assert_eq!(back.retained_mask(), g.retained_mask());
        assert_eq!(back.plan().unwrap().retained(), plan.retained());
        buf[0] = b'X';
        assert!(RewiredGraph::read_from(buf.as_slice()).is_err());
    }
}
