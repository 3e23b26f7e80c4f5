//! Randomized invariants checked against dense or brute-force oracles.

#![allow(clippy::needless_range_loop)]

use lerg_core::compose::{infer_full_table, AssignmentMatrix};
use lerg_core::graph::{
    build_adjacency, multi_hop_row, normalize_symmetric, sample_negatives, split_dataset, InteractionDataset,
    SparseAdjacency, SplitRatios,
};
use lerg_core::partition::{part_capacity, partition_with, PartitionConfig};
use lerg_core::placeholder::kmeans;
use lerg_core::propagate::PropagationOperator;
use lerg_core::quant::{dequantize, quantize, storage_bytes, BitWidth, QuantizedCodebook};
use lerg_core::rewire::{contribution_scores, rewire, select_retained, RetentionPlan, RewiredGraph};
use lerg_core::Matrix;
use proptest::prelude::*;

fn dataset() -> impl Strategy<Value = InteractionDataset> {
    (2usize..8, 2usize..8)
        .prop_flat_map(|(u, i)| {
            (
                Just(u),
                Just(i),
                prop::collection::vec((0..u as u32, 0..i as u32), 1..(u * i).max(2)),
            )
        })
        .prop_map(|(u, i, pairs)| InteractionDataset::new(u, i, pairs).unwrap())
}

fn square_matrix(max_n: usize) -> impl Strategy<Value = SparseAdjacency> {
    (2usize..max_n).prop_flat_map(|n| {
        prop::collection::vec(prop::bool::weighted(0.3), n * n).prop_map(move |bits| {
            let entries: Vec<(u32, u32, f64)> = bits
                .iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(k, _)| ((k / n) as u32, (k % n) as u32, 1.0))
                .collect();
            SparseAdjacency::from_triplets(n, n, &entries).unwrap()
        })
    })
}

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-scale..scale, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

/// Boolean reachability within `t` steps, excluding the start.
fn dense_reach(a: &SparseAdjacency, j: usize, t: usize) -> Vec<u32> {
    let d = a.to_dense();
    let n = d.len();
    let mut reached = vec![false; n];
    let mut frontier = vec![false; n];
    frontier[j] = true;
    for _ in 0..t {
        let mut next = vec![false; n];
        for v in 0..n {
            if frontier[v] {
                for w in 0..n {
                    if d[v][w] != 0.0 {
                        next[w] = true;
                    }
                }
            }
        }
        for w in 0..n {
            reached[w] |= next[w];
        }
        frontier = next;
    }
    (0..n as u32)
        .filter(|&w| reached[w as usize] && w as usize != j)
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adjacency_is_symmetric_binary_bipartite(ds in dataset()) {
        let a = build_adjacency(&ds);
        prop_assert!(a.is_symmetric());
        prop_assert!(a.values().iter().all(|&v| v == 1.0));
        let mut pairs = ds.pairs.clone();
        pairs.sort();
        pairs.dedup();
        prop_assert_eq!(a.nnz(), 2 * pairs.len());
        for &(u, i) in &pairs {
            prop_assert_eq!(a.get(u as usize, ds.num_users + i as usize), 1.0);
        }
    }

    #[test]
    fn normalization_matches_dense_formula(a in square_matrix(9)) {
        let dense = a.to_dense();
        let n = dense.len();
        let rows: Vec<f64> = dense.iter().map(|r| r.iter().sum()).collect();
        let cols: Vec<f64> = (0..n).map(|k| dense.iter().map(|r| r[k]).sum()).collect();
        let norm = normalize_symmetric(&a).to_dense();
        for j in 0..n {
            for k in 0..n {
                let expect = if dense[j][k] == 0.0 { 0.0 } else { dense[j][k] / (rows[j] * cols[k]).sqrt() };
                prop_assert!((norm[j][k] - expect).abs() < 1e-15);
                prop_assert!((0.0..=1.0).contains(&norm[j][k]));
            }
        }
    }

    #[test]
    fn propagation_backward_is_the_adjoint(a in square_matrix(9), layers in 0usize..4, seed in any::<u64>()) {
        let n = a.n_rows();
        let op = PropagationOperator::new(normalize_symmetric(&a)).unwrap();
        let mut state = seed;
        let mut draw = || { state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5 };
        let x = Matrix::from_vec(n, 2, (0..2 * n).map(|_| draw()).collect()).unwrap();
        let y = Matrix::from_vec(n, 2, (0..2 * n).map(|_| draw()).collect()).unwrap();
        let lhs = op.forward(&x, layers).unwrap().dot(&y);
        let rhs = x.dot(&op.backward(&y, layers).unwrap());
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn quantization_error_is_bounded(e in matrix(3, 5, 2.0), steps in prop::collection::vec(1e-3f64..0.5, 3), bits in prop::sample::select(vec![4u8, 8, 16])) {
        let bits = BitWidth::try_from(bits).unwrap();
        let q = quantize(&e, &steps, bits).unwrap();
        prop_assert!(q.grid().iter().all(|&g| g >= bits.q_min() && g <= bits.q_max()));
        let back = dequantize(&q);
        for j in 0..3 {
            for k in 0..5 {
                let z = e.get(j, k) / steps[j];
                if z >= bits.q_min() as f64 && z <= bits.q_max() as f64 {
                    prop_assert!((back.get(j, k) - e.get(j, k)).abs() <= steps[j] / 2.0 + 1e-12);
                }
            }
        }
        let stored = q.with_f32_steps().unwrap();
        let mut buf = Vec::new();
        stored.write_to(&mut buf).unwrap();
        let bytes = match bits { BitWidth::Four => 8, BitWidth::Eight => 15, BitWidth::Sixteen => 30 };
        prop_assert_eq!(buf.len(), 8 + 4 + 8 + 8 + 1 + 4 * 3 + bytes);
        prop_assert_eq!(QuantizedCodebook::read_from(buf.as_slice()).unwrap(), stored);
    }

    #[test]
    fn composition_matches_dense_product(
        c in 2usize..6,
        rows in prop::collection::vec((0u32..100, 1u32..100), 1..12),
        w in 0.05f64..0.999,
        meta_seed in prop::collection::vec(-1.0f64..1.0, 6 * 3),
    ) {
        let anchor: Vec<u32> = rows.iter().map(|&(a, _)| a % c as u32).collect();
        let aux: Vec<u32> = rows.iter().zip(&anchor).map(|(&(_, o), &a)| (a + 1 + o % (c as u32 - 1)) % c as u32).collect();
        let s = AssignmentMatrix::new(c, anchor, aux, w).unwrap();
        let meta = Matrix::from_vec(c, 3, meta_seed[..c * 3].to_vec()).unwrap();
        let dense = s.to_dense();
        let out = infer_full_table(&s, &meta).unwrap();
        for (p, row) in dense.iter().enumerate() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert_eq!(row.iter().filter(|&&x| x != 0.0).count(), 2);
            for k in 0..3 {
                let expect: f64 = (0..c).map(|t| row[t] * meta.get(t, k)).sum();
                prop_assert!((out.get(p, k) - expect).abs() < 1e-12);
            }
        }
        let adj = s.scatter_adjoint(&out).unwrap();
        for t in 0..c {
            for k in 0..3 {
                let expect: f64 = (0..s.n()).map(|p| dense[p][t] * out.get(p, k)).sum();
                prop_assert!((adj.get(t, k) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn selection_is_the_integer_optimum(scores in prop::collection::vec(-5i32..5, 1..10), pick in 0usize..10, o in 0.0f64..0.999) {
        let n = scores.len();
        let m = pick % n + 1;
        let s: Vec<f64> = scores.iter().map(|&x| x as f64).collect();
        let plan = select_retained(&s, m, o).unwrap();
        prop_assert_eq!(plan.m(), m);
        let achieved: f64 = plan.retained().iter().map(|&j| s[j as usize]).sum();
        let best = (0u32..1 << n)
            .filter(|mask| mask.count_ones() as usize == m)
            .map(|mask| (0..n).filter(|&j| mask >> j & 1 == 1).map(|j| s[j]).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(achieved, best);
        let mut all: Vec<u32> = plan.retained().iter().chain(plan.pruned()).copied().collect();
        all.sort();
        prop_assert_eq!(all, (0..n as u32).collect::<Vec<_>>());
    }

    #[test]
    fn contribution_scores_are_affinity_row_sums(h in matrix(6, 3, 1.0)) {
        let s = contribution_scores(&h);
        for j in 0..6 {
            let expect: f64 = (0..6).map(|k| h.row(j).iter().zip(h.row(k)).map(|(a, b)| a * b).sum::<f64>()).sum();
            prop_assert!((s[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_hop_rows_match_dense_reachability(a in square_matrix(10), t in 1usize..5) {
        for j in 0..a.n_rows() {
            prop_assert_eq!(multi_hop_row(&a, j, t).unwrap(), dense_reach(&a, j, t));
        }
    }

    #[test]
    fn rewiring_matches_reachability_oracle(ds in dataset(), keep in prop::collection::vec(any::<bool>(), 16), max_hops in 2usize..5) {
        let a = build_adjacency(&ds);
        let n = a.n_rows();
        let mut mask: Vec<bool> = keep[..n.min(16)].to_vec();
        mask.resize(n, true);
        if !mask.iter().any(|&k| k) {
            mask[0] = true;
        }
        let plan = RetentionPlan::from_mask(&mask).unwrap();
        let g = rewire(&a, &plan, max_hops).unwrap();
        for j in 0..n {
            let kept: Vec<u32> = a.row(j).0.iter().copied().filter(|&k| mask[k as usize]).collect();
            let expect = if !kept.is_empty() {
                kept
            } else {
                (2..=max_hops)
                    .map(|t| dense_reach(&a, j, t).into_iter().filter(|&k| mask[k as usize]).collect::<Vec<_>>())
                    .find(|r| !r.is_empty())
                    .unwrap_or_default()
            };
            prop_assert_eq!(g.adjacency().row(j).0, expect.as_slice());
            prop_assert!(g.adjacency().row(j).1.iter().all(|&v| v == 1.0));
        }
        let mut buf = Vec::new();
        g.write_to(&mut buf).unwrap();
        let back = RewiredGraph::read_from(buf.as_slice()).unwrap();
        prop_assert_eq!(back.adjacency(), g.adjacency());
        prop_assert_eq!(back.retained_mask(), mask.as_slice());
    }

    #[test]
    fn kmeans_objective_never_increases(points in matrix(30, 2, 10.0), r in 1usize..8, seed in any::<u64>()) {
        let km = kmeans(&points, r, seed, 100).unwrap();
        for w in km.objective.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
        }
        prop_assert!(km.assignment.iter().all(|&k| (k as usize) < r));
    }

    #[test]
    fn partitions_respect_capacity(ds in dataset(), c in 1usize..5, seed in any::<u64>()) {
        let a = build_adjacency(&ds);
        let n = a.n_rows();
        let c = c.min(n);
        let p = partition_with(&a, c, &PartitionConfig::default(), seed).unwrap();
        let cap = part_capacity(n, c, 0.1);
        prop_assert!(p.sizes().iter().all(|&s| s >= 1 && s <= cap));
        prop_assert_eq!(p.labels().len(), n);
    }

    #[test]
    fn splits_cover_pairs_and_negatives_are_unobserved(ds in dataset(), seed in any::<u64>()) {
        let split = split_dataset(&ds, SplitRatios::default(), seed).unwrap();
        let Ok(split) = sample_negatives(&split, 2, seed) else {
            // Some user interacted with every item.
            return Ok(());
        };
        let mut all: Vec<(u32, u32)> = split.train.iter().chain(&split.valid).chain(&split.test).copied().collect();
        all.sort();
        let mut expect = ds.pairs.clone();
        expect.sort();
        expect.dedup();
        prop_assert_eq!(&all, &expect);
        for (t, &(u, _)) in split.train.iter().enumerate() {
            for &neg in split.negatives_of(t) {
                prop_assert!(expect.binary_search(&(u, neg)).is_err());
            }
        }
        for u in 0..ds.num_users as u32 {
            let has_any = expect.iter().any(|p| p.0 == u);
            let has_train = split.train.iter().any(|p| p.0 == u);
            prop_assert_eq!(has_any, has_train);
        }
    }

    #[test]
    fn storage_is_additive(c in 1u64..5000, d in 1u64..256, n in 1u64..1_000_000, frac in 0.0f64..=1.0, r in 0u64..1000) {
        let m = (n as f64 * frac) as u64;
        for bits in [4u32, 8, 16, 32] {
            let s = storage_bytes(c, d, bits, r, n, m).unwrap();
            prop_assert_eq!(s.codebook, (c * (bits as u64 * d + 32)).div_ceil(8));
            prop_assert_eq!(s.total, s.codebook + 8 * n + 4 * r * d + 4 * (n - m));
        }
    }
}
