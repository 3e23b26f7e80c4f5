//! Balanced k-way partitioning of the interaction graph, used to pick each
//! entity's anchor meta-embedding.
//!
//! Seeds are spread along a breadth-first ordering of the graph, regions grow
//! from them in round-robin breadth-first fashion under a size cap, and
//! greedy boundary sweeps then move nodes that strictly reduce the edge cut.
//! Several restarts are run and the lowest cut wins. Externally computed
//! labels (one per line) can be loaded instead.

use std::collections::VecDeque;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{argument, Error, Result};
use crate::graph::SparseAdjacency;

const UNASSIGNED: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionLabels {
    labels: Vec<u32>,
    num_parts: usize,
}

impl PartitionLabels {
    pub fn new(labels: Vec<u32>, num_parts: usize) -> Result<Self> {
        if let Some((p, &l)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= num_parts) {
            return Err(argument(format!("entity {p} has label {l} >= {num_parts}")));
        }
        Ok(Self { labels, num_parts })
    }

    /// Reads one integer label per line, METIS `.part.k` style.
    pub fn from_file(path: &Path, num_parts: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let labels = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                l.trim().parse::<u32>().map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(labels, num_parts)
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn num_parts(&self) -> usize {
        self.num_parts
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_parts];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }

    /// Number of undirected edges whose endpoints carry different labels.
    pub fn edge_cut(&self, a: &SparseAdjacency) -> usize {
        edge_cut(a, &self.labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionConfig {
    /// Allowed imbalance: parts hold at most `ceil(N / c) * (1 + tolerance)` nodes.
    pub tolerance: f64,
    pub restarts: usize,
    pub refine_sweeps: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            tolerance: 0.1,
            restarts: 4,
            refine_sweeps: 8,
        }
    }
}

/// Size cap for `n` nodes in `c` parts.
pub fn part_capacity(n: usize, c: usize, tolerance: f64) -> usize {
    let ideal = n.div_ceil(c);
    ((ideal as f64 * (1.0 + tolerance)).floor() as usize).max(ideal)
}

pub fn partition_entities(a: &SparseAdjacency, c: usize, seed: u64) -> Result<PartitionLabels> {
    partition_with(a, c, &PartitionConfig::default(), seed)
}

pub fn partition_with(a: &SparseAdjacency, c: usize, cfg: &PartitionConfig, seed: u64) -> Result<PartitionLabels> {
    let n = a.n_rows();
    if !a.is_square() {
        return Err(argument("partitioning needs a square adjacency"));
    }
    if c == 0 || c > n {
        return Err(argument(format!("cannot split {n} entities into {c} parts")));
    }
    if cfg.tolerance.is_nan() || cfg.tolerance < 0.0 {
        return Err(argument("balance tolerance must be nonnegative"));
    }
    let cap = part_capacity(n, c, cfg.tolerance);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut best: Option<(usize, Vec<u32>)> = None;
    for _ in 0..cfg.restarts.max(1) {
        let start = rng.gen_range(0..n);
        let mut labels = grow_regions(a, c, cap, start);
        refine(a, &mut labels, c, cap, cfg.refine_sweeps, &mut rng);
        let cut = edge_cut(a, &labels);
        if best.as_ref().is_none_or(|(b, _)| cut < *b) {
            best = Some((cut, labels));
        }
    }
    let (cut, labels) = best.expect("at least one restart");
    log::debug!("partitioned {n} entities into {c} parts (cap {cap}), edge cut {cut}");
    PartitionLabels::new(labels, c)
}

fn edge_cut(a: &SparseAdjacency, labels: &[u32]) -> usize {
    let mut cut = 0;
    for r in 0..a.n_rows() {
        for &col in a.row(r).0 {
            if (col as usize) > r && labels[r] != labels[col as usize] {
                cut += 1;
            }
        }
    }
    cut
}

/// Breadth-first order over every component, restarting at the lowest
/// unvisited node whenever a component is exhausted.
fn bfs_order(a: &SparseAdjacency, start: usize) -> Vec<u32> {
    let n = a.n_rows();
    let mut seen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = VecDeque::new();
    let mut next_root = 0;
    let mut root = start;
    loop {
        if !seen[root] {
            seen[root] = true;
            queue.push_back(root as u32);
            while let Some(v) = queue.pop_front() {
                order.push(v);
                for &w in a.row(v as usize).0 {
                    if !seen[w as usize] {
                        seen[w as usize] = true;
                        queue.push_back(w);
                    }
                }
            }
        }
        while next_root < n && seen[next_root] {
            next_root += 1;
        }
        if next_root == n {
            break;
        }
        root = next_root;
    }
    order
}

fn grow_regions(a: &SparseAdjacency, c: usize, cap: usize, start: usize) -> Vec<u32> {
    let n = a.n_rows();
    let order = bfs_order(a, start);
    let mut labels = vec![UNASSIGNED; n];
    let mut sizes = vec![0usize; c];
    let mut queues: Vec<VecDeque<u32>> = vec![VecDeque::new(); c];
    let mut assigned = 0;

    let claim = |v: usize, p: usize, labels: &mut [u32], sizes: &mut [usize], queue: &mut VecDeque<u32>| {
        labels[v] = p as u32;
        sizes[p] += 1;
        queue.extend(a.row(v).0.iter().copied());
    };

    for p in 0..c {
        let seed = order[p * n / c] as usize;
        claim(seed, p, &mut labels, &mut sizes, &mut queues[p]);
        assigned += 1;
    }

    let mut cursor = 0;
    while assigned < n {
        let mut progressed = false;
        for p in 0..c {
            if assigned == n {
                break;
            }
            if sizes[p] >= cap {
                continue;
            }
            let mut claimed = false;
            while let Some(v) = queues[p].pop_front() {
                if labels[v as usize] == UNASSIGNED {
                    claim(v as usize, p, &mut labels, &mut sizes, &mut queues[p]);
                    claimed = true;
                    break;
                }
            }
            if !claimed {
                // Region exhausted its component: jump to the next unassigned node.
                while labels[order[cursor] as usize] != UNASSIGNED {
                    cursor += 1;
                }
                claim(order[cursor] as usize, p, &mut labels, &mut sizes, &mut queues[p]);
            }
            assigned += 1;
            progressed = true;
        }
        assert!(progressed, "capacity {cap} x {c} parts cannot hold {n} nodes");
    }
    labels
}

/// Greedy boundary moves: each node moves to the neighboring part with the
/// largest strict cut reduction that has room, never emptying its own part.
fn refine(a: &SparseAdjacency, labels: &mut [u32], c: usize, cap: usize, sweeps: usize, rng: &mut ChaCha8Rng) {
    let n = a.n_rows();
    let mut sizes = vec![0usize; c];
    for &l in labels.iter() {
        sizes[l as usize] += 1;
    }
    let mut conn = vec![0.0f64; c];
    let mut touched: Vec<usize> = Vec::new();
    let mut visit: Vec<usize> = (0..n).collect();

    for _ in 0..sweeps {
        visit.shuffle(rng);
        let mut moves = 0;
        for &v in &visit {
            let own = labels[v] as usize;
            if sizes[own] <= 1 {
                continue;
            }
            let (cols, vals) = a.row(v);
            for (&w, &x) in cols.iter().zip(vals) {
                if w as usize == v {
                    continue;
                }
                let p = labels[w as usize] as usize;
                if conn[p] == 0.0 {
                    touched.push(p);
                }
                conn[p] += x;
            }
            let mut target = None;
            let mut best_gain = 0.0;
            for &p in &touched {
                if p == own || sizes[p] >= cap {
                    continue;
                }
                let gain = conn[p] - conn[own];
                if gain > best_gain || (gain == best_gain && gain > 0.0 && Some(p) < target) {
                    best_gain = gain;
                    target = Some(p);
                }
            }
            for &p in &touched {
                conn[p] = 0.0;
            }
            touched.clear();
            if let Some(p) = target {
                labels[v] = p as u32;
                sizes[own] -= 1;
                sizes[p] += 1;
                moves += 1;
            }
        }
        if moves == 0 {
            break;
        }
    }
}
