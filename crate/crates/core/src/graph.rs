//! Interaction ingestion, the bipartite interaction graph and dataset splits.
//!
//! Entity IDs share one contiguous space: users occupy `[0, num_users)` and
//! item `i` is entity `num_users + i`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{argument, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionFormat {
    TsvPairs,
    CsvPairs,
}

impl std::str::FromStr for InteractionFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" | "tsv_pairs" => Ok(Self::TsvPairs),
            "csv" | "csv_pairs" => Ok(Self::CsvPairs),
            other => Err(Error::Config(format!("unknown interaction format '{other}'"))),
        }
    }
}

/// Deduplicated binary user-item interactions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionDataset {
    pub num_users: usize,
    pub num_items: usize,
    pub pairs: Vec<(u32, u32)>,
    /// Raw tokens in first-appearance order, when loaded from a file.
    #[serde(default)]
    pub user_tokens: Vec<String>,
    #[serde(default)]
    pub item_tokens: Vec<String>,
}

impl InteractionDataset {
    /// Builds a dataset from already-dense IDs, dropping duplicate pairs
    /// while keeping first occurrences in order.
    pub fn new(num_users: usize, num_items: usize, pairs: Vec<(u32, u32)>) -> Result<Self> {
        let mut seen = std::collections::HashSet::with_capacity(pairs.len());
        let mut unique = Vec::with_capacity(pairs.len());
        for (u, i) in pairs {
            if u as usize >= num_users || i as usize >= num_items {
                return Err(argument(format!(
                    "pair ({u}, {i}) outside {num_users} users x {num_items} items"
                )));
            }
            if seen.insert((u, i)) {
                unique.push((u, i));
            }
        }
        Ok(Self {
            num_users,
            num_items,
            pairs: unique,
            user_tokens: Vec::new(),
            item_tokens: Vec::new(),
        })
    }

    /// Total entity count `N`.
    pub fn num_entities(&self) -> usize {
        self.num_users + self.num_items
    }

    #[inline]
    pub fn item_entity(&self, item: u32) -> usize {
        self.num_users + item as usize
    }

    /// Sorted item lists per user.
    pub fn items_by_user(&self) -> Vec<Vec<u32>> {
        items_by_user(self.num_users, &self.pairs)
    }
}

pub(crate) fn items_by_user(num_users: usize, pairs: &[(u32, u32)]) -> Vec<Vec<u32>> {
    let mut lists = vec![Vec::new(); num_users];
    for &(u, i) in pairs {
        lists[u as usize].push(i);
    }
    for list in &mut lists {
        list.sort_unstable();
        list.dedup();
    }
    lists
}

/// Reads one interaction per line. Tokens are mapped to dense IDs in
/// first-appearance order; lines starting with `#` and blank lines are
/// skipped, and columns after the second are ignored.
pub fn load_interactions(path: &Path, format: InteractionFormat) -> Result<InteractionDataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut users: HashMap<String, u32> = HashMap::new();
    let mut items: HashMap<String, u32> = HashMap::new();
    let mut user_tokens = Vec::new();
    let mut item_tokens = Vec::new();
    let mut pairs = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields: Box<dyn Iterator<Item = &str>> = match format {
            InteractionFormat::TsvPairs => Box::new(trimmed.split_whitespace()),
            InteractionFormat::CsvPairs => Box::new(trimmed.split(',').map(str::trim)),
        };
        let (user, item) = match (fields.next(), fields.next()) {
            (Some(u), Some(i)) if !u.is_empty() && !i.is_empty() => (u, i),
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    message: format!("expected a user token and an item token, got '{trimmed}'"),
                })
            }
        };
        let next_user = users.len() as u32;
        let u = *users.entry(user.to_owned()).or_insert_with(|| {
            user_tokens.push(user.to_owned());
            next_user
        });
        let next_item = items.len() as u32;
        let i = *items.entry(item.to_owned()).or_insert_with(|| {
            item_tokens.push(item.to_owned());
            next_item
        });
        pairs.push((u, i));
    }

    if pairs.is_empty() {
        return Err(Error::EmptyDataset(path.to_path_buf()));
    }
    let mut ds = InteractionDataset::new(users.len(), items.len(), pairs)?;
    ds.user_tokens = user_tokens;
    ds.item_tokens = item_tokens;
    log::info!(
        "loaded {} users, {} items, {} unique interactions from {}",
        ds.num_users,
        ds.num_items,
        ds.pairs.len(),
        path.display()
    );
    Ok(ds)
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAdjacency {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<u32>,
    values: Vec<f64>,
}

impl SparseAdjacency {
    /// Builds from raw CSR arrays, checking every structural invariant.
    pub fn from_csr(
        n_rows: usize,
        n_cols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<u32>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_offsets.len() != n_rows + 1 {
            return Err(argument(format!(
                "row_offsets has length {}, expected {}",
                row_offsets.len(),
                n_rows + 1
            )));
        }
        if row_offsets[0] != 0 || *row_offsets.last().unwrap() != col_indices.len() {
            return Err(argument("row_offsets must start at 0 and end at nnz"));
        }
        if col_indices.len() != values.len() {
            return Err(argument("col_indices and values differ in length"));
        }
        for r in 0..n_rows {
            let (lo, hi) = (row_offsets[r], row_offsets[r + 1]);
            if lo > hi || hi > col_indices.len() {
                return Err(argument(format!("row_offsets not monotone at row {r}")));
            }
            let cols = &col_indices[lo..hi];
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return Err(argument(format!("row {r} columns not strictly increasing")));
            }
            if cols.iter().any(|&c| c as usize >= n_cols) {
                return Err(argument(format!("row {r} has a column index >= {n_cols}")));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(argument("non-finite value"));
        }
        Ok(Self {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    /// Builds from unordered `(row, col, value)` entries; duplicates are summed.
    pub fn from_triplets(n_rows: usize, n_cols: usize, entries: &[(u32, u32, f64)]) -> Result<Self> {
        let mut counts = vec![0usize; n_rows + 1];
        for &(r, c, _) in entries {
            if r as usize >= n_rows || c as usize >= n_cols {
                return Err(argument(format!("entry ({r}, {c}) outside {n_rows}x{n_cols}")));
            }
            counts[r as usize + 1] += 1;
        }
        for r in 0..n_rows {
            counts[r + 1] += counts[r];
        }
        let mut cursor = counts.clone();
        let mut slots = vec![(0u32, 0.0f64); entries.len()];
        for &(r, c, v) in entries {
            let at = &mut cursor[r as usize];
            slots[*at] = (c, v);
            *at += 1;
        }
        let mut row_offsets = Vec::with_capacity(n_rows + 1);
        let mut col_indices = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        row_offsets.push(0);
        for r in 0..n_rows {
            let row = &mut slots[counts[r]..counts[r + 1]];
            row.sort_unstable_by_key(|&(c, _)| c);
            for &(c, v) in row.iter() {
                if col_indices.len() > *row_offsets.last().unwrap() && *col_indices.last().unwrap() == c {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_indices.push(c);
                    values.push(v);
                }
            }
            row_offsets.push(col_indices.len());
        }
        Self::from_csr(n_rows, n_cols, row_offsets, col_indices, values)
    }

    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            row_offsets: vec![0; n_rows + 1],
            col_indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n_rows: n,
            n_cols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n as u32).collect(),
            values: vec![1.0; n],
        }
    }

    #[inline]
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    #[inline]
    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    pub fn is_square(&self) -> bool {
        self.n_rows == self.n_cols
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[u32] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn row(&self, r: usize) -> (&[u32], &[f64]) {
        let (lo, hi) = (self.row_offsets[r], self.row_offsets[r + 1]);
        (&self.col_indices[lo..hi], &self.values[lo..hi])
    }

    #[inline]
    pub fn row_nnz(&self, r: usize) -> usize {
        self.row_offsets[r + 1] - self.row_offsets[r]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&(c as u32)) {
            Ok(pos) => vals[pos],
            Err(_) => 0.0,
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n_rows).map(|r| self.row(r).1.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_cols];
        for (&c, &v) in self.col_indices.iter().zip(&self.values) {
            sums[c as usize] += v;
        }
        sums
    }

    pub fn transpose(&self) -> SparseAdjacency {
        let mut counts = vec![0usize; self.n_cols + 1];
        for &c in &self.col_indices {
            counts[c as usize + 1] += 1;
        }
        for c in 0..self.n_cols {
            counts[c + 1] += counts[c];
        }
        let mut cursor = counts.clone();
        let mut col_indices = vec![0u32; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        // Rows are visited in order, so each transposed row comes out sorted.
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let at = &mut cursor[c as usize];
                col_indices[*at] = r as u32;
                values[*at] = v;
                *at += 1;
            }
        }
        SparseAdjacency {
            n_rows: self.n_cols,
            n_cols: self.n_rows,
            row_offsets: counts,
            col_indices,
            values,
        }
    }

    /// Same sparsity pattern with every value replaced by `f(row, col, value)`.
    pub fn map_values(&self, mut f: impl FnMut(usize, usize, f64) -> f64) -> SparseAdjacency {
        let mut out = self.clone();
        for r in 0..self.n_rows {
            for k in self.row_offsets[r]..self.row_offsets[r + 1] {
                out.values[k] = f(r, self.col_indices[k] as usize, self.values[k]);
            }
        }
        out
    }

    /// Keeps entries for which `keep(row, col)` holds.
    pub fn filter(&self, mut keep: impl FnMut(usize, usize) -> bool) -> SparseAdjacency {
        let mut row_offsets = Vec::with_capacity(self.n_rows + 1);
        let mut col_indices = Vec::with_capacity(self.nnz());
        let mut values = Vec::with_capacity(self.nnz());
        row_offsets.push(0);
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                if keep(r, c as usize) {
                    col_indices.push(c);
                    values.push(v);
                }
            }
            row_offsets.push(col_indices.len());
        }
        SparseAdjacency {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            row_offsets,
            col_indices,
            values,
        }
    }

    pub fn is_symmetric(&self) -> bool {
        self.is_square() && self.transpose() == *self
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut dense = vec![vec![0.0; self.n_cols]; self.n_rows];
        for (r, row) in dense.iter_mut().enumerate() {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                row[c as usize] = v;
            }
        }
        dense
    }
}

/// Symmetric binary adjacency over all entities: user `u` and item `i` are
/// linked in both directions for every observed pair.
pub fn build_adjacency(ds: &InteractionDataset) -> SparseAdjacency {
    let n = ds.num_entities();
    let mut entries = Vec::with_capacity(2 * ds.pairs.len());
    for &(u, i) in &ds.pairs {
        let item = ds.item_entity(i) as u32;
        entries.push((u, item, 1.0));
        entries.push((item, u, 1.0));
    }
    SparseAdjacency::from_triplets(n, n, &entries).expect("dataset IDs are validated on construction")
}

/// Scales every stored entry `A[j,k]` by `1/sqrt(deg_row(j) * deg_col(k))`,
/// where degrees are row and column sums. On a symmetric matrix this is
/// `D^{-1/2} A D^{-1/2}`; on a directed one the left factor uses out-degree
/// (row sums) and the right factor in-degree (column sums).
pub fn normalize_symmetric(a: &SparseAdjacency) -> SparseAdjacency {
    let row_deg = a.row_sums();
    let col_deg = a.col_sums();
    a.map_values(|r, c, v| {
        let denom = (row_deg[r] * col_deg[c]).sqrt();
        if denom > 0.0 {
            v / denom
        } else {
            0.0
        }
    })
}

/// Relative sizes of the three splits; normalized before use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub test: f64,
    pub valid: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            test: 0.1,
            valid: 0.1,
        }
    }
}

/// Train/validation/test partition of the observed pairs plus the fixed
/// negative samples attached to each training pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub num_users: usize,
    pub num_items: usize,
    pub train: Vec<(u32, u32)>,
    pub valid: Vec<(u32, u32)>,
    pub test: Vec<(u32, u32)>,
    /// Negatives per training pair; `negatives` is laid out pair-major.
    pub negatives_per_pair: usize,
    pub negatives: Vec<u32>,
}

impl DatasetSplit {
    pub fn num_entities(&self) -> usize {
        self.num_users + self.num_items
    }

    /// The training pairs as a dataset over the full ID space.
    pub fn train_dataset(&self) -> InteractionDataset {
        InteractionDataset {
            num_users: self.num_users,
            num_items: self.num_items,
            pairs: self.train.clone(),
            user_tokens: Vec::new(),
            item_tokens: Vec::new(),
        }
    }

    pub fn negatives_of(&self, train_index: usize) -> &[u32] {
        let k = self.negatives_per_pair;
        &self.negatives[train_index * k..(train_index + 1) * k]
    }
}

/// Per-user stratified random split. Users with fewer than three
/// interactions keep all of them in the training set.
pub fn split_dataset(ds: &InteractionDataset, ratios: SplitRatios, seed: u64) -> Result<DatasetSplit> {
    let SplitRatios { train, test, valid } = ratios;
    if [train, test, valid].iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::Config(format!(
            "split ratios must be nonnegative, got {ratios:?}"
        )));
    }
    let total = train + test + valid;
    if total <= 0.0 {
        return Err(Error::Config("split ratios sum to zero".into()));
    }
    let (test_frac, valid_frac) = (test / total, valid / total);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_user = vec![Vec::new(); ds.num_users];
    for &(u, i) in &ds.pairs {
        by_user[u as usize].push(i);
    }

    let mut out = DatasetSplit {
        num_users: ds.num_users,
        num_items: ds.num_items,
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        negatives_per_pair: 0,
        negatives: Vec::new(),
    };
    for (u, items) in by_user.iter_mut().enumerate() {
        let u = u as u32;
        let n = items.len();
        if n < 3 {
            out.train.extend(items.iter().map(|&i| (u, i)));
            continue;
        }
        items.shuffle(&mut rng);
        let mut n_test = (n as f64 * test_frac).round() as usize;
        let mut n_valid = (n as f64 * valid_frac).round() as usize;
        // Keep at least one training interaction whenever training is requested.
        while n_test + n_valid >= n && train > 0.0 {
            if n_test >= n_valid && n_test > 0 {
                n_test -= 1;
            } else {
                n_valid -= 1;
            }
        }
        let n_test = n_test.min(n);
        let n_valid = n_valid.min(n - n_test);
        let (test_part, rest) = items.split_at(n_test);
        let (valid_part, train_part) = rest.split_at(n_valid);
        out.test.extend(test_part.iter().map(|&i| (u, i)));
        out.valid.extend(valid_part.iter().map(|&i| (u, i)));
        out.train.extend(train_part.iter().map(|&i| (u, i)));
    }
    Ok(out)
}

/// Attaches `k` uniformly drawn unobserved items to every training pair.
/// "Unobserved" is relative to all observed pairs of the user, across splits.
pub fn sample_negatives(split: &DatasetSplit, k: usize, seed: u64) -> Result<DatasetSplit> {
    if k == 0 {
        return Err(argument("negative count must be at least 1"));
    }
    let num_items = split.num_items;
    let all: Vec<(u32, u32)> = split
        .train
        .iter()
        .chain(&split.valid)
        .chain(&split.test)
        .copied()
        .collect();
    let observed = items_by_user(split.num_users, &all);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut negatives = Vec::with_capacity(split.train.len() * k);
    let mut complement_cache: HashMap<u32, Vec<u32>> = HashMap::new();
    for &(u, _) in &split.train {
        let seen = &observed[u as usize];
        if seen.len() >= num_items {
            return Err(Error::Sampling { user: u, num_items });
        }
        if seen.len() * 2 > num_items {
            // Dense users: draw from the explicit complement.
            let complement = complement_cache.entry(u).or_insert_with(|| {
                (0..num_items as u32)
                    .filter(|i| seen.binary_search(i).is_err())
                    .collect()
            });
            for _ in 0..k {
                negatives.push(complement[rng.gen_range(0..complement.len())]);
            }
        } else {
            for _ in 0..k {
                loop {
                    let cand = rng.gen_range(0..num_items as u32);
                    if seen.binary_search(&cand).is_err() {
                        negatives.push(cand);
                        break;
                    }
                }
            }
        }
    }
    Ok(DatasetSplit {
        negatives_per_pair: k,
        negatives,
        ..split.clone()
    })
}

/// Reusable breadth-first scratch space for repeated hop queries.
#[derive(Debug, Clone)]
pub struct HopScratch {
    stamp: Vec<u32>,
    epoch: u32,
    frontier: Vec<u32>,
    next: Vec<u32>,
}

impl HopScratch {
    pub fn new(n: usize) -> Self {
        Self {
            stamp: vec![0; n],
            epoch: 0,
            frontier: Vec::new(),
            next: Vec::new(),
        }
    }

    fn bump(&mut self) {
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.stamp.iter_mut().for_each(|s| *s = 0);
            self.epoch = 1;
        }
    }

    /// Entities reachable from `j` by walks of at most `hops` steps over the
    /// stored entries of `a`, excluding `j` itself. Sorted ascending.
    pub fn within_hops(&mut self, a: &SparseAdjacency, j: usize, hops: usize) -> Vec<u32> {
        self.bump();
        let epoch = self.epoch;
        self.stamp[j] = epoch;
        self.frontier.clear();
        self.frontier.push(j as u32);
        let mut reached = Vec::new();
        for _ in 0..hops {
            self.next.clear();
            for &v in &self.frontier {
                for &w in a.row(v as usize).0 {
                    if self.stamp[w as usize] != epoch {
                        self.stamp[w as usize] = epoch;
                        self.next.push(w);
                        reached.push(w);
                    }
                }
            }
            if self.next.is_empty() {
                break;
            }
            std::mem::swap(&mut self.frontier, &mut self.next);
        }
        reached.sort_unstable();
        reached
    }
}

/// Support of row `j` of the `t`-step reachability of `a` (walks of length
/// at most `t`), excluding `j`. Computed by bounded BFS.
pub fn multi_hop_row(a: &SparseAdjacency, j: usize, t: usize) -> Result<Vec<u32>> {
    if !a.is_square() {
        return Err(argument("multi-hop rows need a square adjacency"));
    }
    if t == 0 {
        return Err(argument("hop count must be at least 1"));
    }
    if j >= a.n_rows() {
        return Err(argument(format!("entity {j} out of range for {} rows", a.n_rows())));
    }
    Ok(HopScratch::new(a.n_rows()).within_hops(a, j, t))
}
