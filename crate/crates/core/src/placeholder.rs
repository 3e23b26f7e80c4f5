//! Shared placeholder embeddings for entities that are no longer
//! propagated: k-means centroids of their pretrained embeddings.

use std::io::{Read, Write};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec::{LeReader, LeWriter, MAX_LEN};
use crate::error::{argument, Result};
use crate::graph::SparseAdjacency;
use crate::matrix::Matrix;
use crate::rewire::RewiredGraph;

const PLACEHOLDER_MAGIC: &[u8; 8] = b"LERGPLHD";
const PLACEHOLDER_VERSION: u32 = 1;

pub const DEFAULT_KMEANS_ITERS: usize = 100;

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means result.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Matrix,
    pub assignment: Vec<u32>,
    /// Within-cluster squared distance after each assignment step.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

fn nearest(centroids: &Matrix, x: &[f64]) -> (u32, f64) {
    let mut best = (0u32, f64::INFINITY);
    for k in 0..centroids.rows() {
        let d = squared_distance(centroids.row(k), x);
        if d < best.1 {
            best = (k as u32, d);
        }
    }
    best
}

fn kmeans_pp_seed(points: &Matrix, r: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = points.rows();
    let mut centroids = Matrix::zeros(r, points.cols());
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut dist: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.row(i), points.row(first)))
        .collect();
    for k in 1..r {
        let pick = match WeightedIndex::new(&dist) {
            Ok(w) => w.sample(rng),
            // Every point coincides with a centroid already.
            Err(_) => (0..n).find(|&i| !chosen[i]).unwrap_or(0),
        };
        chosen[pick] = true;
        centroids.row_mut(k).copy_from_slice(points.row(pick));
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(squared_distance(points.row(i), points.row(pick)));
        }
    }
    centroids
}

/// k-means++ seeding followed by Lloyd iterations until the assignment is
/// stable or `max_iters` passes. An empty cluster is re-seeded with the
/// point farthest from its current centroid.
pub fn kmeans(points: &Matrix, r: usize, seed: u64, max_iters: usize) -> Result<KMeans> {
    let n = points.rows();
    if r == 0 || r > n {
        return Err(argument(format!("cannot form {r} clusters from {n} points")));
    }
    if !points.is_finite() {
        return Err(argument("k-means input contains non-finite values"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_seed(points, r, &mut rng);
    let d = points.cols();
    let mut assignment = vec![u32::MAX; n];
    let mut objective = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let nearest_all: Vec<(u32, f64)> = (0..n)
            .into_par_iter()
            .map(|i| nearest(&centroids, points.row(i)))
            .collect();
        let changed = nearest_all.iter().zip(&assignment).any(|(&(k, _), &old)| k != old);
        for (a, &(k, _)) in assignment.iter_mut().zip(&nearest_all) {
            *a = k;
        }
        let mut dist: Vec<f64> = nearest_all.iter().map(|&(_, d)| d).collect();
        objective.push(dist.iter().sum());
        if !changed {
            break;
        }

        let mut sums = Matrix::zeros(r, d);
        let mut counts = vec![0usize; r];
        for (i, &k) in assignment.iter().enumerate() {
            counts[k as usize] += 1;
            for (s, x) in sums.row_mut(k as usize).iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        for (k, &count) in counts.iter().enumerate() {
            if count > 0 {
                let inv = 1.0 / count as f64;
                for (c, s) in centroids.row_mut(k).iter_mut().zip(sums.row(k)) {
                    *c = s * inv;
                }
            }
        }
        for k in 0..r {
            if counts[k] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| counts[assignment[i] as usize] > 1)
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)));
            if let Some(i) = far {
                counts[assignment[i] as usize] -= 1;
                counts[k] = 1;
                assignment[i] = k as u32;
                dist[i] = 0.0;
                centroids.row_mut(k).copy_from_slice(points.row(i));
            }
        }
        if iterations == max_iters {
            let final_obj = (0..n)
                .map(|i| squared_distance(points.row(i), centroids.row(assignment[i] as usize)))
                .sum();
            objective.push(final_obj);
        }
    }
    Ok(KMeans {
        centroids,
        assignment,
        objective,
        iterations,
    })
}

/// Centroid table plus, for each imputed entity in ascending ID order, the
/// centroid it reads.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaceholderCodebook {
    centroids: Matrix,
    assignment: Vec<u32>,
}

impl PlaceholderCodebook {
    pub fn new(centroids: Matrix, assignment: Vec<u32>) -> Result<Self> {
        if let Some(&k) = assignment.iter().find(|&&k| k as usize >= centroids.rows()) {
            return Err(argument(format!(
                "placeholder index {k} out of range for {} centroids",
                centroids.rows()
            )));
        }
        Ok(Self { centroids, assignment })
    }

    pub fn r(&self) -> usize {
        self.centroids.rows()
    }

    pub fn d(&self) -> usize {
        self.centroids.cols()
    }

    pub fn centroids(&self) -> &Matrix {
        &self.centroids
    }

    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }

    /// Layout: magic, version u32, r u64, d u64, centroids f32 x (r * d),
    /// count u64, assignment u32 x count.
    pub fn write_to(&self, w: impl Write) -> Result<()> {
        let mut w = LeWriter::new(w);
        w.bytes(PLACEHOLDER_MAGIC)?;
        w.u32(PLACEHOLDER_VERSION)?;
        w.u64(self.r() as u64)?;
        w.u64(self.d() as u64)?;
        for &x in self.centroids.as_slice() {
            w.f32(x as f32)?;
        }
        w.u64(self.assignment.len() as u64)?;
        for &k in &self.assignment {
            w.u32(k)?;
        }
        w.finish()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = LeReader::new(r, "placeholder codebook");
        r.magic(PLACEHOLDER_MAGIC)?;
        r.version(PLACEHOLDER_VERSION)?;
        let rows = r.len("r", u32::MAX as u64)?;
        let d = r.len("d", u32::MAX as u64)?;
        if (rows as u64).saturating_mul(d as u64) > MAX_LEN {
            return Err(r.format_error("centroid table too large"));
        }
        let data = (0..rows * d)
            .map(|_| r.f32().map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        let count = r.len("count", MAX_LEN)?;
        let assignment = (0..count).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        r.expect_eof()?;
        let centroids = Matrix::from_vec(rows, d, data).map_err(|e| r.format_error(e.to_string()))?;
        Self::new(centroids, assignment).map_err(|e| r.format_error(e.to_string()))
    }

    /// Same table with centroids rounded through f32, as stored on disk.
    pub fn with_f32_centroids(&self) -> Self {
        let data = self.centroids.as_slice().iter().map(|&x| x as f32 as f64).collect();
        Self {
            centroids: Matrix::from_vec(self.r(), self.d(), data).expect("same shape"),
            assignment: self.assignment.clone(),
        }
    }
}

/// Entities served by placeholders, ascending: every pruned entity plus
/// retained entities that had neighbours in `original` but none after
/// rewiring.
pub fn imputed_entities(original: &SparseAdjacency, rewired: &RewiredGraph) -> Result<Vec<u32>> {
    let a = rewired.adjacency();
    if original.n_rows() != a.n_rows() {
        return Err(crate::error::Error::DimensionMismatch {
            context: "original vs rewired graph rows",
            expected: original.n_rows(),
            actual: a.n_rows(),
        });
    }
    let mask = rewired.retained_mask();
    Ok((0..a.n_rows() as u32)
        .filter(|&j| {
            let j = j as usize;
            !mask[j] || (a.row_nnz(j) == 0 && original.row_nnz(j) > 0)
        })
        .collect())
}

/// Clusters the pretrained rows of the imputed entities into `r` centroids.
/// Logs a warning when fewer than ten entities share a centroid on average.
/// With fewer imputed entities than `r`, one centroid per entity is used.
pub fn cluster_pruned(h_imputed: &Matrix, r: usize, seed: u64, max_iters: usize) -> Result<PlaceholderCodebook> {
    if r == 0 {
        return Err(argument("placeholder count must be at least 1"));
    }
    let count = h_imputed.rows();
    if count == 0 {
        return PlaceholderCodebook::new(Matrix::zeros(0, h_imputed.cols()), Vec::new());
    }
    let r = if r > count {
        log::warn!("only {count} imputed entities; using {count} placeholders instead of {r}");
        count
    } else {
        r
    };
    if r * 10 > count {
        log::warn!("{r} placeholders for {count} imputed entities leaves fewer than 10 entities per centroid");
    }
    let km = kmeans(h_imputed, r, seed, max_iters)?;
    PlaceholderCodebook::new(km.centroids, km.assignment)
}

/// Placeholder row for each imputed entity, in the codebook's order.
pub fn impute_pruned(p: &PlaceholderCodebook) -> Matrix {
    let rows: Vec<usize> = p.assignment.iter().map(|&k| k as usize).collect();
    p.centroids.select_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs() -> Matrix {
        let mut rows = Vec::new();
        for (cx, cy) in [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)] {
            for k in 0..5 {
                let o = k as f64 * 0.1;
                rows.push(vec![cx + o, cy - o]);
            }
        }
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn separates_well_spaced_blobs() {
        let km = kmeans(&blobs(), 3, 7, 100).unwrap();
        for b in 0..3 {
            let label = km.assignment[b * 5];
            assert!(km.assignment[b * 5..b * 5 + 5].iter().all(|&k| k == label));
        }
        let mut labels: Vec<u32> = (0..3).map(|b| km.assignment[b * 5]).collect();
        labels.sort();
        labels.dedup();
        assert_eq!(labels.len(), 3);
    }

    #[test]
    fn objective_never_increases() {
        let km = kmeans(&blobs(), 4, 3, 100).unwrap();
        for w in km.objective.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn one_centroid_per_point_is_exact() {
        let pts = blobs();
        let km = kmeans(&pts, pts.rows(), 1, 100).unwrap();
        assert!(*km.objective.last().unwrap() < 1e-20);
        let imputed = impute_pruned(&PlaceholderCodebook::new(km.centroids, km.assignment).unwrap());
        assert_eq!(imputed, pts);
    }

    #[test]
    fn rejects_bad_cluster_counts() {
        assert!(kmeans(&blobs(), 0, 1, 10).is_err());
        assert!(kmeans(&blobs(), 16, 1, 10).is_err());
    }

    #[test]
    fn duplicate_points_do_not_break_seeding() {
        let pts = Matrix::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        let km = kmeans(&pts, 3, 1, 10).unwrap();
        assert_eq!(*km.objective.last().unwrap(), 0.0);
    }

    #[test]
    fn serialization_round_trip() {
        let p = PlaceholderCodebook::new(
            Matrix::from_rows(&[vec![0.5, -1.25], vec![2.0, 0.0]]).unwrap(),
            vec![1, 0, 1],
        )
        .unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 8 + 8 + 4 * 4 + 8 + 4 * 3);
        assert_eq!(PlaceholderCodebook::read_from(buf.as_slice()).unwrap(), p);
        assert!(PlaceholderCodebook::new(Matrix::zeros(1, 1), vec![1]).is_err());
    }
}
