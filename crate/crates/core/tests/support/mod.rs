//! Dense re-implementation of the training objective and central finite
//! differences over it, used to check analytic gradients.

#![allow(dead_code, clippy::needless_range_loop)]

use lerg_core::compose::AssignmentMatrix;
use lerg_core::graph::{build_adjacency, normalize_symmetric, InteractionDataset};
use lerg_core::propagate::PropagationOperator;
use lerg_core::quant::BitWidth;
use lerg_core::train::{GraphObjective, QatParams, Triplet};
use lerg_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Dense = Vec<Vec<f64>>;

pub fn matmul(a: &Dense, b: &Dense) -> Dense {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for t in 0..k {
            for j in 0..m {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

#[derive(Clone, Copy)]
pub enum Rounding<'a> {
    /// `round(z)` replaced by `z + r`, with `r` frozen per entry.
    Frozen(&'a Dense),
    /// The real rounding.
    Exact,
}

pub struct Problem {
    pub s: Dense,
    pub a_hat: Dense,
    pub layers: usize,
    pub lambda: f64,
    pub triplets: Vec<(usize, usize, usize)>,
    pub q_min: f64,
    pub q_max: f64,
}

impl Problem {
    pub fn quantized(&self, e: &Dense, step: &[f64], rounding: Rounding) -> Dense {
        e.iter()
            .enumerate()
            .map(|(j, row)| {
                row.iter()
                    .enumerate()
                    .map(|(k, &x)| {
                        let z = x / step[j];
                        let level = if z < self.q_min {
                            self.q_min
                        } else if z > self.q_max {
                            self.q_max
                        } else {
                            match rounding {
                                Rounding::Frozen(r) => z + r[j][k],
                                Rounding::Exact => z.round(),
                            }
                        };
                        level * step[j]
                    })
                    .collect()
            })
            .collect()
    }

    pub fn loss(&self, e: &Dense, step: &[f64], rounding: Rounding) -> f64 {
        let h0 = matmul(&self.s, &self.quantized(e, step, rounding));
        let mut acc = h0.clone();
        let mut h = h0.clone();
        for _ in 0..self.layers {
            h = matmul(&self.a_hat, &h);
            for (ra, rh) in acc.iter_mut().zip(&h) {
                for (x, y) in ra.iter_mut().zip(rh) {
                    *x += y;
                }
            }
        }
        let scale = 1.0 / (self.layers + 1) as f64;
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y * scale * scale).sum::<f64>();
        let norm = |a: &[f64]| a.iter().map(|x| x * x).sum::<f64>();
        self.triplets
            .iter()
            .map(|&(u, p, n)| {
                let x = dot(&acc[u], &acc[p]) - dot(&acc[u], &acc[n]);
                (1.0 + (-x).exp()).ln() + self.lambda * (norm(&h0[u]) + norm(&h0[p]) + norm(&h0[n]))
            })
            .sum()
    }
}

pub struct Fixture {
    pub problem: Problem,
    pub operator: PropagationOperator,
    pub assignment: AssignmentMatrix,
    pub triplets: Vec<Triplet>,
}

pub fn fixture(seed: u64, c: usize, layers: usize) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (users, items) = (5usize, 7usize);
    let n = users + items;
    let mut pairs: Vec<(u32, u32)> = (0..users as u32).map(|u| (u, u % items as u32)).collect();
    pairs.extend((0..items as u32).map(|i| (i % users as u32, i)));
    for _ in 0..10 {
        pairs.push((rng.gen_range(0..users as u32), rng.gen_range(0..items as u32)));
    }
    let ds = InteractionDataset::new(users, items, pairs).unwrap();
    let a_hat = normalize_symmetric(&build_adjacency(&ds));
    let anchor: Vec<u32> = (0..n).map(|_| rng.gen_range(0..c as u32)).collect();
    let aux: Vec<u32> = anchor
        .iter()
        .map(|&a| (a + rng.gen_range(1..c as u32)) % c as u32)
        .collect();
    let assignment = AssignmentMatrix::new(c, anchor, aux, 0.9).unwrap();
    let triplets: Vec<Triplet> = (0..8)
        .map(|_| {
            let user = rng.gen_range(0..users as u32);
            let pos = users as u32 + rng.gen_range(0..items as u32);
            let mut neg = users as u32 + rng.gen_range(0..items as u32);
            while neg == pos {
                neg = users as u32 + rng.gen_range(0..items as u32);
            }
            Triplet { user, pos, neg }
        })
        .collect();
    let problem = Problem {
        s: assignment.to_dense(),
        a_hat: a_hat.to_dense(),
        layers,
        lambda: 5e-2,
        triplets: triplets
            .iter()
            .map(|t| (t.user as usize, t.pos as usize, t.neg as usize))
            .collect(),
        q_min: 0.0,
        q_max: 0.0,
    };
    Fixture {
        problem,
        operator: PropagationOperator::new(a_hat).unwrap(),
        assignment,
        triplets,
    }
}

pub fn to_dense(m: &Matrix) -> Dense {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Central differences of `problem.loss` over every codebook entry and step.
pub fn finite_differences(problem: &Problem, e: &Dense, step: &[f64], rounding: Rounding) -> (Vec<f64>, Vec<f64>) {
    let h = 1e-6;
    let mut ge = Vec::new();
    for j in 0..e.len() {
        for k in 0..e[0].len() {
            let (mut up, mut down) = (e.clone(), e.clone());
            up[j][k] += h;
            down[j][k] -= h;
            ge.push((problem.loss(&up, step, rounding) - problem.loss(&down, step, rounding)) / (2.0 * h));
        }
    }
    let mut gs = Vec::new();
    for j in 0..step.len() {
        let hs = h * step[j];
        let (mut up, mut down) = (step.to_vec(), step.to_vec());
        up[j] += hs;
        down[j] -= hs;
        gs.push((problem.loss(e, &up, rounding) - problem.loss(e, &down, rounding)) / (2.0 * hs));
    }
    (ge, gs)
}

/// Smallest distance of any `E / step` from a clip bound or rounding midpoint.
pub fn margin(e: &Matrix, step: &[f64], bits: BitWidth) -> f64 {
    let (lo, hi) = (bits.q_min() as f64, bits.q_max() as f64);
    let mut m = f64::INFINITY;
    for j in 0..e.rows() {
        for &x in e.row(j) {
            let z = x / step[j];
            m = m.min((z - lo).abs()).min((z - hi).abs());
            if z > lo && z < hi {
                m = m.min(((z - z.floor()) - 0.5).abs());
            }
        }
    }
    m
}

/// Relative errors of the codebook and step gradients against finite
/// differences of the straight-through linearization, on a random
/// codebook whose entries all sit away from rounding midpoints and clip
/// bounds.
pub fn check_against_straight_through(
    seed: u64,
    c: usize,
    d: usize,
    layers: usize,
    bits: BitWidth,
    spread: f64,
) -> Result<(f64, f64), String> {
    let mut fx = fixture(seed, c, layers);
    fx.problem.q_min = bits.q_min() as f64;
    fx.problem.q_max = bits.q_max() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let params = loop {
        let mut p = QatParams::init(c, d, bits, rng.gen()).unwrap();
        for x in p.weights.as_mut_slice() {
            *x *= rng.gen_range(0.5..spread);
        }
        if margin(&p.weights, &p.step, bits) > 1e-3 {
            break p;
        }
    };
    let objective = GraphObjective::full_graph(&fx.operator, &fx.assignment, layers, fx.problem.lambda).unwrap();
    let (loss, grad) = objective.loss_and_gradient(&params, &fx.triplets).unwrap();

    let e = to_dense(&params.weights);
    let residual: Dense = e
        .iter()
        .enumerate()
        .map(|(j, row)| {
            row.iter()
                .map(|&x| (x / params.step[j]).round() - x / params.step[j])
                .collect()
        })
        .collect();
    let frozen = Rounding::Frozen(&residual);
    let tol = 1e-10 * loss.abs().max(1.0);
    for (name, rounding) in [("linearized", frozen), ("exact", Rounding::Exact)] {
        let dense = fx.problem.loss(&e, &params.step, rounding);
        if (dense - loss).abs() > tol {
            return Err(format!("{name} dense loss {dense} differs from {loss}"));
        }
    }

    let (fd_e, fd_s) = finite_differences(&fx.problem, &e, &params.step, frozen);
    Ok((rel_err(grad.weights.as_slice(), &fd_e), rel_err(&grad.step, &fd_s)))
}

/// Codebook on the quantization grid: the linearization with zero residual
/// is the identity surrogate. Returns the codebook gradient's relative
/// error and the largest step gradient relative to the codebook gradient
/// scale, analytic and finite-difference.
pub fn check_on_lattice(seed: u64) -> (f64, f64, f64) {
    let fx = fixture(5, 4, 2);
    let mut problem = fx.problem;
    let bits = BitWidth::Eight;
    problem.q_min = bits.q_min() as f64;
    problem.q_max = bits.q_max() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = vec![0.01, 0.02, 0.015, 0.005];
    let data: Vec<f64> = (0..16)
        .map(|k| rng.gen_range(-100i32..100) as f64 * step[k / 4])
        .collect();
    let params = QatParams {
        weights: Matrix::from_vec(4, 4, data).unwrap(),
        step: step.clone(),
        bits,
    };
    let objective = GraphObjective::full_graph(&fx.operator, &fx.assignment, 2, problem.lambda).unwrap();
    let (_, grad) = objective.loss_and_gradient(&params, &fx.triplets).unwrap();
    let zero: Dense = vec![vec![0.0; 4]; 4];
    let (fd_e, fd_s) = finite_differences(&problem, &to_dense(&params.weights), &step, Rounding::Frozen(&zero));
    let scale = grad
        .weights
        .as_slice()
        .iter()
        .map(|x| x.abs())
        .fold(0.0, f64::max)
        .max(1.0);
    let max_abs = |v: &[f64]| v.iter().map(|x| x.abs()).fold(0.0, f64::max);
    (
        rel_err(grad.weights.as_slice(), &fd_e),
        max_abs(&grad.step) / scale,
        max_abs(&fd_s) / scale,
    )
}
