//! BPR training of the quantized compositional table with hand-written
//! reverse-mode gradients and Adam.
//!
//! One step runs the whole forward chain (fake quantization, composition,
//! full-graph propagation, pairwise loss on a batch of triplets) and then the
//! adjoints in reverse order. The same machinery drives pretraining over the
//! full graph and fine-tuning over the retained subgraph.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compose::{infer_full_table, AssignmentMatrix, Codebook};
use crate::error::{argument, Error, Result};
use crate::eval::{evaluate, EvalTarget, RankingMetrics};
use crate::graph::{DatasetSplit, SparseAdjacency};
use crate::matrix::{axpy, dot, Matrix};
use crate::propagate::PropagationOperator;
use crate::quant::{
    fake_quantize, init_step_sizes, lsq_grad_scale, qat_backward, quantize, BitWidth, QuantizedCodebook, MIN_STEP,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Decoupled weight decay on the codebook.
    pub weight_decay: f64,
    /// Weight of the squared norm of the batch's composed embeddings.
    pub l2_lambda: f64,
    /// Triplets per step; propagation always covers the whole graph.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation NDCG improvement before stopping.
    pub patience: usize,
    pub layers: usize,
    /// Step sizes learn at `learning_rate * step_lr_scale`.
    pub step_lr_scale: f64,
    /// Multiply step gradients by `1 / sqrt(c * d * q_max)`.
    pub lsq_grad_scale: bool,
    /// Cutoff whose validation NDCG drives early stopping.
    pub early_stop_cutoff: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            l2_lambda: 5e-4,
            batch_size: 2048,
            max_epochs: 200,
            patience: 10,
            layers: 4,
            step_lr_scale: 0.01,
            lsq_grad_scale: false,
            early_stop_cutoff: 20,
            seed: 2024,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.step_lr_scale > 0.0 && self.step_lr_scale.is_finite()) {
            return Err(Error::Config("step_lr_scale must be positive".into()));
        }
        for (name, v) in [("weight_decay", self.weight_decay), ("l2_lambda", self.l2_lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.early_stop_cutoff == 0 {
            return Err(Error::Config("early_stop_cutoff must be at least 1".into()));
        }
        Ok(())
    }
}

/// Trainable state: the full-precision backbone codebook, its per-row step
/// sizes and the bit length they are quantized to.
#[derive(Debug, Clone, PartialEq)]
pub struct QatParams {
    pub weights: Matrix,
    pub step: Vec<f64>,
    pub bits: BitWidth,
}

impl QatParams {
    /// Uniform codebook with step sizes initialized from its row magnitudes.
    pub fn init(c: usize, d: usize, bits: BitWidth, seed: u64) -> Result<Self> {
        let weights = Codebook::uniform(c, d, seed)?.into_weights();
        let step = init_step_sizes(&weights, bits);
        Ok(Self { weights, step, bits })
    }

    /// Starts from a stored quantized codebook: backbone = its dequantized grid.
    pub fn from_quantized(q: &QuantizedCodebook) -> Self {
        Self {
            weights: crate::quant::dequantize(q),
            step: q.step().to_vec(),
            bits: q.bits(),
        }
    }

    pub fn quantized(&self) -> Result<QuantizedCodebook> {
        quantize(&self.weights, &self.step, self.bits)
    }

    /// Quantized snapshot whose steps survive f32 serialization unchanged.
    pub fn checkpoint(&self) -> Result<QuantizedCodebook> {
        self.quantized()?.with_f32_steps()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.is_finite() && self.step.iter().all(|s| s.is_finite())
    }

    pub fn dequantized(&self) -> Result<Matrix> {
        fake_quantize(&self.weights, &self.step, self.bits)
    }
}

/// Adam moments for the codebook and the step vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    m_weights: Matrix,
    v_weights: Matrix,
    m_step: Vec<f64>,
    v_step: Vec<f64>,
    t: u64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn new(params: &QatParams) -> Self {
        let (c, d) = (params.weights.rows(), params.weights.cols());
        Self {
            m_weights: Matrix::zeros(c, d),
            v_weights: Matrix::zeros(c, d),
            m_step: vec![0.0; c],
            v_step: vec![0.0; c],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One Adam update with decoupled weight decay on the codebook. Step
    /// sizes use a scaled learning rate and are floored to stay positive.
    pub fn step(&mut self, params: &mut QatParams, grad: &Gradient, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let lr = cfg.learning_rate;

        let w = params.weights.as_mut_slice();
        let (m, v) = (self.m_weights.as_mut_slice(), self.v_weights.as_mut_slice());
        for (k, &g) in grad.weights.as_slice().iter().enumerate() {
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * g;
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * g * g;
            let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + ADAM_EPS);
            w[k] -= lr * (update + cfg.weight_decay * w[k]);
        }

        let step_lr = lr * cfg.step_lr_scale;
        for (j, &g) in grad.step.iter().enumerate() {
            self.m_step[j] = BETA1 * self.m_step[j] + (1.0 - BETA1) * g;
            self.v_step[j] = BETA2 * self.v_step[j] + (1.0 - BETA2) * g * g;
            let update = (self.m_step[j] / bc1) / ((self.v_step[j] / bc2).sqrt() + ADAM_EPS);
            params.step[j] = (params.step[j] - step_lr * update).max(MIN_STEP);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Matrix,
    pub step: Vec<f64>,
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `sum -ln sigmoid(pos - neg) + lambda * param_sq_norm`.
pub fn bpr_loss(pos_scores: &[f64], neg_scores: &[f64], lambda: f64, param_sq_norm: f64) -> Result<f64> {
    if pos_scores.len() != neg_scores.len() {
        return Err(Error::DimensionMismatch {
            context: "BPR score lists",
            expected: pos_scores.len(),
            actual: neg_scores.len(),
        });
    }
    let data: f64 = pos_scores.iter().zip(neg_scores).map(|(p, n)| softplus(-(p - n))).sum();
    Ok(data + lambda * param_sq_norm)
}

/// `(user, positive item, negative item)`, all as entity IDs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub user: u32,
    pub pos: u32,
    pub neg: u32,
}

/// Every training pair crossed with each of its fixed negatives.
pub fn triplets_from_split(split: &DatasetSplit) -> Vec<Triplet> {
    let nu = split.num_users as u32;
    let mut out = Vec::with_capacity(split.train.len() * split.negatives_per_pair);
    for (t, &(u, i)) in split.train.iter().enumerate() {
        for &neg in split.negatives_of(t) {
            out.push(Triplet {
                user: u,
                pos: nu + i,
                neg: nu + neg,
            });
        }
    }
    out
}

/// Where an entity's final embedding comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowSource {
    /// Row of the propagated table, by local index.
    Propagated(u32),
    /// Row of a fixed table that receives no gradient.
    Fixed(u32),
}

/// Loss over a (sub)graph whose propagated rows come from the codebook.
///
/// `assignment` and `operator` are indexed by local row; `sources` maps each
/// global entity either to a propagated local row or to a row of `fixed`.
/// `ego` lists, per global entity, the local row whose composed embedding is
/// regularized, if any.
#[derive(Debug, Clone)]
pub struct GraphObjective<'a> {
    operator: &'a PropagationOperator,
    assignment: &'a AssignmentMatrix,
    layers: usize,
    sources: Vec<RowSource>,
    fixed: Option<&'a Matrix>,
    l2_lambda: f64,
    lsq_grad_scale: bool,
}

impl<'a> GraphObjective<'a> {
    /// Every entity is propagated over the full graph.
    pub fn full_graph(
        operator: &'a PropagationOperator,
        assignment: &'a AssignmentMatrix,
        layers: usize,
        l2_lambda: f64,
    ) -> Result<Self> {
        if operator.n() != assignment.n() {
            return Err(Error::DimensionMismatch {
                context: "graph vs assignment rows",
                expected: operator.n(),
                actual: assignment.n(),
            });
        }
        let sources = (0..assignment.n() as u32).map(RowSource::Propagated).collect();
        Ok(Self {
            operator,
            assignment,
            layers,
            sources,
            fixed: None,
            l2_lambda,
            lsq_grad_scale: false,
        })
    }

    /// Propagation over `operator` for a subset of entities; the others read
    /// rows of `fixed` as given by `sources`.
    pub fn partial(
        operator: &'a PropagationOperator,
        assignment: &'a AssignmentMatrix,
        layers: usize,
        l2_lambda: f64,
        sources: Vec<RowSource>,
        fixed: &'a Matrix,
    ) -> Result<Self> {
        if operator.n() != assignment.n() {
            return Err(Error::DimensionMismatch {
                context: "graph vs assignment rows",
                expected: operator.n(),
                actual: assignment.n(),
            });
        }
        for s in &sources {
            match *s {
                RowSource::Propagated(l) if l as usize >= operator.n() => {
                    return Err(argument(format!("local row {l} out of range")))
                }
                RowSource::Fixed(f) if f as usize >= fixed.rows() => {
                    return Err(argument(format!("fixed row {f} out of range")))
                }
                _ => {}
            }
        }
        Ok(Self {
            operator,
            assignment,
            layers,
            sources,
            fixed: Some(fixed),
            l2_lambda,
            lsq_grad_scale: false,
        })
    }

    pub fn with_lsq_grad_scale(mut self, on: bool) -> Self {
        self.lsq_grad_scale = on;
        self
    }

    pub fn num_entities(&self) -> usize {
        self.sources.len()
    }

    /// Composed (layer-0) and propagated tables over local rows.
    pub fn forward(&self, params: &QatParams) -> Result<(Matrix, Matrix)> {
        let meta = params.dequantized()?;
        let h0 = infer_full_table(self.assignment, &meta)?;
        let h = self.operator.forward(&h0, self.layers)?;
        Ok((h0, h))
    }

    /// Full `N x d` table: propagated rows where available, fixed rows elsewhere.
    pub fn inference_table(&self, params: &QatParams) -> Result<Matrix> {
        let (_, h) = self.forward(params)?;
        let mut out = Matrix::zeros(self.sources.len(), h.cols());
        for (e, src) in self.sources.iter().enumerate() {
            out.row_mut(e).copy_from_slice(self.row(&h, *src));
        }
        Ok(out)
    }

    #[inline]
    fn row<'m>(&'m self, h: &'m Matrix, src: RowSource) -> &'m [f64] {
        match src {
            RowSource::Propagated(l) => h.row(l as usize),
            RowSource::Fixed(f) => self.fixed.expect("fixed rows present").row(f as usize),
        }
    }

    /// Loss and gradient for one batch.
    pub fn loss_and_gradient(&self, params: &QatParams, batch: &[Triplet]) -> Result<(f64, Gradient)> {
        let (h0, h) = self.forward(params)?;
        let d = h.cols();
        let mut grad_h = Matrix::zeros(h.rows(), d);
        let mut grad_h0 = Matrix::zeros(h.rows(), d);
        let mut loss = 0.0;
        let mut diff = vec![0.0; d];

        for t in batch {
            let (su, sp, sn) = (
                self.sources[t.user as usize],
                self.sources[t.pos as usize],
                self.sources[t.neg as usize],
            );
            let (hu, hp, hn) = (self.row(&h, su), self.row(&h, sp), self.row(&h, sn));
            let x = dot(hu, hp) - dot(hu, hn);
            loss += softplus(-x);
            let coef = -sigmoid(-x);
            if let RowSource::Propagated(l) = su {
                for ((o, p), n) in diff.iter_mut().zip(hp).zip(hn) {
                    *o = p - n;
                }
                axpy(grad_h.row_mut(l as usize), coef, &diff);
            }
            if let RowSource::Propagated(l) = sp {
                axpy(grad_h.row_mut(l as usize), coef, hu);
            }
            if let RowSource::Propagated(l) = sn {
                axpy(grad_h.row_mut(l as usize), -coef, hu);
            }
            if self.l2_lambda > 0.0 {
                for src in [su, sp, sn] {
                    if let RowSource::Propagated(l) = src {
                        let ego = h0.row(l as usize);
                        loss += self.l2_lambda * dot(ego, ego);
                        axpy(grad_h0.row_mut(l as usize), 2.0 * self.l2_lambda, ego);
                    }
                }
            }
        }

        grad_h0.add_scaled(&self.operator.backward(&grad_h, self.layers)?, 1.0);
        let grad_meta = self.assignment.scatter_adjoint(&grad_h0)?;
        let (weights, mut step) = qat_backward(&grad_meta, &params.weights, &params.step, params.bits)?;
        if self.lsq_grad_scale {
            let s = lsq_grad_scale(params.weights.rows(), params.weights.cols(), params.bits);
            step.iter_mut().for_each(|g| *g *= s);
        }
        Ok((loss, Gradient { weights, step }))
    }
}

/// One line of the per-epoch metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_recall_10: f64,
    pub valid_ndcg_10: f64,
    pub valid_recall_20: f64,
    pub valid_ndcg_20: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub params: QatParams,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

fn validation(
    objective: &GraphObjective,
    params: &QatParams,
    split: &DatasetSplit,
    cutoff: usize,
) -> Result<RankingMetrics> {
    let table = objective.inference_table(params)?;
    let mut cutoffs = vec![10, 20];
    if !cutoffs.contains(&cutoff) {
        cutoffs.push(cutoff);
    }
    evaluate(&table, split, &cutoffs, EvalTarget::Validation)
}

/// Adam over shuffled triplet batches with early stopping on validation
/// NDCG. Returns the best parameters seen, the initial ones included.
pub fn fit(objective: &GraphObjective, init: QatParams, split: &DatasetSplit, cfg: &TrainConfig) -> Result<FitOutcome> {
    cfg.validate()?;
    if objective.num_entities() != split.num_entities() {
        return Err(Error::DimensionMismatch {
            context: "objective entities vs split",
            expected: split.num_entities(),
            actual: objective.num_entities(),
        });
    }
    let started = Instant::now();
    let mut triplets = triplets_from_split(split);
    let mut params = init;
    let mut opt = OptimizerState::new(&params);
    let mut history = Vec::new();

    let initial = validation(objective, &params, split, cfg.early_stop_cutoff)?;
    let track = initial.users > 0;
    let mut best = (initial.ndcg(cfg.early_stop_cutoff), 0usize, params.clone());
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        triplets.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, batch) in triplets.chunks(cfg.batch_size).enumerate() {
            let (loss, grad) = objective.loss_and_gradient(&params, batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step, loss });
            }
            total += loss;
            opt.step(&mut params, &grad, cfg);
            if !params.is_finite() {
                return Err(Error::Divergence { epoch, step, loss });
            }
        }
        let metrics = validation(objective, &params, split, cfg.early_stop_cutoff)?;
        let record = EpochRecord {
            epoch,
            train_loss: total / triplets.len().max(1) as f64,
            valid_recall_10: metrics.recall(10),
            valid_ndcg_10: metrics.ndcg(10),
            valid_recall_20: metrics.recall(20),
            valid_ndcg_20: metrics.ndcg(20),
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5}, valid ndcg@20 {:.4}, recall@20 {:.4}",
            record.train_loss,
            record.valid_ndcg_20,
            record.valid_recall_20
        );
        history.push(record);

        let score = metrics.ndcg(cfg.early_stop_cutoff);
        if !track || score > best.0 {
            best = (score, epoch, params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log::info!("early stop after epoch {epoch}; best epoch {}", best.1);
                break;
            }
        }
    }
    Ok(FitOutcome {
        params: best.2,
        best_epoch: best.1,
        history,
    })
}

/// Outputs of pretraining: the converged quantized codebook (grid and
/// steps) and the propagated full table it produces.
#[derive(Debug, Clone)]
pub struct PretrainArtifacts {
    pub codebook: QuantizedCodebook,
    pub table: Matrix,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Pretrains the codebook over the full normalized training graph.
pub fn pretrain(
    split: &DatasetSplit,
    a_hat: &SparseAdjacency,
    assignment: &AssignmentMatrix,
    init: &QatParams,
    cfg: &TrainConfig,
) -> Result<PretrainArtifacts> {
    if a_hat.n_rows() != split.num_entities() {
        return Err(Error::DimensionMismatch {
            context: "graph vs dataset entities",
            expected: split.num_entities(),
            actual: a_hat.n_rows(),
        });
    }
    if init.weights.rows() != assignment.c() {
        return Err(Error::DimensionMismatch {
            context: "codebook rows vs assignment columns",
            expected: assignment.c(),
            actual: init.weights.rows(),
        });
    }
    let operator = PropagationOperator::new(a_hat.clone())?;
    let objective = GraphObjective::full_graph(&operator, assignment, cfg.layers, cfg.l2_lambda)?
        .with_lsq_grad_scale(cfg.lsq_grad_scale);
    let outcome = fit(&objective, init.clone(), split, cfg)?;
    let codebook = outcome.params.checkpoint()?;
    let table = objective.inference_table(&QatParams::from_quantized(&codebook))?;
    Ok(PretrainArtifacts {
        codebook,
        table,
        best_epoch: outcome.best_epoch,
        history: outcome.history,
    })
}
