//! Fine-tuning and inference over the retained subgraph.
//!
//! Only retained entities are propagated. Their operator is the retained
//! block of the rewired adjacency, normalized by its own degrees, so rows
//! and columns of pruned entities never enter the computation. Imputed
//! entities (pruned ones plus retained ones left without neighbours) read
//! fixed placeholder rows.

use crate::compose::AssignmentMatrix;
use crate::error::{argument, Error, Result};
use crate::graph::{build_adjacency, normalize_symmetric, DatasetSplit, SparseAdjacency};
use crate::matrix::Matrix;
use crate::placeholder::{impute_pruned, imputed_entities, PlaceholderCodebook};
use crate::propagate::{count_macs, PropagationOperator};
use crate::quant::QuantizedCodebook;
use crate::rewire::RewiredGraph;
use crate::train::{fit, EpochRecord, GraphObjective, QatParams, RowSource, TrainConfig};

/// Retained block `a[R, R]` of a square adjacency, renormalized by its own
/// row and column sums. `retained` must be ascending.
pub fn retained_operator(a: &SparseAdjacency, retained: &[usize]) -> Result<SparseAdjacency> {
    if !a.is_square() {
        return Err(argument("retained block needs a square adjacency"));
    }
    let mut local = vec![u32::MAX; a.n_rows()];
    for (r, &j) in retained.iter().enumerate() {
        if j >= a.n_rows() || (r > 0 && retained[r - 1] >= j) {
            return Err(argument("retained entities must be ascending and in range"));
        }
        local[j] = r as u32;
    }
    let mut entries = Vec::new();
    for (r, &j) in retained.iter().enumerate() {
        let (cols, vals) = a.row(j);
        for (&k, &v) in cols.iter().zip(vals) {
            let lk = local[k as usize];
            if lk != u32::MAX {
                entries.push((r as u32, lk, v));
            }
        }
    }
    let block = SparseAdjacency::from_triplets(retained.len(), retained.len(), &entries)?;
    Ok(normalize_symmetric(&block))
}

/// Propagation structure of a rewired graph: the retained operator and the
/// row source of every entity.
#[derive(Debug, Clone)]
pub struct RetainedGraph {
    retained: Vec<usize>,
    imputed: Vec<u32>,
    operator: PropagationOperator,
    sources: Vec<RowSource>,
}

impl RetainedGraph {
    /// `original` is the unpruned training adjacency; it decides which
    /// empty rewired rows count as stragglers.
    pub fn new(original: &SparseAdjacency, rewired: &RewiredGraph) -> Result<Self> {
        let retained: Vec<usize> = rewired.plan()?.retained().iter().map(|&j| j as usize).collect();
        let imputed = imputed_entities(original, rewired)?;
        let operator = PropagationOperator::new(retained_operator(rewired.adjacency(), &retained)?)?;

        let n = original.n_rows();
        let mut sources = vec![RowSource::Fixed(0); n];
        for (r, &j) in retained.iter().enumerate() {
            sources[j] = RowSource::Propagated(r as u32);
        }
        for (f, &j) in imputed.iter().enumerate() {
            sources[j as usize] = RowSource::Fixed(f as u32);
        }
        Ok(Self {
            retained,
            imputed,
            operator,
            sources,
        })
    }

    pub fn retained(&self) -> &[usize] {
        &self.retained
    }

    /// Entities that read placeholder rows, ascending.
    pub fn imputed(&self) -> &[u32] {
        &self.imputed
    }

    pub fn operator(&self) -> &PropagationOperator {
        &self.operator
    }

    pub fn num_entities(&self) -> usize {
        self.sources.len()
    }

    /// Multiply-accumulates of `layers` propagation steps over the retained block.
    pub fn macs(&self, d: usize, layers: usize) -> u64 {
        count_macs(self.operator.matrix(), d, layers)
    }

    fn check_placeholders(&self, p: &PlaceholderCodebook, d: usize) -> Result<()> {
        if p.assignment().len() != self.imputed.len() {
            return Err(Error::DimensionMismatch {
                context: "placeholder assignments vs imputed entities",
                expected: self.imputed.len(),
                actual: p.assignment().len(),
            });
        }
        if p.r() > 0 && p.d() != d {
            return Err(Error::DimensionMismatch {
                context: "placeholder width vs embedding width",
                expected: d,
                actual: p.d(),
            });
        }
        Ok(())
    }

    /// Training objective over the retained block. `restricted` holds the
    /// assignment rows of the retained entities; `fixed` the imputed rows.
    pub fn objective<'a>(
        &'a self,
        restricted: &'a AssignmentMatrix,
        fixed: &'a Matrix,
        layers: usize,
        l2_lambda: f64,
    ) -> Result<GraphObjective<'a>> {
        GraphObjective::partial(
            &self.operator,
            restricted,
            layers,
            l2_lambda,
            self.sources.clone(),
            fixed,
        )
    }
}

fn imputed_rows(graph: &RetainedGraph, p: &PlaceholderCodebook, d: usize) -> Result<Matrix> {
    graph.check_placeholders(p, d)?;
    let rows = impute_pruned(p);
    Ok(if rows.rows() == 0 { Matrix::zeros(0, d) } else { rows })
}

fn check_assignment(s: &AssignmentMatrix, graph: &RetainedGraph, codebook: &QuantizedCodebook) -> Result<()> {
    if s.n() != graph.num_entities() {
        return Err(Error::DimensionMismatch {
            context: "assignment rows vs entities",
            expected: graph.num_entities(),
            actual: s.n(),
        });
    }
    if s.c() != codebook.c() {
        return Err(Error::DimensionMismatch {
            context: "assignment columns vs codebook rows",
            expected: codebook.c(),
            actual: s.c(),
        });
    }
    Ok(())
}

/// Deployable `N x d` table: propagated retained rows and placeholder rows
/// for imputed entities.
pub fn assemble_inference_table(
    codebook: &QuantizedCodebook,
    assignment: &AssignmentMatrix,
    graph: &RetainedGraph,
    placeholders: &PlaceholderCodebook,
    layers: usize,
) -> Result<Matrix> {
    check_assignment(assignment, graph, codebook)?;
    let fixed = imputed_rows(graph, placeholders, codebook.d())?;
    let restricted = assignment.restrict(&graph.retained);
    let objective = graph.objective(&restricted, &fixed, layers, 0.0)?;
    objective.inference_table(&QatParams::from_quantized(codebook))
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub codebook: QuantizedCodebook,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Continues training the pretrained codebook on the retained block. The
/// backbone starts at the dequantized pretrained grid, so a run with no
/// epochs returns the pretrained codebook unchanged.
pub fn finetune(
    pretrained: &QuantizedCodebook,
    assignment: &AssignmentMatrix,
    graph: &RetainedGraph,
    placeholders: &PlaceholderCodebook,
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    check_assignment(assignment, graph, pretrained)?;
    if split.num_entities() != graph.num_entities() {
        return Err(Error::DimensionMismatch {
            context: "split entities vs graph rows",
            expected: graph.num_entities(),
            actual: split.num_entities(),
        });
    }
    let fixed = imputed_rows(graph, placeholders, pretrained.d())?;
    let restricted = assignment.restrict(&graph.retained);
    let objective = graph
        .objective(&restricted, &fixed, cfg.layers, cfg.l2_lambda)?
        .with_lsq_grad_scale(cfg.lsq_grad_scale);
    let outcome = fit(&objective, QatParams::from_quantized(pretrained), split, cfg)?;
    Ok(FinetuneOutcome {
        codebook: outcome.params.checkpoint()?,
        best_epoch: outcome.best_epoch,
        history: outcome.history,
    })
}

/// Unpruned training adjacency of a split.
pub fn training_adjacency(split: &DatasetSplit) -> SparseAdjacency {
    build_adjacency(&split.train_dataset())
}
