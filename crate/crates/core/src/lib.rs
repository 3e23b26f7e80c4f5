//! Compositional, quantized and graph-rewired embeddings for
//! LightGCN-style recommenders.
//!
//! The pipeline builds a user-item graph, composes every entity embedding
//! from two rows of a small quantized codebook, pretrains the codebook with
//! BPR, prunes low-contribution entities from the propagation graph,
//! imputes them with shared placeholder centroids and fine-tunes the
//! codebook on the smaller graph.

pub mod codec;
pub mod compose;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod graph;
pub mod matrix;
pub mod partition;
pub mod placeholder;
pub mod propagate;
pub mod quant;
pub mod rewire;
pub mod synthetic;
pub mod train;

pub use compose::{infer_full_table, init_assignment, AssignmentMatrix, Codebook};
pub use error::{Error, Result};
pub use eval::{evaluate, EvalTarget, MetricPair, MetricsReport, RankingMetrics};
pub use finetune::{assemble_inference_table, finetune, RetainedGraph};
pub use graph::{
    build_adjacency, load_interactions, normalize_symmetric, sample_negatives, split_dataset, DatasetSplit,
    InteractionDataset, InteractionFormat, SparseAdjacency, SplitRatios,
};
pub use matrix::Matrix;
pub use partition::{partition_entities, PartitionLabels};
pub use placeholder::{cluster_pruned, PlaceholderCodebook};
pub use propagate::{propagate, PropagationOperator};
pub use quant::{storage_bytes, BitWidth, QuantizedCodebook, StorageReport};
pub use rewire::{contribution_scores, rewire, select_retained, RetentionPlan, RewiredGraph};
pub use train::{pretrain, PretrainArtifacts, QatParams, TrainConfig};
