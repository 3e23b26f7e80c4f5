//! The pipeline stages, their declared inputs and outputs, and their
//! implementations.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use lerg_core::eval::{evaluate, EvalTarget, MetricsReport, Timing};
use lerg_core::finetune::{assemble_inference_table, finetune, training_adjacency, RetainedGraph};
use lerg_core::partition::{partition_with, PartitionConfig};
use lerg_core::placeholder::{cluster_pruned, imputed_entities, PlaceholderCodebook};
use lerg_core::propagate::count_macs;
use lerg_core::quant::dequantize;
use lerg_core::rewire::{retained_count, RewiredGraph};
use lerg_core::train::EpochRecord;
use lerg_core::{
    contribution_scores, infer_full_table, init_assignment, load_interactions, normalize_symmetric, pretrain,
    propagate, rewire, sample_negatives, select_retained, split_dataset, storage_bytes, AssignmentMatrix, DatasetSplit,
    Matrix, PartitionLabels, QatParams, QuantizedCodebook, StorageReport,
};
use serde::{Deserialize, Serialize};

use crate::config::{ratio_dir, Config};
use crate::store::Store;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Ingest,
    Pretrain,
    Rewire,
    Placeholders,
    Finetune,
    Eval,
    Report,
    All,
}

impl Stage {
    /// Concrete stages in execution order.
    pub const PIPELINE: [Stage; 7] = [
        Stage::Ingest,
        Stage::Pretrain,
        Stage::Rewire,
        Stage::Placeholders,
        Stage::Finetune,
        Stage::Eval,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Pretrain => "pretrain",
            Stage::Rewire => "rewire",
            Stage::Placeholders => "placeholders",
            Stage::Finetune => "finetune",
            Stage::Eval => "eval",
            Stage::Report => "report",
            Stage::All => "all",
        }
    }

    /// The concrete stages this request runs.
    pub fn expand(self) -> Vec<Stage> {
        match self {
            Stage::All => Self::PIPELINE.to_vec(),
            s => vec![s],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const SPLIT: &str = "split.json";
pub const ASSIGNMENT: &str = "assignment.bin";
pub const PRETRAIN_CODEBOOK: &str = "pretrain/codebook.bin";
pub const PRETRAIN_TABLE: &str = "pretrain/table.bin";
pub const PRETRAIN_EPOCHS: &str = "pretrain/epochs.jsonl";
pub const PRETRAIN_METRICS: &str = "pretrain/metrics.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";

pub fn ratio_file(ratio: f64, name: &str) -> PathBuf {
    Path::new(&ratio_dir(ratio)).join(name)
}

/// Files a stage reads and writes. Artifact paths are relative to the
/// output directory; the interaction file is given as configured.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageIo {
    pub reads: Vec<PathBuf>,
    pub writes: Vec<PathBuf>,
}

fn per_ratio(cfg: &Config, names: &[&str]) -> Vec<PathBuf> {
    cfg.rewire
        .retention_ratio
        .iter()
        .flat_map(|&r| names.iter().map(move |n| ratio_file(r, n)))
        .collect()
}

fn paths(names: &[&str]) -> Vec<PathBuf> {
    names.iter().map(PathBuf::from).collect()
}

pub fn stage_io(cfg: &Config, stage: Stage) -> StageIo {
    let (reads, writes) = match stage {
        Stage::Ingest => {
            let mut reads = vec![cfg.data.path.clone()];
            reads.extend(cfg.model.partition_file.clone());
            (reads, paths(&[SPLIT, ASSIGNMENT]))
        }
        Stage::Pretrain => (
            paths(&[SPLIT, ASSIGNMENT]),
            paths(&[PRETRAIN_CODEBOOK, PRETRAIN_TABLE, PRETRAIN_EPOCHS]),
        ),
        Stage::Rewire => (
            paths(&[SPLIT, PRETRAIN_TABLE]),
            per_ratio(cfg, &["rewired.bin", "plan.json"]),
        ),
        Stage::Placeholders => {
            let mut reads = paths(&[SPLIT, PRETRAIN_TABLE]);
            reads.extend(per_ratio(cfg, &["rewired.bin"]));
            (reads, per_ratio(cfg, &["placeholders.bin"]))
        }
        Stage::Finetune => {
            let mut reads = paths(&[SPLIT, ASSIGNMENT, PRETRAIN_CODEBOOK]);
            reads.extend(per_ratio(cfg, &["rewired.bin", "placeholders.bin"]));
            (reads, per_ratio(cfg, &["codebook.bin", "epochs.jsonl"]))
        }
        Stage::Eval => {
            let mut reads = paths(&[SPLIT, ASSIGNMENT, PRETRAIN_CODEBOOK]);
            reads.extend(per_ratio(cfg, &["rewired.bin", "placeholders.bin", "codebook.bin"]));
            let mut writes = paths(&[PRETRAIN_METRICS]);
            writes.extend(per_ratio(cfg, &["metrics.json", "metrics_no_finetune.json"]));
            (reads, writes)
        }
        Stage::Report => {
            let mut reads = paths(&[PRETRAIN_METRICS, SPLIT]);
            reads.extend(per_ratio(
                cfg,
                &["plan.json", "metrics.json", "metrics_no_finetune.json"],
            ));
            (reads, paths(&[REPORT_CSV, REPORT_JSON]))
        }
        Stage::All => {
            let mut io = StageIo {
                reads: Vec::new(),
                writes: Vec::new(),
            };
            for s in Stage::PIPELINE {
                let sub = stage_io(cfg, s);
                io.reads
                    .extend(sub.reads.into_iter().filter(|p| !io.writes.contains(p)));
                io.writes.extend(sub.writes);
            }
            return io;
        }
    };
    StageIo { reads, writes }
}

/// Name of the stage whose declared outputs include `rel`.
pub fn producer_of(cfg: &Config, rel: &Path) -> Option<&'static str> {
    Stage::PIPELINE
        .into_iter()
        .find(|&s| stage_io(cfg, s).writes.iter().any(|w| w == rel))
        .map(Stage::name)
}

/// Ingested interactions: the split plus the raw token of every ID.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitArtifact {
    pub dataset: String,
    pub user_tokens: Vec<String>,
    pub item_tokens: Vec<String>,
    pub split: DatasetSplit,
}

/// Summary of one rewiring run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub retention_ratio: f64,
    pub entities: usize,
    pub retained: usize,
    pub original_nnz: usize,
    pub rewired_nnz: usize,
    /// Nonzeros of the retained block that propagation runs over.
    pub propagation_nnz: usize,
    pub backfilled_rows: usize,
    /// Rows backfilled at 2, 3, ... hops.
    pub fill_hop_counts: Vec<usize>,
    pub imputed: usize,
}

#[derive(Debug, Clone, Serialize)]
struct EpochLine<'a> {
    config_hash: &'a str,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

fn epochs_jsonl(hash: &str, history: &[EpochRecord]) -> Result<String> {
    let mut out = String::new();
    for record in history {
        out.push_str(&serde_json::to_string(&EpochLine {
            config_hash: hash,
            record,
        })?);
        out.push('\n');
    }
    Ok(out)
}

/// Per-stage seed derived from a configured seed.
fn salted(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub struct Pipeline<'a> {
    cfg: &'a Config,
    store: &'a Store,
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: &'a Config, store: &'a Store) -> Self {
        Self { cfg, store }
    }

    pub fn run(&self, stage: Stage) -> Result<()> {
        for s in stage.expand() {
            let started = Instant::now();
            log::info!("stage {s}: start");
            self.run_one(s).with_context(|| format!("stage `{s}` failed"))?;
            log::info!("stage {s}: done in {:.2}s", started.elapsed().as_secs_f64());
        }
        Ok(())
    }

    fn run_one(&self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Ingest => self.ingest(),
            Stage::Pretrain => self.pretrain(),
            Stage::Rewire => self.rewire(),
            Stage::Placeholders => self.placeholders(),
            Stage::Finetune => self.finetune(),
            Stage::Eval => self.eval(),
            Stage::Report => self.report(),
            Stage::All => unreachable!("expanded"),
        }
    }

    fn load_split(&self) -> Result<SplitArtifact> {
        self.store.read_json(SPLIT)
    }

    fn load_assignment(&self) -> Result<AssignmentMatrix> {
        self.store.read_binary(ASSIGNMENT, AssignmentMatrix::read_from)
    }

    fn load_codebook(&self, rel: impl AsRef<Path>) -> Result<QuantizedCodebook> {
        self.store.read_binary(rel, QuantizedCodebook::read_from)
    }

    fn load_rewired(&self, ratio: f64) -> Result<RewiredGraph> {
        self.store
            .read_binary(ratio_file(ratio, "rewired.bin"), RewiredGraph::read_from)
    }

    fn load_placeholders(&self, ratio: f64) -> Result<PlaceholderCodebook> {
        self.store
            .read_binary(ratio_file(ratio, "placeholders.bin"), PlaceholderCodebook::read_from)
    }

    fn ingest(&self) -> Result<()> {
        let cfg = self.cfg;
        let ds = load_interactions(&cfg.data.path, cfg.format()?)?;
        let split = split_dataset(&ds, cfg.split_ratios(), cfg.data.seed)?;
        let split = sample_negatives(&split, cfg.data.negatives, salted(cfg.data.seed, 1))?;
        let a = training_adjacency(&split);
        let c = cfg.model.meta_embeddings;
        let parts = match &cfg.model.partition_file {
            Some(path) => {
                let labels = PartitionLabels::from_file(path, c)?;
                if labels.labels().len() != a.n_rows() {
                    bail!(
                        "partition file {} has {} labels for {} entities",
                        path.display(),
                        labels.labels().len(),
                        a.n_rows()
                    );
                }
                labels
            }
            None => {
                let pc = PartitionConfig {
                    tolerance: cfg.model.partition_tolerance,
                    ..Default::default()
                };
                partition_with(&a, c, &pc, cfg.model.seed)?
            }
        };
        log::info!(
            "{} users, {} items, {} train / {} valid / {} test pairs, partition cut {}",
            split.num_users,
            split.num_items,
            split.train.len(),
            split.valid.len(),
            split.test.len(),
            parts.edge_cut(&a)
        );
        let s = init_assignment(&parts, c, cfg.model.anchor_weight, salted(cfg.model.seed, 2))?;
        let dataset = cfg
            .data
            .path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        self.store.write_json(
            SPLIT,
            &SplitArtifact {
                dataset,
                user_tokens: ds.user_tokens,
                item_tokens: ds.item_tokens,
                split,
            },
        )?;
        self.store.write_binary(ASSIGNMENT, "ingest", |w| s.write_to(w))
    }

    fn pretrain(&self) -> Result<()> {
        let cfg = self.cfg;
        let split = self.load_split()?.split;
        let s = self.load_assignment()?;
        let a_hat = normalize_symmetric(&training_adjacency(&split));
        let init = QatParams::init(s.c(), cfg.model.dim, cfg.bits()?, salted(cfg.model.seed, 3))?;
        let out = pretrain(&split, &a_hat, &s, &init, &cfg.train_config())?;
        log::info!("pretraining kept epoch {}", out.best_epoch);
        self.store
            .write_binary(PRETRAIN_CODEBOOK, "pretrain", |w| out.codebook.write_to(w))?;
        self.store
            .write_binary(PRETRAIN_TABLE, "pretrain", |w| out.table.write_to(w))?;
        self.store.write_text(
            PRETRAIN_EPOCHS,
            "pretrain",
            &epochs_jsonl(self.store.config_hash(), &out.history)?,
        )
    }

    fn rewire(&self) -> Result<()> {
        let cfg = self.cfg;
        let split = self.load_split()?.split;
        let table = self.store.read_binary(PRETRAIN_TABLE, Matrix::read_from)?;
        let a = training_adjacency(&split);
        let scores = contribution_scores(&table);
        for &ratio in &cfg.rewire.retention_ratio {
            let m = retained_count(ratio, a.n_rows())?;
            let plan = select_retained(&scores, m, cfg.rewire.rounding_boundary)?;
            let rewired = rewire(&a, &plan, cfg.rewire.max_hops)?;
            let graph = RetainedGraph::new(&a, &rewired)?;
            let mut fill_hop_counts = vec![0; cfg.rewire.max_hops.saturating_sub(1)];
            for &(_, t) in rewired.fill_hops() {
                fill_hop_counts[t as usize - 2] += 1;
            }
            let summary = PlanSummary {
                retention_ratio: ratio,
                entities: a.n_rows(),
                retained: plan.m(),
                original_nnz: a.nnz(),
                rewired_nnz: rewired.adjacency().nnz(),
                propagation_nnz: graph.operator().matrix().nnz(),
                backfilled_rows: rewired.fill_hops().len(),
                fill_hop_counts,
                imputed: graph.imputed().len(),
            };
            log::info!("ratio {ratio}: {summary:?}");
            self.store
                .write_binary(ratio_file(ratio, "rewired.bin"), "rewire", |w| rewired.write_to(w))?;
            self.store.write_json(ratio_file(ratio, "plan.json"), &summary)?;
        }
        Ok(())
    }

    fn placeholders(&self) -> Result<()> {
        let cfg = self.cfg;
        let split = self.load_split()?.split;
        let table = self.store.read_binary(PRETRAIN_TABLE, Matrix::read_from)?;
        let a = training_adjacency(&split);
        let r = cfg.placeholder_count(a.n_rows());
        for &ratio in &cfg.rewire.retention_ratio {
            let rewired = self.load_rewired(ratio)?;
            let imputed: Vec<usize> = imputed_entities(&a, &rewired)?.iter().map(|&j| j as usize).collect();
            let p = cluster_pruned(
                &table.select_rows(&imputed),
                r,
                salted(cfg.finetune.optim.seed, 4),
                cfg.finetune.kmeans_iters,
            )?
            .with_f32_centroids();
            self.store
                .write_binary(ratio_file(ratio, "placeholders.bin"), "placeholders", |w| p.write_to(w))?;
        }
        Ok(())
    }

    fn finetune(&self) -> Result<()> {
        let cfg = self.cfg;
        let split = self.load_split()?.split;
        let s = self.load_assignment()?;
        let pretrained = self.load_codebook(PRETRAIN_CODEBOOK)?;
        let a = training_adjacency(&split);
        for &ratio in &cfg.rewire.retention_ratio {
            let rewired = self.load_rewired(ratio)?;
            let p = self.load_placeholders(ratio)?;
            let graph = RetainedGraph::new(&a, &rewired)?;
            let out = finetune(&pretrained, &s, &graph, &p, &split, &cfg.finetune_config())?;
            log::info!("ratio {ratio}: fine-tuning kept epoch {}", out.best_epoch);
            self.store
                .write_binary(ratio_file(ratio, "codebook.bin"), "finetune", |w| {
                    out.codebook.write_to(w)
                })?;
            self.store.write_text(
                ratio_file(ratio, "epochs.jsonl"),
                "finetune",
                &epochs_jsonl(self.store.config_hash(), &out.history)?,
            )?;
        }
        Ok(())
    }

    fn report_for(
        &self,
        dataset: &str,
        table: &Matrix,
        split: &DatasetSplit,
        storage: StorageReport,
        macs: u64,
        started: Instant,
    ) -> Result<MetricsReport> {
        let ranking = evaluate(table, split, &self.cfg.eval.cutoffs, EvalTarget::Test)?;
        Ok(MetricsReport::new(
            dataset,
            self.store.config_hash(),
            storage,
            macs,
            &ranking,
            Timing {
                wall_seconds: started.elapsed().as_secs_f64(),
            },
        ))
    }

    fn eval(&self) -> Result<()> {
        let cfg = self.cfg;
        let art = self.load_split()?;
        let split = &art.split;
        let s = self.load_assignment()?;
        let pretrained = self.load_codebook(PRETRAIN_CODEBOOK)?;
        let a = training_adjacency(split);
        let (n, d, layers) = (a.n_rows() as u64, pretrained.d(), cfg.model.layers);
        let bits = pretrained.bits().bits();
        let c = pretrained.c() as u64;

        let started = Instant::now();
        let a_hat = normalize_symmetric(&a);
        let h0 = infer_full_table(&s, &dequantize(&pretrained))?;
        let table = propagate(&a_hat, &h0, layers)?;
        let storage = storage_bytes(c, d as u64, bits, 0, n, n)?;
        let report = self.report_for(&art.dataset, &table, split, storage, count_macs(&a_hat, d, 1), started)?;
        self.store.write_json(PRETRAIN_METRICS, &report)?;

        for &ratio in &cfg.rewire.retention_ratio {
            let rewired = self.load_rewired(ratio)?;
            let p = self.load_placeholders(ratio)?;
            let tuned = self.load_codebook(ratio_file(ratio, "codebook.bin"))?;
            let graph = RetainedGraph::new(&a, &rewired)?;
            let macs = graph.macs(d, 1);
            let storage = storage_bytes(c, d as u64, bits, p.r() as u64, n, n - graph.imputed().len() as u64)?;
            for (codebook, name) in [(&tuned, "metrics.json"), (&pretrained, "metrics_no_finetune.json")] {
                let started = Instant::now();
                let table = assemble_inference_table(codebook, &s, &graph, &p, layers)?;
                let report = self.report_for(&art.dataset, &table, split, storage, macs, started)?;
                self.store.write_json(ratio_file(ratio, name), &report)?;
            }
        }
        Ok(())
    }

    fn report(&self) -> Result<()> {
        let cfg = self.cfg;
        let cutoffs = &cfg.eval.cutoffs;
        let pre: MetricsReport = self.store.read_json(PRETRAIN_METRICS)?;
        let mut header = vec![
            "model".to_string(),
            "retention_ratio".into(),
            "retained".into(),
            "propagation_nnz".into(),
            "macs_per_layer".into(),
            "storage_bytes".into(),
        ];
        for n in cutoffs {
            header.push(format!("recall@{n}"));
            header.push(format!("ndcg@{n}"));
        }
        let mut rows: Vec<Vec<String>> = Vec::new();
        let metric_cells = |m: &MetricsReport| -> Vec<String> {
            cutoffs
                .iter()
                .flat_map(|n| {
                    let pair = m.metrics.get(&n.to_string());
                    [
                        pair.map_or(String::new(), |p| format!("{:.6}", p.recall)),
                        pair.map_or(String::new(), |p| format!("{:.6}", p.ndcg)),
                    ]
                })
                .collect()
        };
        let split = self.load_split()?.split;
        let entities = split.num_users + split.num_items;
        let dim = cfg.model.dim as u64;
        let mut row = vec![
            "pretrain".to_string(),
            "1".into(),
            entities.to_string(),
            (pre.macs_per_layer / dim).to_string(),
            pre.macs_per_layer.to_string(),
            pre.storage_bytes.total.to_string(),
        ];
        row.extend(metric_cells(&pre));
        rows.push(row);
        for &ratio in &cfg.rewire.retention_ratio {
            let plan: PlanSummary = self.store.read_json(ratio_file(ratio, "plan.json"))?;
            for (file, model) in [
                ("metrics.json", "finetuned"),
                ("metrics_no_finetune.json", "no_finetune"),
            ] {
                let m: MetricsReport = self.store.read_json(ratio_file(ratio, file))?;
                let mut row = vec![
                    model.to_string(),
                    ratio.to_string(),
                    plan.retained.to_string(),
                    plan.propagation_nnz.to_string(),
                    m.macs_per_layer.to_string(),
                    m.storage_bytes.total.to_string(),
                ];
                row.extend(metric_cells(&m));
                rows.push(row);
            }
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&header)?;
        for row in &rows {
            w.write_record(row)?;
        }
        let text = String::from_utf8(w.into_inner()?)?;
        self.store.write_text(REPORT_CSV, "report", &text)?;
        let json_rows: Vec<serde_json::Map<String, serde_json::Value>> = rows
            .iter()
            .map(|row| {
                header
                    .iter()
                    .zip(row)
                    .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
                    .collect()
            })
            .collect();
        self.store
            .write_json(REPORT_JSON, &serde_json::json!({ "rows": json_rows }))
    }
}
