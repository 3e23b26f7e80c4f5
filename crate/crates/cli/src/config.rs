//! Pipeline configuration: an INI-style `key = value` file with one section
//! per pipeline concern.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use ini::Ini;
use lerg_core::{BitWidth, InteractionFormat, SplitRatios, TrainConfig};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataConfig {
    /// Interaction file; relative paths resolve against the config file.
    pub path: PathBuf,
    pub format: String,
    pub train_ratio: f64,
    pub valid_ratio: f64,
    pub test_ratio: f64,
    /// Sampled negatives per training pair.
    pub negatives: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelConfig {
    /// Codebook rows `c`.
    pub meta_embeddings: usize,
    pub dim: usize,
    pub bits: u8,
    pub anchor_weight: f64,
    pub layers: usize,
    pub partition_tolerance: f64,
    /// Optional precomputed partition labels, one per entity.
    pub partition_file: Option<PathBuf>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub l2_lambda: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub step_lr_scale: f64,
    pub lsq_grad_scale: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewireConfig {
    pub retention_ratio: Vec<f64>,
    pub max_hops: usize,
    pub rounding_boundary: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneConfig {
    pub optim: OptimConfig,
    /// Placeholder centroids `r`; `None` picks 500, or 2000 above 200k entities.
    pub placeholders: Option<usize>,
    pub kmeans_iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalConfig {
    pub cutoffs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: OptimConfig,
    pub rewire: RewireConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
}

const SECTIONS: [&str; 6] = ["data", "model", "train", "rewire", "finetune", "eval"];

/// Keys of one section, consumed as they are read so leftovers can be
/// reported as unknown.
struct Section {
    name: &'static str,
    values: BTreeMap<String, String>,
}

impl Section {
    fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.remove(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|e| anyhow!("[{}] {key} = {raw:?}: {e}", self.name)),
        }
    }

    fn take_list<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.remove(key) {
            None => Ok(default),
            Some(raw) => raw
                .split(',')
                .map(|item| {
                    item.trim()
                        .parse()
                        .map_err(|e| anyhow!("[{}] {key}: bad list item {item:?}: {e}", self.name))
                })
                .collect(),
        }
    }

    fn take_optional_path(&mut self, key: &str) -> Option<PathBuf> {
        self.values.remove(key).filter(|s| !s.is_empty()).map(PathBuf::from)
    }

    fn finish(self) -> Result<()> {
        if let Some(key) = self.values.keys().next() {
            bail!("unknown config key `{key}` in section [{}]", self.name);
        }
        Ok(())
    }
}

fn optim(s: &mut Section, default: &OptimConfig) -> Result<OptimConfig> {
    Ok(OptimConfig {
        learning_rate: s.take("learning_rate", default.learning_rate)?,
        weight_decay: s.take("weight_decay", default.weight_decay)?,
        l2_lambda: s.take("l2_lambda", default.l2_lambda)?,
        batch_size: s.take("batch_size", default.batch_size)?,
        max_epochs: s.take("max_epochs", default.max_epochs)?,
        patience: s.take("patience", default.patience)?,
        step_lr_scale: s.take("step_lr_scale", default.step_lr_scale)?,
        lsq_grad_scale: s.take("lsq_grad_scale", default.lsq_grad_scale)?,
        seed: s.take("seed", default.seed)?,
    })
}

impl Default for OptimConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            l2_lambda: t.l2_lambda,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            step_lr_scale: t.step_lr_scale,
            lsq_grad_scale: t.lsq_grad_scale,
            seed: t.seed,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("in config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.data.path.is_relative() {
            cfg.data.path = base.join(&cfg.data.path);
        }
        if let Some(p) = &cfg.model.partition_file {
            if p.is_relative() {
                cfg.model.partition_file = Some(base.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| anyhow!("config syntax: {e}"))?;
        let mut sections: BTreeMap<&'static str, Section> = SECTIONS
            .iter()
            .map(|&name| {
                (
                    name,
                    Section {
                        name,
                        values: BTreeMap::new(),
                    },
                )
            })
            .collect();
        for (name, props) in ini.iter() {
            let Some(name) = name else {
                if let Some((key, _)) = props.iter().next() {
                    bail!("config key `{key}` must be inside a section");
                }
                continue;
            };
            let section = sections
                .get_mut(name)
                .ok_or_else(|| anyhow!("unknown config section [{name}]"))?;
            for (key, value) in props.iter() {
                if section
                    .values
                    .insert(key.to_string(), value.trim().to_string())
                    .is_some()
                {
                    bail!("duplicate config key `{key}` in section [{name}]");
                }
            }
        }
        let mut take = |name: &str| sections.remove(name).expect("known section");

        let mut s = take("data");
        let data = DataConfig {
            path: s
                .values
                .remove("path")
                .map(PathBuf::from)
                .ok_or_else(|| anyhow!("missing required key `path` in section [data]"))?,
            format: s.take("format", "tsv".to_string())?,
            train_ratio: s.take("train_ratio", 0.8)?,
            valid_ratio: s.take("valid_ratio", 0.1)?,
            test_ratio: s.take("test_ratio", 0.1)?,
            negatives: s.take("negatives", 5)?,
            seed: s.take("seed", 2024)?,
        };
        s.finish()?;

        let mut s = take("model");
        let model = ModelConfig {
            meta_embeddings: s.take("meta_embeddings", 2000)?,
            dim: s.take("dim", 128)?,
            bits: s.take("bits", 16)?,
            anchor_weight: s.take("anchor_weight", 0.9)?,
            layers: s.take("layers", 4)?,
            partition_tolerance: s.take("partition_tolerance", 0.1)?,
            partition_file: s.take_optional_path("partition_file"),
            seed: s.take("seed", 2024)?,
        };
        s.finish()?;

        let mut s = take("train");
        let train = optim(&mut s, &OptimConfig::default())?;
        s.finish()?;

        let mut s = take("rewire");
        let rewire = RewireConfig {
            retention_ratio: s.take_list("retention_ratio", vec![0.7])?,
            max_hops: s.take("max_hops", 4)?,
            rounding_boundary: s.take("rounding_boundary", 0.5)?,
        };
        s.finish()?;

        let mut s = take("finetune");
        let finetune_defaults = OptimConfig {
            max_epochs: 100,
            patience: 5,
            ..OptimConfig::default()
        };
        let placeholders = match s.values.remove("placeholders").as_deref() {
            None | Some("auto") => None,
            Some(raw) => Some(
                raw.parse()
                    .map_err(|e| anyhow!("[finetune] placeholders = {raw:?}: {e}"))?,
            ),
        };
        let finetune = FinetuneConfig {
            optim: optim(&mut s, &finetune_defaults)?,
            placeholders,
            kmeans_iters: s.take("kmeans_iters", 100)?,
        };
        s.finish()?;

        let mut s = take("eval");
        let eval = EvalConfig {
            cutoffs: s.take_list("cutoffs", vec![10, 20])?,
        };
        s.finish()?;

        let cfg = Config {
            data,
            model,
            train,
            rewire,
            finetune,
            eval,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        self.format()?;
        self.bits()?;
        self.split_ratios();
        if self.data.negatives == 0 {
            bail!("[data] negatives must be at least 1");
        }
        if self.model.meta_embeddings < 2 || self.model.dim == 0 {
            bail!("[model] needs meta_embeddings >= 2 and dim >= 1");
        }
        if !(self.model.anchor_weight > 0.0 && self.model.anchor_weight < 1.0) {
            bail!("[model] anchor_weight must lie in (0, 1)");
        }
        if self.rewire.retention_ratio.is_empty() {
            bail!("[rewire] retention_ratio needs at least one value");
        }
        for &r in &self.rewire.retention_ratio {
            if !(r > 0.0 && r <= 1.0) {
                bail!("[rewire] retention ratio {r} outside (0, 1]");
            }
        }
        let mut names: Vec<String> = self.rewire.retention_ratio.iter().map(|&r| ratio_dir(r)).collect();
        names.sort();
        names.dedup();
        if names.len() != self.rewire.retention_ratio.len() {
            bail!("[rewire] retention_ratio lists a value twice");
        }
        if !(0.0..1.0).contains(&self.rewire.rounding_boundary) {
            bail!("[rewire] rounding_boundary must lie in [0, 1)");
        }
        if self.rewire.max_hops < 2 {
            bail!("[rewire] max_hops must be at least 2");
        }
        if self.finetune.placeholders == Some(0) {
            bail!("[finetune] placeholders must be at least 1");
        }
        if self.eval.cutoffs.is_empty() || self.eval.cutoffs.contains(&0) {
            bail!("[eval] cutoffs must be positive");
        }
        self.train_config().validate()?;
        self.finetune_config().validate()?;
        Ok(())
    }

    pub fn format(&self) -> Result<InteractionFormat> {
        self.data.format.parse().map_err(|e| anyhow!("[data] format: {e}"))
    }

    pub fn bits(&self) -> Result<BitWidth> {
        BitWidth::try_from(self.model.bits).map_err(|e| anyhow!("[model] bits: {e}"))
    }

    pub fn split_ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.data.train_ratio,
            test: self.data.test_ratio,
            valid: self.data.valid_ratio,
        }
    }

    fn to_train_config(&self, o: &OptimConfig) -> TrainConfig {
        TrainConfig {
            learning_rate: o.learning_rate,
            weight_decay: o.weight_decay,
            l2_lambda: o.l2_lambda,
            batch_size: o.batch_size,
            max_epochs: o.max_epochs,
            patience: o.patience,
            layers: self.model.layers,
            step_lr_scale: o.step_lr_scale,
            lsq_grad_scale: o.lsq_grad_scale,
            early_stop_cutoff: 20,
            seed: o.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        self.to_train_config(&self.train)
    }

    pub fn finetune_config(&self) -> TrainConfig {
        self.to_train_config(&self.finetune.optim)
    }

    pub fn placeholder_count(&self, num_entities: usize) -> usize {
        self.finetune
            .placeholders
            .unwrap_or(if num_entities > 200_000 { 2000 } else { 500 })
    }

    /// Replaces every seed with `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.finetune.optim.seed = seed;
    }

    /// SHA-256 of the canonical JSON form of the configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

/// Artifact subdirectory for one retention ratio.
pub fn ratio_dir(ratio: f64) -> String {
    format!("ratio_{ratio}")
}
