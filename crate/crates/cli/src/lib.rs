//! Pipeline driver for the `lerg` command: configuration, the artifact
//! store and the stage implementations.

pub mod config;
pub mod stages;
pub mod store;

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};

pub use config::Config;
pub use stages::{stage_io, Pipeline, Stage, StageIo};
pub use store::{Access, AccessKind, DirLock, Store};

/// One invocation of the pipeline.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub config: PathBuf,
    pub stage: Stage,
    pub out: PathBuf,
    pub seed: Option<u64>,
}

impl Invocation {
    pub fn new(config: impl Into<PathBuf>, stage: Stage, out: impl Into<PathBuf>) -> Self {
        Self {
            config: config.into(),
            stage,
            out: out.into(),
            seed: None,
        }
    }

    pub fn load_config(&self) -> Result<Config> {
        let mut cfg = Config::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.override_seed(seed);
        }
        Ok(cfg)
    }

    /// Declared reads and writes of the requested stage.
    pub fn plan(&self) -> Result<StageIo> {
        Ok(stage_io(&self.load_config()?, self.stage))
    }

    /// Runs the requested stage and returns every artifact access it made.
    /// Fails if a stage touched an artifact it did not declare.
    pub fn run(&self) -> Result<Vec<Access>> {
        let cfg = self.load_config()?;
        let _lock = DirLock::acquire(&self.out)?;
        let producer_cfg = cfg.clone();
        let store = Store::new(&self.out, cfg.hash(), move |p| stages::producer_of(&producer_cfg, p))?;
        let pipeline = Pipeline::new(&cfg, &store);
        let mut all = Vec::new();
        for s in self.stage.expand() {
            store.clear_log();
            pipeline.run(s)?;
            let accesses = store.accesses();
            check_declared(&stage_io(&cfg, s), &accesses, s)?;
            all.extend(accesses);
        }
        Ok(all)
    }
}

fn check_declared(io: &StageIo, accesses: &[Access], stage: Stage) -> Result<()> {
    for a in accesses {
        let declared = match a.kind {
            AccessKind::Read => &io.reads,
            AccessKind::Write => &io.writes,
        };
        if !declared.iter().any(|p| p == &a.path) {
            bail!(
                "stage `{stage}` made an undeclared {:?} of {}",
                a.kind,
                a.path.display()
            );
        }
    }
    Ok(())
}

/// Renders a dry-run listing.
pub fn describe(io: &StageIo, out: &Path) -> String {
    let mut text = String::new();
    for p in &io.reads {
        text.push_str(&format!("read  {}\n", resolve(out, p).display()));
    }
    for p in &io.writes {
        text.push_str(&format!("write {}\n", resolve(out, p).display()));
    }
    text
}

fn resolve(out: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out.join(p)
    }
}
