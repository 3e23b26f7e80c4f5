//! Artifact directory: atomic writes, config-hash stamping, prerequisite
//! checks and an access log of every artifact a stage touches.

use std::cell::RefCell;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessKind {
    Read,
    Write,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Access {
    pub kind: AccessKind,
    pub path: PathBuf,
}

/// Sidecar stored next to binary and text artifacts, whose own layouts
/// have no room for the configuration hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    config_hash: String,
    stage: String,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Maps an artifact path (relative to the root) to the stage producing it.
type ProducerFn = Box<dyn Fn(&Path) -> Option<&'static str>>;

pub struct Store {
    root: PathBuf,
    config_hash: String,
    log: RefCell<Vec<Access>>,
    producer: ProducerFn,
}

impl Store {
    pub fn new(
        root: &Path,
        config_hash: String,
        producer: impl Fn(&Path) -> Option<&'static str> + 'static,
    ) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating output directory {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            config_hash,
            log: RefCell::new(Vec::new()),
            producer: Box::new(producer),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn accesses(&self) -> Vec<Access> {
        self.log.borrow().clone()
    }

    pub fn clear_log(&self) {
        self.log.borrow_mut().clear();
    }

    fn record(&self, kind: AccessKind, rel: &Path) {
        self.log.borrow_mut().push(Access {
            kind,
            path: rel.to_path_buf(),
        });
    }

    fn producer_hint(&self, rel: &Path) -> String {
        match (self.producer)(rel) {
            Some(stage) => format!("run stage `{stage}` first"),
            None => "it is not produced by any stage".to_string(),
        }
    }

    fn open(&self, rel: &Path) -> Result<File> {
        let path = self.root.join(rel);
        if !path.exists() {
            bail!("missing artifact {}; {}", path.display(), self.producer_hint(rel));
        }
        File::open(&path).with_context(|| format!("opening {}", path.display()))
    }

    fn check_hash(&self, rel: &Path, found: Option<&str>) -> Result<()> {
        if found != Some(self.config_hash.as_str()) {
            let rerun = match (self.producer)(rel) {
                Some(stage) => format!("rerun stage `{stage}`"),
                None => "regenerate it".to_string(),
            };
            bail!(
                "artifact {} was produced under a different configuration (hash {}); {rerun}",
                self.root.join(rel).display(),
                found.unwrap_or("missing")
            );
        }
        Ok(())
    }

    /// Writes `rel` through a temporary file in the same directory, renamed
    /// into place once complete.
    fn write_atomic(&self, rel: &Path, fill: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
        let path = self.root.join(rel);
        let dir = path.parent().unwrap_or(&self.root);
        fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        {
            let mut w = BufWriter::new(tmp.as_file_mut());
            fill(&mut w)?;
            w.flush()?;
        }
        tmp.as_file().sync_all()?;
        tmp.persist(&path)
            .map_err(|e| anyhow!("renaming into {}: {}", path.display(), e.error))?;
        Ok(())
    }

    fn write_sidecar(&self, rel: &Path, stage: &str) -> Result<()> {
        let side = Sidecar {
            config_hash: self.config_hash.clone(),
            stage: stage.to_string(),
        };
        self.write_atomic(&sidecar_path(rel), |w| {
            serde_json::to_writer_pretty(&mut *w, &side)?;
            writeln!(w)?;
            Ok(())
        })
    }

    fn read_sidecar(&self, rel: &Path) -> Result<()> {
        let side_rel = sidecar_path(rel);
        let found = match File::open(self.root.join(&side_rel)) {
            Ok(f) => serde_json::from_reader::<_, Sidecar>(BufReader::new(f))
                .ok()
                .map(|s| s.config_hash),
            Err(_) => None,
        };
        self.check_hash(rel, found.as_deref())
    }

    /// Binary artifact plus a hash sidecar.
    pub fn write_binary(
        &self,
        rel: impl AsRef<Path>,
        stage: &str,
        fill: impl FnOnce(&mut dyn Write) -> lerg_core::Result<()>,
    ) -> Result<()> {
        let rel = rel.as_ref();
        self.record(AccessKind::Write, rel);
        self.write_atomic(rel, |w| Ok(fill(w)?))?;
        self.write_sidecar(rel, stage)
    }

    pub fn read_binary<T>(
        &self,
        rel: impl AsRef<Path>,
        parse: impl FnOnce(BufReader<File>) -> lerg_core::Result<T>,
    ) -> Result<T> {
        let rel = rel.as_ref();
        self.record(AccessKind::Read, rel);
        let file = self.open(rel)?;
        self.read_sidecar(rel)?;
        parse(BufReader::new(file)).with_context(|| format!("reading {}", self.root.join(rel).display()))
    }

    /// Plain-text artifact (CSV, JSON lines) plus a hash sidecar.
    pub fn write_text(&self, rel: impl AsRef<Path>, stage: &str, text: &str) -> Result<()> {
        let rel = rel.as_ref();
        self.record(AccessKind::Write, rel);
        self.write_atomic(rel, |w| Ok(w.write_all(text.as_bytes())?))?;
        self.write_sidecar(rel, stage)
    }

    /// JSON object artifact with a top-level `config_hash` field.
    pub fn write_json<T: Serialize>(&self, rel: impl AsRef<Path>, value: &T) -> Result<()> {
        let rel = rel.as_ref();
        self.record(AccessKind::Write, rel);
        let mut v = serde_json::to_value(value)?;
        let obj = v
            .as_object_mut()
            .ok_or_else(|| anyhow!("JSON artifacts must be objects"))?;
        obj.insert("config_hash".into(), Value::String(self.config_hash.clone()));
        self.write_atomic(rel, |w| {
            serde_json::to_writer_pretty(&mut *w, &v)?;
            writeln!(w)?;
            Ok(())
        })
    }

    pub fn read_json<T: DeserializeOwned>(&self, rel: impl AsRef<Path>) -> Result<T> {
        let rel = rel.as_ref();
        self.record(AccessKind::Read, rel);
        let file = self.open(rel)?;
        let v: Value = serde_json::from_reader(BufReader::new(file))
            .with_context(|| format!("parsing {}", self.root.join(rel).display()))?;
        self.check_hash(rel, v.get("config_hash").and_then(Value::as_str))?;
        serde_json::from_value(v).with_context(|| format!("decoding {}", self.root.join(rel).display()))
    }
}

/// Exclusive lock on an artifact directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub const FILE_NAME: &'static str = ".lerg.lock";

    pub fn acquire(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        let path = root.join(Self::FILE_NAME);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => bail!(
                "{} is locked by another run (remove {} if that run is gone)",
                root.display(),
                path.display()
            ),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(dir: &Path, hash: &str) -> Store {
        Store::new(dir, hash.to_string(), |p| (p == Path::new("a.bin")).then_some("make")).unwrap()
    }

    #[test]
    fn binary_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path(), "h1");
        s.write_binary("a.bin", "make", |w| Ok(w.write_all(b"abc")?)).unwrap();
        assert!(dir.path().join("a.bin.json").exists());
        let back = s
            .read_binary("a.bin", |mut r| {
                let mut v = Vec::new();
                std::io::Read::read_to_end(&mut r, &mut v)?;
                Ok(v)
            })
            .unwrap();
        assert_eq!(back, b"abc");
        assert_eq!(s.accesses().len(), 2);

        let other = store(dir.path(), "h2");
        let err = other.read_binary("a.bin", |_| Ok(())).unwrap_err();
        assert!(err.to_string().contains("rerun stage `make`"), "{err}");
    }

    #[test]
    fn missing_artifacts_name_their_producer() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path(), "h");
        let err = s.read_binary("a.bin", |_| Ok(())).unwrap_err();
        assert!(err.to_string().contains("run stage `make` first"), "{err}");
    }

    #[test]
    fn json_carries_the_hash() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path(), "h");
        s.write_json("m.json", &serde_json::json!({"x": 1})).unwrap();
        let v: Value = s.read_json("m.json").unwrap();
        assert_eq!(v["config_hash"], "h");
        assert_eq!(v["x"], 1);
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let lock = DirLock::acquire(dir.path()).unwrap();
        assert!(DirLock::acquire(dir.path()).is_err());
        drop(lock);
        assert!(DirLock::acquire(dir.path()).is_ok());
    }
}
