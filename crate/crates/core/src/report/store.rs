//! Append-only result files plus a JSON-lines index.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{ExperimentResult, RESULT_SCHEMA_VERSION};

pub const INDEX_FILE: &str = "index.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub experiment_id: String,
    pub config_hash: String,
    pub timestamp: String,
    pub file: String,
}

#[derive(Debug, Clone)]
pub struct ResultStore {
    root: PathBuf,
}

impl ResultStore {
    /// Opens (creating if needed) a store rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(root.display().to_string(), e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes `result` to a new `<id>.<hash8>.<timestamp>.json` file and indexes it.
    /// Existing files are never replaced.
    pub fn persist(&self, result: &ExperimentResult) -> Result<PathBuf> {
        let timestamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%6fZ").to_string();
        let stem = format!("{}.{}.{timestamp}", result.experiment_id, &result.config_hash[..8]);
        let body = serde_json::to_vec_pretty(result)?;
        let mut attempt = 0usize;
        let (path, mut file) = loop {
            let name = if attempt == 0 {
                format!("{stem}.json")
            } else {
                format!("{stem}-{attempt}.json")
            };
            let path = self.root.join(&name);
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(f) => break (path, f),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => attempt += 1,
                Err(e) => return Err(Error::io(path.display().to_string(), e)),
            }
        };
        file.write_all(&body)
            .and_then(|_| file.write_all(b"\n"))
            .and_then(|_| file.sync_all())
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let entry = IndexEntry {
            experiment_id: result.experiment_id.clone(),
            config_hash: result.config_hash.clone(),
            timestamp,
            file: path.file_name().expect("file name").to_string_lossy().into_owned(),
        };
        let mut line = serde_json::to_vec(&entry)?;
        line.push(b'\n');
        let index = self.root.join(INDEX_FILE);
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&index)
            .and_then(|mut f| f.write_all(&line))
            .map_err(|e| Error::io(index.display().to_string(), e))?;
        Ok(path)
    }

    /// Index entries whose files exist, in write order.
    pub fn entries(&self) -> Result<Vec<IndexEntry>> {
        let index = self.root.join(INDEX_FILE);
        let f = match File::open(&index) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(index.display().to_string(), e)),
        };
        let mut out = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(index.display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: IndexEntry = serde_json::from_str(&line)?;
            if self.root.join(&entry.file).is_file() {
                out.push(entry);
            }
        }
        Ok(out)
    }

    pub fn load(&self, entry: &IndexEntry) -> Result<ExperimentResult> {
        load_result(&self.root.join(&entry.file))
    }

    /// Every stored result, oldest first.
    pub fn load_all(&self) -> Result<Vec<ExperimentResult>> {
        self.entries()?.iter().map(|e| self.load(e)).collect()
    }

    /// The newest complete result per `(experiment_id, sweep point)`, in catalog-independent order.
    pub fn latest_complete(&self) -> Result<Vec<ExperimentResult>> {
        let mut latest: Vec<ExperimentResult> = Vec::new();
        for r in self.load_all()?.into_iter().filter(ExperimentResult::is_complete) {
            let key = |x: &ExperimentResult| (x.experiment_id.clone(), x.config.sweep_point.clone());
            match latest.iter_mut().find(|x| key(x) == key(&r)) {
                Some(slot) => *slot = r,
                None => latest.push(r),
            }
        }
        Ok(latest)
    }
}

pub fn load_result(path: &Path) -> Result<ExperimentResult> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let result: ExperimentResult = serde_json::from_str(&text)?;
    if result.schema_version != RESULT_SCHEMA_VERSION {
        return Err(Error::InvalidArgument(format!(
            "{} has schema version {}, this build reads {RESULT_SCHEMA_VERSION}",
            path.display(),
            result.schema_version
        )));
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::tiny_result;

    #[test]
    fn persist_then_load_is_value_equal() {
        let dir = tempfile::tempdir().unwrap();
        let store = ResultStore::open(dir.path()).unwrap();
        let r = tiny_result("roundtrip");
        let path = store.persist(&r).unwrap();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        assert!(name.starts_with(&format!("roundtrip.{}.", &r.config_hash[..8])), "{name}");
        assert_eq!(load_result(&path).unwrap(), r);
        assert_eq!(r.schema_version, RESULT_SCHEMA_VERSION);
        let text = fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["schema_version"], serde_json::json!(RESULT_SCHEMA_VERSION));
    }

    #[test]
    fn identical_results_get_distinct_files() {
        let dir = tempfile::tempdir().unwrap();
        let store = ResultStore::open(dir.path()).unwrap();
        let r = tiny_result("twice");
        let a = store.persist(&r).unwrap();
        let b = store.persist(&r).unwrap();
        assert_ne!(a, b);
        let entries = store.entries().unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(store.latest_complete().unwrap().len(), 1);
        // A removed file drops out of the index view instead of failing loads.
        fs::remove_file(&a).unwrap();
        assert_eq!(store.entries().unwrap().len(), 1);
        assert_eq!(store.load_all().unwrap(), vec![r]);
    }

    #[test]
    fn rejects_other_schema_versions() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = tiny_result("old");
        r.schema_version = RESULT_SCHEMA_VERSION + 1;
        let path = dir.path().join("old.json");
        fs::write(&path, serde_json::to_vec(&r).unwrap()).unwrap();
        assert!(load_result(&path).is_err());
    }

    #[test]
    fn empty_store_has_no_entries() {
        let dir = tempfile::tempdir().unwrap();
        let store = ResultStore::open(dir.path().join("new")).unwrap();
        assert!(store.entries().unwrap().is_empty());
    }
}
