//! Append-only JSONL run ledger, one record per stage execution.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const LEDGER_FILE: &str = "ledger.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Done,
    CacheHit,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub stage: String,
    pub status: Status,
    pub config_digest: String,
    /// Input file (relative to the output directory) to SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output files written by this execution; empty unless `Done`.
    pub outputs: BTreeMap<String, String>,
    pub wall_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

pub struct Ledger {
    path: PathBuf,
    records: Vec<Record>,
}

impl Ledger {
    pub fn open(out: &Path) -> Result<Self, CliError> {
        let path = out.join(LEDGER_FILE);
        let mut records = Vec::new();
        if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                match serde_json::from_str(line) {
                    Ok(r) => records.push(r),
                    // a torn final line from an interrupted write is ignored
                    Err(_) if n + 1 == text.lines().count() => {}
                    Err(e) => return Err(CliError::Internal(format!("ledger line {}: {e}", n + 1))),
                }
            }
        }
        Ok(Self { path, records })
    }

    #[cfg(test)]
    pub fn records(&self) -> &[Record] {
        &self.records
    }

    /// Most recent successful execution of `stage`.
    pub fn last_done(&self, stage: &str) -> Option<&Record> {
        self.records.iter().rev().find(|r| r.stage == stage && r.status == Status::Done)
    }

    pub fn append(&mut self, record: Record) -> Result<(), CliError> {
        let mut line = serde_json::to_string(&record).map_err(|e| CliError::Internal(e.to_string()))?;
        line.push('\n');
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&self.path)?;
        f.write_all(line.as_bytes())?;
        f.sync_data()?;
        self.records.push(record);
        Ok(())
    }
}

/// SHA-256 of every regular file below `dir`, keyed by path relative to `root`.
pub fn digest_tree(root: &Path, dir: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        if !d.exists() {
            continue;
        }
        for entry in std::fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')) {
                let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
                out.insert(rel, ghostvec::io::digest_file(&p)?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(stage: &str, status: Status) -> Record {
        Record {
            stage: stage.into(),
            status,
            config_digest: "c".into(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            wall_ms: 0,
            message: None,
        }
    }

    #[test]
    fn append_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let mut l = Ledger::open(dir.path()).unwrap();
        l.append(rec("corpus", Status::Done)).unwrap();
        l.append(rec("corpus", Status::CacheHit)).unwrap();
        l.append(rec("attack", Status::Failed)).unwrap();
        let l = Ledger::open(dir.path()).unwrap();
        assert_eq!(l.records().len(), 3);
        assert!(l.last_done("corpus").is_some());
        assert!(l.last_done("attack").is_none());
    }

    #[test]
    fn torn_last_line_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let mut l = Ledger::open(dir.path()).unwrap();
        l.append(rec("corpus", Status::Done)).unwrap();
        let mut f = std::fs::OpenOptions::new().append(true).open(dir.path().join(LEDGER_FILE)).unwrap();
        f.write_all(b"{\"stage\":\"tra").unwrap();
        assert_eq!(Ledger::open(dir.path()).unwrap().records().len(), 1);
    }

    #[test]
    fn tree_digest_uses_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("a/b")).unwrap();
        std::fs::write(dir.path().join("a/b/x.txt"), b"hi").unwrap();
        std::fs::write(dir.path().join("a/.tmp"), b"skip").unwrap();
        let d = digest_tree(dir.path(), &dir.path().join("a")).unwrap();
        assert_eq!(d.keys().collect::<Vec<_>>(), vec!["a/b/x.txt"]);
    }
}
