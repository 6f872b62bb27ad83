use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub speaker_id: String,
    /// Relative paths resolve against the manifest's directory.
    pub feature_path: PathBuf,
    pub transcript: String,
}

/// Utterance index: `utt_id<TAB>speaker_id<TAB>feature_path<TAB>transcript`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub speaker_set: BTreeSet<String>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.utt_id.as_str()) {
                return Err(Error::Parameter(format!("duplicate utt_id {}", e.utt_id)));
            }
        }
        let speaker_set = entries.iter().map(|e| e.speaker_id.clone()).collect();
        Ok(Self { entries, speaker_set })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn by_speaker<'a>(&'a self, speaker: &'a str) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.entries.iter().filter(move |e| e.speaker_id == speaker)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                e.utt_id,
                e.speaker_id,
                e.feature_path.display(),
                e.transcript
            );
        }
        s
    }
}

pub fn save_manifest(m: &Manifest, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, m.to_tsv().as_bytes())
}

/// Parse a manifest and check that every feature file exists.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::format(path, format!("line {}: expected 4 fields, got {}", n + 1, f.len())));
        }
        if !seen.insert(f[0].to_string()) {
            return Err(Error::format(path, format!("line {}: duplicate utt_id {}", n + 1, f[0])));
        }
        let feature_path = PathBuf::from(f[2]);
        if !base.join(&feature_path).exists() {
            return Err(Error::DanglingReference(base.join(&feature_path)));
        }
        entries.push(ManifestEntry {
            utt_id: f[0].into(),
            speaker_id: f[1].into(),
            feature_path,
            transcript: f[3].into(),
        });
    }
    Manifest::new(entries)
}

/// Resolve an entry's feature file against the manifest location.
pub fn feature_file(manifest_path: &Path, entry: &ManifestEntry) -> PathBuf {
    manifest_path.parent().unwrap_or(Path::new("")).join(&entry.feature_path)
}
