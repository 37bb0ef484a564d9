//! Append-only stage records, artifact digests and version pins.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use d2tforge::digest::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::error::PipelineError;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const LOCK_FILE: &str = ".d2tforge.lock";

/// Versions an artifact depends on. Fields are filled as stages learn them and
/// inherited along the input chain.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pins {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub schema_digest: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pack_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub vocab_digest: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub checkpoint_digest: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sampler_seed: Option<u64>,
}

impl Pins {
    fn fields(&self) -> [(&'static str, Option<String>); 5] {
        [
            ("schema", self.schema_digest.clone()),
            ("template pack", self.pack_hash.clone()),
            ("vocabulary", self.vocab_digest.clone()),
            ("checkpoint", self.checkpoint_digest.clone()),
            ("sampler seed", self.sampler_seed.map(|s| s.to_string())),
        ]
    }

    /// Fills missing fields from `other`; a field set on both sides to
    /// different values is reported by name.
    pub fn merge(&mut self, other: &Pins) -> Result<(), String> {
        fn take<T: Clone + PartialEq>(mine: &mut Option<T>, theirs: &Option<T>, name: &str) -> Result<(), String> {
            match (mine.as_ref(), theirs) {
                (Some(a), Some(b)) if a != b => Err(name.to_string()),
                (None, Some(b)) => {
                    *mine = Some(b.clone());
                    Ok(())
                }
                _ => Ok(()),
            }
        }
        take(&mut self.schema_digest, &other.schema_digest, "schema")?;
        take(&mut self.pack_hash, &other.pack_hash, "template pack")?;
        take(&mut self.vocab_digest, &other.vocab_digest, "vocabulary")?;
        take(&mut self.checkpoint_digest, &other.checkpoint_digest, "checkpoint")?;
        take(&mut self.sampler_seed, &other.sampler_seed, "sampler seed")
    }
}

/// One executed stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub seq: u64,
    pub stage: String,
    pub config_path: String,
    pub config_digest: String,
    /// Kept verbatim so the stage can be replayed.
    pub config_text: String,
    pub allow_mismatch: bool,
    /// Relative path to SHA-256 of the bytes read.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub pins: Pins,
    pub created_at: String,
}

/// The record chain of one pipeline directory.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PipelineManifest {
    pub records: Vec<StageRecord>,
}

impl PipelineManifest {
    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let path = dir.join(MANIFEST_FILE);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Self::default()),
            Err(e) => return Err(PipelineError::io(&path, e)),
        };
        Self::parse(&text).map_err(|m| PipelineError::Validation(format!("{}: {m}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            records.push(serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?);
        }
        Ok(PipelineManifest { records })
    }

    /// Appends one JSON line; earlier lines are never rewritten.
    pub fn append(dir: &Path, record: &StageRecord) -> Result<(), PipelineError> {
        let path = dir.join(MANIFEST_FILE);
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| PipelineError::io(&path, e))?;
        let line = serde_json::to_string(record).expect("records serialize");
        writeln!(f, "{line}").and_then(|_| f.sync_all()).map_err(|e| PipelineError::io(&path, e))
    }

    pub fn next_seq(&self) -> u64 {
        self.records.last().map_or(1, |r| r.seq + 1)
    }

    /// The latest record that wrote `path`.
    pub fn producer(&self, path: &str) -> Option<&StageRecord> {
        self.records.iter().rev().find(|r| r.outputs.contains_key(path))
    }

    /// The latest record with an output of this digest.
    pub fn producer_of_digest(&self, digest: &str) -> Option<&StageRecord> {
        self.records.iter().rev().find(|r| r.outputs.values().any(|d| d == digest))
    }

    /// Pins of the whole chain, later records taking precedence.
    pub fn pins(&self) -> Pins {
        let mut out = Pins::default();
        for r in self.records.iter().rev() {
            let _ = out.merge(&r.pins);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PinMismatch {
    pub artifact: String,
    pub trained: Option<String>,
    pub serving: Option<String>,
}

/// Training and serving must agree on schema, template pack and vocabulary.
/// The checkpoint digest is informational and never a mismatch.
pub fn check_compatibility(train: &Pins, infer: &Pins) -> Result<(), Vec<PinMismatch>> {
    let mismatches: Vec<PinMismatch> = train
        .fields()
        .into_iter()
        .zip(infer.fields())
        .filter(|((name, _), _)| matches!(*name, "schema" | "template pack" | "vocabulary"))
        .filter(|((_, a), (_, b))| a != b)
        .map(|((name, a), (_, b))| PinMismatch { artifact: name.to_string(), trained: a, serving: b })
        .collect();
    if mismatches.is_empty() {
        Ok(())
    } else {
        Err(mismatches)
    }
}

pub fn file_digest(bytes: &[u8]) -> String {
    sha256_hex(bytes)
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers see the old or the new content, never a mix.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(|e| PipelineError::io(parent, e))?;
    tmp.write_all(bytes).and_then(|_| tmp.as_file().sync_all()).map_err(|e| PipelineError::io(path, e))?;
    tmp.persist(path).map_err(|e| PipelineError::io(path, e.error))?;
    Ok(())
}

/// Exclusive use of a pipeline directory; released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<DirLock, PipelineError> {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Runtime(format!(
                "{} is in use by another stage (remove {} if no stage is running)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(PipelineError::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
