//! Stage execution: input verification, pin inheritance, atomic outputs and
//! the manifest record.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::de::DeserializeOwned;

use crate::error::{invalid, PipelineError};
use crate::manifest::{file_digest, write_atomic, DirLock, PipelineManifest, Pins, StageRecord};
use crate::stages::Stage;

/// What a stage sees while it runs.
pub struct Ctx<'a> {
    pub dir: PathBuf,
    pub manifest: &'a PipelineManifest,
    pub allow_mismatch: bool,
    pub pins: Pins,
    cache: BTreeMap<String, Vec<u8>>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl Ctx<'_> {
    /// Bytes of a declared input, exactly as verified before the stage began.
    pub fn read(&self, rel: &str) -> Result<&[u8], PipelineError> {
        self.cache
            .get(rel)
            .map(Vec::as_slice)
            .ok_or_else(|| PipelineError::Runtime(format!("`{rel}` was not declared as an input")))
    }

    pub fn read_text(&self, rel: &str) -> Result<&str, PipelineError> {
        std::str::from_utf8(self.read(rel)?).map_err(|_| invalid(format!("{rel}: not UTF-8")))
    }

    pub fn input_digest(&self, rel: &str) -> Option<&str> {
        self.inputs.get(rel).map(String::as_str)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        check_relative(rel)?;
        write_atomic(&self.dir.join(rel), bytes)?;
        self.outputs.insert(rel.to_string(), file_digest(bytes));
        Ok(())
    }

    /// Adds pins learned by this stage; a value that contradicts the input
    /// chain is a mismatch.
    pub fn pin(&mut self, pins: Pins) -> Result<(), PipelineError> {
        let mut merged = self.pins.clone();
        match merged.merge(&pins) {
            Ok(()) => {
                self.pins = merged;
                Ok(())
            }
            Err(name) if self.allow_mismatch => {
                log::warn!("{name} differs from the one its inputs were built with; continuing as overridden");
                Ok(())
            }
            Err(name) => Err(PipelineError::Mismatch(format!("{name} differs from the one the stage inputs were built with"))),
        }
    }
}

/// A stage's parsed configuration.
pub trait StageConfig: DeserializeOwned {
    /// Relative paths read by the stage.
    fn inputs(&self) -> Vec<String>;
    fn run(&self, ctx: &mut Ctx) -> Result<(), PipelineError>;
}

pub(crate) fn check_relative(rel: &str) -> Result<(), PipelineError> {
    let p = Path::new(rel);
    if rel.is_empty() || p.components().any(|c| !matches!(c, Component::Normal(_))) {
        return Err(invalid(format!("`{rel}`: artifact paths must be relative to the pipeline directory, without `..`")));
    }
    Ok(())
}

pub(crate) fn parse_config<T: DeserializeOwned>(text: &str) -> Result<T, PipelineError> {
    toml::from_str(text).map_err(|e| invalid(format!("config: {e}")))
}

/// Runs one stage in `dir` with the given configuration text.
pub fn run_stage(
    dir: &Path,
    stage: Stage,
    config_path: &str,
    config_text: &str,
    allow_mismatch: bool,
) -> Result<StageRecord, PipelineError> {
    let _lock = DirLock::acquire(dir)?;
    let manifest = PipelineManifest::load(dir)?;
    stage.dispatch(Runner { dir, manifest: &manifest, config_path, config_text, allow_mismatch })
}

pub(crate) struct Runner<'a> {
    dir: &'a Path,
    manifest: &'a PipelineManifest,
    config_path: &'a str,
    config_text: &'a str,
    allow_mismatch: bool,
}

impl Runner<'_> {
    pub(crate) fn go<C: StageConfig>(self, stage: Stage) -> Result<StageRecord, PipelineError> {
        let config: C = parse_config(self.config_text)?;
        let mut ctx = Ctx {
            dir: self.dir.to_path_buf(),
            manifest: self.manifest,
            allow_mismatch: self.allow_mismatch,
            pins: Pins::default(),
            cache: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        };
        for rel in config.inputs() {
            check_relative(&rel)?;
            let path = self.dir.join(&rel);
            let bytes = fs::read(&path).map_err(|e| invalid(format!("missing input {}: {e}", path.display())))?;
            let digest = file_digest(&bytes);
            if let Some(producer) = self.manifest.producer(&rel) {
                if producer.outputs[&rel] != digest {
                    return Err(PipelineError::Mismatch(format!(
                        "{rel} does not match the digest recorded by stage {} ({}); it was modified after it was written",
                        producer.seq, producer.stage
                    )));
                }
                let inherited = producer.pins.clone();
                ctx.pin(inherited)?;
            }
            ctx.inputs.insert(rel.clone(), digest);
            ctx.cache.insert(rel, bytes);
        }
        config.run(&mut ctx)?;
        let record = StageRecord {
            seq: self.manifest.next_seq(),
            stage: stage.name().to_string(),
            config_path: self.config_path.to_string(),
            config_digest: file_digest(self.config_text.as_bytes()),
            config_text: self.config_text.to_string(),
            allow_mismatch: self.allow_mismatch,
            inputs: ctx.inputs,
            outputs: ctx.outputs,
            pins: ctx.pins,
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        };
        PipelineManifest::append(self.dir, &record)?;
        Ok(record)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayDifference {
    pub seq: u64,
    pub stage: String,
    pub artifact: String,
    pub recorded: Option<String>,
    pub replayed: Option<String>,
}

/// Re-executes every recorded stage of `src` inside the empty directory
/// `dst`, copying only inputs no stage produced, and compares output digests.
pub fn replay(src: &Path, dst: &Path) -> Result<Vec<ReplayDifference>, PipelineError> {
    let manifest = PipelineManifest::load(src)?;
    if manifest.records.is_empty() {
        return Err(invalid(format!("{} has no recorded stages", src.display())));
    }
    if dst.exists() && fs::read_dir(dst).map_err(|e| PipelineError::io(dst, e))?.next().is_some() {
        return Err(invalid(format!("replay target {} must be empty", dst.display())));
    }
    let mut produced: BTreeMap<&str, &str> = BTreeMap::new();
    let mut differences = Vec::new();
    for rec in &manifest.records {
        let stage = Stage::parse(&rec.stage).ok_or_else(|| invalid(format!("unknown stage `{}` in manifest", rec.stage)))?;
        for (rel, digest) in &rec.inputs {
            if produced.contains_key(rel.as_str()) {
                continue;
            }
            check_relative(rel)?;
            let bytes = fs::read(src.join(rel)).map_err(|e| PipelineError::io(&src.join(rel), e))?;
            if &file_digest(&bytes) != digest {
                return Err(PipelineError::Mismatch(format!("external input {rel} changed since stage {} read it", rec.seq)));
            }
            write_atomic(&dst.join(rel), &bytes)?;
        }
        let again = run_stage(dst, stage, &rec.config_path, &rec.config_text, rec.allow_mismatch)?;
        for (rel, digest) in &rec.outputs {
            let new = again.outputs.get(rel);
            if new != Some(digest) {
                differences.push(ReplayDifference {
                    seq: rec.seq,
                    stage: rec.stage.clone(),
                    artifact: rel.clone(),
                    recorded: Some(digest.clone()),
                    replayed: new.cloned(),
                });
            }
        }
        for (rel, digest) in &rec.outputs {
            produced.insert(rel, digest);
        }
    }
    Ok(differences)
}
