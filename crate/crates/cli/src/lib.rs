//! Stage runner for the d2tforge toolkit.
//!
//! Every stage reads a TOML config, verifies its inputs against the digests in
//! the pipeline directory's `manifest.jsonl`, writes its outputs atomically and
//! appends one record with the digests and version pins it used.

pub mod error;
pub mod manifest;
pub mod runner;
pub mod stages;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use error::PipelineError;
pub use runner::{replay, run_stage, ReplayDifference};
pub use stages::Stage;

#[derive(Debug, Parser)]
#[command(
    name = "d2tforge",
    version,
    about = "Run one pipeline stage or replay a pipeline",
    override_usage = "d2tforge <STAGE> --config <FILE> --pipeline-dir <DIR> [--allow-mismatch]\n       d2tforge replay --pipeline-dir <DIR> --into <DIR>",
    after_help = "Stages: synthgen, render, corpus-score, corpus-filter, backtranslate, cds-score, cds-select, accgen,\nacc-eval, tok-train, d2t-train, d2t-eval, d2t-infer, annotate, placeholders.\n\nExit codes: 0 success, 2 invalid config or input, 3 digest or pin mismatch, 4 runtime failure."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Re-execute every recorded stage into an empty directory and compare digests.
    Replay {
        #[arg(long)]
        pipeline_dir: PathBuf,
        #[arg(long)]
        into: PathBuf,
    },
    #[command(external_subcommand)]
    Stage(Vec<String>),
}

#[derive(Debug, Parser)]
#[command(no_binary_name = true)]
struct StageArgs {
    stage: String,
    /// Stage configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Directory holding the manifest; artifact paths are relative to it.
    #[arg(long)]
    pipeline_dir: PathBuf,
    /// Proceed when version pins disagree, recording the override.
    #[arg(long)]
    allow_mismatch: bool,
}

fn stage_names() -> String {
    Stage::ALL.iter().map(|s| s.name()).collect::<Vec<_>>().join(", ")
}

fn dispatch(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Replay { pipeline_dir, into } => {
            let diffs = replay(&pipeline_dir, &into)?;
            if diffs.is_empty() {
                println!("replay reproduced every recorded output");
                return Ok(());
            }
            for d in &diffs {
                println!(
                    "stage {} ({}) {}: recorded {} replayed {}",
                    d.seq,
                    d.stage,
                    d.artifact,
                    d.recorded.as_deref().unwrap_or("-"),
                    d.replayed.as_deref().unwrap_or("-")
                );
            }
            Err(PipelineError::Mismatch(format!("{} replayed outputs differ", diffs.len())))
        }
        Command::Stage(words) => {
            let args = StageArgs::try_parse_from(&words).map_err(|e| PipelineError::Validation(e.to_string()))?;
            let stage = Stage::parse(&args.stage).ok_or_else(|| {
                PipelineError::Validation(format!("unknown stage `{}`; expected one of {}", args.stage, stage_names()))
            })?;
            let text = std::fs::read_to_string(&args.config).map_err(|e| PipelineError::io(&args.config, e))?;
            let record = run_stage(&args.pipeline_dir, stage, &args.config.to_string_lossy(), &text, args.allow_mismatch)?;
            for (path, digest) in &record.outputs {
                println!("{digest}  {path}");
            }
            Ok(())
        }
    }
}

/// Parses `args` (without the program name) and runs the command; returns the
/// process exit code.
pub fn run_cli<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let argv = std::iter::once(std::ffi::OsString::from("d2tforge")).chain(args.into_iter().map(Into::into));
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
