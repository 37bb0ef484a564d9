//! Vocabulary training, data-to-text training, evaluation and inference.

use std::collections::BTreeMap;

use d2tforge::encode::{encode_table, DataTable, TableDims, DEFAULT_MAX_ROWS};
use d2tforge::evalkit::{eval_report, EvalRecord, MetricSelection};
use d2tforge::model::checkpoint::Checkpoint;
use d2tforge::model::{greedy_ids, ids_to_text, target_ids, ModelConfig, ModelError, ModelParams, TrainConfig, TrainExample, Trainer};
use d2tforge::schema::{Schema, StructuredExample};
use d2tforge::synthgen::SplitLabel;
use d2tforge::tokenizer::{train_vocab, Vocab, DEFAULT_SIZE};
use d2tforge::template::TemplatePack;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{jsonl, read_jsonl, schema_input, vocab_input, Rendered};
use crate::error::{invalid, runtime, PipelineError};
use crate::manifest::{check_compatibility, Pins};
use crate::runner::{Ctx, StageConfig};

fn model_error(e: ModelError) -> PipelineError {
    match e {
        ModelError::Config(_) | ModelError::Encode(_) | ModelError::Checkpoint(_) | ModelError::EmptyDataset => invalid(e),
        e => runtime(e),
    }
}

fn default_size() -> usize {
    DEFAULT_SIZE
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TokTrainConfig {
    /// Rendered examples whose targets form the corpus.
    pub rendered: String,
    #[serde(default = "default_size")]
    pub size: usize,
    pub output: String,
}

impl StageConfig for TokTrainConfig {
    fn inputs(&self) -> Vec<String> {
        vec![self.rendered.clone()]
    }

    fn run(&self, ctx: &mut Ctx) -> Result<(), PipelineError> {
        let rendered: Vec<Rendered> = read_jsonl(ctx, &self.rendered)?;
        let corpus = rendered.iter().flat_map(|r| r.targets.iter().map(String::as_str));
        let vocab = train_vocab(corpus, self.size).map_err(invalid)?;
        ctx.pin(Pins { vocab_digest: Some(vocab.digest()), ..Default::default() })?;
        ctx.write(&self.output, vocab.to_text().as_bytes())
    }
}

fn default_max_rows() -> usize {
    DEFAULT_MAX_ROWS
}

fn default_hidden() -> usize {
    256
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct D2tTrainConfig {
    pub schema: String,
    pub vocab: String,
    /// Training targets from `render` in sample mode.
    pub rendered: String,
    /// Continue from this checkpoint, which must hold optimizer state.
    #[serde(default)]
    pub resume: Option<String>,
    #[serde(default = "default_max_rows")]
    pub max_rows: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default)]
    pub train: TrainConfig,
    pub checkpoint_output: String,
    /// One JSON object per logged step.
    pub metrics_output: String,
}

fn training_data(
    rendered: &[Rendered],
    schema: &Schema,
    vocab: &Vocab,
    max_rows: usize,
) -> Result<Vec<TrainExample>, PipelineError> {
    rendered
        .iter()
        .map(|r| {
            let target = r.targets.first().ok_or_else(|| invalid(format!("example {} has no target", r.id)))?;
            let table = encode_table(&r.example, schema, vocab, max_rows).map_err(|e| invalid(format!("example {}: {e}", r.id)))?;
            Ok(TrainExample { table, target: target_ids(vocab, target), weight: r.weight })
        })
        .collect()
}

impl StageConfig for D2tTrainConfig {
    fn inputs(&self) -> Vec<String> {
        let mut v = vec![self.schema.clone(), self.vocab.clone(), self.rendered.clone()];
        v.extend(self.resume.clone());
        v
    }

    fn run(&self, ctx: &mut Ctx) -> Result<(), PipelineError> {
        let schema = schema_input(ctx, &self.schema)?;
        let vocab = vocab_input(ctx, &self.vocab)?;
        let rendered: Vec<Rendered> = read_jsonl(ctx, &self.rendered)?;
        let data = training_data(&rendered, &schema, &vocab, self.max_rows)?;
        drop(rendered);
        let mut trainer = match &self.resume {
            Some(path) => {
                let ck = Checkpoint::<f32>::from_bytes(ctx.read(path)?).map_err(model_error)?;
                let adam = ck.adam.ok_or_else(|| invalid(format!("{path} holds no optimizer state")))?;
                self.train.validate().map_err(model_error)?;
                Trainer::resume(ck.params, adam, self.train.clone(), ck.step)
            }
            None => {
                let dims = TableDims::for_schema(&schema, &vocab, self.max_rows);
                let config = ModelConfig { hidden: self.hidden, ..ModelConfig::desk(dims) };
                config.validate().map_err(model_error)?;
                let mut rng = ChaCha8Rng::seed_from_u64(self.train.seed);
                Trainer::new(ModelParams::init(config, &mut rng), self.train.clone()).map_err(model_error)?
            }
        };
        log::info!(
            "training {} parameters on {} examples for {} steps",
            trainer.params.parameter_count(),
            data.len(),
            self.train.total_steps
        );
        let mut metrics = String::new();
        let mut write_error = None;
        let (schema_digest, vocab_digest) = (schema.digest().to_string(), vocab.digest());
        let result = trainer.run(
            &data,
            |s| {
                log::info!("step {} loss {:.4} lr {:.2e}", s.step, s.mean_token_nll, s.lr);
                metrics.push_str(&serde_json::to_string(s).expect("serializable"));
                metrics.push('\n');
            },
            |t| {
                let ck = Checkpoint {
                    params: t.params.clone(),
                    adam: Some(t.adam.clone()),
                    train: Some(t.config.clone()),
                    step: t.step,
                    schema_digest: Some(schema_digest.clone()),
                    vocab_digest: Some(vocab_digest.clone()),
                };
                if let Err(e) = ctx.write(&self.checkpoint_output, &ck.to_bytes()) {
                    write_error = Some(e);
                    return Err(ModelError::Checkpoint("could not write checkpoint".into()));
                }
                Ok(())
            },
        );
        if let Some(e) = write_error {
            return Err(e);
        }
        result.map_err(model_error)?;
        ctx.write(&self.metrics_output, metrics.as_bytes())
    }
}

/// Trained parameters plus the pins they were trained under: the producing
/// stage's when recorded, the checkpoint header's otherwise.
fn load_checkpoint(ctx: &Ctx, rel: &str) -> Result<(Checkpoint<f32>, Pins), PipelineError> {
    let ck = Checkpoint::<f32>::from_bytes(ctx.read(rel)?).map_err(model_error)?;
    let digest = ctx.input_digest(rel).map(str::to_string);
    let mut pins = match ctx.manifest.producer(rel) {
        Some(p) => p.pins.clone(),
        None => Pins { schema_digest: ck.schema_digest.clone(), vocab_digest: ck.vocab_digest.clone(), ..Default::default() },
    };
    pins.checkpoint_digest = digest;
    Ok((ck, pins))
}

fn default_max_len() -> usize {
    100
}

fn default_batch() -> usize {
    64
}

fn decode_all(
    ck: &Checkpoint<f32>,
    tables: &[DataTable],
    vocab: &Vocab,
    max_len: usize,
    batch: usize,
) -> Result<Vec<(String, bool)>, PipelineError> {
    let mut out = Vec::with_capacity(tables.len());
    for chunk in tables.chunks(batch.max(1)) {
        let refs: Vec<&DataTable> = chunk.iter().collect();
        for (ids, truncated) in greedy_ids(&ck.params, &refs, max_len).map_err(model_error)? {
            out.push((ids_to_text(vocab, &ids).map_err(model_error)?, truncated));
        }
    }
    Ok(out)
}

fn tables(examples: &[&StructuredExample], schema: &Schema, vocab: &Vocab, max_rows: usize) -> Result<Vec<DataTable>, PipelineError> {
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| encode_table(e, schema, vocab, max_rows).map_err(|err| invalid(format!("example {}: {err}", i + 1))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: u64,
    pub text: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct D2tEvalConfig {
    pub schema: String,
    pub vocab: String,
    pub checkpoint: String,
    /// Test examples with every variant as references, from `render` in all mode.
    pub references: String,
    /// `line \t label` split manifest from `synthgen`; every example counts
    /// as SEEN_INTENT without it.
    #[serde(default)]
    pub splits: Option<String>,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub report_output: String,
    pub predictions_output: String,
}

fn parse_splits(text: &str) -> Result<BTreeMap<u64, SplitLabel>, PipelineError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (id, label) = l.split_once('\t').ok_or_else(|| invalid(format!("bad split line `{l}`")))?;
            let id = id.parse().map_err(|_| invalid(format!("bad split line `{l}`")))?;
            let label = SplitLabel::parse(label).ok_or_else(|| invalid(format!("unknown split `{label}`")))?;
            Ok((id, label))
        })
        .collect()
}

impl StageConfig for D2tEvalConfig {
    fn inputs(&self) -> Vec<String> {
        let mut v = vec![self.schema.clone(), self.vocab.clone(), self.checkpoint.clone(), self.references.clone()];
        v.extend(self.splits.clone());
        v
    }

    fn run(&self, ctx: &mut Ctx) -> Result<(), PipelineError> {
        let schema = schema_input(ctx, &self.schema)?;
        let vocab = vocab_input(ctx, &self.vocab)?;
        let (ck, trained) = load_checkpoint(ctx, &self.checkpoint)?;
        ctx.pin(trained)?;
        let refs: Vec<Rendered> = read_jsonl(ctx, &self.references)?;
        let splits = match &self.splits {
            Some(s) => parse_splits(ctx.read_text(s)?)?,
            None => BTreeMap::new(),
        };
        let examples: Vec<&StructuredExample> = refs.iter().map(|r| &r.example).collect();
        let tables = tables(&examples, &schema, &vocab, ck.params.config.max_rows())?;
        let decoded = decode_all(&ck, &tables, &vocab, self.max_len, self.batch_size)?;
        let mut records = Vec::with_capacity(refs.len());
        let mut predictions = Vec::with_capacity(refs.len());
        for (r, (text, truncated)) in refs.iter().zip(decoded) {
            records.push(EvalRecord {
                id: r.id,
                candidate: text.clone(),
                references: r.targets.clone(),
                split: splits.get(&r.id).copied().unwrap_or(SplitLabel::SeenIntent),
            });
            predictions.push(Prediction { id: r.id, text, truncated });
        }
        let report = eval_report(&records, MetricSelection::default()).map_err(invalid)?;
        if let Some(em) = report.overall.exact_match_rate {
            log::info!("exact match {em:.4} over {} examples", report.overall.count);
        }
        let mut json = report.to_json();
        json.push('\n');
        ctx.write(&self.report_output, json.as_bytes())?;
        ctx.write(&self.predictions_output, &jsonl(&predictions))
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct D2tInferConfig {
    pub schema: String,
    /// The template pack the deployment serves with; checked against the
    /// one the checkpoint was trained on.
    pub templates: String,
    pub vocab: String,
    pub checkpoint: String,
    /// Structured examples, one JSON object per line.
    pub examples: String,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub output: String,
}

impl StageConfig for D2tInferConfig {
    fn inputs(&self) -> Vec<String> {
        vec![self.schema.clone(), self.templates.clone(), self.vocab.clone(), self.checkpoint.clone(), self.examples.clone()]
    }

    fn run(&self, ctx: &mut Ctx) -> Result<(), PipelineError> {
        let schema = d2tforge::schema::load_schema(ctx.read_text(&self.schema)?).map_err(|e| invalid(format!("{}: {e}", self.schema)))?;
        let pack = TemplatePack::parse(ctx.read_text(&self.templates)?).map_err(|e| invalid(format!("{}: {e}", self.templates)))?;
        let vocab = Vocab::from_text(ctx.read_text(&self.vocab)?).map_err(|e| invalid(format!("{}: {e}", self.vocab)))?;
        let (ck, trained) = load_checkpoint(ctx, &self.checkpoint)?;
        let serving = Pins {
            schema_digest: Some(schema.digest().to_string()),
            pack_hash: Some(pack.pack_hash().to_string()),
            vocab_digest: Some(vocab.digest()),
            ..Default::default()
        };
        if let Err(mismatches) = check_compatibility(&trained, &serving) {
            let names: Vec<String> = mismatches
                .iter()
                .map(|m| {
                    format!(
                        "{} (trained {}, serving {})",
                        m.artifact,
                        m.trained.as_deref().unwrap_or("unknown"),
                        m.serving.as_deref().unwrap_or("unknown")
                    )
                })
                .collect();
            let message = format!("checkpoint {} is incompatible: {}", self.checkpoint, names.join("; "));
            if !ctx.allow_mismatch {
                return Err(PipelineError::Mismatch(message));
            }
            log::warn!("{message}; continuing as overridden");
        }
        ctx.pin(trained)?;
        ctx.pin(serving)?;
        let examples: Vec<StructuredExample> = read_jsonl(ctx, &self.examples)?;
        let refs: Vec<&StructuredExample> = examples.iter().collect();
        let tables = tables(&refs, &schema, &vocab, ck.params.config.max_rows())?;
        let decoded = decode_all(&ck, &tables, &vocab, self.max_len, self.batch_size)?;
        let predictions: Vec<Prediction> = decoded
            .into_iter()
            .enumerate()
            .map(|(i, (text, truncated))| Prediction { id: i as u64 + 1, text, truncated })
            .collect();
        ctx.write(&self.output, &jsonl(&predictions))
    }
}
