//! Stage configurations and their implementations.

mod accuracy;
mod corpus;
mod data;
mod model;
mod text;

use d2tforge::schema::{load_schema, Schema, StructuredExample};
use d2tforge::template::TemplatePack;
use d2tforge::tokenizer::Vocab;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, PipelineError};
use crate::manifest::{Pins, StageRecord};
use crate::runner::{Ctx, Runner};

pub use accuracy::{AccEvalConfig, AccgenConfig};
pub use corpus::{BacktranslateConfig, CdsScoreConfig, CdsSelectConfig, CorpusFilterConfig, CorpusScoreConfig};
pub use data::{RenderConfig, SynthgenConfig};
pub use model::{D2tEvalConfig, D2tInferConfig, D2tTrainConfig, Prediction, TokTrainConfig};
pub use text::{AnnotateConfig, Annotated, PlaceholdersConfig};

macro_rules! stages {
    ($($variant:ident => $name:literal, $config:ty;)*) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum Stage {
            $($variant,)*
        }

        impl Stage {
            pub const ALL: &'static [Stage] = &[$(Stage::$variant,)*];

            pub fn name(self) -> &'static str {
                match self {
                    $(Stage::$variant => $name,)*
                }
            }

            pub(crate) fn dispatch(self, runner: Runner) -> Result<StageRecord, PipelineError> {
                match self {
                    $(Stage::$variant => runner.go::<$config>(self),)*
                }
            }
        }
    };
}

stages! {
    Synthgen => "synthgen", SynthgenConfig;
    Render => "render", RenderConfig;
    CorpusScore => "corpus-score", CorpusScoreConfig;
    CorpusFilter => "corpus-filter", CorpusFilterConfig;
    Backtranslate => "backtranslate", BacktranslateConfig;
    CdsScore => "cds-score", CdsScoreConfig;
    CdsSelect => "cds-select", CdsSelectConfig;
    Accgen => "accgen", AccgenConfig;
    AccEval => "acc-eval", AccEvalConfig;
    TokTrain => "tok-train", TokTrainConfig;
    D2tTrain => "d2t-train", D2tTrainConfig;
    D2tEval => "d2t-eval", D2tEvalConfig;
    D2tInfer => "d2t-infer", D2tInferConfig;
    Annotate => "annotate", AnnotateConfig;
    Placeholders => "placeholders", PlaceholdersConfig;
}

impl Stage {
    pub fn parse(name: &str) -> Option<Stage> {
        Stage::ALL.iter().copied().find(|s| s.name() == name)
    }
}

/// One rendered example: a structured input with its English targets and,
/// when a translator was configured, a translation of the first target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rendered {
    pub id: u64,
    pub example: StructuredExample,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<usize>,
    pub targets: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translation: Option<String>,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

fn is_one(w: &f64) -> bool {
    *w == 1.0
}

pub(crate) fn read_jsonl<T: serde::de::DeserializeOwned>(ctx: &Ctx, rel: &str) -> Result<Vec<T>, PipelineError> {
    ctx.read_text(rel)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| invalid(format!("{rel}:{}: {e}", i + 1))))
        .collect()
}

pub(crate) fn jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it).expect("serializable"));
        out.push('\n');
    }
    out.into_bytes()
}

pub(crate) fn pretty_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

pub(crate) fn lines(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.trim().is_empty()).collect()
}

/// Reads and pins a schema.
pub(crate) fn schema_input(ctx: &mut Ctx, rel: &str) -> Result<Schema, PipelineError> {
    let schema = load_schema(ctx.read_text(rel)?).map_err(|e| invalid(format!("{rel}: {e}")))?;
    ctx.pin(Pins { schema_digest: Some(schema.digest().to_string()), ..Default::default() })?;
    Ok(schema)
}

pub(crate) fn pack_input(ctx: &mut Ctx, rel: &str, schema: &Schema) -> Result<TemplatePack, PipelineError> {
    let pack = TemplatePack::parse(ctx.read_text(rel)?).map_err(|e| invalid(format!("{rel}: {e}")))?;
    pack.check(schema).map_err(|e| invalid(format!("{rel}: {e}")))?;
    ctx.pin(Pins { pack_hash: Some(pack.pack_hash().to_string()), ..Default::default() })?;
    Ok(pack)
}

pub(crate) fn vocab_input(ctx: &mut Ctx, rel: &str) -> Result<Vocab, PipelineError> {
    let vocab = Vocab::from_text(ctx.read_text(rel)?).map_err(|e| invalid(format!("{rel}: {e}")))?;
    ctx.pin(Pins { vocab_digest: Some(vocab.digest()), ..Default::default() })?;
    Ok(vocab)
}
