//! Synthetic examples and template rendering.

use d2tforge::quality::DictionaryTranslator;
use d2tforge::schema::StructuredExample;
use d2tforge::synthgen::{generate_dataset, SamplerConfig, SplitPlan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{jsonl, pack_input, read_jsonl, schema_input, Rendered};
use crate::error::{invalid, PipelineError};
use crate::manifest::Pins;
use crate::runner::{parse_config, Ctx, StageConfig};

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SynthgenConfig {
    pub schema: String,
    /// TOML sampler settings: seed, value pools and ranges.
    pub sampler: String,
    pub train_size: usize,
    #[serde(default)]
    pub split: SplitPlan,
    pub train_output: String,
    pub test_output: String,
    pub splits_output: String,
}

impl StageConfig for SynthgenConfig {
    fn inputs(&self) -> Vec<String> {
        vec![self.schema.clone(), self.sampler.clone()]
    }

    fn run(&self, ctx: &mut Ctx) -> Result<(), PipelineError> {
        let schema = schema_input(ctx, &self.schema)?;
        let sampler: SamplerConfig = parse_config(ctx.read_text(&self.sampler)?)?;
        ctx.pin(Pins { sampler_seed: Some(sampler.seed), ..Default::default() })?;
        let ds = generate_dataset(&schema, schema.intents(), self.train_size, &self.split, &sampler).map_err(invalid)?;
        let test: Vec<&StructuredExample> = ds.test.iter().map(|(e, _)| e).collect();
        ctx.write(&self.train_output, &jsonl(&ds.train))?;
        ctx.write(&self.test_output, &jsonl(&test))?;
        ctx.write(&self.splits_output, ds.split_manifest().as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderMode {
    /// One variant per example, drawn from `seed`: training targets.
    Sample,
    /// Every variant: evaluation references.
    All,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    pub schema: String,
    pub templates: String,
    /// Example JSON-lines.
    pub examples: String,
    pub mode: RenderMode,
    #[serde(default)]
    pub seed: u64,
    /// Optional `english \t translation` word list. When set, each example
    /// also gets a toy translation of its first target, rendered with
    /// localized argument values.
    #[serde(default)]
    pub translator: Option<String>,
    pub output: String,
}

impl StageConfig for RenderConfig {
    fn inputs(&self) -> Vec<String> {
        let mut v = vec![self.schema.clone(), self.templates.clone(), self.examples.clone()];
        v.extend(self.translator.clone());
        v
    }

    fn run(&self, ctx: &mut Ctx) -> Result<(), PipelineError> {
        let schema = schema_input(ctx, &self.schema)?;
        let pack = pack_input(ctx, &self.templates, &schema)?;
        let examples: Vec<StructuredExample> = read_jsonl(ctx, &self.examples)?;
        let translator = match &self.translator {
            Some(t) => Some(DictionaryTranslator::from_tsv(ctx.read_text(t)?, true)),
            None => None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::with_capacity(examples.len());
        for (i, ex) in examples.into_iter().enumerate() {
            let n = pack.variant_count(&ex.intent).map_err(invalid)?;
            let (variant, targets) = match self.mode {
                RenderMode::Sample => {
                    let k = rng.gen_range(0..n);
                    (Some(k), vec![pack.render(&ex, &schema, k).map_err(invalid)?.text])
                }
                RenderMode::All => {
                    let all = pack.render_all_variants(&ex, &schema).map_err(invalid)?;
                    (None, all.into_iter().map(|a| a.text).collect())
                }
            };
            let translation = match &translator {
                Some(t) => {
                    let mut localized = ex.clone();
                    for (k, v) in &ex.localized_values {
                        localized.values.insert(k.clone(), v.clone());
                    }
                    let english = pack.render(&localized, &schema, variant.unwrap_or(0)).map_err(invalid)?.text;
                    Some(t.translate(&english).map_err(invalid)?)
                }
                None => None,
            };
            out.push(Rendered { id: i as u64 + 1, example: ex, variant, targets, translation, weight: 1.0 });
        }
        ctx.write(&self.output, &jsonl(&out))
    }
}
