//! Labeled accuracy data and classifier evaluation.

use d2tforge::accgen::{self, evaluate_classifier, make_dataset, LexiconOverlapClassifier, LexiconTagger, Mix, SourcedPair, TrigramIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{pretty_json, read_jsonl, schema_input, Rendered};
use crate::error::{invalid, PipelineError};
use crate::runner::{Ctx, StageConfig};

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AccgenConfig {
    pub schema: String,
    /// Rendered examples with translations, from `render` in sample mode.
    pub rendered: String,
    /// English function words; the built-in list when absent.
    #[serde(default)]
    pub function_words: Option<String>,
    pub trigram_fraction: f64,
    pub swap_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    pub output: String,
    pub report_output: String,
}

impl StageConfig for AccgenConfig {
    fn inputs(&self) -> Vec<String> {
        let mut v = vec![self.schema.clone(), self.rendered.clone()];
        v.extend(self.function_words.clone());
        v
    }

    fn run(&self, ctx: &mut Ctx) -> Result<(), PipelineError> {
        let schema = schema_input(ctx, &self.schema)?;
        let rendered: Vec<Rendered> = read_jsonl(ctx, &self.rendered)?;
        let mut tagger = match &self.function_words {
            Some(f) => LexiconTagger::from_lexicon(ctx.read_text(f)?),
            None => LexiconTagger::english(),
        };
        tagger.add_examples(rendered.iter().map(|r| &r.example), &schema);
        let mut positives = Vec::with_capacity(rendered.len());
        for r in rendered {
            let (Some(variant), Some(translation), Some(english)) = (r.variant, r.translation, r.targets.first()) else {
                return Err(invalid(format!(
                    "{}: example {} needs a sampled variant and a translation",
                    self.rendered, r.id
                )));
            };
            positives.push(SourcedPair { id: r.id, english: english.clone(), example: r.example, variant, translation });
        }
        let index = TrigramIndex::build(positives.iter().map(|p| p.english.as_str()), &tagger);
        let mix = Mix { trigram_fraction: self.trigram_fraction, swap_fraction: self.swap_fraction };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (pairs, report) = make_dataset(&positives, &index, &tagger, mix, &mut rng).map_err(invalid)?;
        ctx.write(&self.output, accgen::render_tsv(&pairs).as_bytes())?;
        ctx.write(&self.report_output, &pretty_json(&report))
    }
}

fn half() -> f64 {
    0.5
}

/// Scores labeled pairs with the lexicon-overlap baseline.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AccEvalConfig {
    pub labeled: String,
    /// `english \t translation` word pairs.
    pub lexicon: String,
    #[serde(default)]
    pub source_function_words: Option<String>,
    pub target_function_words: String,
    #[serde(default = "half")]
    pub threshold: f64,
    pub output: String,
}

impl StageConfig for AccEvalConfig {
    fn inputs(&self) -> Vec<String> {
        let mut v = vec![self.labeled.clone(), self.lexicon.clone(), self.target_function_words.clone()];
        v.extend(self.source_function_words.clone());
        v
    }

    fn run(&self, ctx: &mut Ctx) -> Result<(), PipelineError> {
        let labeled = accgen::parse_tsv(ctx.read_text(&self.labeled)?).map_err(invalid)?;
        let source_fw = match &self.source_function_words {
            Some(f) => ctx.read_text(f)?,
            None => accgen::DEFAULT_FUNCTION_WORDS,
        };
        let classifier =
            LexiconOverlapClassifier::new(ctx.read_text(&self.lexicon)?, source_fw, ctx.read_text(&self.target_function_words)?);
        let metrics = evaluate_classifier(|e, t| classifier.probability_correct(e, t), &labeled, self.threshold);
        ctx.write(&self.output, &pretty_json(&metrics))
    }
}
