//! Monolingual filtering, back-translation and contrastive data selection.

use d2tforge::cds::{self, assign_weights, cds_score_corpus, NgramScorer, SelectionPolicy, ADAPT_WEIGHT, DEFAULT_NGRAM_ALPHA};
use d2tforge::quality::{self, backtranslate_pairs, DictionaryTranslator, Histogram, ParallelPair, QualityModel};
use serde::{Deserialize, Serialize};

use super::{jsonl, lines, pretty_json, read_jsonl, Rendered};
use crate::error::{invalid, PipelineError};
use crate::runner::{Ctx, StageConfig};

fn default_alpha() -> f64 {
    quality::DEFAULT_ALPHA
}

fn default_epsilon() -> f64 {
    quality::DEFAULT_EPSILON
}

/// In-domain and general corpora, one sentence per line.
#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct QualityInputs {
    pub in_domain: String,
    pub corpus: String,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

impl QualityInputs {
    fn paths(&self) -> Vec<String> {
        vec![self.in_domain.clone(), self.corpus.clone()]
    }

    fn fit<'c>(&self, ctx: &'c Ctx) -> Result<(QualityModel, Vec<&'c str>), PipelineError> {
        let d = lines(ctx.read_text(&self.in_domain)?);
        let c = lines(ctx.read_text(&self.corpus)?);
        let model = QualityModel::fit(d.iter().copied(), c.iter().copied(), self.alpha, self.epsilon).map_err(invalid)?;
        Ok((model, c))
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct CorpusScoreConfig {
    #[serde(flatten)]
    pub data: QualityInputs,
    /// `score \t sentence` per corpus line.
    pub scores_output: String,
    pub histogram_output: String,
}

impl StageConfig for CorpusScoreConfig {
    fn inputs(&self) -> Vec<String> {
        self.data.paths()
    }

    fn run(&self, ctx: &mut Ctx) -> Result<(), PipelineError> {
        let (model, corpus) = self.data.fit(ctx)?;
        let scores: Vec<f64> = corpus.iter().map(|s| model.score(s)).collect();
        let tsv: String = scores.iter().zip(&corpus).map(|(x, s)| format!("{x:?}\t{s}\n")).collect();
        let hist = Histogram::of(&scores, quality::HISTOGRAM_BINS);
        ctx.write(&self.scores_output, tsv.as_bytes())?;
        ctx.write(&self.histogram_output, &pretty_json(&hist))
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct CorpusFilterConfig {
    #[serde(flatten)]
    pub data: QualityInputs,
    pub threshold: f64,
    pub output: String,
    pub report_output: String,
}

impl StageConfig for CorpusFilterConfig {
    fn inputs(&self) -> Vec<String> {
        self.data.paths()
    }

    fn run(&self, ctx: &mut Ctx) -> Result<(), PipelineError> {
        let (model, corpus) = self.data.fit(ctx)?;
        let (kept, report) = quality::filter(&model, corpus.iter().copied(), self.threshold);
        let text: String = kept.iter().map(|s| format!("{s}\n")).collect();
        log::info!("kept {} of {} sentences", report.kept, report.kept + report.dropped);
        let report = pretty_json(&report);
        ctx.write(&self.output, text.as_bytes())?;
        ctx.write(&self.report_output, &report)
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct BacktranslateConfig {
    /// Target-language sentences, one per line.
    pub sentences: String,
    /// `target word \t english word` list used by the word-by-word translator.
    pub dictionary: String,
    /// Copy words missing from the dictionary instead of skipping the sentence.
    #[serde(default = "yes")]
    pub copy_unknown: bool,
    /// JSON-lines of `{source, target}` with the English side as source.
    pub output: String,
    pub report_output: String,
}

fn yes() -> bool {
    true
}

impl StageConfig for BacktranslateConfig {
    fn inputs(&self) -> Vec<String> {
        vec![self.sentences.clone(), self.dictionary.clone()]
    }

    fn run(&self, ctx: &mut Ctx) -> Result<(), PipelineError> {
        let translator = DictionaryTranslator::from_tsv(ctx.read_text(&self.dictionary)?, self.copy_unknown);
        let sentences = lines(ctx.read_text(&self.sentences)?);
        let (pairs, report) = backtranslate_pairs(&sentences, &translator);
        let report = pretty_json(&report);
        ctx.write(&self.output, &jsonl(&pairs))?;
        ctx.write(&self.report_output, &report)
    }
}

fn default_order() -> usize {
    4
}

fn default_ngram_alpha() -> f64 {
    DEFAULT_NGRAM_ALPHA
}

fn default_adapt_weight() -> f64 {
    ADAPT_WEIGHT
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CdsScoreConfig {
    /// General parallel pairs to score, JSON-lines of `{source, target}`.
    pub pairs: String,
    /// In-domain examples with translations, from `render`; their
    /// (English, translation) pairs adapt the base scorer.
    pub in_domain: String,
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default = "default_ngram_alpha")]
    pub alpha: f64,
    #[serde(default = "default_adapt_weight")]
    pub adapt_weight: f64,
    pub output: String,
}

impl StageConfig for CdsScoreConfig {
    fn inputs(&self) -> Vec<String> {
        vec![self.pairs.clone(), self.in_domain.clone()]
    }

    fn run(&self, ctx: &mut Ctx) -> Result<(), PipelineError> {
        let general: Vec<ParallelPair> = read_jsonl(ctx, &self.pairs)?;
        let rendered: Vec<Rendered> = read_jsonl(ctx, &self.in_domain)?;
        let general: Vec<(String, String)> = general.into_iter().map(|p| (p.source, p.target)).collect();
        let in_domain: Vec<(String, String)> = rendered
            .into_iter()
            .filter_map(|r| Some((r.targets.into_iter().next()?, r.translation?)))
            .collect();
        if in_domain.is_empty() {
            return Err(invalid(format!("{}: no example has a translation", self.in_domain)));
        }
        let base = NgramScorer::build_with_alpha(&general, self.order, self.alpha).map_err(invalid)?;
        let adapted = base.adapt(&in_domain, self.adapt_weight);
        let (scored, rejected) = cds_score_corpus(&general, &base, &adapted);
        if !rejected.is_empty() {
            log::warn!("{} pairs had non-finite scores and were left out", rejected.len());
        }
        ctx.write(&self.output, cds::render_tsv(&scored).as_bytes())
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CdsSelectConfig {
    /// Scored pairs as written by `cds-score`.
    pub scores: String,
    pub selection: SelectionPolicy,
    pub output: String,
}

impl StageConfig for CdsSelectConfig {
    fn inputs(&self) -> Vec<String> {
        vec![self.scores.clone()]
    }

    fn run(&self, ctx: &mut Ctx) -> Result<(), PipelineError> {
        let mut scored = cds::parse_tsv(ctx.read_text(&self.scores)?).map_err(invalid)?;
        assign_weights(&mut scored, self.selection).map_err(invalid)?;
        ctx.write(&self.output, cds::render_tsv(&scored).as_bytes())
    }
}
