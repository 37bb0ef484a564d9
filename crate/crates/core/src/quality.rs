//! Log-odds sentence quality scoring for monolingual web text.
//!
//! A sentence scores the sum, over its unigram and bigram features `w`, of
//! `logit(p_D(w)) - logit(p_C(w))` where `D` is a trusted in-domain set and `C`
//! the whole corpus. Sentences with a negative score are discarded, and the
//! survivors are paired with machine back-translations.

use std::collections::HashMap;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_EPSILON: f64 = 1e-9;
pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Error, PartialEq)]
pub enum QualityError {
    #[error("{0} sentence stream is empty")]
    EmptyStream(&'static str),
    #[error("smoothing alpha must be >= 0 and epsilon in (0, 0.5)")]
    BadSmoothing,
}

/// Lowercases, splits on Unicode whitespace and strips leading and trailing
/// punctuation from each token; tokens left empty are dropped.
pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Feature {
    Unigram(String),
    Bigram(String, String),
}

/// Unigram and bigram features of a token list, once per occurrence.
pub fn features(tokens: &[String]) -> Vec<Feature> {
    let mut out: Vec<Feature> = tokens.iter().cloned().map(Feature::Unigram).collect();
    out.extend(tokens.windows(2).map(|w| Feature::Bigram(w[0].clone(), w[1].clone())));
    out
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NgramStats {
    pub unigrams: HashMap<String, u64>,
    pub bigrams: HashMap<(String, String), u64>,
    pub unigram_total: u64,
    pub bigram_total: u64,
}

impl NgramStats {
    pub fn add_sentence(&mut self, sentence: &str) {
        let toks = tokenize(sentence);
        for t in &toks {
            *self.unigrams.entry(t.clone()).or_insert(0) += 1;
            self.unigram_total += 1;
        }
        for w in toks.windows(2) {
            *self.bigrams.entry((w[0].clone(), w[1].clone())).or_insert(0) += 1;
            self.bigram_total += 1;
        }
    }

    fn count(&self, f: &Feature) -> u64 {
        match f {
            Feature::Unigram(u) => self.unigrams.get(u).copied().unwrap_or(0),
            Feature::Bigram(a, b) => self.bigrams.get(&(a.clone(), b.clone())).copied().unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityModel {
    pub in_domain: NgramStats,
    pub corpus: NgramStats,
    pub alpha: f64,
    pub epsilon: f64,
    unigram_vocab: usize,
    bigram_vocab: usize,
}

impl QualityModel {
    /// Fits both count tables. Vocabularies are the union over both streams.
    pub fn fit<'a, D, C>(in_domain: D, corpus: C, alpha: f64, epsilon: f64) -> Result<QualityModel, QualityError>
    where
        D: IntoIterator<Item = &'a str>,
        C: IntoIterator<Item = &'a str>,
    {
        if !(alpha >= 0.0 && epsilon > 0.0 && epsilon < 0.5) {
            return Err(QualityError::BadSmoothing);
        }
        let mut d = NgramStats::default();
        let mut n = 0;
        for s in in_domain {
            d.add_sentence(s);
            n += 1;
        }
        if n == 0 {
            return Err(QualityError::EmptyStream("in-domain"));
        }
        let mut c = NgramStats::default();
        n = 0;
        for s in corpus {
            c.add_sentence(s);
            n += 1;
        }
        if n == 0 {
            return Err(QualityError::EmptyStream("corpus"));
        }
        let unigram_vocab = d.unigrams.keys().chain(c.unigrams.keys().filter(|k| !d.unigrams.contains_key(*k))).count();
        let bigram_vocab = d.bigrams.keys().chain(c.bigrams.keys().filter(|k| !d.bigrams.contains_key(*k))).count();
        Ok(QualityModel { in_domain: d, corpus: c, alpha, epsilon, unigram_vocab, bigram_vocab })
    }

    fn prob(&self, stats: &NgramStats, f: &Feature) -> f64 {
        let (total, vocab) = match f {
            Feature::Unigram(_) => (stats.unigram_total, self.unigram_vocab),
            Feature::Bigram(..) => (stats.bigram_total, self.bigram_vocab),
        };
        let denom = total as f64 + self.alpha * vocab as f64;
        let p = if denom > 0.0 { (stats.count(f) as f64 + self.alpha) / denom } else { 0.0 };
        p.clamp(self.epsilon, 1.0 - self.epsilon)
    }

    /// Smoothed, clamped `p_D(w)`.
    pub fn p_in_domain(&self, f: &Feature) -> f64 {
        self.prob(&self.in_domain, f)
    }

    /// Smoothed, clamped `p_C(w)`.
    pub fn p_corpus(&self, f: &Feature) -> f64 {
        self.prob(&self.corpus, f)
    }

    pub fn log_odds(&self, f: &Feature) -> f64 {
        let pd = self.p_in_domain(f);
        let pc = self.p_corpus(f);
        (pd / (1.0 - pd) * ((1.0 - pc) / pc)).ln()
    }

    /// Quality score; an empty sentence scores 0.
    pub fn score(&self, sentence: &str) -> f64 {
        features(&tokenize(sentence)).iter().map(|f| self.log_odds(f)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub min: f64,
    pub max: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn of(scores: &[f64], bins: usize) -> Histogram {
        let finite: Vec<f64> = scores.iter().copied().filter(|s| s.is_finite()).collect();
        if finite.is_empty() {
            return Histogram { min: 0.0, max: 0.0, counts: vec![0; bins] };
        }
        let min = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let max = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = (max - min) / bins as f64;
        let mut counts = vec![0u64; bins];
        for s in finite {
            let i = if width > 0.0 { (((s - min) / width) as usize).min(bins - 1) } else { 0 };
            counts[i] += 1;
        }
        Histogram { min, max, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub threshold: f64,
    pub kept: u64,
    pub dropped: u64,
    pub histogram: Histogram,
}

/// Keeps exactly the sentences scoring at or above `threshold`.
pub fn filter<'a, I>(model: &QualityModel, sentences: I, threshold: f64) -> (Vec<&'a str>, FilterReport)
where
    I: IntoIterator<Item = &'a str>,
{
    let mut kept = Vec::new();
    let mut scores = Vec::new();
    let mut dropped = 0;
    for s in sentences {
        let score = model.score(s);
        scores.push(score);
        if score >= threshold {
            kept.push(s);
        } else {
            dropped += 1;
        }
    }
    let report = FilterReport {
        threshold,
        kept: kept.len() as u64,
        dropped,
        histogram: Histogram::of(&scores, HISTOGRAM_BINS),
    };
    (kept, report)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("translation failed: {0}")]
pub struct TranslateError(pub String);

/// Batch string-to-string translation.
pub trait Translator {
    fn translate_batch(&self, sentences: &[&str]) -> Vec<Result<String, TranslateError>>;
}

/// Returns its input unchanged.
pub struct IdentityTranslator;

impl Translator for IdentityTranslator {
    fn translate_batch(&self, sentences: &[&str]) -> Vec<Result<String, TranslateError>> {
        sentences.iter().map(|s| Ok(s.to_string())).collect()
    }
}

/// Word-by-word dictionary translation on whitespace tokens.
///
/// Unknown words are copied when `copy_unknown` is set and are an error otherwise.
#[derive(Debug, Clone, Default)]
pub struct DictionaryTranslator {
    pub entries: HashMap<String, String>,
    pub copy_unknown: bool,
}

impl DictionaryTranslator {
    /// Parses `source \t target` lines.
    pub fn from_tsv(text: &str, copy_unknown: bool) -> DictionaryTranslator {
        let entries = text
            .lines()
            .filter_map(|l| l.split_once('\t'))
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        DictionaryTranslator { entries, copy_unknown }
    }

    pub fn translate(&self, sentence: &str) -> Result<String, TranslateError> {
        let words: Result<Vec<String>, TranslateError> = sentence
            .split_whitespace()
            .map(|w| match self.entries.get(w) {
                Some(t) => Ok(t.clone()),
                None if self.copy_unknown => Ok(w.to_string()),
                None => Err(TranslateError(format!("no entry for `{w}`"))),
            })
            .collect();
        Ok(words?.join(" "))
    }
}

impl Translator for DictionaryTranslator {
    fn translate_batch(&self, sentences: &[&str]) -> Vec<Result<String, TranslateError>> {
        sentences.iter().map(|s| self.translate(s)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPair {
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BacktranslationReport {
    pub pairs: usize,
    /// Zero-based indices of sentences the translator failed on.
    pub skipped: Vec<usize>,
}

/// Pairs every target-language sentence with its English back-translation.
/// Failed sentences are skipped and logged; order is preserved.
pub fn backtranslate_pairs<T: Translator + ?Sized>(
    target_sentences: &[&str],
    translator: &T,
) -> (Vec<ParallelPair>, BacktranslationReport) {
    let results = translator.translate_batch(target_sentences);
    let mut pairs = Vec::new();
    let mut report = BacktranslationReport::default();
    for (i, (target, result)) in target_sentences.iter().zip(results).enumerate() {
        match result {
            Ok(source) => pairs.push(ParallelPair { source, target: target.to_string() }),
            Err(e) => {
                warn!("skipping sentence {i}: {e}");
                report.skipped.push(i);
            }
        }
    }
    report.pairs = pairs.len();
    (pairs, report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cat_model(alpha: f64) -> QualityModel {
        let d = ["the cat sat"];
        let c = ["the cat sat", "cat cat cat"];
        QualityModel::fit(d, c, alpha, DEFAULT_EPSILON).unwrap()
    }

    #[test]
    fn tokenization() {
        assert_eq!(tokenize("  \"Hello,  World!\" it's -- ok. "), vec!["hello", "world", "it's", "ok"]);
    }

    #[test]
    fn in_domain_word_more_likely_in_d() {
        // the: 1 of 3 unigrams in D, 1 of 6 in C; vocab {the, cat, sat}
        for alpha in [0.1, 0.5, 1.0, 5.0] {
            let m = cat_model(alpha);
            let the = Feature::Unigram("the".into());
            let pd = (1.0 + alpha) / (3.0 + 3.0 * alpha);
            let pc = (1.0 + alpha) / (6.0 + 3.0 * alpha);
            assert!((m.p_in_domain(&the) - pd).abs() < 1e-15);
            assert!((m.p_corpus(&the) - pc).abs() < 1e-15);
            assert!(pd > pc);
        }
    }

    #[test]
    fn zero_alpha_clamps_absent_words() {
        let m = QualityModel::fit(["a b"], ["a b", "c d"], 0.0, 1e-9).unwrap();
        let c = Feature::Unigram("c".into());
        assert_eq!(m.p_in_domain(&c), 1e-9);
        assert!(m.score("c d c").is_finite());
    }

    #[test]
    fn identical_sets_score_zero() {
        let s = ["one two three", "two three four"];
        let m = QualityModel::fit(s, s, 0.5, 1e-9).unwrap();
        for f in features(&tokenize("one two five")) {
            assert_eq!(m.p_in_domain(&f), m.p_corpus(&f));
        }
        assert_eq!(m.score("one two five six"), 0.0);
        assert_eq!(m.score(""), 0.0);
    }

    #[test]
    fn clean_sentence_beats_noise() {
        let m = cat_model(0.5);
        // brute force: sum the log-odds terms of every feature by hand
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let pd = |n: f64, total: f64, v: f64| (n + 0.5) / (total + 0.5 * v);
        let good = (logit(pd(1.0, 3.0, 3.0)) - logit(pd(1.0, 6.0, 3.0)))
            + (logit(pd(1.0, 3.0, 3.0)) - logit(pd(4.0, 6.0, 3.0)))
            + (logit(pd(1.0, 3.0, 3.0)) - logit(pd(1.0, 6.0, 3.0)))
            + 2.0 * (logit(pd(1.0, 2.0, 3.0)) - logit(pd(1.0, 4.0, 3.0)));
        assert!((m.score("the cat sat") - good).abs() < 1e-12);
        assert!(m.score("the cat sat") > m.score("cat cat cat"));
    }

    #[test]
    fn threshold_is_inclusive() {
        let m = cat_model(0.5);
        let sentences = ["the cat sat", "cat cat cat", "the"];
        let (kept, report) = filter(&m, sentences, 0.0);
        for s in &sentences {
            assert_eq!(kept.contains(s), m.score(s) >= 0.0);
        }
        assert_eq!(report.kept + report.dropped, 3);
        assert_eq!(report.histogram.counts.len(), HISTOGRAM_BINS);
        assert_eq!(report.histogram.counts.iter().sum::<u64>(), 3);
        let (none, _) = filter(&m, sentences, f64::INFINITY);
        assert!(none.is_empty());
        // sentences with score exactly zero survive
        let same = QualityModel::fit(["x y"], ["x y"], 0.5, 1e-9).unwrap();
        assert_eq!(filter(&same, ["x"], 0.0).0, vec!["x"]);
    }

    #[test]
    fn filter_is_idempotent() {
        let m = cat_model(0.5);
        let s = ["the cat sat", "cat cat cat", "sat the", "cat sat"];
        let (once, _) = filter(&m, s, 0.0);
        let (twice, _) = filter(&m, once.iter().copied(), 0.0);
        assert_eq!(once, twice);
    }

    #[test]
    fn concatenation_adds_boundary_bigram() {
        let m = cat_model(0.5);
        let (a, b) = ("the cat", "sat cat");
        let joined = format!("{a} {b}");
        let boundary = m.log_odds(&Feature::Bigram("cat".into(), "sat".into()));
        assert!((m.score(&joined) - (m.score(a) + m.score(b) + boundary)).abs() < 1e-12);
    }

    #[test]
    fn empty_streams_rejected() {
        assert_eq!(QualityModel::fit([], ["a"], 0.5, 1e-9).unwrap_err(), QualityError::EmptyStream("in-domain"));
        assert_eq!(QualityModel::fit(["a"], [], 0.5, 1e-9).unwrap_err(), QualityError::EmptyStream("corpus"));
    }

    struct FailSecond;
    impl Translator for FailSecond {
        fn translate_batch(&self, s: &[&str]) -> Vec<Result<String, TranslateError>> {
            s.iter()
                .enumerate()
                .map(|(i, x)| if i == 1 { Err(TranslateError("boom".into())) } else { Ok(x.to_uppercase()) })
                .collect()
        }
    }

    #[test]
    fn backtranslation() {
        let s = ["ein Hund", "eine Katze", "ein Haus"];
        let (pairs, report) = backtranslate_pairs(&s, &IdentityTranslator);
        assert!(pairs.iter().zip(s).all(|(p, t)| p.source == t && p.target == t));
        assert!(report.skipped.is_empty());

        let dict = DictionaryTranslator::from_tsv("ein\ta\neine\ta\nHund\tdog\nKatze\tcat\nHaus\thouse\n", false);
        let (pairs, _) = backtranslate_pairs(&s, &dict);
        let sources: Vec<&str> = pairs.iter().map(|p| p.source.as_str()).collect();
        assert_eq!(sources, vec!["a dog", "a cat", "a house"]);

        let (pairs, report) = backtranslate_pairs(&s, &FailSecond);
        assert_eq!(pairs.len(), 2);
        assert_eq!(report.skipped, vec![1]);
        assert_eq!(pairs[1].target, "ein Haus");
    }
}
