//! Labeled accuracy-error data: trigram-context replacement, translation swap,
//! and a harness for scoring CORRECT/INCORRECT classifiers.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{Schema, StructuredExample};

pub const DEFAULT_FUNCTION_WORDS: &str = include_str!("../data/function_words_en.txt");

/// Neighbor used for positions at a sentence edge.
pub const BOUNDARY: &str = "";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AccError {
    #[error("no eligible position has a replacement in the same trigram context")]
    NoReplacementFound,
    #[error("examples differ in intent or variant")]
    IncompatibleGroup,
    #[error("examples have the same argument values")]
    SameArgumentValues,
    #[error("no differing argument value is visible in both translations")]
    NoVisibleDifference,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("mix fractions must lie in [0, 1]")]
    BadMix,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tag {
    Content,
    Function,
    Entity(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedToken {
    pub text: String,
    pub tag: Tag,
}

pub trait Tagger {
    /// One tag per token.
    fn tag(&self, tokens: &[&str]) -> Vec<Tag>;
}

fn core(token: &str) -> &str {
    token.trim_matches(|c: char| !c.is_alphanumeric())
}

/// Closed-class function-word lexicon plus exact-match entity phrases.
#[derive(Debug, Clone, Default)]
pub struct LexiconTagger {
    function_words: BTreeSet<String>,
    /// Entity phrase as core tokens, mapped to its type.
    entities: BTreeMap<Vec<String>, String>,
}

impl LexiconTagger {
    /// Lexicon format: one token per line; blank and `#` lines ignored.
    pub fn from_lexicon(text: &str) -> LexiconTagger {
        let function_words = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        LexiconTagger { function_words, entities: BTreeMap::new() }
    }

    pub fn english() -> LexiconTagger {
        Self::from_lexicon(DEFAULT_FUNCTION_WORDS)
    }

    pub fn add_entity(&mut self, phrase: &str, entity_type: &str) {
        let toks: Vec<String> = phrase.split_whitespace().map(|t| core(t).to_string()).collect();
        if !toks.is_empty() && toks.iter().all(|t| !t.is_empty()) {
            self.entities.insert(toks, entity_type.to_string());
        }
    }

    /// Registers every ENTITY argument value of the examples.
    pub fn add_examples<'a, I>(&mut self, examples: I, schema: &Schema)
    where
        I: IntoIterator<Item = &'a StructuredExample>,
    {
        for ex in examples {
            for (name, value) in &ex.values {
                if let Some(t) = schema.arg(name).and_then(|a| a.annotation.entity_type()) {
                    self.add_entity(value, t);
                }
            }
        }
    }

    pub fn is_function_word(&self, token: &str) -> bool {
        let c = core(token).to_lowercase();
        !c.is_empty() && self.function_words.contains(&c)
    }
}

impl Tagger for LexiconTagger {
    fn tag(&self, tokens: &[&str]) -> Vec<Tag> {
        let cores: Vec<&str> = tokens.iter().map(|t| core(t)).collect();
        let mut tags: Vec<Option<Tag>> = vec![None; tokens.len()];
        let longest = self.entities.keys().map(Vec::len).max().unwrap_or(0);
        let mut i = 0;
        while i < tokens.len() {
            let mut matched = 0;
            for len in (1..=longest.min(tokens.len() - i)).rev() {
                let window: Vec<String> = cores[i..i + len].iter().map(|s| s.to_string()).collect();
                if let Some(t) = self.entities.get(&window) {
                    for tag in &mut tags[i..i + len] {
                        *tag = Some(Tag::Entity(t.clone()));
                    }
                    matched = len;
                    break;
                }
            }
            i += matched.max(1);
        }
        tags.into_iter()
            .zip(tokens)
            .map(|(t, tok)| {
                t.unwrap_or_else(|| if self.is_function_word(tok) { Tag::Function } else { Tag::Content })
            })
            .collect()
    }
}

pub fn tag_sentence(sentence: &str, tagger: &dyn Tagger) -> Vec<TaggedToken> {
    let toks: Vec<&str> = sentence.split_whitespace().collect();
    tagger.tag(&toks).into_iter().zip(toks).map(|(tag, t)| TaggedToken { text: t.to_string(), tag }).collect()
}

/// `(left, right)` neighbors to middle tokens with their tag and corpus count.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrigramIndex {
    entries: BTreeMap<(String, String), BTreeMap<(String, Tag), u64>>,
}

impl TrigramIndex {
    pub fn build<'a, I>(corpus: I, tagger: &dyn Tagger) -> TrigramIndex
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut index = TrigramIndex::default();
        for sentence in corpus {
            let toks = tag_sentence(sentence, tagger);
            for (i, t) in toks.iter().enumerate() {
                let left = if i == 0 { BOUNDARY } else { &toks[i - 1].text };
                let right = toks.get(i + 1).map_or(BOUNDARY, |r| &r.text);
                *index
                    .entries
                    .entry((left.to_string(), right.to_string()))
                    .or_default()
                    .entry((t.text.clone(), t.tag.clone()))
                    .or_insert(0) += 1;
            }
        }
        index
    }

    /// Middle tokens seen between `left` and `right`; empty for an unseen context.
    pub fn lookup(&self, left: &str, right: &str) -> Vec<(&str, &Tag, u64)> {
        self.entries
            .get(&(left.to_string(), right.to_string()))
            .map(|m| m.iter().map(|((t, g), c)| (t.as_str(), g, *c)).collect())
            .unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Correct,
    Incorrect,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Correct => "CORRECT",
            Label::Incorrect => "INCORRECT",
        })
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "CORRECT" => Ok(Label::Correct),
            "INCORRECT" => Ok(Label::Incorrect),
            _ => Err(format!("unknown label `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    Original,
    /// Token position of the replacement.
    TrigramSwap(usize),
    /// Id of the example whose translation was borrowed.
    TranslationSwap(u64),
}

impl Provenance {
    pub fn kind(&self) -> &'static str {
        match self {
            Provenance::Original => "ORIGINAL",
            Provenance::TrigramSwap(_) => "TRIGRAM_SWAP",
            Provenance::TranslationSwap(_) => "TRANSLATION_SWAP",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Original => f.write_str("ORIGINAL"),
            Provenance::TrigramSwap(p) => write!(f, "TRIGRAM_SWAP:{p}"),
            Provenance::TranslationSwap(id) => write!(f, "TRANSLATION_SWAP:{id}"),
        }
    }
}

impl FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "ORIGINAL" {
            return Ok(Provenance::Original);
        }
        let bad = || format!("unknown provenance `{s}`");
        match s.split_once(':') {
            Some(("TRIGRAM_SWAP", p)) => p.parse().map(Provenance::TrigramSwap).map_err(|_| bad()),
            Some(("TRANSLATION_SWAP", p)) => p.parse().map(Provenance::TranslationSwap).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledPair {
    pub english: String,
    pub translation: String,
    pub label: Label,
    pub provenance: Provenance,
}

fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape_field(s: &str) -> Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => return Err(format!("bad escape `\\{}`", other.map(String::from).unwrap_or_default())),
        }
    }
    Ok(out)
}

impl LabeledPair {
    pub fn to_tsv_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}",
            escape_field(&self.english),
            escape_field(&self.translation),
            self.label,
            self.provenance
        )
    }
}

pub fn render_tsv(pairs: &[LabeledPair]) -> String {
    pairs.iter().map(|p| p.to_tsv_line() + "\n").collect()
}

pub fn parse_tsv(text: &str) -> Result<Vec<LabeledPair>, AccError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let err = |message: String| AccError::Parse { line: i + 1, message };
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 4 {
                return Err(err(format!("expected 4 fields, got {}", f.len())));
            }
            Ok(LabeledPair {
                english: unescape_field(f[0]).map_err(err)?,
                translation: unescape_field(f[1]).map_err(err)?,
                label: f[2].parse().map_err(err)?,
                provenance: f[3].parse().map_err(err)?,
            })
        })
        .collect()
}

/// Byte ranges of whitespace-separated tokens.
fn token_ranges(s: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in s.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(st)) => {
                out.push((st, i));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(st) = start {
        out.push((st, s.len()));
    }
    out
}

/// Replaces one non-function token by another token attested with the same
/// neighbors and the same tag elsewhere in the corpus.
pub fn corrupt_by_trigram<R: Rng + ?Sized>(
    english: &str,
    translation: &str,
    index: &TrigramIndex,
    tagger: &dyn Tagger,
    rng: &mut R,
) -> Result<LabeledPair, AccError> {
    let ranges = token_ranges(english);
    let toks: Vec<&str> = ranges.iter().map(|&(a, b)| &english[a..b]).collect();
    let tags = tagger.tag(&toks);
    let mut options: Vec<(usize, Vec<(&str, u64)>)> = Vec::new();
    for (i, tag) in tags.iter().enumerate() {
        if *tag == Tag::Function {
            continue;
        }
        let left = if i == 0 { BOUNDARY } else { toks[i - 1] };
        let right = toks.get(i + 1).copied().unwrap_or(BOUNDARY);
        let cands: Vec<(&str, u64)> = index
            .lookup(left, right)
            .into_iter()
            .filter(|(t, g, _)| *g == tag && *t != toks[i])
            .map(|(t, _, c)| (t, c))
            .collect();
        if !cands.is_empty() {
            options.push((i, cands));
        }
    }
    let (pos, cands) = options.choose(rng).ok_or(AccError::NoReplacementFound)?;
    let total: u64 = cands.iter().map(|c| c.1).sum();
    let mut pick = rng.gen_range(0..total);
    let mut replacement = cands[0].0;
    for &(t, c) in cands {
        if pick < c {
            replacement = t;
            break;
        }
        pick -= c;
    }
    let (a, b) = ranges[*pos];
    Ok(LabeledPair {
        english: format!("{}{}{}", &english[..a], replacement, &english[b..]),
        translation: translation.to_string(),
        label: Label::Incorrect,
        provenance: Provenance::TrigramSwap(*pos),
    })
}

/// A positive (english, translation) pair with the structured data and
/// template variant that produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourcedPair {
    pub id: u64,
    pub example: StructuredExample,
    pub variant: usize,
    pub english: String,
    pub translation: String,
}

fn surface(ex: &StructuredExample, arg: &str) -> Option<String> {
    ex.localized_values.get(arg).or_else(|| ex.values.get(arg)).cloned()
}

fn visible_difference(a: &SourcedPair, b: &SourcedPair) -> Result<(), AccError> {
    let names: BTreeSet<&String> = a.example.values.keys().chain(b.example.values.keys()).collect();
    let mut differs = false;
    for name in names {
        if a.example.values.get(name) == b.example.values.get(name) {
            continue;
        }
        differs = true;
        let (Some(va), Some(vb)) = (surface(&a.example, name), surface(&b.example, name)) else { continue };
        if !va.is_empty() && !vb.is_empty() && a.translation.contains(&va) && b.translation.contains(&vb) {
            return Ok(());
        }
    }
    Err(if differs { AccError::NoVisibleDifference } else { AccError::SameArgumentValues })
}

/// Exchanges the translations of two same-form examples.
pub fn swap_translations(a: &SourcedPair, b: &SourcedPair) -> Result<(LabeledPair, LabeledPair), AccError> {
    if a.example.intent != b.example.intent || a.variant != b.variant {
        return Err(AccError::IncompatibleGroup);
    }
    visible_difference(a, b)?;
    if a.translation == b.translation {
        return Err(AccError::NoVisibleDifference);
    }
    let make = |eng: &SourcedPair, tr: &SourcedPair| LabeledPair {
        english: eng.english.clone(),
        translation: tr.translation.clone(),
        label: Label::Incorrect,
        provenance: Provenance::TranslationSwap(tr.id),
    };
    Ok((make(a, b), make(b, a)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mix {
    pub trigram_fraction: f64,
    pub swap_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub correct: usize,
    pub incorrect: usize,
    pub trigram_negatives: usize,
    pub swap_negatives: usize,
    pub skipped_trigram: usize,
    pub skipped_swap: usize,
}

/// Every positive as CORRECT, then per positive a trigram negative with
/// probability `trigram_fraction` and a swap negative with probability
/// `swap_fraction`. Swap partners come from the same (intent, variant) group.
pub fn make_dataset<R: Rng + ?Sized>(
    positives: &[SourcedPair],
    index: &TrigramIndex,
    tagger: &dyn Tagger,
    mix: Mix,
    rng: &mut R,
) -> Result<(Vec<LabeledPair>, DatasetReport), AccError> {
    let ok = |f: f64| (0.0..=1.0).contains(&f);
    if !ok(mix.trigram_fraction) || !ok(mix.swap_fraction) {
        return Err(AccError::BadMix);
    }
    let mut groups: BTreeMap<(String, usize), Vec<usize>> = BTreeMap::new();
    for (i, p) in positives.iter().enumerate() {
        groups.entry((p.example.intent.to_string(), p.variant)).or_default().push(i);
    }
    // a corruption can land on another correct pair ("Sorry" and
    // "Unfortunately" both give "Leider"); such negatives are dropped
    let known: HashSet<(&str, &str)> = positives.iter().map(|p| (p.english.as_str(), p.translation.as_str())).collect();
    let is_known = |n: &LabeledPair| known.contains(&(n.english.as_str(), n.translation.as_str()));
    let mut out = Vec::new();
    let mut report = DatasetReport::default();
    for p in positives {
        out.push(LabeledPair {
            english: p.english.clone(),
            translation: p.translation.clone(),
            label: Label::Correct,
            provenance: Provenance::Original,
        });
        report.correct += 1;
        if rng.gen_bool(mix.trigram_fraction) {
            match corrupt_by_trigram(&p.english, &p.translation, index, tagger, rng) {
                Ok(neg) if is_known(&neg) => {
                    log::debug!("example {}: trigram corruption gave a known correct pair", p.id);
                    report.skipped_trigram += 1;
                }
                Ok(neg) => {
                    out.push(neg);
                    report.trigram_negatives += 1;
                }
                Err(e) => {
                    log::debug!("example {}: trigram corruption skipped: {e}", p.id);
                    report.skipped_trigram += 1;
                }
            }
        }
        if rng.gen_bool(mix.swap_fraction) {
            let mut partners = groups[&(p.example.intent.to_string(), p.variant)].clone();
            partners.shuffle(rng);
            let swapped = partners
                .iter()
                .filter(|&&j| positives[j].id != p.id)
                .find_map(|&j| swap_translations(p, &positives[j]).ok().filter(|(neg, _)| !is_known(neg)));
            match swapped {
                Some((neg, _)) => {
                    out.push(neg);
                    report.swap_negatives += 1;
                }
                None => {
                    log::debug!("example {}: no swap partner", p.id);
                    report.skipped_swap += 1;
                }
            }
        }
    }
    report.incorrect = report.trigram_negatives + report.swap_negatives;
    if report.skipped_trigram + report.skipped_swap > 0 {
        log::info!("skipped {} trigram and {} swap negatives", report.skipped_trigram, report.skipped_swap);
    }
    Ok((out, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub recall: Option<f64>,
    pub false_positive_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub threshold: f64,
    pub correct: usize,
    pub incorrect: usize,
    /// INCORRECT pairs predicted INCORRECT.
    pub detected: usize,
    /// CORRECT pairs predicted INCORRECT.
    pub false_alarms: usize,
    pub recall: Option<f64>,
    pub false_positive_rate: Option<f64>,
    /// Recall on INCORRECT pairs by provenance kind.
    pub recall_by_provenance: BTreeMap<String, f64>,
    pub sweep: Vec<SweepPoint>,
}

fn rates(scored: &[(f64, &LabeledPair)], threshold: f64) -> (usize, usize, usize, usize) {
    let (mut inc, mut det, mut cor, mut fa) = (0, 0, 0, 0);
    for (p, pair) in scored {
        let predicted_incorrect = *p < threshold;
        match pair.label {
            Label::Incorrect => {
                inc += 1;
                det += usize::from(predicted_incorrect);
            }
            Label::Correct => {
                cor += 1;
                fa += usize::from(predicted_incorrect);
            }
        }
    }
    (inc, det, cor, fa)
}

fn ratio(a: usize, b: usize) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

/// The classifier returns the probability that a pair is CORRECT; a pair is
/// predicted CORRECT when that probability is at least `threshold`.
pub fn evaluate_classifier<F>(classifier: F, labeled: &[LabeledPair], threshold: f64) -> ClassifierMetrics
where
    F: Fn(&str, &str) -> f64,
{
    let scored: Vec<(f64, &LabeledPair)> =
        labeled.iter().map(|p| (classifier(&p.english, &p.translation), p)).collect();
    let (incorrect, detected, correct, false_alarms) = rates(&scored, threshold);
    let mut by_kind: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (p, pair) in &scored {
        if pair.label == Label::Incorrect {
            let e = by_kind.entry(pair.provenance.kind().to_string()).or_default();
            e.0 += usize::from(*p < threshold);
            e.1 += 1;
        }
    }
    let sweep = (0..=10)
        .map(|k| {
            let t = k as f64 / 10.0;
            let (i, d, c, f) = rates(&scored, t);
            SweepPoint { threshold: t, recall: ratio(d, i), false_positive_rate: ratio(f, c) }
        })
        .collect();
    ClassifierMetrics {
        threshold,
        correct,
        incorrect,
        detected,
        false_alarms,
        recall: ratio(detected, incorrect),
        false_positive_rate: ratio(false_alarms, correct),
        recall_by_provenance: by_kind.into_iter().map(|(k, (d, n))| (k, d as f64 / n as f64)).collect(),
        sweep,
    }
}

/// Baseline: the fraction of content tokens on each side that align to the
/// other side, through a bilingual lexicon or by verbatim copy. Returns the
/// smaller of the two directions.
#[derive(Debug, Clone, Default)]
pub struct LexiconOverlapClassifier {
    forward: BTreeMap<String, BTreeSet<String>>,
    backward: BTreeMap<String, BTreeSet<String>>,
    source_function: BTreeSet<String>,
    target_function: BTreeSet<String>,
}

fn lexicon_key(t: &str) -> String {
    core(t).to_lowercase()
}

impl LexiconOverlapClassifier {
    /// `lexicon` lines are `source \t target` word pairs.
    pub fn new(lexicon: &str, source_function_words: &str, target_function_words: &str) -> Self {
        let words = |s: &str| -> BTreeSet<String> {
            s.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(str::to_lowercase).collect()
        };
        let mut c = LexiconOverlapClassifier {
            source_function: words(source_function_words),
            target_function: words(target_function_words),
            ..Default::default()
        };
        for line in lexicon.lines() {
            if let Some((s, t)) = line.split_once('\t') {
                let (s, t) = (lexicon_key(s), lexicon_key(t));
                c.forward.entry(s.clone()).or_default().insert(t.clone());
                c.backward.entry(t).or_default().insert(s);
            }
        }
        c
    }

    fn coverage(
        from: &str,
        to: &str,
        map: &BTreeMap<String, BTreeSet<String>>,
        function: &BTreeSet<String>,
    ) -> f64 {
        let to_toks: BTreeSet<String> = to.split_whitespace().map(lexicon_key).collect();
        let content: Vec<String> = from
            .split_whitespace()
            .map(lexicon_key)
            .filter(|t| !t.is_empty() && !function.contains(t))
            .collect();
        if content.is_empty() {
            return 1.0;
        }
        let aligned = content
            .iter()
            .filter(|t| match map.get(*t) {
                Some(options) => options.iter().any(|o| to_toks.contains(o)),
                None => to_toks.contains(*t),
            })
            .count();
        aligned as f64 / content.len() as f64
    }

    pub fn probability_correct(&self, english: &str, translation: &str) -> f64 {
        let f = Self::coverage(english, translation, &self.forward, &self.source_function);
        let b = Self::coverage(translation, english, &self.backward, &self.target_function);
        f.min(b)
    }
}
