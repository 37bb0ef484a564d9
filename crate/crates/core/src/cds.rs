//! Contrastive data selection: score each corpus pair by how much more likely
//! an adapted scorer finds it than the base scorer, then turn scores into
//! finetuning weights.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CdsError {
    #[error("top fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error("temperature {0} must be positive")]
    BadTemperature(f64),
    #[error("n-gram order must be at least 1")]
    BadOrder,
    #[error("empty training stream")]
    EmptyTraining,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// `log p(target | source)`; finite and at most 0 for well-formed input.
pub trait ConditionalScorer {
    fn logprob(&self, source: &str, target: &str) -> f64;

    fn logprob_batch(&self, pairs: &[(&str, &str)]) -> Vec<f64> {
        pairs.iter().map(|(s, t)| self.logprob(s, t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub source: String,
    pub target: String,
    pub logp_base: f64,
    pub logp_adapted: f64,
    pub cds_score: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedPair {
    pub index: usize,
    pub reason: String,
}

/// Scores in input order; pairs with a non-finite score are left out and
/// reported.
pub fn cds_score_corpus<S, T>(
    pairs: &[(S, T)],
    base: &dyn ConditionalScorer,
    adapted: &dyn ConditionalScorer,
) -> (Vec<ScoredPair>, Vec<RejectedPair>)
where
    S: AsRef<str>,
    T: AsRef<str>,
{
    let refs: Vec<(&str, &str)> = pairs.iter().map(|(s, t)| (s.as_ref(), t.as_ref())).collect();
    let lb = base.logprob_batch(&refs);
    let la = adapted.logprob_batch(&refs);
    let mut scored = Vec::with_capacity(refs.len());
    let mut rejected = Vec::new();
    for (i, ((s, t), (b, a))) in refs.iter().zip(lb.into_iter().zip(la)).enumerate() {
        if !b.is_finite() || !a.is_finite() {
            log::warn!("pair {i}: non-finite score (base {b}, adapted {a})");
            rejected.push(RejectedPair { index: i, reason: format!("non-finite score: base {b}, adapted {a}") });
            continue;
        }
        scored.push(ScoredPair {
            source: s.to_string(),
            target: t.to_string(),
            logp_base: b,
            logp_adapted: a,
            cds_score: a - b,
            weight: 0.0,
        });
    }
    (scored, rejected)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SelectionPolicy {
    /// Weight 1 for the top `⌈f·n⌉` pairs, 0 otherwise.
    TopFraction { fraction: f64 },
    /// `sigmoid(score / τ)`.
    Soft { temperature: f64 },
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        SelectionPolicy::TopFraction { fraction: 0.1 }
    }
}

pub fn assign_weights(scored: &mut [ScoredPair], policy: SelectionPolicy) -> Result<(), CdsError> {
    match policy {
        SelectionPolicy::TopFraction { fraction } => {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(CdsError::BadFraction(fraction));
            }
            let k = ((fraction * scored.len() as f64) - 1e-9).ceil().max(0.0) as usize;
            let mut order: Vec<usize> = (0..scored.len()).collect();
            // stable: equal scores keep input order
            order.sort_by(|&a, &b| scored[b].cds_score.total_cmp(&scored[a].cds_score));
            for p in scored.iter_mut() {
                p.weight = 0.0;
            }
            for &i in order.iter().take(k) {
                scored[i].weight = 1.0;
            }
        }
        SelectionPolicy::Soft { temperature } => {
            if !(temperature > 0.0) {
                return Err(CdsError::BadTemperature(temperature));
            }
            for p in scored.iter_mut() {
                p.weight = 1.0 / (1.0 + (-p.cds_score / temperature).exp());
            }
        }
    }
    Ok(())
}

fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

pub fn render_tsv(scored: &[ScoredPair]) -> String {
    let mut out = String::new();
    for p in scored {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            p.source.replace(['\t', '\n'], " "),
            p.target.replace(['\t', '\n'], " "),
            fmt_f64(p.logp_base),
            fmt_f64(p.logp_adapted),
            fmt_f64(p.cds_score),
            fmt_f64(p.weight)
        ));
    }
    out
}

pub fn parse_tsv(text: &str) -> Result<Vec<ScoredPair>, CdsError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let err = |message: String| CdsError::Parse { line: i + 1, message };
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 6 {
                return Err(err(format!("expected 6 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("`{s}`: {e}")));
            Ok(ScoredPair {
                source: f[0].to_string(),
                target: f[1].to_string(),
                logp_base: num(f[2])?,
                logp_adapted: num(f[3])?,
                cds_score: num(f[4])?,
                weight: num(f[5])?,
            })
        })
        .collect()
}

const SEP: u32 = 0x11_0000;
const END: u32 = 0x11_0001;
const UNK: u32 = 0x11_0002;
const START: u32 = 0x11_0003;

pub const DEFAULT_NGRAM_ALPHA: f64 = 0.1;
/// Count weight of the extra in-domain pass that produces the adapted scorer.
pub const ADAPT_WEIGHT: f64 = 10.0;

/// Character n-gram model of the target, with the source and a separator as
/// left context. Add-alpha smoothed over the target alphabet plus END and an
/// unknown-character bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramScorer {
    order: usize,
    alpha: f64,
    alphabet: std::collections::BTreeSet<u32>,
    counts: HashMap<Vec<u32>, (f64, HashMap<u32, f64>)>,
}

impl NgramScorer {
    fn sequence(source: &str, target: &str) -> (Vec<u32>, usize) {
        let mut seq: Vec<u32> = source.chars().map(|c| c as u32).collect();
        seq.push(SEP);
        let first = seq.len();
        seq.extend(target.chars().map(|c| c as u32));
        seq.push(END);
        (seq, first)
    }

    fn history(&self, seq: &[u32], at: usize) -> Vec<u32> {
        let n = self.order - 1;
        (0..n).map(|k| if at + k < n { START } else { seq[at + k - n] }).collect()
    }

    fn add(&mut self, source: &str, target: &str, weight: f64) {
        let (seq, first) = Self::sequence(source, target);
        for i in first..seq.len() {
            self.alphabet.insert(seq[i]);
            let h = self.history(&seq, i);
            let e = self.counts.entry(h).or_insert_with(|| (0.0, HashMap::new()));
            e.0 += weight;
            *e.1.entry(seq[i]).or_insert(0.0) += weight;
        }
    }

    pub fn build<S: AsRef<str>, T: AsRef<str>>(pairs: &[(S, T)], order: usize) -> Result<NgramScorer, CdsError> {
        Self::build_with_alpha(pairs, order, DEFAULT_NGRAM_ALPHA)
    }

    pub fn build_with_alpha<S: AsRef<str>, T: AsRef<str>>(
        pairs: &[(S, T)],
        order: usize,
        alpha: f64,
    ) -> Result<NgramScorer, CdsError> {
        if order == 0 {
            return Err(CdsError::BadOrder);
        }
        if pairs.is_empty() {
            return Err(CdsError::EmptyTraining);
        }
        let mut m = NgramScorer { order, alpha, alphabet: [END, UNK].into(), counts: HashMap::new() };
        for (s, t) in pairs {
            m.add(s.as_ref(), t.as_ref(), 1.0);
        }
        Ok(m)
    }

    /// One more counting pass over in-domain pairs at count weight `weight`.
    pub fn adapt<S: AsRef<str>, T: AsRef<str>>(&self, pairs: &[(S, T)], weight: f64) -> NgramScorer {
        let mut m = self.clone();
        for (s, t) in pairs {
            m.add(s.as_ref(), t.as_ref(), weight);
        }
        m
    }

    pub fn order(&self) -> usize {
        self.order
    }
}

impl ConditionalScorer for NgramScorer {
    fn logprob(&self, source: &str, target: &str) -> f64 {
        let (seq, first) = Self::sequence(source, target);
        let v = self.alphabet.len() as f64;
        let mut lp = 0.0;
        for i in first..seq.len() {
            let sym = if self.alphabet.contains(&seq[i]) { seq[i] } else { UNK };
            let (total, c) = match self.counts.get(&self.history(&seq, i)) {
                Some((t, m)) => (*t, m.get(&sym).copied().unwrap_or(0.0)),
                None => (0.0, 0.0),
            };
            lp += ((c + self.alpha) / (total + self.alpha * v)).ln();
        }
        lp
    }
}
