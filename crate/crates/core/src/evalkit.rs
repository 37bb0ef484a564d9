//! Exact match against every reference variant, and corpus BLEU.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::synthgen::SplitLabel;

pub const MAX_ORDER: usize = 4;
pub const WORST_SHOWN: usize = 20;
pub const SMOOTHING_NOTE: &str =
    "n-gram orders above 1 with zero matches use (0 + 1) / (total + 1); zero unigram matches give 0";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("no candidates")]
    NoCandidates,
    #[error("{candidates} candidates but {references} reference sets")]
    Misaligned { candidates: usize, references: usize },
    #[error("record {0} has no references")]
    NoReferences(u64),
}

/// NFC with trailing whitespace removed.
pub fn normalize(s: &str) -> String {
    let nfc: String = s.nfc().collect();
    nfc.trim_end().to_string()
}

pub fn exact_match<S: AsRef<str>>(candidate: &str, references: &[S]) -> bool {
    let c = normalize(candidate);
    references.iter().any(|r| normalize(r.as_ref()) == c)
}

fn tokens(s: &str) -> Vec<String> {
    let nfc: String = s.nfc().collect();
    nfc.split_whitespace().map(str::to_string).collect()
}

fn ngram_counts(toks: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bleu {
    /// In `[0, 100]`.
    pub score: f64,
    pub precisions: Vec<f64>,
    pub matches: Vec<u64>,
    pub totals: Vec<u64>,
    pub brevity_penalty: f64,
    pub candidate_length: u64,
    pub reference_length: u64,
    pub smoothed: bool,
}

/// Corpus BLEU with clipped n-gram counts (clip = max count over the
/// references of a line), geometric mean of precisions, and brevity penalty
/// against the closest reference length (shorter on ties).
pub fn corpus_bleu<C, R>(candidates: &[C], references: &[Vec<R>], max_order: usize) -> Result<Bleu, EvalError>
where
    C: AsRef<str>,
    R: AsRef<str>,
{
    if candidates.is_empty() {
        return Err(EvalError::NoCandidates);
    }
    if candidates.len() != references.len() {
        return Err(EvalError::Misaligned { candidates: candidates.len(), references: references.len() });
    }
    let mut matches = vec![0u64; max_order];
    let mut totals = vec![0u64; max_order];
    let (mut c_len, mut r_len) = (0u64, 0u64);
    for (cand, refs) in candidates.iter().zip(references) {
        let c = tokens(cand.as_ref());
        let rs: Vec<Vec<String>> = refs.iter().map(|r| tokens(r.as_ref())).collect();
        c_len += c.len() as u64;
        r_len += rs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| ((l as i64 - c.len() as i64).abs(), l))
            .unwrap_or(0) as u64;
        for n in 1..=max_order {
            let cc = ngram_counts(&c, n);
            let mut max_ref: HashMap<&[String], u64> = HashMap::new();
            for r in &rs {
                for (g, k) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in cc {
                matches[n - 1] += k.min(max_ref.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += c.len().saturating_sub(n - 1) as u64;
        }
    }
    let mut smoothed = false;
    let precisions: Vec<f64> = (0..max_order)
        .map(|i| {
            if matches[i] == 0 && i > 0 {
                smoothed = true;
                1.0 / (totals[i] as f64 + 1.0)
            } else if totals[i] == 0 {
                0.0
            } else {
                matches[i] as f64 / totals[i] as f64
            }
        })
        .collect();
    let brevity_penalty = if c_len == 0 {
        0.0
    } else if c_len >= r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    let score = if precisions[0] == 0.0 {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_order as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(Bleu {
        score,
        precisions,
        matches,
        totals,
        brevity_penalty,
        candidate_length: c_len,
        reference_length: r_len,
        smoothed,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: u64,
    pub candidate: String,
    pub references: Vec<String>,
    pub split: SplitLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSelection {
    pub exact_match: bool,
    pub bleu: bool,
}

impl Default for MetricSelection {
    fn default() -> Self {
        MetricSelection { exact_match: true, bleu: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub count: u64,
    pub exact_matches: u64,
    pub exact_match_rate: Option<f64>,
    pub bleu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    pub id: u64,
    pub split: SplitLabel,
    pub candidate: String,
    pub references: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub counts: BTreeMap<SplitLabel, u64>,
    /// Only splits with at least one record.
    pub splits: BTreeMap<SplitLabel, SplitReport>,
    pub overall: SplitReport,
    pub bleu_smoothing: String,
    /// First mismatches by id.
    pub worst: Vec<Mismatch>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<EvalReport, serde_json::Error> {
        serde_json::from_str(s)
    }
}

fn split_report(records: &[&EvalRecord], metrics: MetricSelection) -> SplitReport {
    let count = records.len() as u64;
    let exact_matches = records.iter().filter(|r| exact_match(&r.candidate, &r.references)).count() as u64;
    let exact_match_rate = (metrics.exact_match && count > 0).then(|| exact_matches as f64 / count as f64);
    let bleu = if metrics.bleu && count > 0 {
        let c: Vec<&str> = records.iter().map(|r| r.candidate.as_str()).collect();
        let refs: Vec<Vec<&str>> = records.iter().map(|r| r.references.iter().map(String::as_str).collect()).collect();
        corpus_bleu(&c, &refs, MAX_ORDER).ok().map(|b| b.score)
    } else {
        None
    };
    SplitReport { count, exact_matches, exact_match_rate, bleu }
}

pub fn eval_report(records: &[EvalRecord], metrics: MetricSelection) -> Result<EvalReport, EvalError> {
    if let Some(r) = records.iter().find(|r| r.references.is_empty()) {
        return Err(EvalError::NoReferences(r.id));
    }
    let mut counts = BTreeMap::new();
    let mut splits = BTreeMap::new();
    for label in SplitLabel::ALL {
        let members: Vec<&EvalRecord> = records.iter().filter(|r| r.split == label).collect();
        counts.insert(label, members.len() as u64);
        if !members.is_empty() {
            splits.insert(label, split_report(&members, metrics));
        }
    }
    let all: Vec<&EvalRecord> = records.iter().collect();
    let mut worst: Vec<Mismatch> = records
        .iter()
        .filter(|r| !exact_match(&r.candidate, &r.references))
        .map(|r| Mismatch { id: r.id, split: r.split, candidate: r.candidate.clone(), references: r.references.clone() })
        .collect();
    worst.sort_by_key(|m| m.id);
    worst.truncate(WORST_SHOWN);
    Ok(EvalReport {
        counts,
        splits,
        overall: split_report(&all, metrics),
        bleu_smoothing: SMOOTHING_NOTE.to_string(),
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_any_reference() {
        let refs = ["Hi there.", "Hello there.", "Hey there."];
        assert!(exact_match("Hello there.", &refs));
        assert!(exact_match("Hello there.  \n", &refs));
        assert!(!exact_match("Hello there!", &refs));
        // composed and decomposed forms of é compare equal
        assert!(exact_match("caf\u{e9}", &["cafe\u{301}"]));
    }

    #[test]
    fn identical_corpus_scores_100() {
        let c = ["the cat is on the mat", "a b c d e"];
        let r = vec![vec!["the cat is on the mat"], vec!["a b c d e"]];
        let b = corpus_bleu(&c, &r, 4).unwrap();
        assert!((b.score - 100.0).abs() < 1e-12);
    }

    #[test]
    fn clipped_unigram_precision() {
        let b = corpus_bleu(&["the the the the the the the"], &[vec!["the cat is on the mat"]], 4).unwrap();
        assert_eq!((b.matches[0], b.totals[0]), (2, 7));
        assert!((b.precisions[0] - 2.0 / 7.0).abs() < 1e-15);
        assert!(b.smoothed);
    }

    #[test]
    fn disjoint_vocabulary_is_zero() {
        let b = corpus_bleu(&["x y z w"], &[vec!["a b c d"]], 4).unwrap();
        assert_eq!(b.score, 0.0);
    }

    #[test]
    fn multi_reference_clipping_uses_max_count() {
        let b = corpus_bleu(&["the the cat"], &[vec!["the cat", "the the dog"]], 1).unwrap();
        assert_eq!(b.matches[0], 3);
    }

    #[test]
    fn empty_and_misaligned() {
        let none: [&str; 0] = [];
        let no_refs: Vec<Vec<&str>> = vec![];
        assert_eq!(corpus_bleu(&none, &no_refs, 4), Err(EvalError::NoCandidates));
        assert!(matches!(corpus_bleu(&["a"], &no_refs, 4), Err(EvalError::Misaligned { .. })));
    }

    fn record(id: u64, cand: &str, refs: &[&str], split: SplitLabel) -> EvalRecord {
        EvalRecord { id, candidate: cand.into(), references: refs.iter().map(|s| s.to_string()).collect(), split }
    }

    #[test]
    fn report_per_split() {
        let recs = vec![
            record(3, "a b", &["a b"], SplitLabel::SeenIntent),
            record(1, "a c", &["a b"], SplitLabel::SeenIntent),
            record(2, "x y", &["x y", "y x"], SplitLabel::UnseenIntentSeenDomain),
        ];
        let r = eval_report(&recs, MetricSelection::default()).unwrap();
        assert_eq!(r.counts[&SplitLabel::UnseenDomain], 0);
        assert!(!r.splits.contains_key(&SplitLabel::UnseenDomain));
        assert_eq!(r.splits[&SplitLabel::SeenIntent].exact_match_rate, Some(0.5));
        assert!((r.overall.exact_match_rate.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.worst.len(), 1);
        assert_eq!(r.worst[0].id, 1);
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
    }

    #[test]
    fn worst_list_is_sorted_and_capped() {
        let recs: Vec<EvalRecord> =
            (0..50).rev().map(|i| record(i, "no", &["yes"], SplitLabel::SeenIntent)).collect();
        let r = eval_report(&recs, MetricSelection::default()).unwrap();
        let ids: Vec<u64> = r.worst.iter().map(|m| m.id).collect();
        assert_eq!(ids, (0..20).collect::<Vec<_>>());
    }
}
