use d2tforge::cds::{self, assign_weights, cds_score_corpus, ConditionalScorer, NgramScorer, ScoredPair, SelectionPolicy};
use d2tforge::digest::{canonical_text_digest, canonicalize_text};
use d2tforge::evalkit::corpus_bleu;
use d2tforge::quality::{tokenize, QualityModel};
use proptest::prelude::*;

fn words() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["the", "cat", "sat", "on", "mat", "a", "dog", "Köln", "is", "."]), 0..10)
        .prop_map(|w| w.join(" "))
}

fn corpus() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(words(), 1..20)
}

proptest! {
    #[test]
    fn bleu_stays_in_range(cands in prop::collection::vec(words(), 1..6), refs in prop::collection::vec(words(), 6)) {
        let refs: Vec<Vec<String>> = refs.into_iter().take(cands.len()).map(|r| vec![r]).collect();
        let b = corpus_bleu(&cands, &refs, 4).unwrap();
        prop_assert!((0.0..=100.0 + 1e-9).contains(&b.score));
        prop_assert!(b.precisions.iter().all(|p| (0.0..=1.0).contains(p)));
        prop_assert!(b.matches.iter().zip(&b.totals).all(|(m, t)| m <= t));
    }

    #[test]
    fn bleu_of_the_reference_is_100(r in prop::collection::vec(words(), 1..5)) {
        prop_assume!(r.iter().all(|s| tokenize(s).len() >= 4));
        let refs: Vec<Vec<&String>> = r.iter().map(|s| vec![s]).collect();
        let b = corpus_bleu(&r, &refs, 4).unwrap();
        prop_assert!((b.score - 100.0).abs() < 1e-9);
    }

    #[test]
    fn swapping_the_corpora_negates_scores(d in corpus(), c in corpus(), s in words(), alpha in 0.0f64..2.0) {
        let fwd = QualityModel::fit(d.iter().map(String::as_str), c.iter().map(String::as_str), alpha, 1e-6).unwrap();
        let rev = QualityModel::fit(c.iter().map(String::as_str), d.iter().map(String::as_str), alpha, 1e-6).unwrap();
        prop_assert!((fwd.score(&s) + rev.score(&s)).abs() < 1e-9);
    }

    #[test]
    fn identical_corpora_score_zero(d in corpus(), s in words()) {
        let m = QualityModel::fit(d.iter().map(String::as_str), d.iter().map(String::as_str), 0.5, 1e-6).unwrap();
        prop_assert!(m.score(&s).abs() < 1e-9);
    }

    #[test]
    fn ngram_logprob_is_finite_and_nonpositive(train in prop::collection::vec((words(), words()), 1..10), s in words(), t in ".{0,20}") {
        let scorer = NgramScorer::build(&train, 3).unwrap();
        let lp = scorer.logprob(&s, &t);
        prop_assert!(lp.is_finite() && lp <= 0.0);
    }

    #[test]
    fn cds_score_is_the_log_ratio(train in prop::collection::vec((words(), words()), 1..10), dom in prop::collection::vec((words(), words()), 1..5)) {
        let base = NgramScorer::build(&train, 3).unwrap();
        let adapted = base.adapt(&dom, 10.0);
        let (scored, rejected) = cds_score_corpus(&train, &base, &adapted);
        prop_assert!(rejected.is_empty());
        for p in &scored {
            prop_assert!((p.cds_score - (p.logp_adapted - p.logp_base)).abs() < 1e-9);
        }
    }

    #[test]
    fn top_fraction_keeps_the_best(scores in prop::collection::vec(-5.0f64..5.0, 1..50), fraction in 0.01f64..=1.0) {
        let mut scored: Vec<ScoredPair> = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| ScoredPair { source: i.to_string(), target: String::new(), logp_base: 0.0, logp_adapted: s, cds_score: s, weight: 0.0 })
            .collect();
        assign_weights(&mut scored, SelectionPolicy::TopFraction { fraction }).unwrap();
        let k = (fraction * scores.len() as f64 - 1e-9).ceil() as usize;
        let kept: Vec<f64> = scored.iter().filter(|p| p.weight == 1.0).map(|p| p.cds_score).collect();
        prop_assert_eq!(kept.len(), k);
        let worst_kept = kept.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert!(scored.iter().filter(|p| p.weight == 0.0).all(|p| p.cds_score <= worst_kept));
    }

    #[test]
    fn scored_tsv_round_trips(scores in prop::collection::vec((words(), words(), -50.0f64..0.0, -50.0f64..0.0, 0.0f64..1.0), 0..20)) {
        let scored: Vec<ScoredPair> = scores
            .into_iter()
            .map(|(source, target, b, a, weight)| ScoredPair { source, target, logp_base: b, logp_adapted: a, cds_score: a - b, weight })
            .collect();
        prop_assert_eq!(cds::parse_tsv(&cds::render_tsv(&scored)).unwrap(), scored);
    }

    #[test]
    fn canonical_digest_ignores_layout(lines in prop::collection::vec("[a-z {}:.]{1,20}", 0..10)) {
        let plain = lines.join("\n");
        let noisy: String = lines.iter().map(|l| format!("{l}  \r\n# note\r\n\r\n")).collect();
        prop_assert_eq!(canonical_text_digest(&plain), canonical_text_digest(&noisy));
        prop_assert_eq!(canonicalize_text(&canonicalize_text(&noisy)), canonicalize_text(&noisy));
    }
}
