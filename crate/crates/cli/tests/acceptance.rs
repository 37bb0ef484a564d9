//! Acceptance criteria A1 to A10, one PASS or FAIL line each.
//!
//! Runs without the libtest harness so the lines always reach the output.
//! Pass criterion names (for example `A3 A7`) as arguments to run a subset.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::time::Instant;

use common::*;
use d2tforge::accgen::{self, make_dataset, Label, LexiconTagger, Mix, Provenance, SourcedPair, TrigramIndex};
use d2tforge::annotate::{from_placeholders, to_placeholders, MarkedSpan, SpanMarkup};
use d2tforge::cds::{cds_score_corpus, NgramScorer, ADAPT_WEIGHT};
use d2tforge::encode::{encode_table, project, DataRow, DataTable, Symbol, TableDims};
use d2tforge::evalkit::{corpus_bleu, EvalReport};
use d2tforge::model::{decode_greedy, loss_and_gradients, step, DecoderState, ModelConfig, ModelParams, TrainExample, TENSOR_NAMES};
use d2tforge::quality::{self, QualityModel};
use d2tforge::schema::{load_schema, IntentRef, Schema, StructuredExample};
use d2tforge::synthgen::{generate_dataset, SamplerConfig, SplitPlan};
use d2tforge::template::TemplatePack;
use d2tforge::tokenizer::{train_vocab, Vocab, BOS, DELAY, EOL};
use d2tforge_pipeline::manifest::file_digest;
use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, ok: impl FnOnce() -> String, bad: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(ok())
    } else {
        Err(bad())
    }
}

struct Toy {
    schema: Schema,
    pack: TemplatePack,
    sampler: SamplerConfig,
    en_de: d2tforge::quality::DictionaryTranslator,
}

fn toy() -> Toy {
    let read = |f: &str| fs::read_to_string(Path::new(FIXTURES).join(f)).unwrap();
    Toy {
        schema: load_schema(&read("schema.txt")).unwrap(),
        pack: TemplatePack::parse(&read("templates.txt")).unwrap(),
        sampler: toml::from_str(&read("sampler.toml")).unwrap(),
        en_de: d2tforge::quality::DictionaryTranslator::from_tsv(&read("en_de.tsv"), true),
    }
}

fn toy_examples(t: &Toy, n: usize) -> Vec<StructuredExample> {
    let plan = SplitPlan { seen_intent: 1.0, unseen_intent: 0.0, unseen_domain: 0.0, test_size: 0, ..Default::default() };
    generate_dataset(&t.schema, t.schema.intents(), n, &plan, &t.sampler).unwrap().train
}

// ---- A1 -------------------------------------------------------------------------

const A1_STAGES: &[(&str, &str)] = &[
    ("synthgen", "01_synthgen.toml"),
    ("render", "02_render_train.toml"),
    ("render", "03_render_test.toml"),
    ("tok-train", "04_tok_train.toml"),
    ("d2t-train", "05_d2t_train.toml"),
    ("d2t-eval", "06_d2t_eval.toml"),
];

fn a1() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("p");
    seed_inputs(&dir);
    let start = Instant::now();
    for (stage, name) in A1_STAGES {
        let cfg = config(&dir, name, &[]);
        let code = run(stage, &cfg, &dir, &[]);
        if code != 0 {
            return Err(format!("{stage} exited with {code}"));
        }
    }
    let report = EvalReport::from_json(&fs::read_to_string(dir.join("eval/report.json")).unwrap()).unwrap();
    let em = report.overall.exact_match_rate.unwrap_or(0.0);
    let detail = format!(
        "exact match {em:.4} on {} held-out examples, BLEU {:.2}, {:.0} min",
        report.overall.count,
        report.overall.bleu.unwrap_or(0.0),
        start.elapsed().as_secs_f64() / 60.0
    );
    if em < 0.99 {
        for m in report.worst.iter().take(5) {
            println!("    A1 miss {}: {:?} vs {:?}", m.id, m.candidate, m.references.first());
        }
    }
    check(em >= 0.99, || detail.clone(), || format!("{detail} (need >= 0.99)"))
}

// ---- A2 -------------------------------------------------------------------------

fn a2() -> Outcome {
    let start = Instant::now();
    let t = toy();
    let vocab = Vocab::bytes_only();
    let dims = TableDims::for_schema(&t.schema, &vocab, 64);
    let config = ModelConfig { dims, hidden: 6, symbol_width: 3, table_width: 3, key_width: 4, value_width: 3, delay_steps: 3 };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut p = ModelParams::<f64>::init(config, &mut rng);
    // shift every tensor, layer-norm gains included, so no group sits at a special point
    for tensor in p.tensors_mut() {
        tensor.mapv_inplace(|x| x + rng.gen_range(-0.3..0.3));
    }
    let examples: Vec<TrainExample> = [
        StructuredExample::new(IntentRef::new("movies", "SOLD_OUT")).with("movie", "The Last Forest"),
        StructuredExample::new(IntentRef::new("weather", "FORECAST"))
            .with("location", "Belford")
            .with("temperature", "21")
            .with("condition", "rainy"),
    ]
    .into_iter()
    .zip([("Sold out.", 1.0), ("Rain, 21.", 0.5)])
    .map(|(ex, (target, weight))| TrainExample {
        table: encode_table(&ex, &t.schema, &vocab, 64).unwrap(),
        target: d2tforge::model::target_ids(&vocab, target),
        weight,
    })
    .collect();
    let batch: Vec<&TrainExample> = examples.iter().collect();
    let loss = |q: &ModelParams<f64>| {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        loss_and_gradients(q, &batch, 0.0, &mut r).unwrap().0.loss
    };
    let (_, grads) = loss_and_gradients(&p, &batch, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let eps = 1e-4;
    let mut worst = (0.0f64, "");
    let mut q = p.clone();
    for (gi, name) in TENSOR_NAMES.iter().enumerate() {
        let analytic = grads.tensors()[gi].clone();
        let mut numeric = Array2::<f64>::zeros(analytic.raw_dim());
        for idx in ndarray::indices(analytic.raw_dim()) {
            let orig = p.tensors()[gi][idx];
            q.tensors_mut()[gi][idx] = orig + eps;
            let up = loss(&q);
            q.tensors_mut()[gi][idx] = orig - eps;
            let down = loss(&q);
            q.tensors_mut()[gi][idx] = orig;
            numeric[idx] = (up - down) / (2.0 * eps);
        }
        let norm = |a: &Array2<f64>| a.mapv(|x| x * x).sum().sqrt();
        let scale = norm(&analytic).max(norm(&numeric));
        if scale == 0.0 {
            return Err(format!("{name}: gradient is identically zero"));
        }
        let rel = norm(&(&analytic - &numeric)) / scale;
        if rel > worst.0 {
            worst = (rel, name);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "{} groups, {} parameters, worst relative error {:.2e} ({}), {secs:.1} s",
        TENSOR_NAMES.len(),
        p.parameter_count(),
        worst.0,
        worst.1
    );
    check(worst.0 < 1e-4 && secs < 60.0, || detail.clone(), || detail.clone())
}

// ---- A3 -------------------------------------------------------------------------

/// Independent scorer: explicit token loops and linear scans for every count.
struct QualityOracle {
    d: Vec<Vec<String>>,
    c: Vec<Vec<String>>,
    alpha: f64,
    eps: f64,
    uni_vocab: f64,
    bi_vocab: f64,
    memo: HashMap<Vec<String>, f64>,
}

fn oracle_tokens(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let flush = |cur: &mut String, out: &mut Vec<String>| {
        let chars: Vec<char> = cur.chars().collect();
        let a = chars.iter().position(|c| c.is_alphanumeric());
        let b = chars.iter().rposition(|c| c.is_alphanumeric());
        if let (Some(a), Some(b)) = (a, b) {
            out.push(chars[a..=b].iter().collect::<String>().to_lowercase());
        }
        cur.clear();
    };
    for ch in s.chars() {
        if ch.is_whitespace() {
            flush(&mut cur, &mut out);
        } else {
            cur.push(ch);
        }
    }
    flush(&mut cur, &mut out);
    out
}

impl QualityOracle {
    fn new(d: &[String], c: &[String], alpha: f64, eps: f64) -> Self {
        let d: Vec<Vec<String>> = d.iter().map(|s| oracle_tokens(s)).collect();
        let c: Vec<Vec<String>> = c.iter().map(|s| oracle_tokens(s)).collect();
        let mut uni = BTreeSet::new();
        let mut bi = BTreeSet::new();
        for toks in d.iter().chain(&c) {
            for i in 0..toks.len() {
                uni.insert(toks[i].clone());
                if i + 1 < toks.len() {
                    bi.insert((toks[i].clone(), toks[i + 1].clone()));
                }
            }
        }
        QualityOracle { d, c, alpha, eps, uni_vocab: uni.len() as f64, bi_vocab: bi.len() as f64, memo: HashMap::new() }
    }

    fn count(corpus: &[Vec<String>], gram: &[String]) -> (f64, f64) {
        let (mut hits, mut total) = (0.0, 0.0);
        for toks in corpus {
            if toks.len() < gram.len() {
                continue;
            }
            for i in 0..=toks.len() - gram.len() {
                total += 1.0;
                if toks[i..i + gram.len()] == *gram {
                    hits += 1.0;
                }
            }
        }
        (hits, total)
    }

    fn prob(&self, corpus: &[Vec<String>], gram: &[String]) -> f64 {
        let (hits, total) = Self::count(corpus, gram);
        let vocab = if gram.len() == 1 { self.uni_vocab } else { self.bi_vocab };
        let denom = total + self.alpha * vocab;
        let p = if denom > 0.0 { (hits + self.alpha) / denom } else { 0.0 };
        p.max(self.eps).min(1.0 - self.eps)
    }

    fn weight(&mut self, gram: &[String]) -> f64 {
        if let Some(&w) = self.memo.get(gram) {
            return w;
        }
        let pd = self.prob(&self.d, gram);
        let pc = self.prob(&self.c, gram);
        let w = (pd.ln() - (1.0 - pd).ln()) - (pc.ln() - (1.0 - pc).ln());
        self.memo.insert(gram.to_vec(), w);
        w
    }

    fn score(&mut self, s: &str) -> f64 {
        let toks = oracle_tokens(s);
        let mut total = 0.0;
        for i in 0..toks.len() {
            total += self.weight(&toks[i..i + 1]);
        }
        for i in 0..toks.len().saturating_sub(1) {
            total += self.weight(&toks[i..i + 2]);
        }
        total
    }
}

const A3_WORDS: &[&str] = &[
    "the", "The", "timer", "Timer,", "weather", "in", "Zürich", "zürich.", "set", "for", "10", "minutes", "--", "...",
    "\"quoted\"", "it's", "ok!", "Straße", "ÉCOLE", "école", "a", "b", "c", "d", "e", "news", "market", "rose", "(fell)", "ß",
];

fn random_sentence(rng: &mut ChaCha8Rng, vocab: &[&str]) -> String {
    let n = rng.gen_range(0..12);
    let mut s = String::new();
    for i in 0..n {
        if i > 0 {
            s.push_str(if rng.gen_bool(0.1) { "  \t" } else { " " });
        }
        s.push_str(vocab.choose(rng).unwrap());
    }
    s
}

fn a3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut sentences_checked = 0usize;
    for trial in 0..1000 {
        let take = rng.gen_range(3..A3_WORDS.len());
        let vocab: Vec<&str> = A3_WORDS.choose_multiple(&mut rng, take).copied().collect();
        // sizes skew small; the largest corpora reach 1000 sentences
        let size = |rng: &mut ChaCha8Rng, max: usize| 1 + (rng.gen::<f64>().powi(3) * (max - 1) as f64) as usize;
        let nd = size(&mut rng, 200);
        let nc = size(&mut rng, 1000);
        let d: Vec<String> = (0..nd).map(|_| random_sentence(&mut rng, &vocab)).collect();
        let c: Vec<String> = (0..nc).map(|_| random_sentence(&mut rng, &vocab)).collect();
        let alpha = *[0.0, 0.1, 0.5, 1.0].choose(&mut rng).unwrap();
        let eps = quality::DEFAULT_EPSILON;
        let model = QualityModel::fit(d.iter().map(String::as_str), c.iter().map(String::as_str), alpha, eps).unwrap();
        let mut oracle = QualityOracle::new(&d, &c, alpha, eps);
        let mut nonneg = Vec::new();
        for s in &c {
            let (got, want) = (model.score(s), oracle.score(s));
            let diff = (got - want).abs();
            worst = worst.max(diff);
            if diff > 1e-9 {
                return Err(format!("trial {trial}: {s:?} scored {got} against oracle {want}"));
            }
            if want.abs() > 1e-9 && (got >= 0.0) != (want >= 0.0) {
                return Err(format!("trial {trial}: sign of {s:?} differs from oracle"));
            }
            if got >= 0.0 {
                nonneg.push(s.as_str());
            }
        }
        sentences_checked += c.len();
        let (kept, report) = quality::filter(&model, c.iter().map(String::as_str), 0.0);
        if kept != nonneg || report.kept as usize != nonneg.len() || report.dropped as usize != c.len() - nonneg.len() {
            return Err(format!("trial {trial}: filter at 0 kept {} sentences, non-negative set has {}", kept.len(), nonneg.len()));
        }
    }
    Ok(format!("1000 trials, {sentences_checked} sentences, max |score - oracle| {worst:.1e}, filter keeps exactly the non-negative set"))
}

// ---- A4 -------------------------------------------------------------------------

const EN_DE_WORDS: &[(&str, &str)] = &[
    ("house", "haus"), ("car", "auto"), ("tree", "baum"), ("city", "stadt"), ("water", "wasser"), ("bread", "brot"),
    ("book", "buch"), ("school", "schule"), ("government", "regierung"), ("market", "markt"), ("price", "preis"),
    ("report", "bericht"), ("police", "polizei"), ("team", "mannschaft"), ("game", "spiel"), ("year", "jahr"),
    ("week", "woche"), ("day", "tag"), ("minister", "minister"), ("company", "firma"), ("the", "die"), ("a", "eine"),
    ("is", "ist"), ("was", "war"), ("and", "und"), ("with", "mit"), ("in", "in"), ("for", "für"), ("new", "neu"),
    ("old", "alt"), ("big", "groß"), ("small", "klein"), ("good", "gut"), ("says", "sagt"), ("wins", "gewinnt"),
    ("rises", "steigt"), ("falls", "fällt"), ("opens", "öffnet"), ("closes", "schließt"), ("today", "heute"),
    ("timer", "zeitgeber"), ("weather", "wetter"), ("minutes", "minuten"),
];

const A4_CITIES: &[(&str, &str)] = &[
    ("Munich", "München"), ("Cologne", "Köln"), ("Vienna", "Wien"), ("Zurich", "Zürich"), ("Nuremberg", "Nürnberg"),
    ("Hanover", "Hannover"), ("Brunswick", "Braunschweig"), ("Lucerne", "Luzern"), ("Geneva", "Genf"), ("Prague", "Prag"),
];

/// Assistant-style pairs: the domain the adapted scorer should prefer.
fn in_domain_pair(rng: &mut ChaCha8Rng) -> (String, String) {
    let n = rng.gen_range(1..100);
    let (en, de) = A4_CITIES.choose(rng).unwrap();
    match rng.gen_range(0..4) {
        0 => (format!("Setting a timer for {n} minutes."), format!("Ich stelle einen Timer für {n} Minuten.")),
        1 => (format!("It is {n} degrees in {en}."), format!("In {de} sind es {n} Grad.")),
        2 => (format!("Your alarm is set for {n} o'clock."), format!("Dein Wecker ist auf {n} Uhr gestellt.")),
        _ => (format!("Expect rain in {en} today."), format!("In {de} wird heute Regen erwartet.")),
    }
}

fn noise_pair(rng: &mut ChaCha8Rng) -> (String, String) {
    let n = rng.gen_range(3..14);
    let words: Vec<&(&str, &str)> = (0..n).map(|_| EN_DE_WORDS.choose(rng).unwrap()).collect();
    let en: Vec<&str> = words.iter().map(|w| w.0).collect();
    let mut de: Vec<&str> = words.iter().map(|w| w.1).collect();
    if rng.gen_bool(0.5) {
        de.reverse();
    }
    (format!("{}.", en.join(" ")), format!("{}.", de.join(" ")))
}

fn a4_run(seed: u64) -> (Vec<f64>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adapt: Vec<(String, String)> = (0..200).map(|_| in_domain_pair(&mut rng)).collect();
    let mut pool: Vec<((String, String), bool)> = (0..10_000).map(|_| (noise_pair(&mut rng), false)).collect();
    pool.extend((0..100).map(|_| (in_domain_pair(&mut rng), true)));
    pool.shuffle(&mut rng);
    let pairs: Vec<(String, String)> = pool.iter().map(|(p, _)| p.clone()).collect();
    let base = NgramScorer::build(&pairs, 4).unwrap();
    let adapted = base.adapt(&adapt, ADAPT_WEIGHT);
    let (scored, rejected) = cds_score_corpus(&pairs, &base, &adapted);
    assert!(rejected.is_empty());
    let scores: Vec<f64> = scored.iter().map(|p| p.cds_score).collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let planted_in_top = order.iter().take(1000).filter(|&&i| pool[i].1).count();
    (scores, planted_in_top)
}

fn a4() -> Outcome {
    let (s1, hits) = a4_run(4);
    let (s2, hits2) = a4_run(4);
    let same = s1.len() == s2.len() && s1.iter().zip(&s2).all(|(a, b)| a.to_bits() == b.to_bits()) && hits == hits2;
    let detail = format!("{hits}/100 planted pairs in the top 1000 of 10100, reruns bit-identical: {same}");
    check(hits >= 80 && same, || detail.clone(), || detail.clone())
}

// ---- A5 -------------------------------------------------------------------------

fn a5() -> Outcome {
    let t = toy();
    let examples = toy_examples(&t, 8000);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let positives: Vec<SourcedPair> = examples
        .into_iter()
        .enumerate()
        .map(|(i, ex)| {
            let variant = rng.gen_range(0..t.pack.variant_count(&ex.intent).unwrap());
            let english = t.pack.render(&ex, &t.schema, variant).unwrap().text;
            let mut localized = ex.clone();
            for (k, v) in &ex.localized_values {
                localized.values.insert(k.clone(), v.clone());
            }
            let translation = t.en_de.translate(&t.pack.render(&localized, &t.schema, variant).unwrap().text).unwrap();
            SourcedPair { id: i as u64 + 1, example: ex, variant, english, translation }
        })
        .collect();
    let mut tagger = LexiconTagger::english();
    tagger.add_examples(positives.iter().map(|p| &p.example), &t.schema);
    let index = TrigramIndex::build(positives.iter().map(|p| p.english.as_str()), &tagger);
    let mix = Mix { trigram_fraction: 1.0, swap_fraction: 1.0 };
    let (pairs, _) = make_dataset(&positives, &index, &tagger, mix, &mut rng).unwrap();

    let function_words: HashSet<String> = accgen::DEFAULT_FUNCTION_WORDS
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect();
    let is_function = |tok: &str| function_words.contains(&tok.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase());
    let by_id: HashMap<u64, &SourcedPair> = positives.iter().map(|p| (p.id, p)).collect();
    let all_translations: HashSet<&str> = positives.iter().map(|p| p.translation.as_str()).collect();

    let (mut negatives, mut trigram, mut swap) = (0usize, 0usize, 0usize);
    let mut current: Option<&accgen::LabeledPair> = None;
    let mut used = Vec::new();
    for p in &pairs {
        if p.label == Label::Correct {
            current = Some(p);
            used.push(p.clone());
            continue;
        }
        if negatives == 10_000 {
            break;
        }
        let pos = current.ok_or("negative before any positive")?;
        match p.provenance {
            Provenance::TrigramSwap(at) => {
                let a: Vec<&str> = pos.english.split_whitespace().collect();
                let b: Vec<&str> = p.english.split_whitespace().collect();
                let diffs: Vec<usize> = (0..a.len().min(b.len())).filter(|&i| a[i] != b[i]).collect();
                if a.len() != b.len() || diffs != [at] || is_function(a[at]) || is_function(b[at]) || p.translation != pos.translation {
                    return Err(format!("bad trigram negative {:?} from {:?}", p.english, pos.english));
                }
                trigram += 1;
            }
            Provenance::TranslationSwap(id) => {
                let donor = by_id.get(&id).ok_or(format!("unknown donor {id}"))?;
                if p.english != pos.english
                    || p.translation != donor.translation
                    || p.translation == pos.translation
                    || !all_translations.contains(p.translation.as_str())
                {
                    return Err(format!("bad swap negative {:?} / {:?}", p.english, p.translation));
                }
                swap += 1;
            }
            Provenance::Original => return Err("INCORRECT pair with ORIGINAL provenance".into()),
        }
        negatives += 1;
        used.push(p.clone());
    }
    if negatives < 10_000 {
        return Err(format!("only {negatives} negatives generated"));
    }
    let truth: HashSet<(&str, &str)> =
        used.iter().filter(|p| p.label == Label::Correct).map(|p| (p.english.as_str(), p.translation.as_str())).collect();
    let metrics = accgen::evaluate_classifier(|e, t| if truth.contains(&(e, t)) { 1.0 } else { 0.0 }, &used, 0.5);
    let detail = format!(
        "{negatives} negatives ({trigram} trigram, {swap} swap) valid; perfect classifier recall {:?} FPR {:?}",
        metrics.recall, metrics.false_positive_rate
    );
    check(metrics.recall == Some(1.0) && metrics.false_positive_rate == Some(0.0), || detail.clone(), || detail.clone())
}

// ---- A6 -------------------------------------------------------------------------

fn random_text(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(0..48);
    (0..n)
        .map(|_| match rng.gen_range(0..6) {
            0 => rng.gen_range(' '..='~'),
            1 => *[' ', '\t', '\n', '\u{a0}', '\u{3000}'].choose(rng).unwrap(),
            2 => rng.gen_range('\u{a1}'..='\u{17f}'),
            3 => rng.gen_range('\u{4e00}'..='\u{4fff}'),
            4 => rng.gen_range('\u{1f600}'..='\u{1f64f}'),
            _ => loop {
                if let Some(c) = char::from_u32(rng.gen_range(0..0x110000)) {
                    break c;
                }
            },
        })
        .collect()
}

fn a6() -> Outcome {
    let t = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let corpus: Vec<String> = toy_examples(&t, 3000)
        .iter()
        .map(|ex| t.pack.render(ex, &t.schema, rng.gen_range(0..t.pack.variant_count(&ex.intent).unwrap())).unwrap().text)
        .collect();
    let v1 = train_vocab(corpus.iter().map(String::as_str), 512).unwrap();
    let v2 = train_vocab(corpus.iter().map(String::as_str), 512).unwrap();
    if v1.merges() != v2.merges() || v1.to_text() != v2.to_text() {
        return Err("two training runs gave different merge lists".into());
    }
    for i in 0..100_000 {
        let s = random_text(&mut rng);
        let back = v1.decode(&v1.encode(&s)).map_err(|e| format!("string {i}: {e}"))?;
        if back.as_bytes() != s.as_bytes() {
            return Err(format!("string {i} {s:?} came back as {back:?}"));
        }
    }
    Ok(format!("100000 random strings round-trip byte-identically; {} merges identical across runs", v1.merges().len()))
}

// ---- A7 -------------------------------------------------------------------------

fn shuffled_json(ex: &StructuredExample, rng: &mut ChaCha8Rng) -> String {
    let mut entries: Vec<(&String, &String)> = ex.values.iter().collect();
    entries.shuffle(rng);
    let values: Vec<String> =
        entries.iter().map(|(k, v)| format!("{}:{}", serde_json::to_string(k).unwrap(), serde_json::to_string(v).unwrap())).collect();
    format!(r#"{{"intent":"{}","values":{{{}}}}}"#, ex.intent, values.join(","))
}

/// The table written out by hand: schema argument order, one row per piece
/// with positions from 0, an EOL row after each string, one row per enum.
fn expected_rows(ex: &StructuredExample, schema: &Schema, vocab: &Vocab) -> Vec<DataRow> {
    let mut args: Vec<_> = schema.args().iter().collect();
    args.sort_by_key(|a| a.arg_index);
    let mut rows = Vec::new();
    for a in args {
        let value = match a.name.as_str() {
            "domain" => ex.intent.domain.clone(),
            "intent" => ex.intent.intent.clone(),
            n => match ex.values.get(n) {
                Some(v) => v.clone(),
                None => continue,
            },
        };
        let (arg, ty) = (a.arg_index as u32, a.type_index as u32);
        if a.is_enum() {
            rows.push(DataRow { symbol: Symbol::Enum(schema.enum_index(&value).unwrap() as u32), arg, ty, pos: 0 });
        } else {
            let pieces = vocab.encode(&value);
            let k = pieces.len() as u32;
            rows.extend(pieces.into_iter().enumerate().map(|(i, id)| DataRow { symbol: Symbol::Piece(id), arg, ty, pos: i as u32 }));
            rows.push(DataRow { symbol: Symbol::Piece(EOL), arg, ty, pos: k });
        }
    }
    rows
}

fn a7() -> Outcome {
    let t = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let examples = toy_examples(&t, 300);
    let corpus: Vec<String> = examples.iter().map(|e| t.pack.render(e, &t.schema, 0).unwrap().text).collect();
    let vocab = train_vocab(corpus.iter().map(String::as_str), 400).unwrap();
    let dims = TableDims::for_schema(&t.schema, &vocab, 96);
    let config = ModelConfig { hidden: 24, ..ModelConfig::desk(dims) };
    let params = ModelParams::<f32>::init(config, &mut rng);
    for (i, ex) in examples.iter().enumerate() {
        let other = StructuredExample::from_json(&shuffled_json(ex, &mut rng)).unwrap();
        let a = encode_table(ex, &t.schema, &vocab, 96).unwrap();
        let b = encode_table(&other, &t.schema, &vocab, 96).unwrap();
        if a != b {
            return Err(format!("example {i}: value order changed the table"));
        }
        if a.rows != expected_rows(ex, &t.schema, &vocab) {
            return Err(format!("example {i}: table layout differs from the hand-built one"));
        }
        if i < 60 {
            let d1 = decode_greedy(ex, &params, &t.schema, &vocab, 16).unwrap();
            let d2 = decode_greedy(&other, &params, &t.schema, &vocab, 16).unwrap();
            if d1 != d2 {
                return Err(format!("example {i}: value order changed the greedy decode"));
            }
        }
    }
    let tables: Vec<DataTable> = examples[..8].iter().map(|e| encode_table(e, &t.schema, &vocab, 96).unwrap()).collect();
    let refs: Vec<&DataTable> = tables.iter().collect();
    let (k, v, m) = project(&refs, &params.encoder).unwrap();
    let (mut k2, mut v2) = (k.clone(), v.clone());
    for (bi, table) in tables.iter().enumerate() {
        k2.slice_mut(s![bi, table.len().., ..]).fill(3.0e4);
        v2.slice_mut(s![bi, table.len().., ..]).fill(-7.5);
    }
    let (mut s1, mut s2) = (DecoderState::zeros(8, 24), DecoderState::zeros(8, 24));
    for sym in [DELAY, DELAY, DELAY, BOS, 20, 30, 40, 50] {
        let prev = vec![sym; 8];
        let (n1, l1) = step(&s1, &prev, k.view(), v.view(), m.view(), &params).unwrap();
        let (n2, l2) = step(&s2, &prev, k2.view(), v2.view(), m.view(), &params).unwrap();
        if l1.iter().zip(l2.iter()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err("perturbing masked rows changed the logits".into());
        }
        (s1, s2) = (n1, n2);
    }
    Ok("300 reordered value maps give identical tables and layouts, 60 identical greedy decodes; masked-row perturbation leaves logits bit-identical".into())
}

// ---- A8 -------------------------------------------------------------------------

const A8_PAYLOADS: &[&str] = &["Frankreich", "Köln", "Kino Regal", "$5", "Regal", "A$$B", "東京", "$0", "Stille Fluss", "Fluss", "x", "New York"];
const A8_FILLER: &[&str] = &["Das", "Spiel", "in", "$", "$$", "$1", "morgen", "ist", ",", ".", "  ", "Köln-Süd", "price: $3", "\t"];

fn a8() -> Outcome {
    let france = SpanMarkup::parse("Tomorrow's game is in <location, Frankreich>France</location>.").map_err(|e| e.to_string())?;
    let target = "Das Spiel morgen ist in Frankreich.";
    let (ph, table) = to_placeholders(target, &france).map_err(|e| e.to_string())?;
    if ph != "Das Spiel morgen ist in $0." || from_placeholders(&ph, &table).as_deref() != Ok(target) {
        return Err(format!("France example gave {ph:?}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut substituted = 0;
    for case in 0..10_000 {
        let k = rng.gen_range(0..=4);
        let payloads: Vec<&str> = A8_PAYLOADS.choose_multiple(&mut rng, k).copied().collect();
        let mut text = String::new();
        let mut spans = Vec::new();
        for p in &payloads {
            text.push_str("w ");
            let start = text.len();
            text.push_str("span");
            spans.push(MarkedSpan { start, end: text.len(), entity_type: "t".into(), localized: Some(p.to_string()) });
        }
        let markup = SpanMarkup { text, spans };
        let mut target = String::new();
        for _ in 0..rng.gen_range(0..12) {
            let piece = if !payloads.is_empty() && rng.gen_bool(0.4) {
                payloads.choose(&mut rng).unwrap()
            } else {
                A8_FILLER.choose(&mut rng).unwrap()
            };
            target.push_str(piece);
            if rng.gen_bool(0.7) {
                target.push(' ');
            }
        }
        let (ph, table) = to_placeholders(&target, &markup).map_err(|e| format!("case {case}: {e}"))?;
        substituted += usize::from(!table.is_empty());
        let back = from_placeholders(&ph, &table).map_err(|e| format!("case {case}: {e}"))?;
        if back != target {
            return Err(format!("case {case}: {target:?} -> {ph:?} -> {back:?}"));
        }
    }
    Ok(format!("France/Frankreich example plus 10000 random cases ({substituted} with substitutions) restore the target exactly"))
}

// ---- A9 -------------------------------------------------------------------------

fn a9() -> Outcome {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-6;
    let mut lines = Vec::new();
    // 7 candidate "the"s, clipped at the 2 in the reference
    let b = corpus_bleu(&["the the the the the the the"], &[vec!["the cat is on the mat"]], 4).unwrap();
    lines.push(("canonical the-the-the p1", b.precisions[0], 2.0 / 7.0));
    // unigrams 5/6, bigrams 3/5, trigrams 1/4, 4-grams 0/3 smoothed to 1/4, equal lengths
    let b = corpus_bleu(&["the cat sat on the mat"], &[vec!["the cat is on the mat"]], 4).unwrap();
    lines.push(("cat-sat p2", b.precisions[1], 3.0 / 5.0));
    lines.push(("cat-sat p4 smoothed", b.precisions[3], 1.0 / 4.0));
    lines.push(("cat-sat score", b.score, 100.0 * (5.0f64 / 6.0 * 3.0 / 5.0 * 1.0 / 4.0 * 1.0 / 4.0).powf(0.25)));
    // "the" clipped by the larger of the two reference counts; closest length 3
    let b = corpus_bleu(&["the the the"], &[vec!["the cat", "the the dog"]], 1).unwrap();
    lines.push(("multi-reference clip p1", b.precisions[0], 2.0 / 3.0));
    lines.push(("multi-reference brevity", b.brevity_penalty, 1.0));
    // two-word candidate against a four-word reference: every precision 1, BP e^(1-2)
    let b = corpus_bleu(&["the cat"], &[vec!["the cat is here"]], 2).unwrap();
    lines.push(("brevity penalty", b.brevity_penalty, (-1.0f64).exp()));
    lines.push(("brevity score", b.score, 100.0 * (-1.0f64).exp()));
    // corpus level: counts pool before dividing
    let b = corpus_bleu(&["a b c", "a x"], &[vec!["a b c"], vec!["a y"]], 1).unwrap();
    lines.push(("pooled corpus p1", b.precisions[0], 4.0 / 5.0));
    let bad: Vec<String> = lines
        .iter()
        .filter(|(_, got, want)| !close(*got, *want))
        .map(|(n, got, want)| format!("{n}: {got} vs {want}"))
        .collect();
    check(bad.is_empty(), || format!("{} hand-computed values match to 1e-6", lines.len()), || bad.join("; "))
}

// ---- A10 ------------------------------------------------------------------------

fn a10() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("p");
    run_small_pipeline(&dir);
    let infer_cfg = config(&dir, "07_d2t_infer.toml", &small("07_d2t_infer.toml"));
    let serve = dir.join("serve/predictions.jsonl");
    let before = file_digest(&fs::read(&serve).unwrap());
    if run("d2t-infer", &infer_cfg, &dir, &[]) != 0 {
        return Err("d2t-infer failed with unchanged inputs".into());
    }
    let mut outcomes = Vec::new();
    for (file, edit) in [
        ("inputs/templates.txt", "template timers.CANCEL: The {label} timer is gone.\n"),
        ("inputs/schema.txt", "intent timers.PAUSE label\n"),
    ] {
        let path = dir.join(file);
        let original = fs::read_to_string(&path).unwrap();
        fs::write(&path, format!("{original}{edit}")).unwrap();
        let code = run("d2t-infer", &infer_cfg, &dir, &[]);
        let untouched = file_digest(&fs::read(&serve).unwrap()) == before;
        fs::write(&path, original).unwrap();
        outcomes.push((file, code, untouched));
    }
    let replay_dir = root.path().join("replay");
    let diffs = d2tforge_pipeline::replay(&dir, &replay_dir).map_err(|e| e.to_string())?;
    let mut same_files = 0;
    let records = d2tforge_pipeline::manifest::PipelineManifest::load(&replay_dir).unwrap().records;
    for rec in &records {
        for (rel, digest) in &rec.outputs {
            if file_digest(&fs::read(replay_dir.join(rel)).unwrap()) == *digest {
                same_files += 1;
            }
        }
    }
    let refused = outcomes.iter().all(|(_, code, untouched)| *code == 3 && *untouched);
    let detail = format!(
        "edited pack/schema exit codes {:?} with predictions untouched, identical inputs exit 0, replay of {} stages: {} digest differences",
        outcomes.iter().map(|o| o.1).collect::<Vec<_>>(),
        records.len(),
        diffs.len()
    );
    check(refused && diffs.is_empty() && same_files > 0, || detail.clone(), || detail.clone())
}

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).is_test(true).try_init();
    let criteria: &[(&str, &str, fn() -> Outcome)] = &[
        ("A2", "gradient correctness", a2),
        ("A3", "quality-score oracle equivalence", a3),
        ("A4", "CDS planted-pair recovery", a4),
        ("A5", "accuracy-data validity", a5),
        ("A6", "tokenizer losslessness", a6),
        ("A7", "encoding invariances", a7),
        ("A8", "placeholder round trip", a8),
        ("A9", "BLEU oracle", a9),
        ("A10", "pipeline pinning and replay", a10),
        ("A1", "distilled-model exact match", a1),
    ];
    let wanted: BTreeSet<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    let mut results = BTreeMap::new();
    for (id, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(*id) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or(e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match &outcome {
            Ok(d) => println!("{id} PASS {name}: {d} [{secs:.1} s]"),
            Err(d) => {
                println!("{id} FAIL {name}: {d} [{secs:.1} s]");
                failed.push(*id);
            }
        }
        results.insert(*id, outcome.is_ok());
    }
    println!("acceptance: {} passed, {} failed", results.values().filter(|&&p| p).count(), failed.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
