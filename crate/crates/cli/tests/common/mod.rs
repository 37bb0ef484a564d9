#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

pub const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/toy");

pub const INPUTS: &[&str] = &[
    "schema.txt",
    "templates.txt",
    "sampler.toml",
    "en_de.tsv",
    "de_en.tsv",
    "function_words_de.txt",
    "in_domain_de.txt",
    "general_de.txt",
];

/// Copies the toy inputs into `dir/inputs`.
pub fn seed_inputs(dir: &Path) {
    fs::create_dir_all(dir.join("inputs")).unwrap();
    for f in INPUTS {
        fs::copy(Path::new(FIXTURES).join(f), dir.join("inputs").join(f)).unwrap();
    }
}

/// A stage config from `fixtures/toy/pipeline`, with `overrides` applied as
/// dotted keys, written next to the pipeline directory.
pub fn config(dir: &Path, name: &str, overrides: &[(&str, toml::Value)]) -> PathBuf {
    let text = fs::read_to_string(Path::new(FIXTURES).join("pipeline").join(name)).unwrap();
    let mut table: toml::Table = toml::from_str(&text).unwrap();
    for (key, value) in overrides {
        let mut at = &mut table;
        let parts: Vec<&str> = key.split('.').collect();
        for p in &parts[..parts.len() - 1] {
            at = at.entry(p.to_string()).or_insert(toml::Value::Table(Default::default())).as_table_mut().unwrap();
        }
        at.insert(parts[parts.len() - 1].to_string(), value.clone());
    }
    let configs = dir.parent().unwrap().join("configs");
    fs::create_dir_all(&configs).unwrap();
    let path = configs.join(name);
    fs::write(&path, toml::to_string(&table).unwrap()).unwrap();
    path
}

pub fn run(stage: &str, config: &Path, dir: &Path, extra: &[&str]) -> i32 {
    let mut args = vec![
        stage.to_string(),
        "--config".into(),
        config.display().to_string(),
        "--pipeline-dir".into(),
        dir.display().to_string(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    d2tforge_pipeline::run_cli(args)
}

pub fn int(v: i64) -> toml::Value {
    toml::Value::Integer(v)
}

/// Stage name and config file of every toy stage, in order.
pub const TOY_STAGES: &[(&str, &str)] = &[
    ("synthgen", "01_synthgen.toml"),
    ("render", "02_render_train.toml"),
    ("render", "03_render_test.toml"),
    ("tok-train", "04_tok_train.toml"),
    ("d2t-train", "05_d2t_train.toml"),
    ("d2t-eval", "06_d2t_eval.toml"),
    ("d2t-infer", "07_d2t_infer.toml"),
    ("corpus-score", "08_corpus_score.toml"),
    ("corpus-filter", "09_corpus_filter.toml"),
    ("backtranslate", "10_backtranslate.toml"),
    ("cds-score", "11_cds_score.toml"),
    ("cds-select", "12_cds_select.toml"),
    ("accgen", "13_accgen.toml"),
    ("acc-eval", "14_acc_eval.toml"),
    ("annotate", "15_annotate.toml"),
    ("placeholders", "16_placeholders.toml"),
];

/// Small-scale overrides so the whole toy pipeline runs in seconds.
pub fn small(name: &str) -> Vec<(&'static str, toml::Value)> {
    match name {
        "01_synthgen.toml" => vec![("train_size", int(300)), ("split.test_size", int(40))],
        "04_tok_train.toml" => vec![("size", int(320))],
        "05_d2t_train.toml" => vec![
            ("hidden", int(16)),
            ("max_rows", int(64)),
            ("train.total_steps", int(12)),
            ("train.batch_size", int(8)),
            ("train.warmup_steps", int(2)),
            ("train.log_every", int(4)),
            ("train.checkpoint_every", int(6)),
        ],
        "06_d2t_eval.toml" | "07_d2t_infer.toml" => vec![("max_len", int(12))],
        _ => vec![],
    }
}

/// Runs every toy stage at small scale in `dir`.
pub fn run_small_pipeline(dir: &Path) {
    seed_inputs(dir);
    for (stage, name) in TOY_STAGES {
        let cfg = config(dir, name, &small(name));
        assert_eq!(run(stage, &cfg, dir, &[]), 0, "{stage} ({name}) failed");
    }
}
