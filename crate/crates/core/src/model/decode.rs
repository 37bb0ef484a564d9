//! Greedy decoding, sequence scoring and the text-to-text scorer wrapper.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{forward, Runner, TrainExample};
use super::{ModelError, ModelParams};
use crate::cds::ConditionalScorer;
use crate::encode::{encode_table, DataTable};
use crate::numeric::Real;
use crate::schema::{Schema, StructuredExample};
use crate::tokenizer::{Vocab, BOS, DELAY, EOS, PAD, PLACEHOLDERS, PLACEHOLDER_BASE, RESERVED};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub text: String,
    /// Emitted ids, without the closing EOS.
    pub ids: Vec<u32>,
    /// True when `max_len` was reached without EOS.
    pub truncated: bool,
}

fn argmax<F: Real>(row: ndarray::ArrayView1<F>) -> u32 {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding of a batch of tables: DELAY inputs, then BOS, then the
/// argmax symbol of each step until EOS or `max_len` symbols.
pub fn greedy_ids<F: Real>(
    params: &ModelParams<F>,
    tables: &[&DataTable],
    max_len: usize,
) -> Result<Vec<(Vec<u32>, bool)>, ModelError> {
    let b = tables.len();
    let mut runner = Runner::new(params, tables)?;
    for _ in 0..params.config.delay_steps {
        runner.advance(&vec![DELAY; b])?;
    }
    let mut out: Vec<Vec<u32>> = vec![Vec::new(); b];
    let mut done = vec![false; b];
    let mut input = vec![BOS; b];
    for _ in 0..max_len {
        let logits = runner.advance(&input)?;
        for i in 0..b {
            if done[i] {
                input[i] = PAD;
                continue;
            }
            let y = argmax(logits.row(i));
            if y == EOS {
                done[i] = true;
                input[i] = PAD;
            } else {
                out[i].push(y);
                input[i] = y;
            }
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(out.into_iter().zip(done).map(|(ids, d)| (ids, !d)).collect())
}

/// Text of decoded ids. Control symbols other than placeholders are dropped;
/// placeholders come out as `$k`.
pub fn ids_to_text(vocab: &Vocab, ids: &[u32]) -> Result<String, ModelError> {
    let kept: Vec<u32> = ids
        .iter()
        .copied()
        .filter(|&id| id >= RESERVED || (PLACEHOLDER_BASE..PLACEHOLDER_BASE + PLACEHOLDERS).contains(&id))
        .collect();
    match vocab.decode(&kept) {
        Ok(t) => Ok(t),
        // a byte sequence cut mid-character still yields readable output
        Err(crate::tokenizer::TokenizerError::InvalidUtf8) => {
            let bytes: Vec<u8> = kept
                .iter()
                .flat_map(|&id| match vocab.piece_bytes(id) {
                    Some(b) if id >= RESERVED => b.to_vec(),
                    _ => format!("${}", id.wrapping_sub(PLACEHOLDER_BASE)).into_bytes(),
                })
                .collect();
            Ok(String::from_utf8_lossy(&bytes).into_owned())
        }
        Err(e) => Err(e.into()),
    }
}

pub fn decode_greedy<F: Real>(
    example: &StructuredExample,
    params: &ModelParams<F>,
    schema: &Schema,
    vocab: &Vocab,
    max_len: usize,
) -> Result<Decoded, ModelError> {
    let table = encode_table(example, schema, vocab, params.config.max_rows())?;
    let (ids, truncated) = greedy_ids(params, &[&table], max_len)?.remove(0);
    Ok(Decoded { text: ids_to_text(vocab, &ids)?, ids, truncated })
}

/// `log p(target | table)` for each pair, without dropout. Targets end with EOS.
pub fn sequence_logprobs<F: Real>(params: &ModelParams<F>, items: &[(&DataTable, &[u32])]) -> Result<Vec<f64>, ModelError> {
    let examples: Vec<TrainExample> = items
        .iter()
        .map(|(t, y)| TrainExample { table: (*t).clone(), target: y.to_vec(), weight: 1.0 })
        .collect();
    let refs: Vec<&TrainExample> = examples.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ok(forward(params, &refs, 0.0, &mut rng)?.per_example_logprob)
}

pub fn sequence_logprob<F: Real>(params: &ModelParams<F>, table: &DataTable, target: &[u32]) -> Result<f64, ModelError> {
    Ok(sequence_logprobs(params, &[(table, target)])?[0])
}

/// Pieces of `text` (placeholders as reserved ids) followed by EOS.
pub fn target_ids(vocab: &Vocab, text: &str) -> Vec<u32> {
    let mut ids = vocab.encode_with_placeholders(text);
    ids.push(EOS);
    ids
}

/// The decoder run text-to-text: the source becomes a one-argument table.
#[derive(Debug, Clone)]
pub struct TextModeScorer<F> {
    pub params: ModelParams<F>,
    pub vocab: Vocab,
    pub chunk: usize,
}

impl<F: Real> TextModeScorer<F> {
    pub fn new(params: ModelParams<F>, vocab: Vocab) -> Self {
        TextModeScorer { params, vocab, chunk: 64 }
    }

    /// A training example for `(source, target)`.
    pub fn example(&self, source: &str, target: &str, weight: f64) -> Result<TrainExample, ModelError> {
        Ok(TrainExample {
            table: DataTable::from_text(&self.vocab, source, self.params.config.max_rows())?,
            target: target_ids(&self.vocab, target),
            weight,
        })
    }
}

impl<F: Real> ConditionalScorer for TextModeScorer<F> {
    fn logprob(&self, source: &str, target: &str) -> f64 {
        self.logprob_batch(&[(source, target)])[0]
    }

    fn logprob_batch(&self, pairs: &[(&str, &str)]) -> Vec<f64> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(self.chunk.max(1)) {
            let examples: Result<Vec<TrainExample>, ModelError> =
                chunk.iter().map(|(s, t)| self.example(s, t, 1.0)).collect();
            let scores = examples.and_then(|ex| {
                let items: Vec<(&DataTable, &[u32])> = ex.iter().map(|e| (&e.table, e.target.as_slice())).collect();
                sequence_logprobs(&self.params, &items)
            });
            match scores {
                Ok(s) => out.extend(s),
                Err(e) => {
                    log::warn!("text-mode scoring failed: {e}");
                    out.extend(std::iter::repeat_n(f64::NAN, chunk.len()));
                }
            }
        }
        out
    }
}
