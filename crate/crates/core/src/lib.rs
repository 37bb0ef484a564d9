//! Toolkit for localizing task-oriented NLG output with machine translation.
//!
//! The crate covers every algorithmic piece of the localization flow:
//!
//! * [`schema`]: argument schema, intents and validated structured examples.
//! * [`synthgen`]: annotation-aware synthetic example generation and splits.
//! * [`template`]: a small template-driven English NLG system used as a fixture.
//! * [`quality`]: log-odds sentence quality scoring and filtering of web text.
//! * [`cds`]: contrastive data selection over a parallel corpus.
//! * [`accgen`]: accuracy-error training data (trigram replacement, translation swap).
//! * [`tokenizer`]: lossless byte-pair subword vocabulary with reserved control ids.
//! * [`encode`]: the four-column data table encoding of structured examples.
//! * [`model`]: layer-normalized LSTM decoder with table attention, trained from scratch.
//! * [`annotate`]: entity span markup and placeholder copying.
//! * [`evalkit`]: exact match against all references and corpus BLEU.

pub mod accgen;
pub mod annotate;
pub mod cds;
pub mod digest;
pub mod encode;
pub mod evalkit;
pub mod model;
pub mod numeric;
pub mod quality;
pub mod schema;
pub mod synthgen;
pub mod template;
pub mod tokenizer;

pub use schema::{ArgKind, Annotation, ArgumentSpec, IntentRef, IntentSpec, Schema, StructuredExample};
pub use tokenizer::Vocab;
