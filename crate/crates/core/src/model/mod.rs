//! Data-to-text decoder: a layer-normalized LSTM that reads the data table
//! through single-head scaled dot-product attention at every step.
//!
//! Decoder inputs are `delay_steps` DELAY symbols, then BOS, then the target
//! pieces; the loss covers every target piece and the closing EOS.

mod graph;

pub mod checkpoint;
pub mod decode;
pub mod train;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encode::{fill_uniform, EncodeError, EncoderParams, TableDims, DEFAULT_MAX_ROWS};
use crate::numeric::Real;

pub use decode::{decode_greedy, greedy_ids, ids_to_text, sequence_logprob, sequence_logprobs, target_ids, Decoded, TextModeScorer};
pub use graph::{attend, loss_and_gradients, step, DecoderState, LossStats, TrainExample};
pub use train::{finetune_step, lr_at, AdamState, StepStats, TrainConfig, Trainer, WeightSource};

pub const LN_EPSILON: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("every table row is masked for batch element {0}")]
    AllMasked(usize),
    #[error("non-finite loss at step {step} (lr {lr}, last finite loss {last_loss})")]
    NonFinite { step: u64, lr: f64, last_loss: f64 },
    #[error("loss above {threshold} for {steps} consecutive steps (step {step})")]
    Diverged { step: u64, threshold: f64, steps: usize },
    #[error("symbol id {0} outside the output vocabulary")]
    BadSymbol(u32),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
}

/// Sizes of every tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dims: TableDims,
    /// LSTM width.
    pub hidden: usize,
    /// Decoder input symbol embedding width.
    pub symbol_width: usize,
    /// Width of each table-column embedding.
    pub table_width: usize,
    pub key_width: usize,
    pub value_width: usize,
    pub delay_steps: usize,
}

impl ModelConfig {
    /// H = 1024, E = W_k = W_v = 64, delay 3.
    pub fn standard(dims: TableDims) -> Self {
        ModelConfig {
            dims,
            hidden: 1024,
            symbol_width: 64,
            table_width: 64,
            key_width: 64,
            value_width: 64,
            delay_steps: 3,
        }
    }

    /// The standard layout with H = 256.
    pub fn desk(dims: TableDims) -> Self {
        ModelConfig { hidden: 256, ..Self::standard(dims) }
    }

    pub fn vocab(&self) -> usize {
        self.dims.vocab
    }

    /// Width of the LSTM input `[context; symbol embedding]`.
    pub fn input_width(&self) -> usize {
        self.value_width + self.symbol_width
    }

    pub fn max_rows(&self) -> usize {
        self.dims.positions
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let widths = [self.hidden, self.symbol_width, self.table_width, self.key_width, self.value_width];
        if widths.contains(&0) || self.dims.vocab == 0 || self.dims.args == 0 || self.dims.types == 0 {
            return Err(ModelError::Config("widths and table sizes must be positive".into()));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        let dims = TableDims { vocab: crate::tokenizer::DEFAULT_SIZE, enums: 0, args: 1, types: 1, positions: DEFAULT_MAX_ROWS };
        Self::standard(dims)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub encoder: EncoderParams<F>,
    /// `[V, E_sym]`
    pub embed: Array2<F>,
    /// `[H, W_k]`
    pub wq: Array2<F>,
    /// `[W_v + E_sym + H, 4H]`, gate blocks in order input, forget, output, candidate.
    pub w: Array2<F>,
    /// `[1, 4H]` layer-norm gain and bias per gate pre-activation.
    pub gate_gain: Array2<F>,
    pub gate_bias: Array2<F>,
    /// `[1, H]` layer-norm gain and bias of the cell state.
    pub cell_gain: Array2<F>,
    pub cell_bias: Array2<F>,
    /// `[H, V]`
    pub wo: Array2<F>,
    /// `[1, V]`
    pub bo: Array2<F>,
}

pub const TENSOR_NAMES: [&str; 15] = [
    "encoder.symbol",
    "encoder.arg",
    "encoder.type",
    "encoder.position",
    "encoder.wk",
    "encoder.wv",
    "embed",
    "wq",
    "lstm.w",
    "lstm.gate_gain",
    "lstm.gate_bias",
    "lstm.cell_gain",
    "lstm.cell_bias",
    "wo",
    "bo",
];

impl<F: Real> ModelParams<F> {
    pub fn zeros(config: ModelConfig) -> Self {
        let (h, v) = (config.hidden, config.vocab());
        ModelParams {
            config,
            encoder: EncoderParams::zeros(config.dims, config.table_width, config.key_width, config.value_width),
            embed: Array2::zeros((v, config.symbol_width)),
            wq: Array2::zeros((h, config.key_width)),
            w: Array2::zeros((config.input_width() + h, 4 * h)),
            gate_gain: Array2::zeros((1, 4 * h)),
            gate_bias: Array2::zeros((1, 4 * h)),
            cell_gain: Array2::zeros((1, h)),
            cell_bias: Array2::zeros((1, h)),
            wo: Array2::zeros((h, v)),
            bo: Array2::zeros((1, v)),
        }
    }

    /// Uniform init with variance 1/fan-in for projections, unit layer-norm
    /// gains, and forget-gate bias 1.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(config);
        let h = config.hidden;
        p.encoder = EncoderParams::random(config.dims, config.table_width, config.key_width, config.value_width, rng);
        fill_uniform(&mut p.embed, 0.1, rng);
        let limit = |fan_in: usize| (3.0 / fan_in as f64).sqrt();
        fill_uniform(&mut p.wq, limit(h), rng);
        fill_uniform(&mut p.w, limit(config.input_width() + h), rng);
        fill_uniform(&mut p.wo, limit(h), rng);
        p.gate_gain.fill(F::one());
        p.cell_gain.fill(F::one());
        p.gate_bias.slice_mut(ndarray::s![0, h..2 * h]).fill(F::one());
        p
    }

    pub fn tensors(&self) -> [&Array2<F>; 15] {
        let e = &self.encoder;
        [
            &e.symbol, &e.arg, &e.ty, &e.pos, &e.wk, &e.wv, &self.embed, &self.wq, &self.w, &self.gate_gain,
            &self.gate_bias, &self.cell_gain, &self.cell_bias, &self.wo, &self.bo,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Array2<F>; 15] {
        let e = &mut self.encoder;
        [
            &mut e.symbol,
            &mut e.arg,
            &mut e.ty,
            &mut e.pos,
            &mut e.wk,
            &mut e.wv,
            &mut self.embed,
            &mut self.wq,
            &mut self.w,
            &mut self.gate_gain,
            &mut self.gate_bias,
            &mut self.cell_gain,
            &mut self.cell_bias,
            &mut self.wo,
            &mut self.bo,
        ]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).map(|x| x.as_f64() * x.as_f64()).sum()
    }

    pub fn scale(&mut self, k: F) {
        for t in self.tensors_mut() {
            t.mapv_inplace(|x| x * k);
        }
    }

    /// Element-type conversion.
    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        let mut out = ModelParams::<G>::zeros(self.config);
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.mapv(|x| G::of(x.as_f64()));
        }
        out
    }
}
