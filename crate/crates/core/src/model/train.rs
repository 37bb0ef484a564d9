//! Adam training with linear warmup and half-life decay.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{loss_and_gradients, TrainExample};
use super::{ModelError, ModelParams};
use crate::numeric::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    /// Every example weighs 1.
    #[default]
    Uniform,
    /// Use each example's own weight (for instance selection weights).
    Example,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub dropout: f64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    /// Defaults to a fifth of `total_steps`.
    pub half_life: Option<u64>,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub weights: WeightSource,
    pub log_every: u64,
    pub checkpoint_every: Option<u64>,
    pub divergence_loss: f64,
    pub divergence_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            dropout: 0.10,
            peak_lr: 6e-3,
            warmup_steps: 1000,
            half_life: None,
            total_steps: 1_000_000,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            clip_norm: Some(5.0),
            seed: 0,
            weights: WeightSource::Uniform,
            log_every: 100,
            checkpoint_every: None,
            divergence_loss: 1e4,
            divergence_patience: 100,
        }
    }
}

impl TrainConfig {
    /// Batch 32 with the standard rates.
    pub fn desk(total_steps: u64) -> Self {
        TrainConfig { batch_size: 32, total_steps, warmup_steps: (total_steps / 30).max(1), ..Default::default() }
    }

    pub fn half_life(&self) -> f64 {
        self.half_life.unwrap_or((self.total_steps / 5).max(1)) as f64
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.batch_size == 0 || self.total_steps == 0 {
            return bad("batch_size and total_steps must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_epsilon <= 0.0 {
            return bad("Adam moments must lie in [0, 1) and epsilon must be positive");
        }
        if self.half_life == Some(0) || self.clip_norm.is_some_and(|c| c <= 0.0) {
            return bad("half_life and clip_norm must be positive");
        }
        Ok(())
    }
}

/// `peak · min(t / warmup, 1) · 2^(−max(t − warmup, 0) / half_life)`.
pub fn lr_at(config: &TrainConfig, t: u64) -> f64 {
    let warm = if config.warmup_steps == 0 { 1.0 } else { (t as f64 / config.warmup_steps as f64).min(1.0) };
    let decay_steps = t.saturating_sub(config.warmup_steps) as f64;
    config.peak_lr * warm * (-decay_steps / config.half_life()).exp2()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: ModelParams<F>,
    pub v: ModelParams<F>,
    /// Updates applied so far.
    pub t: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        AdamState { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    pub fn update(&mut self, params: &mut ModelParams<F>, grads: &ModelParams<F>, lr: f64, beta1: f64, beta2: f64, eps: f64) {
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2) = (F::of(beta1), F::of(beta2));
        let (one_b1, one_b2) = (F::of(1.0 - beta1), F::of(1.0 - beta2));
        let step = F::of(lr / bc1);
        let inv_bc2 = F::of(1.0 / bc2);
        let eps = F::of(eps);
        let tensors = params.tensors_mut().into_iter().zip(grads.tensors()).zip(self.m.tensors_mut()).zip(self.v.tensors_mut());
        for (((p, g), m), v) in tensors {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p -= step * *m / ((*v * inv_bc2).sqrt() + eps);
            });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub mean_token_nll: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub tokens: usize,
}

/// Training state. Batches and dropout masks derive from `(seed, step)`, so a
/// resumed run continues exactly as an uninterrupted one.
pub struct Trainer<F> {
    pub params: ModelParams<F>,
    pub adam: AdamState<F>,
    pub config: TrainConfig,
    /// Completed steps.
    pub step: u64,
    over_threshold: usize,
    last_finite_loss: f64,
    epoch_cache: Option<(u64, Vec<usize>)>,
}

impl<F: Real> Trainer<F> {
    pub fn new(params: ModelParams<F>, config: TrainConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let adam = AdamState::new(&params);
        Ok(Self::resume(params, adam, config, 0))
    }

    pub fn resume(params: ModelParams<F>, adam: AdamState<F>, config: TrainConfig, step: u64) -> Self {
        Trainer { params, adam, config, step, over_threshold: 0, last_finite_loss: f64::NAN, epoch_cache: None }
    }

    fn epoch_order(&mut self, epoch: u64, n: usize) -> &[usize] {
        if self.epoch_cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream(1 << 32 | epoch);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            self.epoch_cache = Some((epoch, order));
        }
        &self.epoch_cache.as_ref().expect("just set").1
    }

    /// Example indices of batch `step`: consecutive slices of per-epoch permutations.
    pub fn batch_indices(&mut self, step: u64, n: usize) -> Vec<usize> {
        let bsz = self.config.batch_size as u64;
        (step * bsz..(step + 1) * bsz)
            .map(|k| {
                let (epoch, at) = (k / n as u64, (k % n as u64) as usize);
                self.epoch_order(epoch, n)[at]
            })
            .collect()
    }

    /// One optimizer update on the next batch.
    pub fn train_step(&mut self, data: &[TrainExample]) -> Result<StepStats, ModelError> {
        if data.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let idx = self.batch_indices(self.step, data.len());
        let uniform: Vec<TrainExample>;
        let batch: Vec<&TrainExample> = match self.config.weights {
            WeightSource::Example => idx.iter().map(|&i| &data[i]).collect(),
            WeightSource::Uniform => {
                uniform = idx.iter().map(|&i| TrainExample { weight: 1.0, ..data[i].clone() }).collect();
                uniform.iter().collect()
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.step + 1);
        let t = self.step + 1;
        let lr = lr_at(&self.config, t);
        let (stats, mut grads) = loss_and_gradients(&self.params, &batch, self.config.dropout, &mut rng)?;
        if !stats.loss.is_finite() {
            return Err(ModelError::NonFinite { step: t, lr, last_loss: self.last_finite_loss });
        }
        let grad_norm = grads.squared_norm().sqrt();
        if !grad_norm.is_finite() {
            return Err(ModelError::NonFinite { step: t, lr, last_loss: self.last_finite_loss });
        }
        if let Some(clip) = self.config.clip_norm {
            if grad_norm > clip {
                grads.scale(F::of(clip / grad_norm));
            }
        }
        self.adam.update(&mut self.params, &grads, lr, self.config.beta1, self.config.beta2, self.config.adam_epsilon);
        self.last_finite_loss = stats.loss;
        if stats.loss > self.config.divergence_loss {
            self.over_threshold += 1;
            if self.over_threshold >= self.config.divergence_patience {
                return Err(ModelError::Diverged {
                    step: t,
                    threshold: self.config.divergence_loss,
                    steps: self.over_threshold,
                });
            }
        } else {
            self.over_threshold = 0;
        }
        self.step = t;
        Ok(StepStats { step: t, loss: stats.loss, mean_token_nll: stats.mean_token_nll, lr, grad_norm, tokens: stats.tokens })
    }

    /// Trains up to `total_steps`, calling `on_log` every `log_every` steps and
    /// `on_checkpoint` every `checkpoint_every` steps and at the end.
    pub fn run<L, C>(&mut self, data: &[TrainExample], mut on_log: L, mut on_checkpoint: C) -> Result<(), ModelError>
    where
        L: FnMut(&StepStats),
        C: FnMut(&Trainer<F>) -> Result<(), ModelError>,
    {
        if data.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        while self.step < self.config.total_steps {
            let stats = self.train_step(data)?;
            if self.config.log_every > 0 && (stats.step % self.config.log_every == 0 || stats.step == 1) {
                on_log(&stats);
            }
            if self.config.checkpoint_every.is_some_and(|k| k > 0 && stats.step % k == 0) {
                on_checkpoint(self)?;
            }
        }
        on_checkpoint(self)
    }
}

/// One Adam step from fresh moments at a constant learning rate, without
/// dropout. With base parameters X this yields the adapted parameters Y.
pub fn finetune_step<F: Real>(params: &ModelParams<F>, batch: &[TrainExample], lr: f64) -> Result<ModelParams<F>, ModelError> {
    let refs: Vec<&TrainExample> = batch.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (stats, grads) = loss_and_gradients(params, &refs, 0.0, &mut rng)?;
    if !stats.loss.is_finite() {
        return Err(ModelError::NonFinite { step: 1, lr, last_loss: f64::NAN });
    }
    let mut out = params.clone();
    let d = TrainConfig::default();
    AdamState::new(params).update(&mut out, &grads, lr, d.beta1, d.beta2, d.adam_epsilon);
    Ok(out)
}
