//! Training loop: AdamW with warmup plus cosine decay, global-norm clipping and
//! best-on-validation selection.

mod corpus;

pub use corpus::{generate_corpus, read_studies, write_studies, Corpus, Finding, Study, SyntheticCorpusConfig, View, ViewPosition};

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Write;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{batch_loss, batch_loss_and_gradients, init_params, DecoderConfig, DecoderParams, TrainingExample};
use crate::embedding::{l2_normalize, Embedding, EmbeddingProvider, NoiseConfig, NoiseSource};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::matching::TargetSet;
use crate::phrase_graph::KeyPhrase;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    /// Perturb target text embeddings during training.
    pub noise: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            warmup_steps: 50,
            batch_size: 128,
            max_epochs: 10,
            weight_decay: 0.05,
            grad_clip_norm: 1.0,
            noise: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("grad_clip_norm", self.grad_clip_norm),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::validation(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Learning rate at optimizer step `step` out of `total_steps`.
///
/// Rises linearly from 0 to the base rate over the warmup, then follows half a
/// cosine down to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let lr = cfg.learning_rate;
    let step = step.min(total_steps);
    if step < cfg.warmup_steps {
        return lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(cfg.warmup_steps);
    if span == 0 {
        return lr;
    }
    let progress = (step - cfg.warmup_steps) as f64 / span as f64;
    lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: DecoderParams,
    v: DecoderParams,
    t: i32,
}

impl AdamW {
    pub fn new(cfg: &DecoderConfig, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: DecoderParams::zeros(cfg),
            v: DecoderParams::zeros(cfg),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut DecoderParams, grads: &DecoderParams, lr: f64) {
        self.t += 1;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for ((((_, mut p), (_, g)), (_, mut m)), (_, mut v)) in tensors {
            ndarray::Zip::from(&mut p).and(&g).and(&mut m).and(&mut v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * wd * *p;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut DecoderParams, max_norm: f64) -> f64 {
    let norm = grads.squared_norm().sqrt();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Noise vectors drawn while training this epoch.
    pub train_noise_draws: u64,
    /// Noise vectors drawn while validating; zero unless noise leaks.
    pub val_noise_draws: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss.
    pub params: DecoderParams,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

pub fn write_history_csv<W: Write>(history: &[EpochRecord], mut w: W) -> Result<()> {
    writeln!(w, "epoch,train_loss,val_loss,lr")?;
    for r in history {
        writeln!(w, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.lr)?;
    }
    Ok(())
}

/// One view as a training sample: its tokens and the phrases it supports.
pub fn view_samples(studies: &[Study]) -> Vec<(&crate::embedding::TokenGrid, &[String])> {
    studies
        .iter()
        .flat_map(|s| s.views.iter().map(|v| (&v.tokens, v.phrases.as_slice())))
        .collect()
}

fn embed_vocabulary<'a>(
    samples: impl Iterator<Item = &'a String>,
    provider: &dyn EmbeddingProvider,
    d: usize,
) -> Result<HashMap<String, Embedding>> {
    let mut unique: Vec<&str> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for p in samples {
        if seen.insert(p.as_str()) {
            unique.push(p);
        }
    }
    let mut table = HashMap::with_capacity(unique.len());
    for chunk in unique.chunks(256) {
        let vecs = provider.embed(chunk)?;
        for (p, v) in chunk.iter().zip(vecs) {
            if v.dim() != d {
                return Err(Error::DimensionMismatch { expected: d, got: v.dim() });
            }
            if !v.is_unit() {
                return Err(Error::validation(format!("provider returned a non-unit embedding for {p:?}")));
            }
            table.insert((*p).to_owned(), v);
        }
    }
    Ok(table)
}

fn make_example(
    tokens: &crate::embedding::TokenGrid,
    phrases: &[String],
    table: &HashMap<String, Embedding>,
    noise: Option<&mut NoiseSource>,
    n: usize,
) -> Result<TrainingExample> {
    let mut key_phrases = Vec::with_capacity(phrases.len());
    let mut embeddings = Vec::with_capacity(phrases.len());
    let mut noise = noise;
    for p in phrases {
        key_phrases.push(KeyPhrase::new(p)?);
        let e = &table[p];
        embeddings.push(match noise.as_deref_mut() {
            Some(src) => l2_normalize(&src.apply(e))?,
            None => e.clone(),
        });
    }
    Ok(TrainingExample {
        tokens: tokens.clone(),
        targets: TargetSet::new(key_phrases, embeddings, n)?,
    })
}

/// Noise-free loss over `samples` in fixed batches, averaged over batches.
fn evaluate(
    samples: &[(&crate::embedding::TokenGrid, &[String])],
    table: &HashMap<String, Embedding>,
    params: &DecoderParams,
    dcfg: &DecoderConfig,
    lcfg: &LossConfig,
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in samples.chunks(batch_size) {
        let batch = chunk
            .iter()
            .map(|(t, p)| make_example(t, p, table, None, dcfg.num_queries))
            .collect::<Result<Vec<_>>>()?;
        total += batch_loss(&batch, params, dcfg, lcfg)?;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Trains a decoder from scratch and returns the best-on-validation parameters.
pub fn train(
    train_set: &[Study],
    val_set: &[Study],
    dcfg: &DecoderConfig,
    lcfg: &LossConfig,
    tcfg: &TrainConfig,
    provider: &dyn EmbeddingProvider,
) -> Result<TrainOutcome> {
    dcfg.validate()?;
    lcfg.validate(dcfg.num_queries)?;
    tcfg.validate()?;
    let train_samples = view_samples(train_set);
    let val_samples = view_samples(val_set);
    if train_samples.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    if val_samples.is_empty() {
        return Err(Error::validation("validation set is empty"));
    }
    if provider.dim() != dcfg.d_embed {
        return Err(Error::DimensionMismatch {
            expected: dcfg.d_embed,
            got: provider.dim(),
        });
    }

    let mut params = init_params(dcfg, tcfg.seed)?;
    let mut best = params.clone();
    let mut best_epoch = None;
    let mut history = Vec::with_capacity(tcfg.max_epochs);
    if tcfg.max_epochs == 0 {
        return Ok(TrainOutcome {
            params,
            best_epoch,
            history,
        });
    }

    let steps_per_epoch = train_samples.len().div_ceil(tcfg.batch_size);
    let total_steps = steps_per_epoch * tcfg.max_epochs;
    if tcfg.warmup_steps >= total_steps {
        return Err(Error::validation(format!(
            "warmup_steps ({}) must be below the total step count ({total_steps})",
            tcfg.warmup_steps
        )));
    }

    let all_phrases = train_samples.iter().chain(&val_samples).flat_map(|(_, p)| p.iter());
    let table = embed_vocabulary(all_phrases, provider, dcfg.d_embed)?;

    let mut noise = NoiseSource::new(NoiseConfig {
        enabled: tcfg.noise,
        rng_seed: tcfg.seed.wrapping_add(1),
    });
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(2));
    let mut opt = AdamW::new(dcfg, tcfg.weight_decay);
    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    let mut best_val = f64::INFINITY;
    let mut step = 0;

    for epoch in 1..=tcfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let draws_before = noise.draws();
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for idx in order.chunks(tcfg.batch_size) {
            let batch = idx
                .iter()
                .map(|&i| {
                    let (t, p) = train_samples[i];
                    make_example(t, p, &table, Some(&mut noise), dcfg.num_queries)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut out = batch_loss_and_gradients(&batch, &params, dcfg, lcfg).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("step {step}: {m}")),
                other => other,
            })?;
            clip_grad_norm(&mut out.grads.0, tcfg.grad_clip_norm);
            step += 1;
            lr = lr_at(step, total_steps, tcfg);
            opt.step(&mut params, &out.grads.0, lr);
            if let Some(name) = params.first_non_finite() {
                return Err(Error::NonFinite(format!("step {step}: parameter {name}")));
            }
            epoch_loss += out.loss;
        }
        let train_noise_draws = noise.draws() - draws_before;

        let draws_before = noise.draws();
        let val_loss = evaluate(&val_samples, &table, &params, dcfg, lcfg, tcfg.batch_size)?;
        let val_noise_draws = noise.draws() - draws_before;

        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / steps_per_epoch as f64,
            val_loss,
            lr,
            train_noise_draws,
            val_noise_draws,
        };
        info!(
            "epoch {epoch}: train_loss {:.5} val_loss {:.5} lr {:.3e}",
            record.train_loss, record.val_loss, record.lr
        );
        if val_loss < best_val {
            best_val = val_loss;
            best = params.clone();
            best_epoch = Some(epoch);
        }
        history.push(record);
    }
    Ok(TrainOutcome {
        params: best,
        best_epoch,
        history,
    })
}

/// Noise-free loss of `params` over a study set.
pub fn evaluate_loss(
    studies: &[Study],
    params: &DecoderParams,
    dcfg: &DecoderConfig,
    lcfg: &LossConfig,
    provider: &dyn EmbeddingProvider,
    batch_size: usize,
) -> Result<f64> {
    let samples = view_samples(studies);
    if samples.is_empty() {
        return Err(Error::validation("study set is empty"));
    }
    let table = embed_vocabulary(samples.iter().flat_map(|(_, p)| p.iter()), provider, dcfg.d_embed)?;
    evaluate(&samples, &table, params, dcfg, lcfg, batch_size.max(1))
}
