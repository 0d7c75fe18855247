// SPDX-License-Identifier: MIT OR Apache-2.0

//! Next-token training (AdamW), answer probabilities and perplexity.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::hooks::{ForwardHook, NoHook};
use super::model::{log_softmax, softmax, Model, Params};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f32,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f32,
    pub seed: u64,
    pub mode: TrainMode,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            batch_size: 16,
            epochs: 30,
            weight_decay: 0.01,
            seed: 7,
            mode: TrainMode::Pretrain,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        Ok(())
    }
}

/// Fine-tuning settings derived from a pretraining config: same optimizer at
/// a tenth of the learning rate.
pub fn finetune_config(base: &TrainConfig, epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: base.lr / 10.0,
        epochs,
        mode: TrainMode::Finetune,
        ..base.clone()
    }
}

/// One training sequence: `prompt answer <eos>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainExample {
    pub prompt: Vec<u32>,
    pub answer: Vec<u32>,
}

impl TrainExample {
    pub fn sequence(&self, eos: u32) -> Vec<u32> {
        let mut s = self.prompt.clone();
        s.extend_from_slice(&self.answer);
        s.push(eos);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean next-token cross-entropy over the epoch.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub steps: usize,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

struct Adam {
    m: Params,
    v: Params,
    t: i32,
}

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.98;
const ADAM_EPS: f32 = 1e-8;

impl Adam {
    fn new(model: &Model) -> Self {
        Self {
            m: Params::zeros(&model.config),
            v: Params::zeros(&model.config),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut Params, grads: &Params, lr: f32, wd: f32) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t);
        let bc2 = 1.0 - BETA2.powi(self.t);
        let decay: Vec<bool> = params.tensors().iter().map(|t| t.decay).collect();
        let g: Vec<&[f32]> = grads.tensors().into_iter().map(|t| t.data).collect();
        let ms = self.m.slices_mut();
        let vs = self.v.slices_mut();
        for ((((p, g), m), v), decay) in params.slices_mut().into_iter().zip(g).zip(ms).zip(vs).zip(decay) {
            for i in 0..p.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
                if decay {
                    p[i] -= lr * wd * p[i];
                }
                p[i] -= lr * update;
            }
        }
    }
}

fn grad_norm(grads: &Params) -> f32 {
    grads
        .tensors()
        .iter()
        .flat_map(|t| t.data.iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt() as f32
}

/// Trains on every next-token position of `prompt answer <eos>` sequences.
/// Deterministic given `cfg.seed`. Zero epochs leaves the model untouched.
pub fn train_lm(
    model: &mut Model,
    examples: &[TrainExample],
    eos: u32,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        return Ok(report);
    }
    if examples.is_empty() {
        return Err(Error::Empty("training examples".into()));
    }
    let seqs: Vec<Vec<u32>> = examples.iter().map(|e| e.sequence(eos)).collect();
    for s in &seqs {
        if s.len() < 2 {
            return Err(Error::config("training sequence needs at least two tokens"));
        }
        model.check_tokens(s)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model);
    let mut grads = Params::zeros(&model.config);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut tokens = Vec::new();
            let mut segments = Vec::with_capacity(batch.len());
            for &i in batch {
                let start = tokens.len();
                tokens.extend_from_slice(&seqs[i]);
                segments.push((start, tokens.len()));
            }
            let n_targets: usize = segments.iter().map(|(s, e)| e - s - 1).sum();
            let cache = model.forward_packed(&tokens, segments.clone(), &mut NoHook);
            let logits = cache_logits(model, &cache);
            let mut d_logits = Array2::zeros(logits.raw_dim());
            let mut batch_loss = 0.0f64;
            let inv = 1.0 / n_targets as f32;
            for &(start, end) in &segments {
                for i in start..end - 1 {
                    let target = tokens[i + 1] as usize;
                    let p = softmax(logits.row(i));
                    batch_loss -= (p[target].max(1e-30) as f64).ln();
                    let mut row = d_logits.row_mut(i);
                    row.assign(&(p * inv));
                    row[target] -= inv;
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at epoch {epoch}, batch {bi}: {batch_loss}"
                )));
            }
            grads.fill_zero();
            model.backward(&cache, &d_logits, Some(&mut grads), None);
            let norm = grad_norm(&grads);
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient norm at epoch {epoch}, batch {bi}: {norm}"
                )));
            }
            if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                let scale = cfg.grad_clip / norm;
                for s in grads.slices_mut() {
                    s.iter_mut().for_each(|g| *g *= scale);
                }
            }
            adam.step(&mut model.params, &grads, cfg.lr, cfg.weight_decay);
            report.steps += 1;
            total += batch_loss;
            count += n_targets;
        }
        let loss = total / count as f64;
        log::debug!("epoch {epoch}: loss {loss:.5}");
        report.epochs.push(EpochStats { epoch, loss });
    }
    if !model.params.all_finite() {
        return Err(Error::NonFinite("parameters after training".into()));
    }
    Ok(report)
}

fn cache_logits(model: &Model, cache: &super::model::ForwardCache) -> Array2<f32> {
    cache.hidden().dot(&model.params.unembed.t())
}

/// Teacher-forced product of the answer tokens' next-token probabilities.
/// `logits` must cover `prompt ++ answer[..len-1]`.
pub fn answer_probs_from_logits(logits: &Array2<f32>, prompt_len: usize, answer: &[u32]) -> Vec<f64> {
    answer
        .iter()
        .enumerate()
        .map(|(k, &tok)| softmax(logits.row(prompt_len - 1 + k))[tok as usize] as f64)
        .collect()
}

/// Probability of `answer` following `prompt`, under an optional hook.
pub fn answer_prob_with(
    model: &Model,
    prompt: &[u32],
    answer: &[u32],
    hook: &mut dyn ForwardHook,
) -> Result<f64> {
    if answer.is_empty() {
        return Err(Error::Empty("answer tokens".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Empty("prompt tokens".into()));
    }
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(&answer[..answer.len() - 1]);
    let logits = model.logits_with(&seq, hook)?;
    Ok(answer_probs_from_logits(&logits, prompt.len(), answer)
        .into_iter()
        .product())
}

pub fn answer_prob(model: &Model, prompt: &[u32], answer: &[u32]) -> Result<f64> {
    answer_prob_with(model, prompt, answer, &mut NoHook)
}

/// Argmax next token after `prompt`, under a hook.
pub fn greedy_first_token_with(model: &Model, prompt: &[u32], hook: &mut dyn ForwardHook) -> Result<u32> {
    let logits = model.last_logits_with(prompt, hook)?;
    Ok(argmax(&logits) as u32)
}

pub fn greedy_first_token(model: &Model, prompt: &[u32]) -> Result<u32> {
    greedy_first_token_with(model, prompt, &mut NoHook)
}

pub(crate) fn argmax(v: &Array1<f32>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `exp` of the mean next-token negative log-likelihood over every position
/// of every sequence.
pub fn perplexity(model: &Model, corpus: &[Vec<u32>]) -> Result<f64> {
    let mut nll = 0.0f64;
    let mut count = 0usize;
    for seq in corpus {
        if seq.len() < 2 {
            continue;
        }
        let logits = model.logits(seq)?;
        for i in 0..seq.len() - 1 {
            nll -= log_softmax(logits.row(i))[seq[i + 1] as usize] as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Empty("perplexity corpus has no next-token positions".into()));
    }
    Ok((nll / count as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toylm::ModelConfig;

    fn small() -> Model {
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_mlp: 32,
            vocab_size: 12,
            max_seq_len: 8,
            seed: 1,
        };
        Model::new(cfg).unwrap()
    }

    fn uniform() -> Model {
        let mut m = small();
        m.params.unembed.fill(0.0);
        m
    }

    fn examples() -> Vec<TrainExample> {
        (0..6)
            .map(|i| TrainExample {
                prompt: vec![3, 4 + i as u32 % 3],
                answer: vec![7 + i as u32 % 4],
            })
            .collect()
    }

    #[test]
    fn uniform_model_probabilities() {
        let m = uniform();
        let p = answer_prob(&m, &[3, 4], &[5]).unwrap();
        assert!((p - 1.0 / 12.0).abs() < 1e-7);
        let p2 = answer_prob(&m, &[3, 4], &[5, 6]).unwrap();
        assert!((p2 - 1.0 / 144.0).abs() < 1e-8);
        let ppl = perplexity(&m, &[vec![3, 4, 5, 6]]).unwrap();
        assert!((ppl - 12.0).abs() < 1e-4);
    }

    #[test]
    fn product_rule_over_answer_tokens() {
        let logits = Array2::from_shape_vec((2, 2), vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let parts = answer_probs_from_logits(&logits, 1, &[0, 1]);
        assert_eq!(parts.iter().product::<f64>(), 0.25);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let m = small();
        assert!(answer_prob(&m, &[3], &[]).is_err());
        assert!(perplexity(&m, &[]).is_err());
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let mut m = small();
        let before = m.clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let report = train_lm(&mut m, &examples(), 0, &cfg).unwrap();
        assert!(report.epochs.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn training_is_deterministic_and_lowers_loss() {
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 3,
            ..Default::default()
        };
        let mut a = small();
        let mut b = small();
        let ra = train_lm(&mut a, &examples(), 0, &cfg).unwrap();
        let rb = train_lm(&mut b, &examples(), 0, &cfg).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
        let first = ra.epochs[0].loss;
        let last = ra.final_loss().unwrap();
        assert!(last < first * 0.7, "{first} -> {last}");
    }

    #[test]
    fn packed_forward_matches_single_sequences() {
        let m = small();
        let a = [3u32, 4, 5];
        let b = [6u32, 7, 8, 9];
        let mut tokens = a.to_vec();
        tokens.extend_from_slice(&b);
        let cache = m.forward_packed(&tokens, vec![(0, 3), (3, 7)], &mut NoHook);
        let packed = cache_logits(&m, &cache);
        let la = m.logits(&a).unwrap();
        let lb = m.logits(&b).unwrap();
        for i in 0..3 {
            for v in 0..12 {
                assert!((packed[[i, v]] - la[[i, v]]).abs() < 1e-5);
            }
        }
        for i in 0..4 {
            for v in 0..12 {
                assert!((packed[[3 + i, v]] - lb[[i, v]]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn finetune_uses_a_tenth_of_the_rate() {
        let base = TrainConfig::default();
        let ft = finetune_config(&base, 5);
        assert_eq!(ft.mode, TrainMode::Finetune);
        assert!((ft.lr - base.lr / 10.0).abs() < 1e-12);
        assert_eq!(ft.epochs, 5);
    }
}
