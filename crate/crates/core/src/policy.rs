//! Conditional autoregressive token policy with exact log-probabilities
//! and analytic gradients.
//!
//! Architecture: additive-logit conditional bigram. The logits for step t
//! are `prev_table[y_{t-1}] + context_table[c] + mean_d image_table[d]`
//! over the image's descriptor tokens d, so the culture condition and the
//! image both causally influence every generated token. Parameters start
//! at zero (uniform policy), which gives analytic reference values.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CultureContext, ImageRecord};
use crate::seed::seeded_rng;
use crate::vocab::Vocabulary;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("unknown token '{0}'")]
    UnknownToken(String),
    #[error("token id {0} out of range for vocabulary")]
    TokenIdOutOfRange(usize),
    #[error("empty token sequence")]
    EmptySequence,
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("rollout count must be at least 2, got {0}")]
    InvalidRolloutCount(usize),
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("gradient contains non-finite entries")]
    NonFiniteGradient,
    #[error("parameter shapes do not match")]
    ShapeMismatch,
    #[error("checkpoint vocabulary hash mismatch: checkpoint {found}, current {expected}")]
    VocabHashMismatch { expected: String, found: String },
    #[error("checkpoint io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint parse error: {0}")]
    Parse(String),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
}

/// Policy parameter tables. Immutable by convention: updates return new values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    /// V x V: logit contribution of the previous token.
    pub prev_table: Vec<Vec<f64>>,
    /// 3 x V: one row per culture condition (none, western, eastern).
    pub context_table: Vec<Vec<f64>>,
    /// V x V: bag-of-descriptor-token contribution, averaged over descriptors.
    pub image_table: Vec<Vec<f64>>,
    /// Generation stops after this many tokens if EOS was not sampled.
    pub max_len: usize,
}

impl PolicyParams {
    pub fn zeros(vocab_size: usize, max_len: usize) -> Self {
        Self {
            prev_table: vec![vec![0.0; vocab_size]; vocab_size],
            context_table: vec![vec![0.0; vocab_size]; 3],
            image_table: vec![vec![0.0; vocab_size]; vocab_size],
            max_len,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.prev_table.len()
    }

    pub fn is_finite(&self) -> bool {
        self.prev_table
            .iter()
            .chain(self.context_table.iter())
            .chain(self.image_table.iter())
            .all(|row| row.iter().all(|x| x.is_finite()))
    }

    /// Step-independent logit part: context row plus mean descriptor rows.
    fn static_logits(&self, context: CultureContext, descriptor_ids: &[usize]) -> Vec<f64> {
        let v = self.vocab_size();
        let mut logits = self.context_table[context.index()].clone();
        if !descriptor_ids.is_empty() {
            let inv = 1.0 / descriptor_ids.len() as f64;
            for &d in descriptor_ids {
                let row = &self.image_table[d];
                for i in 0..v {
                    logits[i] += inv * row[i];
                }
            }
        }
        logits
    }

    fn step_logits(&self, prev: usize, static_logits: &[f64]) -> Vec<f64> {
        let row = &self.prev_table[prev];
        static_logits.iter().zip(row).map(|(s, p)| s + p).collect()
    }
}

/// One sampled sequence with its temperature-1 log-probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    /// Token ids, ending in EOS unless truncated at max_len.
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub per_token_logprobs: Vec<f64>,
}

impl SequenceSample {
    /// Caption tokens as strings, with a trailing EOS stripped.
    pub fn text(&self, vocab: &Vocabulary) -> Vec<String> {
        let eos = vocab.eos_id();
        self.tokens
            .iter()
            .take_while(|&&t| t != eos)
            .map(|&t| vocab.token(t).to_string())
            .collect()
    }
}

/// Gradient accumulator with the same shape as [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    pub prev_table: Vec<Vec<f64>>,
    pub context_table: Vec<Vec<f64>>,
    pub image_table: Vec<Vec<f64>>,
    /// Number of accumulation calls since the last reset.
    pub count: usize,
}

impl GradientBuffer {
    pub fn zeros(vocab_size: usize) -> Self {
        Self {
            prev_table: vec![vec![0.0; vocab_size]; vocab_size],
            context_table: vec![vec![0.0; vocab_size]; 3],
            image_table: vec![vec![0.0; vocab_size]; vocab_size],
            count: 0,
        }
    }

    pub fn zeros_like(params: &PolicyParams) -> Self {
        Self::zeros(params.vocab_size())
    }

    pub fn reset(&mut self) {
        for row in self
            .prev_table
            .iter_mut()
            .chain(self.context_table.iter_mut())
            .chain(self.image_table.iter_mut())
        {
            row.fill(0.0);
        }
        self.count = 0;
    }

    pub fn add(&mut self, other: &GradientBuffer) {
        let add_table = |mine: &mut Vec<Vec<f64>>, theirs: &[Vec<f64>]| {
            for (a, b) in mine.iter_mut().zip(theirs) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
        };
        add_table(&mut self.prev_table, &other.prev_table);
        add_table(&mut self.context_table, &other.context_table);
        add_table(&mut self.image_table, &other.image_table);
        self.count += other.count;
    }

    pub fn scale(&mut self, factor: f64) {
        for row in self
            .prev_table
            .iter_mut()
            .chain(self.context_table.iter_mut())
            .chain(self.image_table.iter_mut())
        {
            for x in row.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.prev_table
            .iter()
            .chain(self.context_table.iter())
            .chain(self.image_table.iter())
            .all(|row| row.iter().all(|x| x.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.prev_table
            .iter()
            .chain(self.context_table.iter())
            .chain(self.image_table.iter())
            .flat_map(|row| row.iter())
            .fold(0.0f64, |acc, x| acc.max(x.abs()))
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let log_sum: f64 = logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&x| x - log_sum).collect()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn encode_descriptors(vocab: &Vocabulary, image: &ImageRecord) -> Result<Vec<usize>, PolicyError> {
    image
        .descriptor_tokens
        .iter()
        .map(|t| {
            vocab
                .id_of(t)
                .ok_or_else(|| PolicyError::UnknownToken(t.clone()))
        })
        .collect()
}

fn check_ids(params: &PolicyParams, ids: &[usize]) -> Result<(), PolicyError> {
    let v = params.vocab_size();
    match ids.iter().find(|&&id| id >= v) {
        Some(&id) => Err(PolicyError::TokenIdOutOfRange(id)),
        None => Ok(()),
    }
}

/// Id-level sequence log-probability under the temperature-1 policy.
///
/// The first step conditions on BOS; every token of `y_ids` (including a
/// final EOS, when present) contributes one log-softmax term.
pub fn log_prob_ids(
    params: &PolicyParams,
    bos_id: usize,
    descriptor_ids: &[usize],
    context: CultureContext,
    y_ids: &[usize],
) -> Result<(f64, Vec<f64>), PolicyError> {
    if y_ids.is_empty() {
        return Err(PolicyError::EmptySequence);
    }
    if y_ids.len() > params.max_len {
        return Err(PolicyError::SequenceTooLong {
            len: y_ids.len(),
            max_len: params.max_len,
        });
    }
    check_ids(params, y_ids)?;
    check_ids(params, descriptor_ids)?;
    check_ids(params, &[bos_id])?;

    let static_logits = params.static_logits(context, descriptor_ids);
    let mut prev = bos_id;
    let mut per_token = Vec::with_capacity(y_ids.len());
    let mut total = 0.0;
    for &token in y_ids {
        let logits = params.step_logits(prev, &static_logits);
        let lp = log_softmax(&logits)[token];
        per_token.push(lp);
        total += lp;
        prev = token;
    }
    Ok((total, per_token))
}

/// Log-probability of a token-string caption under the policy.
pub fn log_prob(
    params: &PolicyParams,
    vocab: &Vocabulary,
    image: &ImageRecord,
    context: CultureContext,
    y: &[String],
) -> Result<f64, PolicyError> {
    let y_ids: Vec<usize> = y
        .iter()
        .map(|t| {
            vocab
                .id_of(t)
                .ok_or_else(|| PolicyError::UnknownToken(t.clone()))
        })
        .collect::<Result<_, _>>()?;
    let descriptor_ids = encode_descriptors(vocab, image)?;
    let (total, _) = log_prob_ids(params, vocab.bos_id(), &descriptor_ids, context, &y_ids)?;
    Ok(total)
}

/// Draw `k >= 2` independent ancestral samples, one rollout group.
///
/// Sampling uses `temperature`; recorded log-probabilities are always taken
/// at temperature 1, the distribution the training objectives are defined
/// on. Deterministic under `seed`.
pub fn sample_rollouts(
    params: &PolicyParams,
    vocab: &Vocabulary,
    image: &ImageRecord,
    context: CultureContext,
    k: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<SequenceSample>, PolicyError> {
    if k < 2 {
        return Err(PolicyError::InvalidRolloutCount(k));
    }
    sample_sequences(params, vocab, image, context, k, temperature, seed)
}

/// Like [`sample_rollouts`] without the group-size floor; used by evaluation.
pub fn sample_sequences(
    params: &PolicyParams,
    vocab: &Vocabulary,
    image: &ImageRecord,
    context: CultureContext,
    k: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<SequenceSample>, PolicyError> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(PolicyError::InvalidTemperature(temperature));
    }
    let descriptor_ids = encode_descriptors(vocab, image)?;
    let static_logits = params.static_logits(context, &descriptor_ids);
    let eos = vocab.eos_id();
    let mut rng = seeded_rng(seed);

    let mut samples = Vec::with_capacity(k);
    for _ in 0..k {
        let mut prev = vocab.bos_id();
        let mut tokens = Vec::new();
        let mut per_token = Vec::new();
        let mut total = 0.0;
        for _ in 0..params.max_len {
            let logits = params.step_logits(prev, &static_logits);
            let token = sample_index(&logits, temperature, &mut rng);
            let lp = log_softmax(&logits)[token];
            tokens.push(token);
            per_token.push(lp);
            total += lp;
            prev = token;
            if token == eos {
                break;
            }
        }
        samples.push(SequenceSample {
            tokens,
            logprob: total,
            per_token_logprobs: per_token,
        });
    }
    Ok(samples)
}

/// Categorical draw from `softmax(logits / temperature)` by CDF walk.
fn sample_index<R: Rng>(logits: &[f64], temperature: f64, rng: &mut R) -> usize {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let weights: Vec<f64> = logits
        .iter()
        .map(|&x| ((x - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Accumulate `coefficient * d(log p(y))/d(params)` into `buffer`.
fn accumulate_logprob_grad(
    buffer: &mut GradientBuffer,
    params: &PolicyParams,
    bos_id: usize,
    descriptor_ids: &[usize],
    context: CultureContext,
    y_ids: &[usize],
    coefficient: f64,
) {
    let v = params.vocab_size();
    let static_logits = params.static_logits(context, descriptor_ids);

    // Context and image contributions are step-independent, so the summed
    // per-step error vector feeds them once.
    let mut summed_error = vec![0.0; v];
    let mut prev = bos_id;
    for &token in y_ids {
        let logits = params.step_logits(prev, &static_logits);
        let probs = softmax(&logits);
        let prev_row = &mut buffer.prev_table[prev];
        for i in 0..v {
            let err = if i == token { 1.0 - probs[i] } else { -probs[i] };
            prev_row[i] += coefficient * err;
            summed_error[i] += err;
        }
        prev = token;
    }

    let ctx_row = &mut buffer.context_table[context.index()];
    for i in 0..v {
        ctx_row[i] += coefficient * summed_error[i];
    }
    if !descriptor_ids.is_empty() {
        let inv = 1.0 / descriptor_ids.len() as f64;
        for &d in descriptor_ids {
            let row = &mut buffer.image_table[d];
            for i in 0..v {
                row[i] += coefficient * inv * summed_error[i];
            }
        }
    }
    buffer.count += 1;
}

/// A supervised training example.
#[derive(Debug, Clone, Copy)]
pub struct TrainingExample<'a> {
    pub image: &'a ImageRecord,
    pub context: CultureContext,
    pub target: &'a [String],
}

/// Mean negative log-likelihood over the batch and its exact gradient.
pub fn sft_loss_and_grad(
    params: &PolicyParams,
    vocab: &Vocabulary,
    batch: &[TrainingExample<'_>],
) -> Result<(f64, GradientBuffer), PolicyError> {
    if batch.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let mut buffer = GradientBuffer::zeros_like(params);
    let inv_batch = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for example in batch {
        let y_ids: Vec<usize> = example
            .target
            .iter()
            .map(|t| {
                vocab
                    .id_of(t)
                    .ok_or_else(|| PolicyError::UnknownToken(t.clone()))
            })
            .collect::<Result<_, _>>()?;
        let descriptor_ids = encode_descriptors(vocab, example.image)?;
        let (lp, _) = log_prob_ids(
            params,
            vocab.bos_id(),
            &descriptor_ids,
            example.context,
            &y_ids,
        )?;
        loss -= inv_batch * lp;
        accumulate_logprob_grad(
            &mut buffer,
            params,
            vocab.bos_id(),
            &descriptor_ids,
            example.context,
            &y_ids,
            -inv_batch,
        );
    }
    Ok((loss, buffer))
}

/// Score-function term `coefficient * d(log p(y|x,c))/d(params)`.
///
/// Used for both the GRPO surrogate and the repulsion penalty.
pub fn policy_gradient_term(
    params: &PolicyParams,
    vocab: &Vocabulary,
    image: &ImageRecord,
    context: CultureContext,
    sample: &SequenceSample,
    coefficient: f64,
) -> Result<GradientBuffer, PolicyError> {
    let mut buffer = GradientBuffer::zeros_like(params);
    accumulate_term(
        &mut buffer,
        params,
        vocab,
        image,
        context,
        sample,
        coefficient,
    )?;
    Ok(buffer)
}

/// Accumulating form of [`policy_gradient_term`].
pub fn accumulate_term(
    buffer: &mut GradientBuffer,
    params: &PolicyParams,
    vocab: &Vocabulary,
    image: &ImageRecord,
    context: CultureContext,
    sample: &SequenceSample,
    coefficient: f64,
) -> Result<(), PolicyError> {
    if sample.tokens.is_empty() {
        return Err(PolicyError::EmptySequence);
    }
    check_ids(params, &sample.tokens)?;
    let descriptor_ids = encode_descriptors(vocab, image)?;
    accumulate_logprob_grad(
        buffer,
        params,
        vocab.bos_id(),
        &descriptor_ids,
        context,
        &sample.tokens,
        coefficient,
    );
    Ok(())
}

/// One SGD step: `params - lr * grad`, entrywise. Pure: inputs unmodified.
pub fn apply_update(
    params: &PolicyParams,
    grad: &GradientBuffer,
    lr: f64,
) -> Result<PolicyParams, PolicyError> {
    if params.vocab_size() != grad.prev_table.len() {
        return Err(PolicyError::ShapeMismatch);
    }
    if !grad.is_finite() {
        return Err(PolicyError::NonFiniteGradient);
    }
    let step = |table: &[Vec<f64>], g: &[Vec<f64>]| -> Vec<Vec<f64>> {
        table
            .iter()
            .zip(g)
            .map(|(row, grow)| row.iter().zip(grow).map(|(p, g)| p - lr * g).collect())
            .collect()
    };
    Ok(PolicyParams {
        prev_table: step(&params.prev_table, &grad.prev_table),
        context_table: step(&params.context_table, &grad.context_table),
        image_table: step(&params.image_table, &grad.image_table),
        max_len: params.max_len,
    })
}

const CHECKPOINT_VERSION: u32 = 1;

/// Versioned parameter dump bound to the vocabulary, config, and corpus it
/// was trained with. Loading rejects vocabulary-hash mismatches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub stage: String,
    pub step: u64,
    pub vocab_hash: String,
    pub config_hash: String,
    pub corpus_hash: String,
    /// Distinct image ids that appeared in any training batch, cumulative
    /// across stages; evaluation uses this for benchmark hygiene.
    pub trained_image_ids: Vec<String>,
    pub params: PolicyParams,
}

impl Checkpoint {
    pub fn new(
        stage: &str,
        step: u64,
        vocab: &Vocabulary,
        config_hash: &str,
        corpus_hash: &str,
        trained_image_ids: Vec<String>,
        params: PolicyParams,
    ) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            stage: stage.to_string(),
            step,
            vocab_hash: vocab.hash(),
            config_hash: config_hash.to_string(),
            corpus_hash: corpus_hash.to_string(),
            trained_image_ids,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let json = serde_json::to_string(self).map_err(|e| PolicyError::Parse(e.to_string()))?;
        fs::write(path, json + "\n").map_err(|source| PolicyError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Self, PolicyError> {
        let raw = fs::read_to_string(path).map_err(|source| PolicyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let checkpoint: Checkpoint =
            serde_json::from_str(&raw).map_err(|e| PolicyError::Parse(e.to_string()))?;
        if checkpoint.version != CHECKPOINT_VERSION {
            return Err(PolicyError::UnsupportedVersion(checkpoint.version));
        }
        let expected = vocab.hash();
        if checkpoint.vocab_hash != expected {
            return Err(PolicyError::VocabHashMismatch {
                expected,
                found: checkpoint.vocab_hash,
            });
        }
        Ok(checkpoint)
    }
}
