//! Reference-anchored rank rewards, group-relative advantages, text
//! embeddings, and the degradation prototype repulsion penalty.
//!
//! The reward of rollout j is `(rank_ref - rank_j) / K`: positive iff the
//! rollout outranks the reference, magnitude growing linearly with the rank
//! gap, bounded in [-1, 1]. The linear form is the simplest map with those
//! three properties and is deliberately replaceable.
//!
//! Because captions are discrete, the repulsion hinge cannot be
//! differentiated through the text; it enters training as per-rollout
//! score-function coefficients (see the trainer), which is the exact
//! policy gradient of the expected penalty.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::DegradationAnnotation;

/// Embedding width of the builtin hashed n-gram encoder.
pub const DEFAULT_EMBED_DIM: usize = 256;

/// Environment variable holding the embedding API key.
pub const EMBED_API_KEY_ENV: &str = "EMBED_API_KEY";

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("rank {rank} outside 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },
    #[error("cannot embed an empty text")]
    EmptyText,
    #[error("text hashed to the zero vector")]
    ZeroEmbedding,
    #[error("embedding backend unavailable: {0}")]
    EmbeddingUnavailable(String),
    #[error("no prototype for direction '{0}'")]
    MissingDirection(String),
    #[error("direction '{0}' has no evidence texts")]
    NoEvidence(String),
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

/// Map a rollout's rank and the reference rank to a bounded reward.
pub fn rank_to_reward(rank_j: usize, rank_ref: usize, k: usize) -> Result<f64, RewardError> {
    let max = k + 1;
    for rank in [rank_j, rank_ref] {
        if rank < 1 || rank > max {
            return Err(RewardError::RankOutOfRange { rank, max });
        }
    }
    Ok((rank_ref as f64 - rank_j as f64) / k as f64)
}

/// Group-relative advantages with a degenerate-group flag.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageVector {
    pub values: Vec<f64>,
    pub degenerate: bool,
}

/// `(r - mean) / (std + epsilon)` with the population standard deviation.
/// A zero-variance group yields all-zero advantages and the degenerate flag;
/// the trainer skips such groups.
pub fn group_advantages(rewards: &[f64], epsilon: f64) -> AdvantageVector {
    let n = rewards.len();
    if n < 2 {
        return AdvantageVector {
            values: vec![0.0; n],
            degenerate: true,
        };
    }
    // All-equal rewards are the zero-variance case; checked directly since
    // a floating mean of identical values can round one ulp away from them
    // for non-dyadic group sizes.
    if rewards.iter().all(|r| *r == rewards[0]) {
        return AdvantageVector {
            values: vec![0.0; n],
            degenerate: true,
        };
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let variance = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64;
    let std = variance.sqrt();
    if std == 0.0 {
        return AdvantageVector {
            values: vec![0.0; n],
            degenerate: true,
        };
    }
    AdvantageVector {
        values: rewards.iter().map(|r| (r - mean) / (std + epsilon)).collect(),
        degenerate: false,
    }
}

/// A unit-norm embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub components: Vec<f64>,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn norm(&self) -> f64 {
        self.components.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Cosine similarity; both inputs are unit vectors in practice but the dot
/// product is normalized anyway.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, RewardError> {
    if a.dim() != b.dim() {
        return Err(RewardError::DimensionMismatch(a.dim(), b.dim()));
    }
    let dot: f64 = a
        .components
        .iter()
        .zip(&b.components)
        .map(|(x, y)| x * y)
        .sum();
    let denom = a.norm() * b.norm();
    if denom == 0.0 {
        return Err(RewardError::ZeroEmbedding);
    }
    Ok(dot / denom)
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a, used instead of the std hasher so embeddings are stable across
/// platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Hash unigrams and bigrams into `dim` buckets with signed counts, then
/// L2-normalize. Deterministic; fails on empty or zero-norm inputs.
pub fn embed_text(text: &[String], dim: usize) -> Result<EmbeddingVector, RewardError> {
    if text.is_empty() {
        return Err(RewardError::EmptyText);
    }
    let mut components = vec![0.0f64; dim];
    let mut add_feature = |feature: &str| {
        let h = fnv1a(feature.as_bytes());
        let bucket = ((h >> 1) % dim as u64) as usize;
        let sign = if h & 1 == 0 { 1.0 } else { -1.0 };
        components[bucket] += sign;
    };
    for token in text {
        add_feature(&format!("u:{token}"));
    }
    for pair in text.windows(2) {
        add_feature(&format!("b:{}\u{1f}{}", pair[0], pair[1]));
    }
    let norm = components.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(RewardError::ZeroEmbedding);
    }
    for x in components.iter_mut() {
        *x /= norm;
    }
    Ok(EmbeddingVector { components })
}

/// Text encoder abstraction: builtin hashed n-grams or an external service.
pub trait EmbeddingBackend {
    fn dim(&self) -> usize;
    fn embed(&self, text: &[String]) -> Result<EmbeddingVector, RewardError>;
}

#[derive(Debug, Clone, Copy)]
pub struct BuiltinEmbedder {
    pub dim: usize,
}

impl Default for BuiltinEmbedder {
    fn default() -> Self {
        Self {
            dim: DEFAULT_EMBED_DIM,
        }
    }
}

impl EmbeddingBackend for BuiltinEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &[String]) -> Result<EmbeddingVector, RewardError> {
        embed_text(text, self.dim)
    }
}

/// Client for the embedding wire endpoint: request `{texts: [string]}`,
/// response `{vectors: [[real]]}`; vectors are re-normalized locally.
pub struct ExternalEmbedder {
    pub endpoint: String,
    pub timeout_ms: u64,
    pub dim: usize,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Parse and re-normalize an embedding response for one text.
fn parse_embedding(raw: &str, dim: usize) -> Result<EmbeddingVector, RewardError> {
    let response: EmbedResponse = serde_json::from_str(raw)
        .map_err(|e| RewardError::EmbeddingUnavailable(format!("bad response: {e}")))?;
    let components = response
        .vectors
        .into_iter()
        .next()
        .ok_or_else(|| RewardError::EmbeddingUnavailable("no vectors in response".into()))?;
    if components.len() != dim {
        return Err(RewardError::DimensionMismatch(components.len(), dim));
    }
    let mut vector = EmbeddingVector { components };
    let norm = vector.norm();
    if norm < 1e-12 {
        return Err(RewardError::ZeroEmbedding);
    }
    for x in vector.components.iter_mut() {
        *x /= norm;
    }
    Ok(vector)
}

impl EmbeddingBackend for ExternalEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &[String]) -> Result<EmbeddingVector, RewardError> {
        if text.is_empty() {
            return Err(RewardError::EmptyText);
        }
        let joined = [text.join(" ")];
        let mut call = ureq::post(&self.endpoint).timeout(Duration::from_millis(self.timeout_ms));
        if let Ok(key) = std::env::var(EMBED_API_KEY_ENV) {
            call = call.set("authorization", &format!("Bearer {key}"));
        }
        let response = call
            .send_json(serde_json::to_value(EmbedRequest { texts: &joined }).expect("serializes"))
            .map_err(|e| RewardError::EmbeddingUnavailable(e.to_string()))?;
        let raw = response
            .into_string()
            .map_err(|e| RewardError::EmbeddingUnavailable(e.to_string()))?;
        parse_embedding(&raw, self.dim)
    }
}

/// Unit-norm mean of a degradation direction's evidence embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationPrototype {
    pub direction_id: String,
    pub vector: EmbeddingVector,
    pub evidence_count: usize,
}

/// Prototypes that could be built, plus directions whose evidence cancelled
/// out to a near-zero mean (rejected and reported, never silently dropped).
#[derive(Debug, Clone, Default)]
pub struct PrototypeBuild {
    pub prototypes: BTreeMap<String, DegradationPrototype>,
    pub rejected: Vec<String>,
}

/// Aggregate evidence texts by direction across annotations and average
/// their embeddings into unit-norm prototype vectors.
pub fn build_prototypes(
    annotations: &[DegradationAnnotation],
    backend: &dyn EmbeddingBackend,
) -> Result<PrototypeBuild, RewardError> {
    let mut evidence_by_direction: BTreeMap<&str, Vec<&Vec<String>>> = BTreeMap::new();
    for annotation in annotations {
        evidence_by_direction
            .entry(annotation.direction_id.as_str())
            .or_default()
            .extend(annotation.evidence_texts.iter());
    }

    let mut build = PrototypeBuild::default();
    for (direction, texts) in evidence_by_direction {
        if texts.is_empty() {
            return Err(RewardError::NoEvidence(direction.to_string()));
        }
        let mut mean = vec![0.0f64; backend.dim()];
        for text in &texts {
            let embedding = backend.embed(text)?;
            for (m, x) in mean.iter_mut().zip(&embedding.components) {
                *m += x / texts.len() as f64;
            }
        }
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            build.rejected.push(direction.to_string());
            continue;
        }
        for x in mean.iter_mut() {
            *x /= norm;
        }
        build.prototypes.insert(
            direction.to_string(),
            DegradationPrototype {
                direction_id: direction.to_string(),
                vector: EmbeddingVector { components: mean },
                evidence_count: texts.len(),
            },
        );
    }
    Ok(build)
}

/// Threshold, weight, and per-direction weighting of the repulsion penalty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PenaltyConfig {
    /// Cosine-similarity level above which the penalty activates.
    pub threshold: f64,
    /// Weight of the penalty term in the combined objective.
    pub lambda: f64,
    /// Per-direction weights; directions default to 1.0.
    #[serde(default)]
    pub direction_weights: BTreeMap<String, f64>,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            threshold: 0.7,
            lambda: 0.1,
            direction_weights: BTreeMap::new(),
        }
    }
}

impl PenaltyConfig {
    pub fn direction_weight(&self, direction_id: &str) -> f64 {
        self.direction_weights
            .get(direction_id)
            .copied()
            .unwrap_or(1.0)
    }
}

/// Weighted hinge: `sum_d w_d * max(0, cos(g, p_d) - threshold)`.
///
/// Non-negative, and exactly zero when every cosine is at or below the
/// threshold, so outputs away from degradation neighborhoods feel no
/// gradient pressure.
pub fn degradation_penalty(
    g: &EmbeddingVector,
    prototypes: &BTreeMap<String, DegradationPrototype>,
    active_directions: &[(String, f64)],
    config: &PenaltyConfig,
) -> Result<f64, RewardError> {
    let mut penalty = 0.0;
    for (direction, weight) in active_directions {
        let prototype = prototypes
            .get(direction)
            .ok_or_else(|| RewardError::MissingDirection(direction.clone()))?;
        let similarity = cosine(g, &prototype.vector)?;
        penalty += weight * (similarity - config.threshold).max(0.0);
    }
    Ok(penalty)
}

/// Per-rollout penalty coefficients `lambda * penalty(embed(rollout))`.
///
/// Unannotated samples and `lambda = 0` yield all zeros. Empty rollout
/// texts (a bare end-of-sequence sample) carry no content to repel and get
/// coefficient zero. The coefficients feed the score-function gradient with
/// sign +1 on the minimized loss.
pub fn penalty_coefficients(
    rollout_texts: &[Vec<String>],
    annotations_for_sample: &[&DegradationAnnotation],
    prototypes: &BTreeMap<String, DegradationPrototype>,
    config: &PenaltyConfig,
    backend: &dyn EmbeddingBackend,
) -> Result<Vec<f64>, RewardError> {
    if annotations_for_sample.is_empty() || config.lambda == 0.0 {
        return Ok(vec![0.0; rollout_texts.len()]);
    }
    let active: Vec<(String, f64)> = annotations_for_sample
        .iter()
        .map(|a| {
            (
                a.direction_id.clone(),
                a.weight * config.direction_weight(&a.direction_id),
            )
        })
        .collect();
    let mut coefficients = Vec::with_capacity(rollout_texts.len());
    for text in rollout_texts {
        if text.is_empty() {
            coefficients.push(0.0);
            continue;
        }
        let g = backend.embed(text)?;
        let penalty = degradation_penalty(&g, prototypes, &active, config)?;
        coefficients.push(config.lambda * penalty);
    }
    Ok(coefficients)
}
