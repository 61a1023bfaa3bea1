//! Judging: joint rankings over candidate sets and pairwise verdicts.
//!
//! Two backends share the same contracts. The simulated judge is a pure
//! deterministic function of its inputs and is the training/test scorer at
//! desk scale; the external backend speaks a JSON wire protocol to an LLM
//! judge and validates every response before it can reach reward
//! computation. Candidates are always presented in a seeded shuffled order
//! and the reference is never labeled as such.

mod prompt;
mod wire;

pub use prompt::{build_rubric_prompt, PromptMode};
pub use wire::{
    parse_ranking_response, ExternalJudge, HttpTransport, JudgeClientConfig, JudgeTransport,
    TransportError, WireCandidate, WireRequest, JUDGE_API_KEY_ENV,
};

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{punch_bigram, CaptionRecord, CultureContext, CultureMarkers, ImageRecord};
use crate::policy::SequenceSample;
use crate::seed::seeded_rng;
use crate::vocab::Vocabulary;

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("candidate set needs at least 3 candidates, got {0}")]
    TooFewCandidates(usize),
    #[error("unknown token '{0}'")]
    UnknownToken(String),
    #[error("weights must be non-negative with at least one positive")]
    BadWeights,
    #[error("pairwise comparison requires distinct captions")]
    IdenticalPair,
    #[error("ranking is not a valid permutation: {0}")]
    InvalidRanking(String),
    #[error("judge protocol error ({reason}); raw response: {raw:?}")]
    Protocol { reason: String, raw: String },
    #[error("judge unavailable: {0}")]
    Unavailable(#[from] TransportError),
}

/// Per-dimension scores on the 0-10 scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimensionScore {
    pub ir: f64,
    pub cf: f64,
    pub sr: f64,
    pub ra: f64,
    pub hu: f64,
    pub cr: f64,
}

impl DimensionScore {
    pub const ZERO: DimensionScore = DimensionScore {
        ir: 0.0,
        cf: 0.0,
        sr: 0.0,
        ra: 0.0,
        hu: 0.0,
        cr: 0.0,
    };

    pub fn values(&self) -> [f64; 6] {
        [self.ir, self.cf, self.sr, self.ra, self.hu, self.cr]
    }

    /// Unweighted average of the six dimensions.
    pub fn overall(&self) -> f64 {
        self.values().iter().sum::<f64>() / 6.0
    }

    pub fn weighted_total(&self, weights: &SimJudgeWeights) -> f64 {
        self.values()
            .iter()
            .zip(weights.values())
            .map(|(s, w)| s * w)
            .sum()
    }

    pub fn in_range(&self) -> bool {
        self.values().iter().all(|v| (0.0..=10.0).contains(v))
    }
}

/// Non-negative weights over the six dimensions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SimJudgeWeights {
    pub ir: f64,
    pub cf: f64,
    pub sr: f64,
    pub ra: f64,
    pub hu: f64,
    pub cr: f64,
}

impl Default for SimJudgeWeights {
    fn default() -> Self {
        Self {
            ir: 1.0,
            cf: 1.0,
            sr: 1.0,
            ra: 1.0,
            hu: 1.0,
            cr: 1.0,
        }
    }
}

impl SimJudgeWeights {
    pub fn values(&self) -> [f64; 6] {
        [self.ir, self.cf, self.sr, self.ra, self.hu, self.cr]
    }

    pub fn validate(&self) -> Result<(), JudgeError> {
        let values = self.values();
        if values.iter().any(|w| !w.is_finite() || *w < 0.0) || values.iter().all(|w| *w == 0.0) {
            return Err(JudgeError::BadWeights);
        }
        Ok(())
    }
}

/// K rollouts plus the reference, blinded behind a seeded presentation order.
///
/// Canonical indices are 0..K-1 for the rollouts and K for the reference;
/// `presentation_order[p]` gives the canonical index shown at position `p`.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub image: ImageRecord,
    pub context: CultureContext,
    pub rollouts: Vec<SequenceSample>,
    pub rollout_texts: Vec<Vec<String>>,
    pub reference: CaptionRecord,
    pub presentation_order: Vec<usize>,
    pub reference_position: usize,
}

impl CandidateSet {
    pub fn new(
        image: ImageRecord,
        context: CultureContext,
        rollouts: Vec<SequenceSample>,
        vocab: &Vocabulary,
        reference: CaptionRecord,
        seed: u64,
    ) -> Result<Self, JudgeError> {
        let total = rollouts.len() + 1;
        if total < 3 {
            return Err(JudgeError::TooFewCandidates(total));
        }
        let rollout_texts: Vec<Vec<String>> = rollouts.iter().map(|r| r.text(vocab)).collect();
        let mut presentation_order: Vec<usize> = (0..total).collect();
        presentation_order.shuffle(&mut seeded_rng(seed));
        let reference_position = presentation_order
            .iter()
            .position(|&c| c == rollouts.len())
            .expect("reference is in the permutation");
        Ok(Self {
            image,
            context,
            rollouts,
            rollout_texts,
            reference,
            presentation_order,
            reference_position,
        })
    }

    /// Number of rollouts (the group size K).
    pub fn k(&self) -> usize {
        self.rollouts.len()
    }

    pub fn canonical_at(&self, position: usize) -> usize {
        self.presentation_order[position]
    }

    /// Candidate text at a presented position.
    pub fn presented_text(&self, position: usize) -> &[String] {
        let canonical = self.presentation_order[position];
        if canonical == self.k() {
            &self.reference.text
        } else {
            &self.rollout_texts[canonical]
        }
    }
}

/// A joint ranking over a candidate set, best first, in presented positions,
/// with derived canonical ranks (1-based).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeRanking {
    pub ranking: Vec<usize>,
    pub rank_of_canonical: Vec<usize>,
    pub reference_rank: usize,
}

impl JudgeRanking {
    /// Validate a presented-position ranking and derive canonical ranks.
    pub fn from_presented(set: &CandidateSet, ranking: Vec<usize>) -> Result<Self, JudgeError> {
        let total = set.k() + 1;
        if ranking.len() != total {
            return Err(JudgeError::InvalidRanking(format!(
                "expected {total} entries, got {}",
                ranking.len()
            )));
        }
        let mut seen = vec![false; total];
        for &position in &ranking {
            if position >= total {
                return Err(JudgeError::InvalidRanking(format!(
                    "position {position} out of range 0..{total}"
                )));
            }
            if seen[position] {
                return Err(JudgeError::InvalidRanking(format!(
                    "position {position} appears twice"
                )));
            }
            seen[position] = true;
        }
        let mut rank_of_canonical = vec![0usize; total];
        for (rank0, &position) in ranking.iter().enumerate() {
            rank_of_canonical[set.canonical_at(position)] = rank0 + 1;
        }
        let reference_rank = rank_of_canonical[set.k()];
        Ok(Self {
            ranking,
            rank_of_canonical,
            reference_rank,
        })
    }

    /// 1-based rank of rollout `j`.
    pub fn rollout_rank(&self, j: usize) -> usize {
        self.rank_of_canonical[j]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    First,
    Second,
}

/// Outcome of a pairwise comparison, de-randomized to argument order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairwiseVerdict {
    pub chosen: Choice,
    pub raw_response: String,
}

/// Anything that can produce a joint ranking; lets the trainer take either
/// backend.
pub trait CandidateRanker {
    fn rank_candidates(&self, set: &CandidateSet) -> Result<JudgeRanking, JudgeError>;
}

/// Deterministic rubric scorer standing in for the LLM judge.
#[derive(Debug, Clone)]
pub struct SimJudge {
    pub weights: SimJudgeWeights,
    pub markers: CultureMarkers,
    vocab: Vocabulary,
}

impl SimJudge {
    pub fn new(
        weights: SimJudgeWeights,
        markers: CultureMarkers,
        vocab: Vocabulary,
    ) -> Result<Self, JudgeError> {
        weights.validate()?;
        Ok(Self {
            weights,
            markers,
            vocab,
        })
    }

    pub fn from_corpus(corpus: &crate::corpus::Corpus) -> Self {
        Self {
            weights: SimJudgeWeights::default(),
            markers: corpus.markers.clone(),
            vocab: corpus.vocab.clone(),
        }
    }

    fn check_tokens(&self, caption: &[String]) -> Result<(), JudgeError> {
        for token in caption {
            if !self.vocab.contains(token) {
                return Err(JudgeError::UnknownToken(token.clone()));
            }
        }
        Ok(())
    }

    /// Six-dimension scores for one caption.
    ///
    /// Empty captions are scoreable (rollouts may be bare EOS): overlap and
    /// richness ratios with an empty numerator or denominator are 0, a
    /// caption with fewer than two tokens has no repeated bigrams, and the
    /// Jaccard similarity of two empty sets is 1.
    pub fn score(
        &self,
        image: &ImageRecord,
        context: CultureContext,
        caption: &[String],
        reference: &[String],
    ) -> Result<DimensionScore, JudgeError> {
        self.check_tokens(caption)?;
        self.check_tokens(reference)?;

        let cap_set: BTreeSet<&str> = caption.iter().map(String::as_str).collect();
        let desc_set: BTreeSet<&str> = image
            .descriptor_tokens
            .iter()
            .map(String::as_str)
            .collect();

        let shared = cap_set.intersection(&desc_set).count();
        let min_len = caption.len().min(image.descriptor_tokens.len());
        let ir = if min_len == 0 {
            0.0
        } else {
            10.0 * shared as f64 / min_len as f64
        };

        let cf = match self.markers.for_context(context) {
            // No explicit condition: nothing to penalize, fixed midpoint.
            None => 5.0,
            Some(markers) => {
                let count = caption
                    .iter()
                    .filter(|t| markers.contains(t.as_str()))
                    .count();
                10.0 * (count as f64 / 2.0).min(1.0)
            }
        };

        let sr = if caption.is_empty() {
            0.0
        } else {
            10.0 * cap_set.len() as f64 / caption.len() as f64
        };

        let ra = if caption.len() < 2 {
            10.0
        } else {
            let total = caption.len() - 1;
            let distinct: BTreeSet<(&str, &str)> = caption
                .windows(2)
                .map(|w| (w[0].as_str(), w[1].as_str()))
                .collect();
            let repeated_ratio = (total - distinct.len()) as f64 / total as f64;
            10.0 * (1.0 - repeated_ratio)
        };

        let (p0, p1) = punch_bigram(image);
        let hu = if caption.windows(2).any(|w| w[0] == p0 && w[1] == p1) {
            10.0
        } else {
            2.0
        };

        let ref_set: BTreeSet<&str> = reference.iter().map(String::as_str).collect();
        let jaccard = if cap_set.is_empty() && ref_set.is_empty() {
            1.0
        } else {
            let inter = cap_set.intersection(&ref_set).count() as f64;
            let union = cap_set.union(&ref_set).count() as f64;
            inter / union
        };
        let cr = 10.0 * (1.0 - jaccard);

        Ok(DimensionScore {
            ir,
            cf,
            sr,
            ra,
            hu,
            cr,
        })
    }

    /// Weighted total used for ranking and pairwise decisions.
    pub fn total(
        &self,
        image: &ImageRecord,
        context: CultureContext,
        caption: &[String],
        reference: &[String],
    ) -> Result<f64, JudgeError> {
        Ok(self
            .score(image, context, caption, reference)?
            .weighted_total(&self.weights))
    }

    /// Joint ranking: totals descending, ties to the earlier presented
    /// position.
    pub fn rank(&self, set: &CandidateSet) -> Result<JudgeRanking, JudgeError> {
        let total = set.k() + 1;
        if total < 3 {
            return Err(JudgeError::TooFewCandidates(total));
        }
        let mut scored: Vec<(usize, f64)> = Vec::with_capacity(total);
        for position in 0..total {
            let text = set.presented_text(position);
            let score = self.total(&set.image, set.context, text, &set.reference.text)?;
            scored.push((position, score));
        }
        scored.sort_by(|(pa, ta), (pb, tb)| {
            tb.partial_cmp(ta)
                .expect("scores are finite")
                .then(pa.cmp(pb))
        });
        let ranking: Vec<usize> = scored.into_iter().map(|(p, _)| p).collect();
        JudgeRanking::from_presented(set, ranking)
    }

    /// Pairwise verdict: the higher total wins, ties go to the first.
    pub fn pairwise(
        &self,
        image: &ImageRecord,
        context: CultureContext,
        caption_a: &[String],
        caption_b: &[String],
        reference: &[String],
    ) -> Result<PairwiseVerdict, JudgeError> {
        if caption_a == caption_b {
            return Err(JudgeError::IdenticalPair);
        }
        let total_a = self.total(image, context, caption_a, reference)?;
        let total_b = self.total(image, context, caption_b, reference)?;
        let chosen = if total_b > total_a {
            Choice::Second
        } else {
            Choice::First
        };
        Ok(PairwiseVerdict {
            chosen,
            raw_response: format!(
                "{{\"choice\":{}}}",
                if chosen == Choice::First { 0 } else { 1 }
            ),
        })
    }
}

impl CandidateRanker for SimJudge {
    fn rank_candidates(&self, set: &CandidateSet) -> Result<JudgeRanking, JudgeError> {
        self.rank(set)
    }
}
