//! Task data: image descriptor records, culture-conditioned captions,
//! refusal samples, degradation annotations, dataset splits, and the
//! stage-3 adaptation mixture.
//!
//! Images are descriptor-token records rather than pixels; every
//! downstream signal (judge scores, rewards, penalties) is computed from
//! token overlap, so the whole pipeline is testable at desk scale.

mod load;
mod mixture;
mod synth;

pub use load::{
    load_corpus, LoadOutcome, CAPTIONS_FILE, DEGRADATIONS_FILE, IMAGES_FILE, SPLITS_FILE,
    VOCAB_FILE,
};
pub use mixture::{build_stage3_mixture, mixture_counts, MixturePools};
pub use synth::{generate_synthetic_corpus, SynthConfig, MARKER_SPAM_DIRECTION};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vocab::{VocabError, Vocabulary};

/// Fixed target output for refusal samples: the caption a model should emit
/// when an image does not support the requested cultural context.
pub const REFUSAL_TEMPLATE: &str = "This image does not provide sufficient support \
for a humorous caption in the requested cultural context.";

/// The refusal template as a token sequence (whitespace split, verbatim).
pub fn refusal_tokens() -> Vec<String> {
    REFUSAL_TEMPLATE
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Explicit cultural condition attached to a generation request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CultureContext {
    None,
    Western,
    Eastern,
}

impl CultureContext {
    pub const ALL: [CultureContext; 3] = [
        CultureContext::None,
        CultureContext::Western,
        CultureContext::Eastern,
    ];

    /// Row index into the policy's context table.
    pub fn index(self) -> usize {
        match self {
            CultureContext::None => 0,
            CultureContext::Western => 1,
            CultureContext::Eastern => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CultureContext::None => "none",
            CultureContext::Western => "western",
            CultureContext::Eastern => "eastern",
        }
    }

    /// Language tag used on prompts and reports (no translation is performed).
    pub fn language_tag(self) -> &'static str {
        match self {
            CultureContext::Eastern => "zh",
            _ => "en",
        }
    }
}

impl std::fmt::Display for CultureContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An image, stood in for by an ordered list of descriptor tokens.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub descriptor_tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_uri: Option<String>,
}

/// The punchline bigram designated for an image: the first two descriptor
/// tokens in order. A caption containing them adjacently lands the joke.
pub fn punch_bigram(image: &ImageRecord) -> (String, String) {
    let first = image.descriptor_tokens[0].clone();
    let second = image
        .descriptor_tokens
        .get(1)
        .cloned()
        .unwrap_or_else(|| first.clone());
    (first, second)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionRole {
    Training,
    Reference,
    Refusal,
}

/// One caption for one image under one cultural condition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub context: CultureContext,
    pub text: Vec<String>,
    pub role: CaptionRole,
}

/// Image-disjoint train/dev/benchmark partition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_ids: Vec<String>,
    pub dev_ids: Vec<String>,
    pub benchmark_ids: Vec<String>,
    pub declared_counts: (usize, usize, usize),
}

impl DatasetSplit {
    pub fn train_set(&self) -> BTreeSet<&str> {
        self.train_ids.iter().map(String::as_str).collect()
    }

    pub fn dev_set(&self) -> BTreeSet<&str> {
        self.dev_ids.iter().map(String::as_str).collect()
    }

    pub fn benchmark_set(&self) -> BTreeSet<&str> {
        self.benchmark_ids.iter().map(String::as_str).collect()
    }

    pub fn is_benchmark(&self, image_id: &str) -> bool {
        self.benchmark_ids.iter().any(|id| id == image_id)
    }
}

/// Known-failure-mode annotation for a training sample: one degradation
/// direction plus the evidence texts that exhibit it. A sample may carry
/// several annotations with distinct directions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DegradationAnnotation {
    pub sample_id: String,
    pub direction_id: String,
    pub evidence_texts: Vec<Vec<String>>,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

/// Composition of the stage-3 adaptation set.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StageMixture {
    pub new_eastern_frac: f64,
    pub paired_eastern_frac: f64,
    pub western_replay_frac: f64,
}

impl Default for StageMixture {
    fn default() -> Self {
        Self {
            new_eastern_frac: 0.5,
            paired_eastern_frac: 0.3,
            western_replay_frac: 0.2,
        }
    }
}

impl StageMixture {
    pub fn fractions(&self) -> [f64; 3] {
        [
            self.new_eastern_frac,
            self.paired_eastern_frac,
            self.western_replay_frac,
        ]
    }
}

/// Marker-token sets that signal each culture; disjoint by construction.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CultureMarkers {
    pub western: BTreeSet<String>,
    pub eastern: BTreeSet<String>,
}

impl CultureMarkers {
    /// Marker set for an explicit culture; `None` context has no markers.
    pub fn for_context(&self, context: CultureContext) -> Option<&BTreeSet<String>> {
        match context {
            CultureContext::Western => Some(&self.western),
            CultureContext::Eastern => Some(&self.eastern),
            CultureContext::None => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{file}:{line}: malformed line: {message}")]
    MalformedLine {
        file: String,
        line: usize,
        message: String,
    },
    #[error("{file}:{line}: unknown token '{token}'")]
    UnknownToken {
        file: String,
        line: usize,
        token: String,
    },
    #[error("duplicate image_id '{0}'")]
    DuplicateImageId(String),
    #[error("image '{image_id}' appears in both {first} and {second} splits")]
    SplitOverlap {
        image_id: String,
        first: &'static str,
        second: &'static str,
    },
    #[error("{split} split declares {declared} ids but contains {actual}")]
    CountMismatch {
        split: &'static str,
        declared: usize,
        actual: usize,
    },
    #[error("{file}:{line}: unknown image_id '{image_id}'")]
    UnknownImageId {
        file: String,
        line: usize,
        image_id: String,
    },
    #[error("image '{0}' has no descriptor tokens")]
    EmptyDescriptors(String),
    #[error("refusal caption for image '{0}' does not match the refusal template")]
    BadRefusalText(String),
    #[error("benchmark image '{image_id}' is missing a {context} reference caption")]
    MissingReference {
        image_id: String,
        context: CultureContext,
    },
    #[error("degradation annotation for '{sample_id}' ({direction_id}) has no evidence texts")]
    EmptyEvidence {
        sample_id: String,
        direction_id: String,
    },
    #[error("degradation annotation for '{sample_id}' has non-finite or negative weight")]
    BadWeight { sample_id: String },
    #[error("culture marker '{0}' appears in both marker sets")]
    MarkerOverlap(String),
    #[error("marker token '{0}' is not in the vocabulary")]
    MarkerNotInVocabulary(String),
    #[error("mixture fractions sum to {0}, expected 1")]
    FractionSum(f64),
    #[error("pool '{category}' has {available} records, {needed} needed")]
    InsufficientPool {
        category: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("synthetic corpus config: {0}")]
    BadSynthConfig(String),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A fully loaded and validated corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub markers: CultureMarkers,
    pub images: Vec<ImageRecord>,
    pub captions: Vec<CaptionRecord>,
    pub annotations: Vec<DegradationAnnotation>,
    pub split: DatasetSplit,
    /// Hash binding checkpoints to the corpus they were trained on.
    pub corpus_hash: String,
}

impl Corpus {
    pub fn image(&self, image_id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|img| img.image_id == image_id)
    }

    /// Captions filtered by role, context, and split membership, in file order.
    pub fn captions_where(
        &self,
        role: Option<CaptionRole>,
        context: Option<CultureContext>,
        split_ids: Option<&BTreeSet<&str>>,
    ) -> Vec<&CaptionRecord> {
        self.captions
            .iter()
            .filter(|c| role.is_none_or(|r| c.role == r))
            .filter(|c| context.is_none_or(|ctx| c.context == ctx))
            .filter(|c| split_ids.is_none_or(|ids| ids.contains(c.image_id.as_str())))
            .collect()
    }

    /// The caption that anchors scoring for `(image, context)`: the reference
    /// record when present, otherwise the training caption. Under the `None`
    /// condition the Western reference is used, falling back to Eastern.
    pub fn reference_for(&self, image_id: &str, context: CultureContext) -> Option<&CaptionRecord> {
        let lookup = |ctx: CultureContext| {
            self.captions
                .iter()
                .filter(|c| c.image_id == image_id && c.context == ctx)
                .find(|c| c.role == CaptionRole::Reference)
                .or_else(|| {
                    self.captions
                        .iter()
                        .filter(|c| c.image_id == image_id && c.context == ctx)
                        .find(|c| c.role == CaptionRole::Training)
                })
        };
        match context {
            CultureContext::None => {
                lookup(CultureContext::Western).or_else(|| lookup(CultureContext::Eastern))
            }
            ctx => lookup(ctx),
        }
    }

    /// Degradation annotations attached to one training sample.
    pub fn annotations_for(&self, sample_id: &str) -> Vec<&DegradationAnnotation> {
        self.annotations
            .iter()
            .filter(|a| a.sample_id == sample_id)
            .collect()
    }

    /// Distinct annotated sample ids.
    pub fn annotated_sample_ids(&self) -> BTreeSet<&str> {
        self.annotations
            .iter()
            .map(|a| a.sample_id.as_str())
            .collect()
    }

    /// Index from image id to its record, for ordered lookups.
    pub fn image_index(&self) -> BTreeMap<&str, &ImageRecord> {
        self.images
            .iter()
            .map(|img| (img.image_id.as_str(), img))
            .collect()
    }
}
