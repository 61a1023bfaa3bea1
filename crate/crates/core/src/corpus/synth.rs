//! Synthetic desk-scale corpus generation.
//!
//! Construction guarantees the properties the rest of the pipeline relies
//! on: reference captions contain every descriptor token of their image,
//! exactly two non-adjacent culture markers, and the image's punch bigram
//! up front, so the simulated judge scores them highly. Degradation
//! evidence texts are pure marker runs, so marker-to-marker transitions
//! occur only in the degraded mode and never in a reference caption.

use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::Serialize;

use super::load::{load_corpus, CAPTIONS_FILE, DEGRADATIONS_FILE, IMAGES_FILE, SPLITS_FILE, VOCAB_FILE};
use super::{
    refusal_tokens, CaptionRecord, CaptionRole, Corpus, CorpusError, CultureContext,
    DatasetSplit, DegradationAnnotation, ImageRecord,
};
use crate::seed::{derive_seed, derive_seed_indexed, seeded_rng};
use crate::vocab::{BOS, EOS, MIN_VOCAB_SIZE};

const CONTENT_WORDS: [&str; 24] = [
    "cat", "dog", "moon", "hat", "fish", "tree", "car", "book", "cup", "door", "rain", "shoe",
    "star", "lamp", "frog", "boat", "cloud", "chair", "bread", "clock", "river", "stone", "grass",
    "kite",
];

const WESTERN_MARKER_WORDS: [&str; 6] =
    ["cowboy", "diner", "baseball", "rodeo", "jukebox", "thanksgiving"];

const EASTERN_MARKER_WORDS: [&str; 6] =
    ["lantern", "dumpling", "panda", "bamboo", "dragon", "teahouse"];

/// Identifier of the planted failure mode: captions that are nothing but
/// culture-marker runs.
pub const MARKER_SPAM_DIRECTION: &str = "marker_spam";

#[derive(Debug, Clone, Serialize)]
pub struct SynthConfig {
    /// Total images; must equal train + dev + benchmark.
    pub images: usize,
    pub train: usize,
    pub dev: usize,
    pub benchmark: usize,
    /// Content sub-vocabulary size (descriptor tokens are drawn from it).
    pub content_tokens: usize,
    pub western_markers: usize,
    pub eastern_markers: usize,
    /// Descriptor tokens per image; at least 3 so markers never touch.
    pub descriptors_per_image: usize,
    /// Fraction of train images that carry only Eastern captions.
    pub eastern_only_frac: f64,
    /// Fraction of train images that carry captions under both cultures.
    pub paired_frac: f64,
    /// Total refusal records to emit.
    pub refusal_samples: usize,
    /// Fraction of Western-trainable images carrying the marker-spam annotation.
    pub annotated_frac: f64,
    /// Evidence texts per annotation.
    pub evidence_per_annotation: usize,
    /// Culture markers woven into every caption; the supervised policy can
    /// only track the contextual-fit signal if markers are dense enough.
    pub markers_per_caption: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            images: 50,
            train: 35,
            dev: 5,
            benchmark: 10,
            content_tokens: 16,
            western_markers: 4,
            eastern_markers: 4,
            descriptors_per_image: 5,
            eastern_only_frac: 0.2,
            paired_frac: 0.2,
            refusal_samples: 2,
            annotated_frac: 0.5,
            evidence_per_annotation: 3,
            markers_per_caption: 3,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), CorpusError> {
        let bad = |msg: String| Err(CorpusError::BadSynthConfig(msg));
        if self.train + self.dev + self.benchmark != self.images {
            return bad(format!(
                "splits ({}, {}, {}) must sum to images ({})",
                self.train, self.dev, self.benchmark, self.images
            ));
        }
        if self.content_tokens > CONTENT_WORDS.len() {
            return bad(format!("content_tokens must be <= {}", CONTENT_WORDS.len()));
        }
        if self.western_markers > WESTERN_MARKER_WORDS.len()
            || self.eastern_markers > EASTERN_MARKER_WORDS.len()
        {
            return bad(format!(
                "marker counts must be <= {}",
                WESTERN_MARKER_WORDS.len()
            ));
        }
        if self.markers_per_caption < 2 {
            return bad("markers_per_caption must be at least 2".to_string());
        }
        if self.western_markers < self.markers_per_caption
            || self.eastern_markers < self.markers_per_caption
        {
            return bad("marker sets must cover markers_per_caption".to_string());
        }
        // One content token must separate every adjacent marker pair and
        // the punch bigram leads, so captions need this many descriptors.
        if self.descriptors_per_image < self.markers_per_caption + 1
            || self.descriptors_per_image > self.content_tokens
        {
            return bad(format!(
                "descriptors_per_image must be in {}..=content_tokens",
                self.markers_per_caption + 1
            ));
        }
        for (name, frac) in [
            ("eastern_only_frac", self.eastern_only_frac),
            ("paired_frac", self.paired_frac),
            ("annotated_frac", self.annotated_frac),
        ] {
            if !(0.0..=1.0).contains(&frac) {
                return bad(format!("{name} must be in [0, 1]"));
            }
        }
        if self.eastern_only_frac + self.paired_frac > 1.0 {
            return bad("eastern_only_frac + paired_frac must be <= 1".to_string());
        }
        if self.evidence_per_annotation == 0 {
            return bad("evidence_per_annotation must be positive".to_string());
        }
        Ok(())
    }

    fn vocab_tokens(&self) -> Vec<String> {
        let mut tokens = vec![BOS.to_string(), EOS.to_string()];
        tokens.extend(refusal_tokens());
        tokens.extend(
            CONTENT_WORDS[..self.content_tokens]
                .iter()
                .map(|w| w.to_string()),
        );
        tokens.extend(
            WESTERN_MARKER_WORDS[..self.western_markers]
                .iter()
                .map(|w| w.to_string()),
        );
        tokens.extend(
            EASTERN_MARKER_WORDS[..self.eastern_markers]
                .iter()
                .map(|w| w.to_string()),
        );
        tokens
    }
}

#[derive(Clone, Copy, PartialEq)]
enum TrainKind {
    WesternOnly,
    Paired,
    EasternOnly,
}

/// Generate a corpus under `out_dir` and return it loaded and validated.
///
/// Byte-identical output for identical `(config, seed)`.
pub fn generate_synthetic_corpus(
    config: &SynthConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<Corpus, CorpusError> {
    config.validate()?;

    let tokens = config.vocab_tokens();
    if tokens.len() < MIN_VOCAB_SIZE {
        return Err(CorpusError::BadSynthConfig(format!(
            "vocabulary too small: {} tokens",
            tokens.len()
        )));
    }
    let content: Vec<String> = CONTENT_WORDS[..config.content_tokens]
        .iter()
        .map(|w| w.to_string())
        .collect();
    let western: Vec<String> = WESTERN_MARKER_WORDS[..config.western_markers]
        .iter()
        .map(|w| w.to_string())
        .collect();
    let eastern: Vec<String> = EASTERN_MARKER_WORDS[..config.eastern_markers]
        .iter()
        .map(|w| w.to_string())
        .collect();
    if let Some(shared) = western.iter().find(|w| eastern.contains(w)) {
        return Err(CorpusError::MarkerOverlap(shared.clone()));
    }

    // Images and descriptors.
    let mut rng_desc = seeded_rng(derive_seed(seed, "synth.descriptors"));
    let mut images = Vec::with_capacity(config.images);
    for i in 0..config.images {
        let mut pool = content.clone();
        pool.shuffle(&mut rng_desc);
        pool.truncate(config.descriptors_per_image);
        images.push(ImageRecord {
            image_id: format!("img_{i:04}"),
            descriptor_tokens: pool,
            source_uri: None,
        });
    }

    let split = DatasetSplit {
        train_ids: images[..config.train]
            .iter()
            .map(|i| i.image_id.clone())
            .collect(),
        dev_ids: images[config.train..config.train + config.dev]
            .iter()
            .map(|i| i.image_id.clone())
            .collect(),
        benchmark_ids: images[config.train + config.dev..]
            .iter()
            .map(|i| i.image_id.clone())
            .collect(),
        declared_counts: (config.train, config.dev, config.benchmark),
    };

    // Asymmetric cultural organization of the train split.
    let n_eastern_only = (config.train as f64 * config.eastern_only_frac).round() as usize;
    let n_paired = (config.train as f64 * config.paired_frac).round() as usize;
    let mut train_order: Vec<usize> = (0..config.train).collect();
    train_order.shuffle(&mut seeded_rng(derive_seed(seed, "synth.categories")));
    let mut kinds = vec![TrainKind::WesternOnly; config.train];
    for (rank, &idx) in train_order.iter().enumerate() {
        kinds[idx] = if rank < n_eastern_only {
            TrainKind::EasternOnly
        } else if rank < n_eastern_only + n_paired {
            TrainKind::Paired
        } else {
            TrainKind::WesternOnly
        };
    }

    let mut captions = Vec::new();
    for (i, image) in images.iter().enumerate() {
        if i < config.train {
            match kinds[i] {
                TrainKind::WesternOnly => {
                    captions.push(make_caption(
                        image,
                        CultureContext::Western,
                        &western,
                        CaptionRole::Training,
                        config.markers_per_caption,
                        seed,
                    ));
                }
                TrainKind::Paired => {
                    captions.push(make_caption(
                        image,
                        CultureContext::Western,
                        &western,
                        CaptionRole::Training,
                        config.markers_per_caption,
                        seed,
                    ));
                    captions.push(make_caption(
                        image,
                        CultureContext::Eastern,
                        &eastern,
                        CaptionRole::Training,
                        config.markers_per_caption,
                        seed,
                    ));
                }
                TrainKind::EasternOnly => {
                    captions.push(make_caption(
                        image,
                        CultureContext::Eastern,
                        &eastern,
                        CaptionRole::Training,
                        config.markers_per_caption,
                        seed,
                    ));
                }
            }
        } else if i < config.train + config.dev {
            captions.push(make_caption(
                image,
                CultureContext::Western,
                &western,
                CaptionRole::Training,
                config.markers_per_caption,
                seed,
            ));
        } else {
            captions.push(make_caption(
                image,
                CultureContext::Western,
                &western,
                CaptionRole::Reference,
                config.markers_per_caption,
                seed,
            ));
            captions.push(make_caption(
                image,
                CultureContext::Eastern,
                &eastern,
                CaptionRole::Reference,
                config.markers_per_caption,
                seed,
            ));
        }
    }

    // Refusal records model context-mismatch: the culture the image has no
    // caption support for is the one refused.
    let western_only_ids: Vec<&str> = (0..config.train)
        .filter(|&i| kinds[i] == TrainKind::WesternOnly)
        .map(|i| images[i].image_id.as_str())
        .collect();
    let eastern_only_ids: Vec<&str> = (0..config.train)
        .filter(|&i| kinds[i] == TrainKind::EasternOnly)
        .map(|i| images[i].image_id.as_str())
        .collect();
    let eastern_refusals = config.refusal_samples.div_ceil(2).min(western_only_ids.len());
    let western_refusals = (config.refusal_samples / 2).min(eastern_only_ids.len());
    for id in western_only_ids.iter().take(eastern_refusals) {
        captions.push(CaptionRecord {
            image_id: id.to_string(),
            context: CultureContext::Eastern,
            text: refusal_tokens(),
            role: CaptionRole::Refusal,
        });
    }
    for id in eastern_only_ids.iter().take(western_refusals) {
        captions.push(CaptionRecord {
            image_id: id.to_string(),
            context: CultureContext::Western,
            text: refusal_tokens(),
            role: CaptionRole::Refusal,
        });
    }

    // Marker-spam degradation annotations on Western-trainable images.
    let western_trainable: Vec<&str> = (0..config.train)
        .filter(|&i| kinds[i] != TrainKind::EasternOnly)
        .map(|i| images[i].image_id.as_str())
        .collect();
    let n_annotated = (western_trainable.len() as f64 * config.annotated_frac).round() as usize;
    let mut annotated = western_trainable.clone();
    annotated.shuffle(&mut seeded_rng(derive_seed(seed, "synth.annotated")));
    annotated.truncate(n_annotated);
    annotated.sort_unstable();

    let mut annotations = Vec::new();
    for (i, sample_id) in annotated.iter().enumerate() {
        let mut rng = seeded_rng(derive_seed_indexed(seed, "synth.evidence", i as u64));
        let evidence_texts: Vec<Vec<String>> = (0..config.evidence_per_annotation)
            .map(|_| {
                let len = rng.random_range(6..=8);
                (0..len)
                    .map(|_| western.choose(&mut rng).expect("markers non-empty").clone())
                    .collect()
            })
            .collect();
        annotations.push(DegradationAnnotation {
            sample_id: sample_id.to_string(),
            direction_id: MARKER_SPAM_DIRECTION.to_string(),
            evidence_texts,
            weight: 1.0,
        });
    }

    write_corpus_files(
        out_dir,
        &tokens,
        &western,
        &eastern,
        &images,
        &captions,
        &annotations,
        &split,
    )?;

    // Reload through the validator so generated corpora are always checked
    // and carry their content hash.
    Ok(load_corpus(out_dir)?.corpus)
}

/// Build a high-quality caption: punch bigram first, every descriptor token
/// included, distinct culture markers woven in with a content token between
/// every adjacent pair, all tokens distinct.
fn make_caption(
    image: &ImageRecord,
    context: CultureContext,
    markers: &[String],
    role: CaptionRole,
    markers_per_caption: usize,
    seed: u64,
) -> CaptionRecord {
    let desc = &image.descriptor_tokens;

    // Content arrangement depends only on the image, so paired Eastern
    // captions reconstruct the same visual situation.
    let mut rest: Vec<String> = desc[2..].to_vec();
    rest.shuffle(&mut seeded_rng(derive_seed(
        seed,
        &format!("synth.arrangement/{}", image.image_id),
    )));

    let mut rng = seeded_rng(derive_seed(
        seed,
        &format!("synth.markers/{}/{}", image.image_id, context),
    ));
    let mut picks = markers.to_vec();
    picks.shuffle(&mut rng);
    picks.truncate(markers_per_caption);

    // [d0 d1 m r m r m r ...]: markers and remaining content alternate.
    let mut text = vec![desc[0].clone(), desc[1].clone()];
    let mut rest_iter = rest.into_iter();
    for marker in picks {
        text.push(marker);
        if let Some(content) = rest_iter.next() {
            text.push(content);
        }
    }
    text.extend(rest_iter);

    CaptionRecord {
        image_id: image.image_id.clone(),
        context,
        text,
        role,
    }
}

#[allow(clippy::too_many_arguments)]
fn write_corpus_files(
    dir: &Path,
    tokens: &[String],
    western: &[String],
    eastern: &[String],
    images: &[ImageRecord],
    captions: &[CaptionRecord],
    annotations: &[DegradationAnnotation],
    split: &DatasetSplit,
) -> Result<(), CorpusError> {
    let io_err = |path: &Path, source: std::io::Error| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;

    #[derive(Serialize)]
    struct VocabOut<'a> {
        tokens: &'a [String],
        western_markers: &'a [String],
        eastern_markers: &'a [String],
    }
    let vocab_path = dir.join(VOCAB_FILE);
    let vocab_json = serde_json::to_string_pretty(&VocabOut {
        tokens,
        western_markers: western,
        eastern_markers: eastern,
    })
    .expect("vocab serializes");
    fs::write(&vocab_path, vocab_json + "\n").map_err(|e| io_err(&vocab_path, e))?;

    write_jsonl(&dir.join(IMAGES_FILE), images)?;
    write_jsonl(&dir.join(CAPTIONS_FILE), captions)?;
    write_jsonl(&dir.join(DEGRADATIONS_FILE), annotations)?;

    let splits_path = dir.join(SPLITS_FILE);
    let splits_json = serde_json::to_string_pretty(split).expect("split serializes");
    fs::write(&splits_path, splits_json + "\n").map_err(|e| io_err(&splits_path, e))?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CorpusError> {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("record serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}
