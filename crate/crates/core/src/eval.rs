//! Six-dimension evaluation: rubric bands, hybrid human/judge aggregation,
//! context-effect comparison, judge-reliability validation, and human score
//! import.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::judge::DimensionScore;

use crate::corpus::{Corpus, CultureContext, ImageRecord};
use crate::judge::{Choice, JudgeError, PairwiseVerdict, SimJudge};
use crate::policy::{sample_sequences, Checkpoint, PolicyError, PolicyParams};
use crate::seed::{derive_seed, seeded_rng};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("caption must be non-empty")]
    EmptyCaption,
    #[error("no {context} reference for image '{image_id}'")]
    MissingReference {
        image_id: String,
        context: CultureContext,
    },
    #[error("sample ({image_id}, {context}) has more than one evaluation")]
    DuplicateEvaluation {
        image_id: String,
        context: CultureContext,
    },
    #[error("human-scored set does not match the seeded {fraction} fraction at ({image_id}, {context})")]
    HumanSubsetMismatch {
        image_id: String,
        context: CultureContext,
        fraction: f64,
    },
    #[error("benchmark image '{0}' appears in the checkpoint's training record")]
    HygieneViolation(String),
    #[error("validation pool has {available} candidates for {difficulty} pairs, {needed} needed")]
    InsufficientPool {
        difficulty: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("{got} verdicts for {expected} pairs")]
    VerdictCountMismatch { expected: usize, got: usize },
    #[error("row {row}: {message}")]
    CsvRow { row: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// The four score bands on the 10-point scale. Non-integer scores fall into
/// the band containing their floor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RubricBand {
    Poor,
    Weak,
    Good,
    Strong,
}

impl RubricBand {
    pub fn of(score: f64) -> RubricBand {
        let floored = score.floor().clamp(0.0, 10.0) as u8;
        match floored {
            0..=2 => RubricBand::Poor,
            3..=5 => RubricBand::Weak,
            6..=7 => RubricBand::Good,
            _ => RubricBand::Strong,
        }
    }

    pub fn range(self) -> (u8, u8) {
        match self {
            RubricBand::Poor => (0, 2),
            RubricBand::Weak => (3, 5),
            RubricBand::Good => (6, 7),
            RubricBand::Strong => (8, 10),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            RubricBand::Poor => "severe failure",
            RubricBand::Weak => "partially met with clear defects",
            RubricBand::Good => "solid with room to improve",
            RubricBand::Strong => "strong with only minor flaws",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ScoreSource {
    Human { annotator: String },
    Judge,
}

/// One scored (image, context, caption) sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEvaluation {
    pub image_id: String,
    pub context: CultureContext,
    pub caption: Vec<String>,
    pub scores: DimensionScore,
    pub source: ScoreSource,
}

/// Score one caption; the simulated backend delegates to the rubric scorer.
pub fn score_sample(
    scorer: &SimJudge,
    image: &ImageRecord,
    context: CultureContext,
    caption: &[String],
    reference: &[String],
) -> Result<DimensionScore, EvalError> {
    if caption.is_empty() {
        return Err(EvalError::EmptyCaption);
    }
    Ok(scorer.score(image, context, caption, reference)?)
}

type SampleKey = (String, CultureContext);

/// The seeded fixed human-scored subset: `round(n * fraction)` of the sorted
/// sample keys, chosen by a seeded shuffle.
pub fn select_human_subset(
    keys: &[SampleKey],
    fraction: f64,
    seed: u64,
) -> BTreeSet<SampleKey> {
    use rand::seq::SliceRandom;
    let mut sorted: Vec<SampleKey> = keys.to_vec();
    sorted.sort();
    sorted.dedup();
    let take = (sorted.len() as f64 * fraction).round() as usize;
    sorted.shuffle(&mut seeded_rng(derive_seed(seed, "hybrid.human-subset")));
    sorted.into_iter().take(take).collect()
}

/// Per-dimension means over the union of the human- and judge-scored
/// portions, with portion sizes recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub dims: DimensionScore,
    pub overall: f64,
    pub human_count: usize,
    pub judge_count: usize,
    pub total: usize,
}

/// Aggregate the hybrid protocol: every sample scored by exactly one
/// source, the human portion being the seeded fixed fraction of sample ids;
/// means are taken over the union. Aggregation is order-independent
/// (samples are averaged in sorted key order).
pub fn aggregate_hybrid(
    evals: &[SampleEvaluation],
    human_fraction: f64,
    seed: u64,
) -> Result<AggregateReport, EvalError> {
    let mut by_key: BTreeMap<SampleKey, &SampleEvaluation> = BTreeMap::new();
    for eval in evals {
        let key = (eval.image_id.clone(), eval.context);
        if by_key.insert(key, eval).is_some() {
            return Err(EvalError::DuplicateEvaluation {
                image_id: eval.image_id.clone(),
                context: eval.context,
            });
        }
    }
    let keys: Vec<SampleKey> = by_key.keys().cloned().collect();
    let expected_human = select_human_subset(&keys, human_fraction, seed);
    for (key, eval) in &by_key {
        let is_human = matches!(eval.source, ScoreSource::Human { .. });
        if is_human != expected_human.contains(key) {
            return Err(EvalError::HumanSubsetMismatch {
                image_id: key.0.clone(),
                context: key.1,
                fraction: human_fraction,
            });
        }
    }

    let total = by_key.len();
    let mut sums = [0.0f64; 6];
    let mut human_count = 0usize;
    for eval in by_key.values() {
        for (sum, v) in sums.iter_mut().zip(eval.scores.values()) {
            *sum += v;
        }
        if matches!(eval.source, ScoreSource::Human { .. }) {
            human_count += 1;
        }
    }
    let denom = total.max(1) as f64;
    let dims = DimensionScore {
        ir: sums[0] / denom,
        cf: sums[1] / denom,
        sr: sums[2] / denom,
        ra: sums[3] / denom,
        hu: sums[4] / denom,
        cr: sums[5] / denom,
    };
    Ok(AggregateReport {
        dims,
        overall: dims.overall(),
        human_count,
        judge_count: total - human_count,
        total,
    })
}

/// Generation settings for checkpoint evaluation.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GenEvalConfig {
    pub samples_per_image: usize,
    pub temperature: f64,
}

impl Default for GenEvalConfig {
    fn default() -> Self {
        Self {
            samples_per_image: 8,
            temperature: 1.0,
        }
    }
}

/// Generate captions for every benchmark image under `context` and return
/// the mean six-dimension scores.
pub fn evaluate_params(
    params: &PolicyParams,
    corpus: &Corpus,
    context: CultureContext,
    scorer: &SimJudge,
    gen: &GenEvalConfig,
    seed: u64,
) -> Result<DimensionScore, EvalError> {
    let by_id = corpus.image_index();
    let mut sums = [0.0f64; 6];
    let mut count = 0usize;
    for image_id in &corpus.split.benchmark_ids {
        let image = by_id[image_id.as_str()];
        let reference =
            corpus
                .reference_for(image_id, context)
                .ok_or_else(|| EvalError::MissingReference {
                    image_id: image_id.clone(),
                    context,
                })?;
        let generations = sample_sequences(
            params,
            &corpus.vocab,
            image,
            context,
            gen.samples_per_image,
            gen.temperature,
            derive_seed(seed, &format!("eval.gen/{context}/{image_id}")),
        )?;
        for generation in &generations {
            let text = generation.text(&corpus.vocab);
            let score = scorer.score(image, context, &text, &reference.text)?;
            for (sum, v) in sums.iter_mut().zip(score.values()) {
                *sum += v;
            }
            count += 1;
        }
    }
    let denom = count.max(1) as f64;
    Ok(DimensionScore {
        ir: sums[0] / denom,
        cf: sums[1] / denom,
        sr: sums[2] / denom,
        ra: sums[3] / denom,
        hu: sums[4] / denom,
        cr: sums[5] / denom,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ContextRow {
    pub condition: CultureContext,
    pub cf: f64,
    pub overall: f64,
}

/// CF and overall scores of one checkpoint under the three conditions on
/// the same benchmark images.
#[derive(Debug, Clone, Serialize)]
pub struct ContextComparison {
    pub seed: u64,
    pub samples_per_image: usize,
    pub rows: Vec<ContextRow>,
}

impl ContextComparison {
    pub fn row(&self, condition: CultureContext) -> &ContextRow {
        self.rows
            .iter()
            .find(|r| r.condition == condition)
            .expect("all three conditions present")
    }

    /// Aligned-column text, one column pair per condition.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<12}", "metric"));
        for row in &self.rows {
            out.push_str(&format!("{:>12}", row.condition.as_str()));
        }
        out.push('\n');
        out.push_str(&format!("{:<12}", "CF"));
        for row in &self.rows {
            out.push_str(&format!("{:>12.2}", row.cf));
        }
        out.push('\n');
        out.push_str(&format!("{:<12}", "overall"));
        for row in &self.rows {
            out.push_str(&format!("{:>12.2}", row.overall));
        }
        out.push('\n');
        out
    }
}

/// Evaluate a checkpoint under none/western/eastern conditions.
///
/// Refuses checkpoints whose training record contains any benchmark image.
pub fn compare_contexts(
    checkpoint: &Checkpoint,
    corpus: &Corpus,
    scorer: &SimJudge,
    gen: &GenEvalConfig,
    seed: u64,
) -> Result<ContextComparison, EvalError> {
    for image_id in &checkpoint.trained_image_ids {
        if corpus.split.is_benchmark(image_id) {
            return Err(EvalError::HygieneViolation(image_id.clone()));
        }
    }
    let mut rows = Vec::with_capacity(3);
    for condition in CultureContext::ALL {
        let dims = evaluate_params(&checkpoint.params, corpus, condition, scorer, gen, seed)?;
        rows.push(ContextRow {
            condition,
            cf: dims.cf,
            overall: dims.overall(),
        });
    }
    Ok(ContextComparison {
        seed,
        samples_per_image: gen.samples_per_image,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

/// Which side of the pair is the gold-better caption; fixed before judging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gold {
    High,
}

/// An (image, better caption, worse caption) triple with a difficulty tag.
#[derive(Debug, Clone, Serialize)]
pub struct JudgeValidationPair {
    pub image_id: String,
    pub context: CultureContext,
    pub high_caption: Vec<String>,
    pub low_caption: Vec<String>,
    pub difficulty: Difficulty,
    pub gold: Gold,
}

/// Deterministic low-quality caption pool for judge validation: mostly
/// off-image content tokens, no punch bigram, at most one culture marker,
/// in three quality tiers so the terciles have spread.
pub fn generate_low_quality_pool(
    corpus: &Corpus,
    per_image: usize,
    seed: u64,
) -> Vec<(String, CultureContext, Vec<String>)> {
    use rand::seq::IndexedRandom;
    use rand::Rng;

    let by_id = corpus.image_index();
    let mut pool = Vec::new();
    for image_id in &corpus.split.benchmark_ids {
        let image = by_id[image_id.as_str()];
        let own: BTreeSet<&str> = image
            .descriptor_tokens
            .iter()
            .map(String::as_str)
            .collect();
        let foreign: Vec<&String> = corpus
            .images
            .iter()
            .flat_map(|img| img.descriptor_tokens.iter())
            .filter(|t| !own.contains(t.as_str()))
            .collect();
        for context in [CultureContext::Western, CultureContext::Eastern] {
            let markers: Vec<&String> = corpus
                .markers
                .for_context(context)
                .map(|set| set.iter().collect())
                .unwrap_or_default();
            let mut rng = seeded_rng(derive_seed(
                seed,
                &format!("lowpool/{image_id}/{context}"),
            ));
            for i in 0..per_image {
                let mut caption: Vec<String> = Vec::new();
                let base_len = rng.random_range(3..=4);
                for _ in 0..base_len {
                    caption.push((*foreign.choose(&mut rng).expect("foreign pool")).clone());
                }
                match i % 3 {
                    0 => {}
                    1 => {
                        // One on-image token (never the punch pair head).
                        if let Some(own_token) = image.descriptor_tokens.get(2) {
                            caption.push(own_token.clone());
                        }
                    }
                    _ => {
                        if let Some(own_token) = image.descriptor_tokens.get(2) {
                            caption.push(own_token.clone());
                        }
                        if let Some(marker) = markers.first() {
                            caption.push((*marker).clone());
                        }
                    }
                }
                pool.push((image_id.clone(), context, caption));
            }
        }
    }
    pool
}

/// Build validation pairs: easy pairs pit a reference against a
/// bottom-tercile low-quality caption (by simulated total), hard pairs
/// against a top-tercile one. Gold is always the reference.
pub fn build_validation_pairs(
    corpus: &Corpus,
    low_pool: &[(String, CultureContext, Vec<String>)],
    counts: (usize, usize),
    scorer: &SimJudge,
    seed: u64,
) -> Result<Vec<JudgeValidationPair>, EvalError> {
    use rand::seq::SliceRandom;

    let by_id = corpus.image_index();
    // Score and group the pool by (image, context).
    let mut groups: BTreeMap<SampleKey, Vec<(f64, &Vec<String>)>> = BTreeMap::new();
    for (image_id, context, caption) in low_pool {
        let image = by_id[image_id.as_str()];
        let reference =
            corpus
                .reference_for(image_id, *context)
                .ok_or_else(|| EvalError::MissingReference {
                    image_id: image_id.clone(),
                    context: *context,
                })?;
        let total = scorer.score(image, *context, caption, &reference.text)?;
        let total = total.weighted_total(&scorer.weights);
        let reference_total = scorer
            .score(image, *context, &reference.text, &reference.text)?
            .weighted_total(&scorer.weights);
        // Only captions strictly below the reference keep the gold label
        // trustworthy.
        if total < reference_total {
            groups
                .entry((image_id.clone(), *context))
                .or_default()
                .push((total, caption));
        }
    }

    let mut easy_material: Vec<(SampleKey, Vec<String>)> = Vec::new();
    let mut hard_material: Vec<(SampleKey, Vec<String>)> = Vec::new();
    for (key, mut entries) in groups {
        entries.sort_by(|(a, _), (b, _)| a.partial_cmp(b).expect("finite totals"));
        let tercile = (entries.len() as f64 / 3.0).ceil() as usize;
        for (i, (_, caption)) in entries.iter().enumerate() {
            if i < tercile {
                easy_material.push((key.clone(), (*caption).clone()));
            } else if i >= entries.len().saturating_sub(tercile) {
                hard_material.push((key.clone(), (*caption).clone()));
            }
        }
    }

    let (easy_count, hard_count) = counts;
    let mut rng = seeded_rng(derive_seed(seed, "validation.pairs"));
    easy_material.shuffle(&mut rng);
    hard_material.shuffle(&mut rng);
    if easy_material.len() < easy_count {
        return Err(EvalError::InsufficientPool {
            difficulty: "easy",
            needed: easy_count,
            available: easy_material.len(),
        });
    }
    if hard_material.len() < hard_count {
        return Err(EvalError::InsufficientPool {
            difficulty: "hard",
            needed: hard_count,
            available: hard_material.len(),
        });
    }

    let mut pairs = Vec::with_capacity(easy_count + hard_count);
    for (difficulty, material, count) in [
        (Difficulty::Easy, &easy_material, easy_count),
        (Difficulty::Hard, &hard_material, hard_count),
    ] {
        for ((image_id, context), low_caption) in material.iter().take(count) {
            let reference = corpus
                .reference_for(image_id, *context)
                .expect("scored above");
            pairs.push(JudgeValidationPair {
                image_id: image_id.clone(),
                context: *context,
                high_caption: reference.text.clone(),
                low_caption: low_caption.clone(),
                difficulty,
                gold: Gold::High,
            });
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementEntry {
    pub judge: String,
    pub language: String,
    /// None aggregates over both difficulties.
    pub difficulty: Option<Difficulty>,
    pub correct: usize,
    pub total: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AgreementReport {
    pub entries: Vec<AgreementEntry>,
    pub overall: AgreementEntry,
}

impl AgreementReport {
    pub fn render_text(&self) -> String {
        let mut out = format!(
            "{:<12}{:<10}{:<8}{:>8}{:>8}{:>8}\n",
            "judge", "language", "diff", "correct", "total", "rate"
        );
        for entry in self.entries.iter().chain(std::iter::once(&self.overall)) {
            out.push_str(&format!(
                "{:<12}{:<10}{:<8}{:>8}{:>8}{:>8.3}\n",
                entry.judge,
                entry.language,
                match entry.difficulty {
                    Some(Difficulty::Easy) => "easy",
                    Some(Difficulty::Hard) => "hard",
                    None => "all",
                },
                entry.correct,
                entry.total,
                entry.rate
            ));
        }
        out
    }
}

/// Agreement of verdicts with the gold labels, per (language, difficulty)
/// and overall. Verdicts must line up one-to-one with pairs.
pub fn agreement_rate(
    pairs: &[JudgeValidationPair],
    verdicts: &[PairwiseVerdict],
    judge_label: &str,
) -> Result<AgreementReport, EvalError> {
    if pairs.len() != verdicts.len() {
        return Err(EvalError::VerdictCountMismatch {
            expected: pairs.len(),
            got: verdicts.len(),
        });
    }
    let mut buckets: BTreeMap<(String, Option<Difficulty>), (usize, usize)> = BTreeMap::new();
    let mut overall = (0usize, 0usize);
    for (pair, verdict) in pairs.iter().zip(verdicts) {
        // Gold is the high caption, always passed as the first argument.
        let correct = verdict.chosen == Choice::First;
        let language = pair.context.language_tag().to_string();
        for key in [
            (language.clone(), Some(pair.difficulty)),
            (language, None),
        ] {
            let bucket = buckets.entry(key).or_insert((0, 0));
            bucket.1 += 1;
            if correct {
                bucket.0 += 1;
            }
        }
        overall.1 += 1;
        if correct {
            overall.0 += 1;
        }
    }
    let entry = |judge: &str, language: String, difficulty, (correct, total): (usize, usize)| {
        AgreementEntry {
            judge: judge.to_string(),
            language,
            difficulty,
            correct,
            total,
            rate: correct as f64 / total.max(1) as f64,
        }
    };
    let entries = buckets
        .into_iter()
        .map(|((language, difficulty), counts)| {
            entry(judge_label, language, difficulty, counts)
        })
        .collect();
    Ok(AgreementReport {
        entries,
        overall: entry(judge_label, "all".into(), None, overall),
    })
}

/// Run the full validation protocol against the simulated judge.
pub fn run_judge_validation(
    corpus: &Corpus,
    scorer: &SimJudge,
    counts: (usize, usize),
    per_image: usize,
    seed: u64,
) -> Result<(Vec<JudgeValidationPair>, AgreementReport), EvalError> {
    let pool = generate_low_quality_pool(corpus, per_image, seed);
    let pairs = build_validation_pairs(corpus, &pool, counts, scorer, seed)?;
    let by_id = corpus.image_index();
    let mut verdicts = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        let image = by_id[pair.image_id.as_str()];
        let reference = corpus
            .reference_for(&pair.image_id, pair.context)
            .expect("pair references exist");
        verdicts.push(scorer.pairwise(
            image,
            pair.context,
            &pair.high_caption,
            &pair.low_caption,
            &reference.text,
        )?);
    }
    let report = agreement_rate(&pairs, &verdicts, "simulated")?;
    Ok((pairs, report))
}

/// Parse the human-score CSV: `image_id,context,ir,cf,sr,ra,hu,cr,annotator`.
/// Rows are validated for score range, known image ids, and duplicate
/// (image, context, annotator) triples; errors name the offending row.
pub fn import_human_scores(
    path: &Path,
    corpus: &Corpus,
) -> Result<Vec<SampleEvaluation>, EvalError> {
    #[derive(Deserialize)]
    struct Row {
        image_id: String,
        context: CultureContext,
        ir: f64,
        cf: f64,
        sr: f64,
        ra: f64,
        hu: f64,
        cr: f64,
        annotator: String,
    }

    let mut reader = csv::Reader::from_path(path).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e),
    })?;
    let image_ids: BTreeSet<&str> = corpus.images.iter().map(|i| i.image_id.as_str()).collect();
    let mut seen: BTreeSet<(String, CultureContext, String)> = BTreeSet::new();
    let mut out = Vec::new();
    for (idx, record) in reader.deserialize::<Row>().enumerate() {
        let row = idx + 2; // header is row 1
        let record = record.map_err(|e| EvalError::CsvRow {
            row,
            message: e.to_string(),
        })?;
        let scores = DimensionScore {
            ir: record.ir,
            cf: record.cf,
            sr: record.sr,
            ra: record.ra,
            hu: record.hu,
            cr: record.cr,
        };
        if !scores.in_range() {
            return Err(EvalError::CsvRow {
                row,
                message: "score outside [0, 10]".into(),
            });
        }
        if !image_ids.contains(record.image_id.as_str()) {
            return Err(EvalError::CsvRow {
                row,
                message: format!("unknown image_id '{}'", record.image_id),
            });
        }
        let key = (
            record.image_id.clone(),
            record.context,
            record.annotator.clone(),
        );
        if !seen.insert(key) {
            return Err(EvalError::CsvRow {
                row,
                message: format!(
                    "duplicate (image_id, context, annotator) = ({}, {}, {})",
                    record.image_id, record.context, record.annotator
                ),
            });
        }
        out.push(SampleEvaluation {
            image_id: record.image_id,
            context: record.context,
            caption: Vec::new(),
            scores,
            source: ScoreSource::Human {
                annotator: record.annotator,
            },
        });
    }
    Ok(out)
}

/// Aligned-column score table, one row per labeled model/context block.
pub fn render_score_rows(rows: &[(String, DimensionScore)]) -> String {
    let mut out = format!(
        "{:<24}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}\n",
        "row", "IR", "CF", "SR", "Ra", "Hu", "Cr", "Avg"
    );
    for (label, dims) in rows {
        out.push_str(&format!(
            "{:<24}{:>8.2}{:>8.2}{:>8.2}{:>8.2}{:>8.2}{:>8.2}{:>8.2}\n",
            label,
            dims.ir,
            dims.cf,
            dims.sr,
            dims.ra,
            dims.hu,
            dims.cr,
            dims.overall()
        ));
    }
    out
}
