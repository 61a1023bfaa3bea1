//! Three-stage alignment: Western supervised fine-tuning, judge-ranked
//! GRPO with the prototype repulsion penalty, and Eastern adaptation with
//! Western replay.
//!
//! The GRPO update uses the standard clipped-ratio surrogate (epsilon 0.2,
//! optional KL-to-start scaled by `kl_beta`). With one update per sampled
//! group (the default) the ratio is exactly 1, the clip never binds, and
//! runs are strictly on-policy. The reference caption anchors rewards
//! only: it never enters the advantage group and never receives gradient.

mod ablation;
mod transcript;

pub use ablation::{
    render_ablation_table, run_ablation, AblationConfigs, AblationRow, AblationVariant,
    VariantMetrics,
};
pub use transcript::{StepRecord, Transcript, TranscriptHeader};

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{
    build_stage3_mixture, CaptionRecord, CaptionRole, Corpus, CorpusError, CultureContext,
    DegradationAnnotation, ImageRecord, MixturePools, StageMixture,
};
use crate::judge::{CandidateRanker, CandidateSet, JudgeError, SimJudge};
use crate::policy::{
    accumulate_term, apply_update, sft_loss_and_grad, Checkpoint, GradientBuffer, PolicyError,
    PolicyParams, TrainingExample,
};
use crate::reward::{
    build_prototypes, cosine, group_advantages, penalty_coefficients, rank_to_reward,
    BuiltinEmbedder, DegradationPrototype, EmbeddingBackend, PenaltyConfig, RewardError,
};
use crate::seed::{derive_seed, seeded_rng};

const ADVANTAGE_EPSILON: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Vocab(#[from] crate::vocab::VocabError),
    #[error("corpus has no Western-context training captions")]
    MissingWesternCaptions,
    #[error("benchmark image '{0}' reached a training batch")]
    BenchmarkLeak(String),
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("malformed transcript: {0}")]
    BadTranscript(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Everything one training stage needs; hashed into checkpoints.
#[derive(Debug, Clone, Serialize)]
pub struct TrainConfig {
    pub stage: u8,
    pub lr: f64,
    /// Rollout group size.
    pub k: usize,
    pub clip_epsilon: f64,
    /// Optional KL-to-start regularizer weight; 0 disables it.
    pub kl_beta: f64,
    /// Rollout sampling temperature (logged probabilities stay at 1).
    pub temperature: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub penalty: PenaltyConfig,
    pub mixture: StageMixture,
    /// Stage-1 subsample size; None uses every Western training caption.
    pub stage1_samples: Option<usize>,
    /// Stage-3 mixture total; None scales the train split by 1000/3500.
    pub stage3_total: Option<usize>,
    pub max_len: usize,
    pub embed_dim: usize,
    /// Gradient epochs per sampled rollout group. 1 keeps runs strictly
    /// on-policy.
    pub rollout_epochs: usize,
    /// Off by default so transcripts are byte-identical under a fixed seed.
    pub record_wallclock: bool,
}

impl TrainConfig {
    pub fn stage1(seed: u64) -> Self {
        Self {
            stage: 1,
            lr: 0.5,
            k: 8,
            clip_epsilon: 0.2,
            kl_beta: 0.0,
            temperature: 1.0,
            steps: 120,
            batch_size: 8,
            seed,
            penalty: PenaltyConfig::default(),
            mixture: StageMixture::default(),
            stage1_samples: None,
            stage3_total: None,
            max_len: 9,
            embed_dim: crate::reward::DEFAULT_EMBED_DIM,
            rollout_epochs: 1,
            record_wallclock: false,
        }
    }

    pub fn stage2(seed: u64) -> Self {
        Self {
            stage: 2,
            lr: 0.3,
            temperature: 1.0,
            steps: 800,
            batch_size: 8,
            ..Self::stage1(seed)
        }
    }

    pub fn stage3(seed: u64) -> Self {
        Self {
            stage: 3,
            lr: 0.5,
            steps: 1000,
            batch_size: 5,
            ..Self::stage1(seed)
        }
    }

    pub fn validate(&self) -> Result<(), TrainerError> {
        let bad = |msg: &str| Err(TrainerError::BadConfig(msg.to_string()));
        if !(1..=3).contains(&self.stage) {
            return bad("stage must be 1, 2, or 3");
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        if self.k < 2 {
            return bad("k must be at least 2");
        }
        if !(0.0 < self.clip_epsilon && self.clip_epsilon < 1.0) {
            return bad("clip_epsilon must be in (0, 1)");
        }
        if self.kl_beta < 0.0 {
            return bad("kl_beta must be non-negative");
        }
        if self.temperature <= 0.0 {
            return bad("temperature must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.max_len == 0 {
            return bad("max_len must be positive");
        }
        if self.rollout_epochs == 0 {
            return bad("rollout_epochs must be positive");
        }
        if self.penalty.lambda < 0.0 {
            return bad("penalty lambda must be non-negative");
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Result of one training stage.
#[derive(Debug, Clone)]
pub struct StageState {
    pub params: PolicyParams,
    pub stage: u8,
    pub step: u64,
    pub transcript: Transcript,
    /// Distinct image ids seen in training batches, cumulative across stages.
    pub trained_image_ids: BTreeSet<String>,
    /// Sample visits actually consumed (steps x batch size).
    pub samples_consumed: usize,
}

impl StageState {
    pub fn checkpoint(&self, corpus: &Corpus, config: &TrainConfig) -> Checkpoint {
        Checkpoint::new(
            &format!("stage{}", self.stage),
            self.step,
            &corpus.vocab,
            &config.hash(),
            &corpus.corpus_hash,
            self.trained_image_ids.iter().cloned().collect(),
            self.params.clone(),
        )
    }

    pub fn last_record(&self) -> Option<&StepRecord> {
        self.transcript.records.last()
    }
}

/// One GRPO training sample: an image under a culture condition with its
/// anchor caption and any degradation annotations.
#[derive(Debug, Clone)]
pub struct GrpoSample<'a> {
    pub image: &'a ImageRecord,
    pub context: CultureContext,
    pub reference: &'a CaptionRecord,
    pub annotations: Vec<&'a DegradationAnnotation>,
}

/// Western-context training samples for stage 2, in corpus order.
pub fn western_training_samples(corpus: &Corpus) -> Vec<GrpoSample<'_>> {
    let train_ids = corpus.split.train_set();
    let by_id = corpus.image_index();
    corpus
        .captions
        .iter()
        .filter(|c| {
            c.role == CaptionRole::Training
                && c.context == CultureContext::Western
                && train_ids.contains(c.image_id.as_str())
        })
        .map(|caption| GrpoSample {
            image: by_id[caption.image_id.as_str()],
            context: caption.context,
            reference: caption,
            annotations: corpus.annotations_for(&caption.image_id),
        })
        .collect()
}

/// Benchmark samples for measurement: reference is the benchmark reference
/// under the requested context.
pub fn benchmark_samples(corpus: &Corpus, context: CultureContext) -> Vec<GrpoSample<'_>> {
    let by_id = corpus.image_index();
    corpus
        .split
        .benchmark_ids
        .iter()
        .filter_map(|id| {
            corpus
                .reference_for(id, context)
                .map(|reference| GrpoSample {
                    image: by_id[id.as_str()],
                    context,
                    reference,
                    annotations: Vec::new(),
                })
        })
        .collect()
}

fn check_hygiene(corpus: &Corpus, image_id: &str) -> Result<(), TrainerError> {
    if corpus.split.is_benchmark(image_id) {
        return Err(TrainerError::BenchmarkLeak(image_id.to_string()));
    }
    Ok(())
}

/// Cycling, per-epoch-reshuffled index stream over a sample pool.
struct BatchCycler {
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    seed: u64,
}

impl BatchCycler {
    fn new(pool_len: usize, seed: u64) -> Self {
        let mut cycler = Self {
            order: (0..pool_len).collect(),
            cursor: 0,
            epoch: 0,
            seed,
        };
        cycler.reshuffle();
        cycler
    }

    fn reshuffle(&mut self) {
        use rand::seq::SliceRandom;
        let mut rng = seeded_rng(derive_seed(
            self.seed,
            &format!("batch.epoch/{}", self.epoch),
        ));
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.reshuffle();
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }
}

fn wallclock_ms(start: Instant, enabled: bool) -> f64 {
    if enabled {
        start.elapsed().as_secs_f64() * 1e3
    } else {
        0.0
    }
}

/// Supervised targets are the caption tokens plus EOS, so generation
/// learns to terminate.
fn eos_targets(captions: &[&CaptionRecord]) -> Vec<Vec<String>> {
    captions
        .iter()
        .map(|c| {
            let mut target = c.text.clone();
            target.push(crate::vocab::EOS.to_string());
            target
        })
        .collect()
}

fn run_sft_stage(
    config: &TrainConfig,
    corpus: &Corpus,
    pool: &[TrainingExample<'_>],
    pool_image_ids: &[&str],
    start_params: PolicyParams,
    carried_ids: BTreeSet<String>,
) -> Result<StageState, TrainerError> {
    for image_id in pool_image_ids {
        check_hygiene(corpus, image_id)?;
    }

    let mut transcript = Transcript::new(TranscriptHeader {
        seed: config.seed,
        stage: config.stage,
        config_hash: config.hash(),
        corpus_hash: corpus.corpus_hash.clone(),
        samples: pool.len(),
    });

    let mut params = start_params;
    let mut trained_image_ids = carried_ids;
    let mut cycler = BatchCycler::new(pool.len(), derive_seed(config.seed, "sft.order"));
    let mut consumed = 0usize;

    for step in 0..config.steps {
        let started = Instant::now();
        let indices = cycler.next_batch(config.batch_size.min(pool.len()).max(1));
        let batch: Vec<TrainingExample> = indices.iter().map(|&i| pool[i]).collect();
        for &i in &indices {
            trained_image_ids.insert(pool_image_ids[i].to_string());
        }
        consumed += batch.len();

        let (loss, grad) = sft_loss_and_grad(&params, &corpus.vocab, &batch)?;
        params = apply_update(&params, &grad, config.lr)?;

        transcript.push(StepRecord {
            step,
            stage: config.stage,
            loss_or_mean_reward: loss,
            degenerate_rate: 0.0,
            mean_penalty: 0.0,
            mean_cf: None,
            wallclock: wallclock_ms(started, config.record_wallclock),
        });
    }

    Ok(StageState {
        params,
        stage: config.stage,
        step: config.steps as u64,
        transcript,
        trained_image_ids,
        samples_consumed: consumed,
    })
}

/// Stage 1: supervised fine-tuning on Western-context training captions,
/// from the zero-initialized uniform policy.
///
/// Refusal records stay out of the pool: the fixed 16-token template would
/// force the generation horizon to more than twice the caption length,
/// which drowns the contextual-fit signal in marker-by-chance rambles.
pub fn run_stage1_sft(config: &TrainConfig, corpus: &Corpus) -> Result<StageState, TrainerError> {
    config.validate()?;
    let train_ids = corpus.split.train_set();
    let mut captions: Vec<&CaptionRecord> = corpus
        .captions
        .iter()
        .filter(|c| {
            c.role == CaptionRole::Training
                && c.context == CultureContext::Western
                && train_ids.contains(c.image_id.as_str())
        })
        .collect();
    if captions.is_empty() {
        return Err(TrainerError::MissingWesternCaptions);
    }
    if let Some(n) = config.stage1_samples {
        use rand::seq::SliceRandom;
        captions.shuffle(&mut seeded_rng(derive_seed(config.seed, "stage1.subsample")));
        captions.truncate(n.max(1));
    }

    let by_id = corpus.image_index();
    let targets = eos_targets(&captions);
    let pool: Vec<TrainingExample> = captions
        .iter()
        .zip(&targets)
        .map(|(c, target)| TrainingExample {
            image: by_id[c.image_id.as_str()],
            context: c.context,
            target,
        })
        .collect();
    let pool_ids: Vec<&str> = captions.iter().map(|c| c.image_id.as_str()).collect();

    let params = PolicyParams::zeros(corpus.vocab.len(), config.max_len);
    run_sft_stage(config, corpus, &pool, &pool_ids, params, BTreeSet::new())
}

/// Per-step metrics produced by [`grpo_step`].
#[derive(Debug, Clone, Copy)]
pub struct GrpoStepMetrics {
    pub mean_reward: f64,
    pub degenerate_rate: f64,
    pub mean_penalty: f64,
    pub mean_cf: f64,
}

/// One GRPO update over a batch of samples.
///
/// Per sample: draw K rollouts, blind-rank them with the reference anchor,
/// map ranks to rewards, normalize to group advantages, and accumulate the
/// clipped-surrogate gradient plus the lambda-weighted penalty
/// score-function terms. Degenerate groups contribute exactly nothing.
#[allow(clippy::too_many_arguments)]
pub fn grpo_step(
    params: &PolicyParams,
    corpus: &Corpus,
    batch: &[GrpoSample<'_>],
    judge: &dyn CandidateRanker,
    scorer: &SimJudge,
    prototypes: &BTreeMap<String, DegradationPrototype>,
    config: &TrainConfig,
    step: usize,
) -> Result<(PolicyParams, GrpoStepMetrics), TrainerError> {
    let vocab = &corpus.vocab;
    let embedder = BuiltinEmbedder {
        dim: config.embed_dim,
    };
    let mut grad = GradientBuffer::zeros_like(params);
    let mut reward_sum = 0.0;
    let mut reward_count = 0usize;
    let mut penalty_sum = 0.0;
    let mut cf_sum = 0.0;
    let mut degenerate = 0usize;

    for (sample_idx, sample) in batch.iter().enumerate() {
        check_hygiene(corpus, &sample.image.image_id)?;

        let rollout_seed = derive_seed(
            config.seed,
            &format!("grpo.rollouts/{step}/{sample_idx}"),
        );
        let rollouts = crate::policy::sample_rollouts(
            params,
            vocab,
            sample.image,
            sample.context,
            config.k,
            config.temperature,
            rollout_seed,
        )?;
        let presentation_seed = derive_seed(
            config.seed,
            &format!("grpo.presentation/{step}/{sample_idx}"),
        );
        let set = CandidateSet::new(
            sample.image.clone(),
            sample.context,
            rollouts,
            vocab,
            sample.reference.clone(),
            presentation_seed,
        )?;
        let ranking = judge.rank_candidates(&set)?;

        let mut rewards = Vec::with_capacity(config.k);
        for j in 0..config.k {
            rewards.push(rank_to_reward(
                ranking.rollout_rank(j),
                ranking.reference_rank,
                config.k,
            )?);
        }
        reward_sum += rewards.iter().sum::<f64>();
        reward_count += rewards.len();
        for text in &set.rollout_texts {
            cf_sum += scorer
                .score(sample.image, sample.context, text, &sample.reference.text)?
                .cf;
        }

        let advantages = group_advantages(&rewards, ADVANTAGE_EPSILON);
        if advantages.degenerate {
            degenerate += 1;
            continue;
        }

        let coefficients = penalty_coefficients(
            &set.rollout_texts,
            &sample.annotations,
            prototypes,
            &config.penalty,
            &embedder,
        )?;
        penalty_sum += coefficients.iter().sum::<f64>();

        let scale = 1.0 / (config.k as f64 * batch.len() as f64);
        for (j, rollout) in set.rollouts.iter().enumerate() {
            // Ratio of current to behavior policy; exactly 1 on-policy.
            let (current_lp, _) = crate::policy::log_prob_ids(
                params,
                vocab.bos_id(),
                &vocab.encode(&sample.image.descriptor_tokens)?,
                sample.context,
                &rollout.tokens,
            )?;
            let ratio = (current_lp - rollout.logprob).exp();
            let advantage = advantages.values[j];
            let unclipped = ratio * advantage;
            let clipped =
                ratio.clamp(1.0 - config.clip_epsilon, 1.0 + config.clip_epsilon) * advantage;
            // The surrogate gradient flows only where the unclipped branch
            // is active (the min); otherwise the term is constant in theta.
            let surrogate_coeff = if unclipped <= clipped {
                -advantage * ratio
            } else {
                0.0
            };
            let coeff = (surrogate_coeff + coefficients[j] + config.kl_beta) * scale;
            if coeff != 0.0 {
                accumulate_term(
                    &mut grad,
                    params,
                    vocab,
                    sample.image,
                    sample.context,
                    rollout,
                    coeff,
                )?;
            }
        }
    }

    let updated = apply_update(params, &grad, config.lr)?;
    let metrics = GrpoStepMetrics {
        mean_reward: if reward_count == 0 {
            0.0
        } else {
            reward_sum / reward_count as f64
        },
        degenerate_rate: if batch.is_empty() {
            0.0
        } else {
            degenerate as f64 / batch.len() as f64
        },
        mean_penalty: if reward_count == 0 {
            0.0
        } else {
            penalty_sum / reward_count as f64
        },
        mean_cf: if reward_count == 0 {
            0.0
        } else {
            cf_sum / reward_count as f64
        },
    };
    Ok((updated, metrics))
}

/// Stage 2: judge-ranked GRPO with the repulsion constraint, from the
/// stage-1 checkpoint.
pub fn run_stage2_grpo(
    config: &TrainConfig,
    corpus: &Corpus,
    judge: &dyn CandidateRanker,
    scorer: &SimJudge,
    start: &Checkpoint,
) -> Result<StageState, TrainerError> {
    config.validate()?;
    let samples = western_training_samples(corpus);
    if samples.is_empty() {
        return Err(TrainerError::MissingWesternCaptions);
    }
    let embedder = BuiltinEmbedder {
        dim: config.embed_dim,
    };
    let prototypes = if config.penalty.lambda > 0.0 {
        build_prototypes(&corpus.annotations, &embedder)?.prototypes
    } else {
        BTreeMap::new()
    };

    let mut transcript = Transcript::new(TranscriptHeader {
        seed: config.seed,
        stage: 2,
        config_hash: config.hash(),
        corpus_hash: corpus.corpus_hash.clone(),
        samples: samples.len(),
    });
    let mut params = start.params.clone();
    let mut trained_image_ids: BTreeSet<String> =
        start.trained_image_ids.iter().cloned().collect();
    let mut cycler = BatchCycler::new(samples.len(), derive_seed(config.seed, "grpo.order"));
    let mut consumed = 0usize;

    for step in 0..config.steps {
        let started = Instant::now();
        let indices = cycler.next_batch(config.batch_size.min(samples.len()).max(1));
        let batch: Vec<GrpoSample> = indices.iter().map(|&i| samples[i].clone()).collect();
        for item in &batch {
            trained_image_ids.insert(item.image.image_id.clone());
        }
        consumed += batch.len();

        let (updated, metrics) = grpo_step(
            &params, corpus, &batch, judge, scorer, &prototypes, config, step,
        )?;
        params = updated;

        transcript.push(StepRecord {
            step,
            stage: 2,
            loss_or_mean_reward: metrics.mean_reward,
            degenerate_rate: metrics.degenerate_rate,
            mean_penalty: metrics.mean_penalty,
            mean_cf: Some(metrics.mean_cf),
            wallclock: wallclock_ms(started, config.record_wallclock),
        });
    }

    Ok(StageState {
        params,
        stage: 2,
        step: config.steps as u64,
        transcript,
        trained_image_ids,
        samples_consumed: consumed,
    })
}

/// Assemble the stage-3 pools from the corpus's asymmetric organization.
pub fn stage3_pools(corpus: &Corpus) -> MixturePools<'_> {
    let train_ids = corpus.split.train_set();
    let western_imaged: BTreeSet<&str> = corpus
        .captions
        .iter()
        .filter(|c| {
            c.role == CaptionRole::Training
                && c.context == CultureContext::Western
                && train_ids.contains(c.image_id.as_str())
        })
        .map(|c| c.image_id.as_str())
        .collect();

    let eastern: Vec<&CaptionRecord> = corpus
        .captions
        .iter()
        .filter(|c| {
            c.role == CaptionRole::Training
                && c.context == CultureContext::Eastern
                && train_ids.contains(c.image_id.as_str())
        })
        .collect();

    MixturePools {
        new_eastern: eastern
            .iter()
            .filter(|c| !western_imaged.contains(c.image_id.as_str()))
            .copied()
            .collect(),
        paired_eastern: eastern
            .iter()
            .filter(|c| western_imaged.contains(c.image_id.as_str()))
            .copied()
            .collect(),
        western_replay: corpus
            .captions
            .iter()
            .filter(|c| {
                c.role == CaptionRole::Training
                    && c.context == CultureContext::Western
                    && train_ids.contains(c.image_id.as_str())
            })
            .collect(),
    }
}

/// Stage 3: supervised adaptation over the mixture of new-Eastern,
/// paired-Eastern, and replayed Western captions, from the stage-2
/// checkpoint. Training procedure is the same as stage 1.
pub fn run_stage3_adapt(
    config: &TrainConfig,
    corpus: &Corpus,
    start: &Checkpoint,
) -> Result<StageState, TrainerError> {
    config.validate()?;
    let pools = stage3_pools(corpus);
    let total = config.stage3_total.unwrap_or_else(|| {
        // Paper-scale ratio: 1000 adaptation samples per 3500 train images.
        ((corpus.split.train_ids.len() as f64) * 1000.0 / 3500.0).round() as usize
    });
    let mixture = build_stage3_mixture(
        total,
        &config.mixture,
        &pools,
        derive_seed(config.seed, "stage3.mixture"),
    )?;

    let by_id = corpus.image_index();
    let targets = eos_targets(&mixture);
    let pool: Vec<TrainingExample> = mixture
        .iter()
        .zip(&targets)
        .map(|(c, target)| TrainingExample {
            image: by_id[c.image_id.as_str()],
            context: c.context,
            target,
        })
        .collect();
    let pool_ids: Vec<&str> = mixture.iter().map(|c| c.image_id.as_str()).collect();

    run_sft_stage(
        config,
        corpus,
        &pool,
        &pool_ids,
        start.params.clone(),
        start.trained_image_ids.iter().cloned().collect(),
    )
}

/// Fixed-protocol measurement of a parameter set on given samples: rollout
/// rewards against the reference anchor, simulated contextual fit, the
/// fraction of rollouts outranking the reference, and (when prototypes are
/// supplied) the mean max cosine of rollouts to any prototype.
#[derive(Debug, Clone, Copy)]
pub struct PolicyMeasurement {
    pub mean_reward: f64,
    pub mean_cf: f64,
    pub frac_outranking_reference: f64,
    pub mean_prototype_cosine: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn measure_policy(
    params: &PolicyParams,
    corpus: &Corpus,
    samples: &[GrpoSample<'_>],
    judge: &dyn CandidateRanker,
    scorer: &SimJudge,
    prototypes: &BTreeMap<String, DegradationPrototype>,
    config: &TrainConfig,
    seed: u64,
) -> Result<PolicyMeasurement, TrainerError> {
    let vocab = &corpus.vocab;
    let embedder = BuiltinEmbedder {
        dim: config.embed_dim,
    };
    let mut reward_sum = 0.0;
    let mut cf_sum = 0.0;
    let mut outrank = 0usize;
    let mut count = 0usize;
    let mut cosine_sum = 0.0;
    let mut cosine_count = 0usize;

    for (sample_idx, sample) in samples.iter().enumerate() {
        let rollouts = crate::policy::sample_rollouts(
            params,
            vocab,
            sample.image,
            sample.context,
            config.k,
            config.temperature,
            derive_seed(seed, &format!("measure.rollouts/{sample_idx}")),
        )?;
        let set = CandidateSet::new(
            sample.image.clone(),
            sample.context,
            rollouts,
            vocab,
            sample.reference.clone(),
            derive_seed(seed, &format!("measure.presentation/{sample_idx}")),
        )?;
        let ranking = judge.rank_candidates(&set)?;
        for j in 0..config.k {
            let reward = rank_to_reward(
                ranking.rollout_rank(j),
                ranking.reference_rank,
                config.k,
            )?;
            reward_sum += reward;
            if reward > 0.0 {
                outrank += 1;
            }
            count += 1;
        }
        for text in &set.rollout_texts {
            cf_sum += scorer
                .score(sample.image, sample.context, text, &sample.reference.text)?
                .cf;
            if !prototypes.is_empty() && !text.is_empty() {
                let g = embedder.embed(text)?;
                let max_cos = prototypes
                    .values()
                    .map(|p| cosine(&g, &p.vector).unwrap_or(-1.0))
                    .fold(f64::NEG_INFINITY, f64::max);
                cosine_sum += max_cos;
                cosine_count += 1;
            }
        }
    }

    let denom = count.max(1) as f64;
    Ok(PolicyMeasurement {
        mean_reward: reward_sum / denom,
        mean_cf: cf_sum / denom,
        frac_outranking_reference: outrank as f64 / denom,
        mean_prototype_cosine: if cosine_count > 0 {
            Some(cosine_sum / cosine_count as f64)
        } else {
            None
        },
    })
}
