//! Command implementations. Every output file is derived from the single
//! run seed; `--dry-run` echoes the resolved configuration and writes
//! nothing.

use std::fs;
use std::path::{Path, PathBuf};

use capalign::corpus::{generate_synthetic_corpus, load_corpus, Corpus, CultureContext};
use capalign::eval::{
    aggregate_hybrid, compare_contexts, import_human_scores, render_score_rows,
    run_judge_validation, select_human_subset, DimensionScore, SampleEvaluation, ScoreSource,
};
use capalign::judge::{CandidateRanker, ExternalJudge, HttpTransport, SimJudge};
use capalign::policy::{sample_sequences, Checkpoint};
use capalign::seed::derive_seed;
use capalign::trainer::{
    render_ablation_table, run_ablation, run_stage1_sft, run_stage2_grpo, run_stage3_adapt,
    AblationConfigs, AblationVariant, StageState,
};

use crate::config::{Backend, RunConfig};
use crate::errors::CliError;

fn write_text(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn load_checked_corpus(dir: &Path) -> Result<Corpus, CliError> {
    let outcome = load_corpus(dir)?;
    for warning in &outcome.warnings {
        eprintln!("warning: {warning}");
    }
    Ok(outcome.corpus)
}

pub fn data_validate(corpus_dir: &Path) -> Result<(), CliError> {
    let corpus = load_checked_corpus(corpus_dir)?;
    println!(
        "corpus ok: {} images ({} train / {} dev / {} benchmark), {} captions, \
{} degradation annotations, vocabulary {} tokens",
        corpus.images.len(),
        corpus.split.train_ids.len(),
        corpus.split.dev_ids.len(),
        corpus.split.benchmark_ids.len(),
        corpus.captions.len(),
        corpus.annotations.len(),
        corpus.vocab.len(),
    );
    Ok(())
}

pub fn data_synth(config: &RunConfig, out: &Path, dry_run: bool) -> Result<(), CliError> {
    if dry_run {
        print!("{}", config.echo());
        println!("dry-run: would write corpus files under {}", out.display());
        return Ok(());
    }
    let corpus = generate_synthetic_corpus(&config.synth_config(), config.seed, out)?;
    println!(
        "wrote corpus to {}: {} images, {} captions, seed {}",
        out.display(),
        corpus.images.len(),
        corpus.captions.len(),
        config.seed,
    );
    Ok(())
}

fn load_init_checkpoint(init: Option<&Path>, corpus: &Corpus) -> Result<Checkpoint, CliError> {
    let path = init.ok_or_else(|| {
        CliError::new(
            "MISSING_CHECKPOINT",
            3,
            "stages 2 and 3 need --init pointing at the prior-stage checkpoint",
        )
    })?;
    if !path.exists() {
        return Err(CliError::new(
            "MISSING_CHECKPOINT",
            3,
            format!("checkpoint {} does not exist", path.display()),
        ));
    }
    Ok(Checkpoint::load(path, &corpus.vocab)?)
}

fn finish_stage(
    state: &StageState,
    corpus: &Corpus,
    train_config: &capalign::trainer::TrainConfig,
    out: &Path,
) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    let transcript_path = out.join("transcript.jsonl");
    state
        .transcript
        .write(&transcript_path)
        .map_err(CliError::from)?;
    let checkpoint = state.checkpoint(corpus, train_config);
    let checkpoint_path = out.join("checkpoint.json");
    checkpoint.save(&checkpoint_path)?;
    let last = state
        .last_record()
        .map(|r| r.loss_or_mean_reward)
        .unwrap_or(f64::NAN);
    println!(
        "stage {} done: {} steps, final {} {:.4}; wrote {} and {}",
        state.stage,
        state.step,
        if state.stage == 2 { "mean reward" } else { "loss" },
        last,
        transcript_path.display(),
        checkpoint_path.display(),
    );
    Ok(())
}

pub fn train(
    stage: u8,
    config: &RunConfig,
    corpus_dir: &Path,
    out: &Path,
    init: Option<&Path>,
    dry_run: bool,
) -> Result<(), CliError> {
    if dry_run {
        print!("{}", config.echo());
        println!(
            "dry-run: would train stage {stage} on {} into {}",
            corpus_dir.display(),
            out.display()
        );
        return Ok(());
    }
    let corpus = load_checked_corpus(corpus_dir)?;
    let train_config = config.train_config(stage);
    let state = match stage {
        1 => run_stage1_sft(&train_config, &corpus)?,
        2 => {
            let checkpoint = load_init_checkpoint(init, &corpus)?;
            let scorer = SimJudge::from_corpus(&corpus);
            match config.backend {
                Backend::Simulated => {
                    run_stage2_grpo(&train_config, &corpus, &scorer, &scorer, &checkpoint)?
                }
                Backend::External => {
                    let judge = ExternalJudge::new(
                        HttpTransport::new(&config.judge_client()),
                        config.judge_client(),
                    );
                    run_stage2_grpo(&train_config, &corpus, &judge, &scorer, &checkpoint)?
                }
            }
        }
        _ => {
            let checkpoint = load_init_checkpoint(init, &corpus)?;
            run_stage3_adapt(&train_config, &corpus, &checkpoint)?
        }
    };
    finish_stage(&state, &corpus, &train_config, out)
}

/// Hybrid evaluation of one checkpoint on the benchmark under both
/// explicit cultures: one generation per (image, context) sample, the
/// seeded fixed fraction scored from the human CSV, the rest by the judge.
pub fn eval_run(
    config: &RunConfig,
    checkpoint_path: &Path,
    corpus_dir: &Path,
    out: &Path,
    human_scores: Option<&Path>,
    dry_run: bool,
) -> Result<(), CliError> {
    if dry_run {
        print!("{}", config.echo());
        println!("dry-run: would evaluate {} ", checkpoint_path.display());
        return Ok(());
    }
    let corpus = load_checked_corpus(corpus_dir)?;
    let checkpoint = Checkpoint::load(checkpoint_path, &corpus.vocab)?;
    let scorer = SimJudge::from_corpus(&corpus);
    let by_id = corpus.image_index();

    let human_fraction = if human_scores.is_some() {
        config.human_fraction
    } else {
        0.0
    };
    let human_rows: Vec<SampleEvaluation> = match human_scores {
        Some(path) => import_human_scores(path, &corpus)?,
        None => Vec::new(),
    };

    let keys: Vec<(String, CultureContext)> = corpus
        .split
        .benchmark_ids
        .iter()
        .flat_map(|id| {
            [CultureContext::Western, CultureContext::Eastern]
                .into_iter()
                .map(move |ctx| (id.clone(), ctx))
        })
        .collect();
    let human_subset = select_human_subset(&keys, human_fraction, config.seed);

    let mut evals = Vec::with_capacity(keys.len());
    for key in &keys {
        let (image_id, context) = key;
        let image = by_id[image_id.as_str()];
        let reference = corpus.reference_for(image_id, *context).ok_or_else(|| {
            CliError::new(
                "DATA_INVALID",
                2,
                format!("no {context} reference for {image_id}"),
            )
        })?;
        let caption = sample_sequences(
            &checkpoint.params,
            &corpus.vocab,
            image,
            *context,
            1,
            config.eval_temperature,
            derive_seed(config.seed, &format!("eval.run/{image_id}/{context}")),
        )
        .map_err(CliError::from)?
        .remove(0)
        .text(&corpus.vocab);

        if human_subset.contains(key) {
            let row = human_rows
                .iter()
                .find(|r| r.image_id == *image_id && r.context == *context)
                .ok_or_else(|| {
                    CliError::new(
                        "HUMAN_SCORES_INVALID",
                        2,
                        format!("missing human score row for ({image_id}, {context})"),
                    )
                })?;
            evals.push(SampleEvaluation {
                caption: caption.clone(),
                ..row.clone()
            });
        } else {
            let scores = score_with_backend(config, &scorer, image, *context, &caption, reference)?;
            evals.push(SampleEvaluation {
                image_id: image_id.clone(),
                context: *context,
                caption,
                scores,
                source: ScoreSource::Judge,
            });
        }
    }

    let report = aggregate_hybrid(&evals, human_fraction, config.seed)?;
    let per_context: Vec<(String, DimensionScore)> = [CultureContext::Western, CultureContext::Eastern]
        .into_iter()
        .map(|ctx| {
            let subset: Vec<&SampleEvaluation> =
                evals.iter().filter(|e| e.context == ctx).collect();
            let mut sums = [0.0f64; 6];
            for e in &subset {
                for (s, v) in sums.iter_mut().zip(e.scores.values()) {
                    *s += v;
                }
            }
            let n = subset.len().max(1) as f64;
            (
                format!("{} ({})", ctx.as_str(), ctx.language_tag()),
                DimensionScore {
                    ir: sums[0] / n,
                    cf: sums[1] / n,
                    sr: sums[2] / n,
                    ra: sums[3] / n,
                    hu: sums[4] / n,
                    cr: sums[5] / n,
                },
            )
        })
        .collect();

    let json = serde_json::json!({
        "seed": config.seed,
        "language": config.language,
        "human_fraction": human_fraction,
        "aggregate": report,
        "per_context": per_context
            .iter()
            .map(|(label, dims)| serde_json::json!({
                "context": label,
                "scores": dims,
                "overall": dims.overall(),
            }))
            .collect::<Vec<_>>(),
    });
    fs::create_dir_all(out)?;
    write_text(
        &out.join("eval_report.json"),
        &(serde_json::to_string_pretty(&json).expect("report serializes") + "\n"),
    )?;
    let mut text = format!(
        "seed {}  samples {}  human {}  judge {}\n\n",
        config.seed, report.total, report.human_count, report.judge_count
    );
    let mut rows = per_context;
    rows.push(("all".to_string(), report.dims));
    text.push_str(&render_score_rows(&rows));
    write_text(&out.join("eval_report.txt"), &text)?;
    println!(
        "evaluated {} samples (human {}, judge {}): overall {:.3}",
        report.total, report.human_count, report.judge_count, report.overall
    );
    Ok(())
}

fn score_with_backend(
    config: &RunConfig,
    scorer: &SimJudge,
    image: &capalign::corpus::ImageRecord,
    context: CultureContext,
    caption: &[String],
    reference: &capalign::corpus::CaptionRecord,
) -> Result<DimensionScore, CliError> {
    match config.backend {
        Backend::Simulated => Ok(scorer.score(image, context, caption, &reference.text)?),
        Backend::External => {
            let judge = ExternalJudge::new(
                HttpTransport::new(&config.judge_client()),
                config.judge_client(),
            );
            let scores = judge.score_absolute(image, context, &[caption.to_vec()])?;
            Ok(scores[0])
        }
    }
}

pub fn eval_contexts(
    config: &RunConfig,
    checkpoint_path: &Path,
    corpus_dir: &Path,
    out: &Path,
    dry_run: bool,
) -> Result<(), CliError> {
    if dry_run {
        print!("{}", config.echo());
        return Ok(());
    }
    let corpus = load_checked_corpus(corpus_dir)?;
    let checkpoint = Checkpoint::load(checkpoint_path, &corpus.vocab)?;
    let scorer = SimJudge::from_corpus(&corpus);
    let comparison = compare_contexts(
        &checkpoint,
        &corpus,
        &scorer,
        &config.gen_eval(),
        derive_seed(config.seed, "eval.contexts"),
    )?;
    fs::create_dir_all(out)?;
    write_text(
        &out.join("context_comparison.json"),
        &(serde_json::to_string_pretty(&comparison).expect("serializes") + "\n"),
    )?;
    write_text(
        &out.join("context_comparison.txt"),
        &format!("seed {}\n\n{}", config.seed, comparison.render_text()),
    )?;
    print!("{}", comparison.render_text());
    Ok(())
}

pub fn eval_ablate(
    config: &RunConfig,
    corpus_dir: &Path,
    out: &Path,
    variants_arg: Option<&str>,
    dry_run: bool,
) -> Result<(), CliError> {
    if dry_run {
        print!("{}", config.echo());
        return Ok(());
    }
    let corpus = load_checked_corpus(corpus_dir)?;
    let scorer = SimJudge::from_corpus(&corpus);
    let variants: Vec<AblationVariant> = match variants_arg {
        None => AblationVariant::LADDER.to_vec(),
        Some(raw) => raw
            .split(',')
            .map(|name| {
                AblationVariant::parse(name.trim()).ok_or_else(|| {
                    CliError::new(
                        "CONFIG_INVALID",
                        4,
                        format!("unknown ablation variant '{name}'"),
                    )
                })
            })
            .collect::<Result<_, _>>()?,
    };
    let configs = AblationConfigs {
        stage1: config.train_config(1),
        stage2: config.train_config(2),
        stage3: config.train_config(3),
        gen: config.gen_eval(),
        eval_seed: derive_seed(config.seed, "ablation.eval"),
    };
    let external;
    let judge: &dyn CandidateRanker = match config.backend {
        Backend::Simulated => &scorer,
        Backend::External => {
            external = ExternalJudge::new(
                HttpTransport::new(&config.judge_client()),
                config.judge_client(),
            );
            &external
        }
    };
    let rows = run_ablation(&variants, &configs, &corpus, judge, &scorer)?;
    fs::create_dir_all(out)?;
    let json = serde_json::json!({ "seed": config.seed, "rows": rows });
    write_text(
        &out.join("ablation.json"),
        &(serde_json::to_string_pretty(&json).expect("serializes") + "\n"),
    )?;
    let table = render_ablation_table(&rows);
    write_text(
        &out.join("ablation.txt"),
        &format!("seed {}\n\n{table}", config.seed),
    )?;
    print!("{table}");
    Ok(())
}

pub fn eval_judge_validate(
    config: &RunConfig,
    corpus_dir: &Path,
    out: &Path,
    dry_run: bool,
) -> Result<(), CliError> {
    if dry_run {
        print!("{}", config.echo());
        return Ok(());
    }
    let corpus = load_checked_corpus(corpus_dir)?;
    let scorer = SimJudge::from_corpus(&corpus);
    let (pairs, report) = run_judge_validation(
        &corpus,
        &scorer,
        (config.validate_easy, config.validate_hard),
        config.low_pool_per_image,
        derive_seed(config.seed, "judge.validate"),
    )?;
    fs::create_dir_all(out)?;
    let json = serde_json::json!({
        "seed": config.seed,
        "pairs": pairs.len(),
        "report": report,
    });
    write_text(
        &out.join("judge_validation.json"),
        &(serde_json::to_string_pretty(&json).expect("serializes") + "\n"),
    )?;
    write_text(
        &out.join("judge_validation.txt"),
        &format!("seed {}\n\n{}", config.seed, report.render_text()),
    )?;
    print!("{}", report.render_text());
    Ok(())
}

/// Resolve the effective configuration: file, then CLI-level overrides.
pub fn resolve_config(
    config_path: Option<&PathBuf>,
    seed: Option<u64>,
    backend: Option<&str>,
    overrides: &[String],
) -> Result<RunConfig, CliError> {
    let mut config = match config_path {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    config.apply_overrides(overrides)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(backend) = backend {
        config.set("backend", backend)?;
    }
    Ok(config)
}
