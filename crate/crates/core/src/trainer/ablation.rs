//! Ablation ladder: base, +SFT, +GRPO, +repulsion, full (with Eastern
//! adaptation). Variants share stage prefixes, so the ladder trains stage 1
//! once, stage 2 twice (with and without the penalty), and stage 3 once.

use serde::Serialize;

use super::{
    run_stage1_sft, run_stage2_grpo, run_stage3_adapt, StageState, TrainConfig, TrainerError,
};
use crate::corpus::{Corpus, CultureContext};
use crate::eval::{evaluate_params, GenEvalConfig};
use crate::judge::{CandidateRanker, SimJudge};
use crate::policy::PolicyParams;
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationVariant {
    Base,
    Sft,
    SftGrpo,
    SftGrpoDeg,
    Full,
}

impl AblationVariant {
    pub const LADDER: [AblationVariant; 5] = [
        AblationVariant::Base,
        AblationVariant::Sft,
        AblationVariant::SftGrpo,
        AblationVariant::SftGrpoDeg,
        AblationVariant::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationVariant::Base => "base",
            AblationVariant::Sft => "sft",
            AblationVariant::SftGrpo => "sft+grpo",
            AblationVariant::SftGrpoDeg => "sft+grpo+deg",
            AblationVariant::Full => "full",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::LADDER.into_iter().find(|v| v.as_str() == name)
    }
}

impl std::fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Stage configs shared by every variant (same base seed).
#[derive(Debug, Clone)]
pub struct AblationConfigs {
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub stage3: TrainConfig,
    pub gen: GenEvalConfig,
    pub eval_seed: u64,
}

impl AblationConfigs {
    pub fn defaults(seed: u64) -> Self {
        Self {
            stage1: TrainConfig::stage1(seed),
            stage2: TrainConfig::stage2(seed),
            stage3: TrainConfig::stage3(seed),
            gen: GenEvalConfig::default(),
            eval_seed: derive_seed(seed, "ablation.eval"),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct VariantMetrics {
    pub ir: f64,
    pub cf: f64,
    pub hu: f64,
    pub overall: f64,
}

/// One ablation table row: the variant evaluated under both cultures.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub western: VariantMetrics,
    pub eastern: VariantMetrics,
}

fn eval_variant(
    params: &PolicyParams,
    corpus: &Corpus,
    scorer: &SimJudge,
    configs: &AblationConfigs,
    context: CultureContext,
) -> Result<VariantMetrics, TrainerError> {
    let dims = evaluate_params(
        params,
        corpus,
        context,
        scorer,
        &configs.gen,
        configs.eval_seed,
    )
    .map_err(|e| TrainerError::BadConfig(format!("ablation evaluation failed: {e}")))?;
    Ok(VariantMetrics {
        ir: dims.ir,
        cf: dims.cf,
        hu: dims.hu,
        overall: dims.overall(),
    })
}

/// Train and evaluate the requested variants from the shared base seed.
pub fn run_ablation(
    variants: &[AblationVariant],
    configs: &AblationConfigs,
    corpus: &Corpus,
    judge: &dyn CandidateRanker,
    scorer: &SimJudge,
) -> Result<Vec<AblationRow>, TrainerError> {
    let needs = |v: AblationVariant| variants.contains(&v);
    let needs_sft = needs(AblationVariant::Sft)
        || needs(AblationVariant::SftGrpo)
        || needs(AblationVariant::SftGrpoDeg)
        || needs(AblationVariant::Full);
    let needs_deg = needs(AblationVariant::SftGrpoDeg) || needs(AblationVariant::Full);

    let stage1: Option<StageState> = if needs_sft {
        Some(run_stage1_sft(&configs.stage1, corpus)?)
    } else {
        None
    };

    let stage2_plain: Option<StageState> = if needs(AblationVariant::SftGrpo) {
        let checkpoint = stage1
            .as_ref()
            .expect("stage 1 precedes stage 2")
            .checkpoint(corpus, &configs.stage1);
        let mut config = configs.stage2.clone();
        config.penalty.lambda = 0.0;
        Some(run_stage2_grpo(&config, corpus, judge, scorer, &checkpoint)?)
    } else {
        None
    };

    let stage2_deg: Option<StageState> = if needs_deg {
        let checkpoint = stage1
            .as_ref()
            .expect("stage 1 precedes stage 2")
            .checkpoint(corpus, &configs.stage1);
        Some(run_stage2_grpo(
            &configs.stage2,
            corpus,
            judge,
            scorer,
            &checkpoint,
        )?)
    } else {
        None
    };

    let stage3: Option<StageState> = if needs(AblationVariant::Full) {
        let checkpoint = stage2_deg
            .as_ref()
            .expect("stage 2 precedes stage 3")
            .checkpoint(corpus, &configs.stage2);
        Some(run_stage3_adapt(&configs.stage3, corpus, &checkpoint)?)
    } else {
        None
    };

    let base_params = PolicyParams::zeros(corpus.vocab.len(), configs.stage1.max_len);
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let params = match variant {
            AblationVariant::Base => &base_params,
            AblationVariant::Sft => &stage1.as_ref().expect("trained").params,
            AblationVariant::SftGrpo => &stage2_plain.as_ref().expect("trained").params,
            AblationVariant::SftGrpoDeg => &stage2_deg.as_ref().expect("trained").params,
            AblationVariant::Full => &stage3.as_ref().expect("trained").params,
        };
        rows.push(AblationRow {
            variant,
            western: eval_variant(params, corpus, scorer, configs, CultureContext::Western)?,
            eastern: eval_variant(params, corpus, scorer, configs, CultureContext::Eastern)?,
        });
    }
    Ok(rows)
}

/// Aligned-column ablation table mirroring the per-context IR/CF/Hu/Overall
/// layout.
pub fn render_ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<16}{:>8}{:>8}{:>8}{:>10}{:>8}{:>8}{:>8}{:>10}\n",
        "variant", "W.IR", "W.CF", "W.Hu", "W.Overall", "E.IR", "E.CF", "E.Hu", "E.Overall"
    );
    for row in rows {
        out.push_str(&format!(
            "{:<16}{:>8.2}{:>8.2}{:>8.2}{:>10.2}{:>8.2}{:>8.2}{:>8.2}{:>10.2}\n",
            row.variant.as_str(),
            row.western.ir,
            row.western.cf,
            row.western.hu,
            row.western.overall,
            row.eastern.ir,
            row.eastern.cf,
            row.eastern.hu,
            row.eastern.overall,
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SynthConfig};

    fn quick_configs(seed: u64) -> AblationConfigs {
        let mut configs = AblationConfigs::defaults(seed);
        configs.stage1.steps = 60;
        configs.stage2.steps = 20;
        configs.stage3.steps = 20;
        configs
    }

    #[test]
    fn base_variant_skips_training_and_evaluates_uniform_params() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic_corpus(&SynthConfig::default(), 51, dir.path()).unwrap();
        let scorer = SimJudge::from_corpus(&corpus);
        let rows = run_ablation(
            &[AblationVariant::Base],
            &quick_configs(51),
            &corpus,
            &scorer,
            &scorer,
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
        // The uniform policy has no cultural response to speak of.
        assert!(rows[0].western.cf < 8.0);
    }

    #[test]
    fn full_ladder_emits_five_rows_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic_corpus(&SynthConfig::default(), 52, dir.path()).unwrap();
        let scorer = SimJudge::from_corpus(&corpus);
        let rows = run_ablation(
            &AblationVariant::LADDER,
            &quick_configs(52),
            &corpus,
            &scorer,
            &scorer,
        )
        .unwrap();
        assert_eq!(rows.len(), 5);
        let names: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
        assert_eq!(names, ["base", "sft", "sft+grpo", "sft+grpo+deg", "full"]);
        let table = render_ablation_table(&rows);
        assert_eq!(table.lines().count(), 6);
    }

    #[test]
    fn variant_names_round_trip() {
        for variant in AblationVariant::LADDER {
            assert_eq!(AblationVariant::parse(variant.as_str()), Some(variant));
        }
        assert_eq!(AblationVariant::parse("nope"), None);
    }
}
