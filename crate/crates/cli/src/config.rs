//! Run configuration: a flat plain-text key-value file plus per-key
//! command-line overrides. Unknown keys are rejected; secrets never appear
//! here (API keys come from the environment).

use std::fmt;
use std::path::Path;

use capalign::corpus::{StageMixture, SynthConfig};
use capalign::eval::GenEvalConfig;
use capalign::judge::JudgeClientConfig;
use capalign::reward::PenaltyConfig;
use capalign::trainer::TrainConfig;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Simulated,
    External,
}

impl Backend {
    pub fn as_str(self) -> &'static str {
        match self {
            Backend::Simulated => "simulated",
            Backend::External => "external",
        }
    }
}

/// Every tunable of the pipeline, with documented defaults. The single
/// `seed` drives all randomness; it is recorded in every output header.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub backend: Backend,
    pub language: String,
    pub max_len: usize,
    pub embed_dim: usize,

    pub judge_endpoint: String,
    pub judge_timeout_ms: u64,
    pub judge_retries: u32,
    pub judge_max_in_flight: usize,
    pub embed_endpoint: String,
    pub embed_timeout_ms: u64,

    pub synth_images: usize,
    pub synth_train: usize,
    pub synth_dev: usize,
    pub synth_benchmark: usize,
    pub synth_content_tokens: usize,
    pub synth_western_markers: usize,
    pub synth_eastern_markers: usize,
    pub synth_descriptors: usize,
    pub synth_eastern_only_frac: f64,
    pub synth_paired_frac: f64,
    pub synth_refusals: usize,
    pub synth_annotated_frac: f64,
    pub synth_evidence: usize,
    pub synth_markers_per_caption: usize,

    pub stage1_steps: usize,
    pub stage1_lr: f64,
    pub stage1_batch: usize,
    /// 0 means "use every Western training caption".
    pub stage1_samples: usize,

    pub stage2_steps: usize,
    pub stage2_lr: f64,
    pub stage2_batch: usize,
    pub stage2_k: usize,
    pub stage2_temperature: f64,
    pub stage2_clip_epsilon: f64,
    pub stage2_kl_beta: f64,
    pub stage2_rollout_epochs: usize,

    pub penalty_m: f64,
    pub penalty_lambda: f64,

    pub stage3_steps: usize,
    pub stage3_lr: f64,
    pub stage3_batch: usize,
    /// 0 means "scale the train split by the 1000/3500 paper ratio".
    pub stage3_total: usize,
    pub mix_new_eastern: f64,
    pub mix_paired_eastern: f64,
    pub mix_western_replay: f64,

    pub eval_samples_per_image: usize,
    pub eval_temperature: f64,
    pub human_fraction: f64,
    pub validate_easy: usize,
    pub validate_hard: usize,
    pub low_pool_per_image: usize,
    pub record_wallclock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 6,
            backend: Backend::Simulated,
            language: "en".into(),
            max_len: 9,
            embed_dim: 256,
            judge_endpoint: String::new(),
            judge_timeout_ms: 30_000,
            judge_retries: 1,
            judge_max_in_flight: 4,
            embed_endpoint: String::new(),
            embed_timeout_ms: 30_000,
            synth_images: 50,
            synth_train: 35,
            synth_dev: 5,
            synth_benchmark: 10,
            synth_content_tokens: 16,
            synth_western_markers: 4,
            synth_eastern_markers: 4,
            synth_descriptors: 5,
            synth_eastern_only_frac: 0.2,
            synth_paired_frac: 0.2,
            synth_refusals: 2,
            synth_annotated_frac: 0.5,
            synth_evidence: 3,
            synth_markers_per_caption: 3,
            stage1_steps: 120,
            stage1_lr: 0.5,
            stage1_batch: 8,
            stage1_samples: 0,
            stage2_steps: 800,
            stage2_lr: 0.3,
            stage2_batch: 8,
            stage2_k: 8,
            stage2_temperature: 1.0,
            stage2_clip_epsilon: 0.2,
            stage2_kl_beta: 0.0,
            stage2_rollout_epochs: 1,
            penalty_m: 0.7,
            penalty_lambda: 0.1,
            stage3_steps: 600,
            stage3_lr: 0.5,
            stage3_batch: 5,
            stage3_total: 0,
            mix_new_eastern: 0.5,
            mix_paired_eastern: 0.3,
            mix_western_replay: 0.2,
            eval_samples_per_image: 8,
            eval_temperature: 1.0,
            human_fraction: 0.2,
            validate_easy: 20,
            validate_hard: 20,
            low_pool_per_image: 6,
            record_wallclock: false,
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $field:ident : $kind:ident),+ $(,)?) => {
        impl RunConfig {
            /// Set one key from its string form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                match key {
                    $($key => {
                        self.$field = parse_value!($kind, key, value)?;
                        Ok(())
                    })+
                    _ => Err(ConfigError(format!("unknown config key '{key}'"))),
                }
            }

            /// Sorted `key = value` lines of the resolved configuration.
            pub fn echo(&self) -> String {
                let mut lines = vec![$(format!("{} = {}", $key, echo_value!($kind, self.$field)),)+];
                lines.sort();
                lines.join("\n") + "\n"
            }
        }
    };
}

macro_rules! parse_value {
    (u64, $key:expr, $value:expr) => {
        $value
            .parse::<u64>()
            .map_err(|_| ConfigError(format!("key '{}' expects an integer, got '{}'", $key, $value)))
    };
    (usize, $key:expr, $value:expr) => {
        $value
            .parse::<usize>()
            .map_err(|_| ConfigError(format!("key '{}' expects an integer, got '{}'", $key, $value)))
    };
    (u32, $key:expr, $value:expr) => {
        $value
            .parse::<u32>()
            .map_err(|_| ConfigError(format!("key '{}' expects an integer, got '{}'", $key, $value)))
    };
    (f64, $key:expr, $value:expr) => {
        $value
            .parse::<f64>()
            .map_err(|_| ConfigError(format!("key '{}' expects a number, got '{}'", $key, $value)))
            .and_then(|v: f64| {
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(ConfigError(format!("key '{}' must be finite", $key)))
                }
            })
    };
    (bool, $key:expr, $value:expr) => {
        match $value {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(ConfigError(format!(
                "key '{}' expects true|false, got '{}'",
                $key, other
            ))),
        }
    };
    (string, $key:expr, $value:expr) => {
        Ok::<String, ConfigError>($value.to_string())
    };
    (backend, $key:expr, $value:expr) => {
        match $value {
            "simulated" => Ok(Backend::Simulated),
            "external" => Ok(Backend::External),
            other => Err(ConfigError(format!(
                "key '{}' expects simulated|external, got '{}'",
                $key, other
            ))),
        }
    };
}

macro_rules! echo_value {
    (string, $field:expr) => {
        format!("{}", $field)
    };
    (backend, $field:expr) => {
        $field.as_str().to_string()
    };
    ($kind:ident, $field:expr) => {
        format!("{}", $field)
    };
}

config_keys! {
    "seed" => seed: u64,
    "backend" => backend: backend,
    "language" => language: string,
    "max_len" => max_len: usize,
    "embed_dim" => embed_dim: usize,
    "judge_endpoint" => judge_endpoint: string,
    "judge_timeout_ms" => judge_timeout_ms: u64,
    "judge_retries" => judge_retries: u32,
    "judge_max_in_flight" => judge_max_in_flight: usize,
    "embed_endpoint" => embed_endpoint: string,
    "embed_timeout_ms" => embed_timeout_ms: u64,
    "synth_images" => synth_images: usize,
    "synth_train" => synth_train: usize,
    "synth_dev" => synth_dev: usize,
    "synth_benchmark" => synth_benchmark: usize,
    "synth_content_tokens" => synth_content_tokens: usize,
    "synth_western_markers" => synth_western_markers: usize,
    "synth_eastern_markers" => synth_eastern_markers: usize,
    "synth_descriptors" => synth_descriptors: usize,
    "synth_eastern_only_frac" => synth_eastern_only_frac: f64,
    "synth_paired_frac" => synth_paired_frac: f64,
    "synth_refusals" => synth_refusals: usize,
    "synth_annotated_frac" => synth_annotated_frac: f64,
    "synth_evidence" => synth_evidence: usize,
    "synth_markers_per_caption" => synth_markers_per_caption: usize,
    "stage1_steps" => stage1_steps: usize,
    "stage1_lr" => stage1_lr: f64,
    "stage1_batch" => stage1_batch: usize,
    "stage1_samples" => stage1_samples: usize,
    "stage2_steps" => stage2_steps: usize,
    "stage2_lr" => stage2_lr: f64,
    "stage2_batch" => stage2_batch: usize,
    "stage2_k" => stage2_k: usize,
    "stage2_temperature" => stage2_temperature: f64,
    "stage2_clip_epsilon" => stage2_clip_epsilon: f64,
    "stage2_kl_beta" => stage2_kl_beta: f64,
    "stage2_rollout_epochs" => stage2_rollout_epochs: usize,
    "penalty_m" => penalty_m: f64,
    "penalty_lambda" => penalty_lambda: f64,
    "stage3_steps" => stage3_steps: usize,
    "stage3_lr" => stage3_lr: f64,
    "stage3_batch" => stage3_batch: usize,
    "stage3_total" => stage3_total: usize,
    "mix_new_eastern" => mix_new_eastern: f64,
    "mix_paired_eastern" => mix_paired_eastern: f64,
    "mix_western_replay" => mix_western_replay: f64,
    "eval_samples_per_image" => eval_samples_per_image: usize,
    "eval_temperature" => eval_temperature: f64,
    "human_fraction" => human_fraction: f64,
    "validate_easy" => validate_easy: usize,
    "validate_hard" => validate_hard: usize,
    "low_pool_per_image" => low_pool_per_image: usize,
    "record_wallclock" => record_wallclock: bool,
}

impl RunConfig {
    /// Load `key = value` lines; `#` starts a comment; blank lines ignored.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::default();
        for (idx, line) in raw.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                ConfigError(format!("line {}: expected 'key = value'", idx + 1))
            })?;
            config
                .set(key.trim(), value.trim())
                .map_err(|e| ConfigError(format!("line {}: {e}", idx + 1)))?;
        }
        Ok(config)
    }

    /// Apply `key=value` override flags.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("override '{item}' is not key=value")))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            images: self.synth_images,
            train: self.synth_train,
            dev: self.synth_dev,
            benchmark: self.synth_benchmark,
            content_tokens: self.synth_content_tokens,
            western_markers: self.synth_western_markers,
            eastern_markers: self.synth_eastern_markers,
            descriptors_per_image: self.synth_descriptors,
            eastern_only_frac: self.synth_eastern_only_frac,
            paired_frac: self.synth_paired_frac,
            refusal_samples: self.synth_refusals,
            annotated_frac: self.synth_annotated_frac,
            evidence_per_annotation: self.synth_evidence,
            markers_per_caption: self.synth_markers_per_caption,
        }
    }

    fn penalty(&self) -> PenaltyConfig {
        PenaltyConfig {
            threshold: self.penalty_m,
            lambda: self.penalty_lambda,
            direction_weights: Default::default(),
        }
    }

    fn mixture(&self) -> StageMixture {
        StageMixture {
            new_eastern_frac: self.mix_new_eastern,
            paired_eastern_frac: self.mix_paired_eastern,
            western_replay_frac: self.mix_western_replay,
        }
    }

    pub fn train_config(&self, stage: u8) -> TrainConfig {
        let (steps, lr, batch_size) = match stage {
            1 => (self.stage1_steps, self.stage1_lr, self.stage1_batch),
            2 => (self.stage2_steps, self.stage2_lr, self.stage2_batch),
            _ => (self.stage3_steps, self.stage3_lr, self.stage3_batch),
        };
        TrainConfig {
            stage,
            lr,
            k: self.stage2_k,
            clip_epsilon: self.stage2_clip_epsilon,
            kl_beta: self.stage2_kl_beta,
            temperature: self.stage2_temperature,
            steps,
            batch_size,
            seed: self.seed,
            penalty: self.penalty(),
            mixture: self.mixture(),
            stage1_samples: (self.stage1_samples > 0).then_some(self.stage1_samples),
            stage3_total: (self.stage3_total > 0).then_some(self.stage3_total),
            max_len: self.max_len,
            embed_dim: self.embed_dim,
            rollout_epochs: self.stage2_rollout_epochs,
            record_wallclock: self.record_wallclock,
        }
    }

    pub fn gen_eval(&self) -> GenEvalConfig {
        GenEvalConfig {
            samples_per_image: self.eval_samples_per_image,
            temperature: self.eval_temperature,
        }
    }

    pub fn judge_client(&self) -> JudgeClientConfig {
        JudgeClientConfig {
            endpoint: self.judge_endpoint.clone(),
            timeout_ms: self.judge_timeout_ms,
            transport_retries: self.judge_retries,
            max_in_flight: self.judge_max_in_flight,
        }
    }
}
