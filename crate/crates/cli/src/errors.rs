//! Stable machine-readable error codes and exit statuses.

use capalign::corpus::CorpusError;
use capalign::eval::EvalError;
use capalign::judge::JudgeError;
use capalign::policy::PolicyError;
use capalign::reward::RewardError;
use capalign::trainer::TrainerError;

use crate::config::ConfigError;

/// Exit statuses: 0 ok, 1 io/unexpected, 2 data, 3 checkpoint, 4 config,
/// 5 backend, 6 evaluation precondition.
#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub exit: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: &'static str, exit: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            exit,
            message: message.into(),
        }
    }

    /// The single-line machine-readable form printed to stderr.
    pub fn render(&self) -> String {
        format!("error: code={} message={:?}", self.code, self.message)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::new("CONFIG_INVALID", 4, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new("IO_ERROR", 1, e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        let message = e.to_string();
        match e {
            CorpusError::SplitOverlap { .. } => CliError::new("SPLIT_OVERLAP", 2, message),
            CorpusError::MalformedLine { .. } => CliError::new("MALFORMED_LINE", 2, message),
            CorpusError::UnknownToken { .. } => CliError::new("UNKNOWN_TOKEN", 2, message),
            CorpusError::DuplicateImageId(_) => CliError::new("DUPLICATE_IMAGE_ID", 2, message),
            CorpusError::CountMismatch { .. } => CliError::new("COUNT_MISMATCH", 2, message),
            CorpusError::InsufficientPool { .. } => {
                CliError::new("INSUFFICIENT_POOL", 6, message)
            }
            CorpusError::FractionSum(_) => CliError::new("CONFIG_INVALID", 4, message),
            CorpusError::BadSynthConfig(_) => CliError::new("CONFIG_INVALID", 4, message),
            CorpusError::Io { .. } => CliError::new("IO_ERROR", 1, message),
            _ => CliError::new("DATA_INVALID", 2, message),
        }
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        let message = e.to_string();
        match e {
            PolicyError::VocabHashMismatch { .. } => {
                CliError::new("CHECKPOINT_MISMATCH", 3, message)
            }
            PolicyError::Parse(_) | PolicyError::UnsupportedVersion(_) => {
                CliError::new("CHECKPOINT_INVALID", 3, message)
            }
            PolicyError::Io { .. } => CliError::new("MISSING_CHECKPOINT", 3, message),
            _ => CliError::new("POLICY_ERROR", 1, message),
        }
    }
}

impl From<JudgeError> for CliError {
    fn from(e: JudgeError) -> Self {
        let message = e.to_string();
        match e {
            JudgeError::Protocol { .. } => CliError::new("JUDGE_PROTOCOL", 5, message),
            JudgeError::Unavailable(_) => CliError::new("JUDGE_UNAVAILABLE", 5, message),
            _ => CliError::new("JUDGE_ERROR", 5, message),
        }
    }
}

impl From<RewardError> for CliError {
    fn from(e: RewardError) -> Self {
        let message = e.to_string();
        match e {
            RewardError::EmbeddingUnavailable(_) => {
                CliError::new("EMBED_UNAVAILABLE", 5, message)
            }
            _ => CliError::new("REWARD_ERROR", 1, message),
        }
    }
}

impl From<TrainerError> for CliError {
    fn from(e: TrainerError) -> Self {
        match e {
            TrainerError::Policy(inner) => inner.into(),
            TrainerError::Judge(inner) => inner.into(),
            TrainerError::Reward(inner) => inner.into(),
            TrainerError::Corpus(inner) => inner.into(),
            TrainerError::MissingWesternCaptions => {
                CliError::new("DATA_INVALID", 2, e_to_string(&e))
            }
            TrainerError::BenchmarkLeak(_) => {
                CliError::new("HYGIENE_VIOLATION", 6, e_to_string(&e))
            }
            TrainerError::BadConfig(_) => CliError::new("CONFIG_INVALID", 4, e_to_string(&e)),
            TrainerError::BadTranscript(_) => CliError::new("IO_ERROR", 1, e_to_string(&e)),
            TrainerError::Vocab(inner) => CliError::new("DATA_INVALID", 2, inner.to_string()),
            TrainerError::Io { .. } => CliError::new("IO_ERROR", 1, e_to_string(&e)),
        }
    }
}

fn e_to_string(e: &TrainerError) -> String {
    e.to_string()
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let message = e.to_string();
        match e {
            EvalError::Judge(inner) => inner.into(),
            EvalError::Policy(inner) => inner.into(),
            EvalError::HygieneViolation(_) => CliError::new("HYGIENE_VIOLATION", 6, message),
            EvalError::InsufficientPool { .. } => CliError::new("INSUFFICIENT_POOL", 6, message),
            EvalError::CsvRow { .. } => CliError::new("HUMAN_SCORES_INVALID", 2, message),
            EvalError::MissingReference { .. } => CliError::new("DATA_INVALID", 2, message),
            EvalError::Io { .. } => CliError::new("IO_ERROR", 1, message),
            _ => CliError::new("EVAL_ERROR", 6, message),
        }
    }
}
