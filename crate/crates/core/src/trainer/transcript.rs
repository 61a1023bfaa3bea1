//! Step-by-step training transcripts as JSONL: one header line, then one
//! record per step. With wallclock recording off (the default) transcripts
//! are byte-identical across runs with the same seed.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainerError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptHeader {
    pub seed: u64,
    pub stage: u8,
    pub config_hash: String,
    pub corpus_hash: String,
    /// Samples available to this stage (the declared consumption pool).
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: u8,
    /// SFT stages log the batch loss; the GRPO stage logs the mean reward.
    pub loss_or_mean_reward: f64,
    pub degenerate_rate: f64,
    pub mean_penalty: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_cf: Option<f64>,
    /// Milliseconds for the step when timing is enabled, otherwise 0.0 so
    /// identical seeds produce identical bytes.
    pub wallclock: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub header: TranscriptHeader,
    pub records: Vec<StepRecord>,
}

impl Transcript {
    pub fn new(header: TranscriptHeader) -> Self {
        Self {
            header,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: StepRecord) {
        self.records.push(record);
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for record in &self.records {
            out.push_str(&serde_json::to_string(record).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), TrainerError> {
        fs::write(path, self.to_jsonl()).map_err(|source| TrainerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn parse(raw: &str) -> Result<Self, TrainerError> {
        let mut lines = raw.lines().filter(|l| !l.trim().is_empty());
        let header_line = lines
            .next()
            .ok_or_else(|| TrainerError::BadTranscript("empty transcript".into()))?;
        let header: TranscriptHeader = serde_json::from_str(header_line)
            .map_err(|e| TrainerError::BadTranscript(e.to_string()))?;
        let mut records = Vec::new();
        for line in lines {
            records.push(
                serde_json::from_str(line)
                    .map_err(|e| TrainerError::BadTranscript(e.to_string()))?,
            );
        }
        Ok(Self { header, records })
    }

    pub fn read(path: &Path) -> Result<Self, TrainerError> {
        let raw = fs::read_to_string(path).map_err(|source| TrainerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&raw)
    }
}
