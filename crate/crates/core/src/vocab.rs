//! Shared token vocabulary with reserved begin/end markers.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Reserved sequence-start token. Conditions the first generation step and
/// is never part of a caption.
pub const BOS: &str = "<bos>";
/// Reserved end-of-sequence token.
pub const EOS: &str = "<eos>";

/// Minimum vocabulary size, counting the reserved tokens.
pub const MIN_VOCAB_SIZE: usize = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("vocabulary has {0} tokens, needs at least {MIN_VOCAB_SIZE}")]
    TooSmall(usize),
    #[error("duplicate token '{0}'")]
    DuplicateToken(String),
    #[error("reserved token '{0}' missing")]
    MissingReserved(&'static str),
    #[error("unknown token '{0}'")]
    UnknownToken(String),
}

/// Ordered list of distinct tokens; index lookup is the inverse of token lookup.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "VocabDump", into = "VocabDump")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabDump {
    tokens: Vec<String>,
}

impl TryFrom<VocabDump> for Vocabulary {
    type Error = VocabError;
    fn try_from(dump: VocabDump) -> Result<Self, VocabError> {
        Vocabulary::new(dump.tokens)
    }
}

impl From<Vocabulary> for VocabDump {
    fn from(vocab: Vocabulary) -> Self {
        VocabDump {
            tokens: vocab.tokens,
        }
    }
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self, VocabError> {
        if tokens.len() < MIN_VOCAB_SIZE {
            return Err(VocabError::TooSmall(tokens.len()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, token) in tokens.iter().enumerate() {
            if index.insert(token.clone(), i).is_some() {
                return Err(VocabError::DuplicateToken(token.clone()));
            }
        }
        for reserved in [BOS, EOS] {
            if !index.contains_key(reserved) {
                return Err(VocabError::MissingReserved(reserved));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn require_id(&self, token: &str) -> Result<usize, VocabError> {
        self.id_of(token)
            .ok_or_else(|| VocabError::UnknownToken(token.to_string()))
    }

    pub fn bos_id(&self) -> usize {
        self.index[BOS]
    }

    pub fn eos_id(&self) -> usize {
        self.index[EOS]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Map a token-string sequence to ids, failing on the first unknown token.
    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>, VocabError> {
        tokens.iter().map(|t| self.require_id(t)).collect()
    }

    /// Render ids back to strings.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&id| self.tokens[id].clone()).collect()
    }

    /// Content hash used to bind checkpoints to the vocabulary they were
    /// trained with.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for token in &self.tokens {
            hasher.update(token.as_bytes());
            hasher.update([0u8]);
        }
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_tokens() -> Vec<String> {
        let mut tokens = vec![BOS.to_string(), EOS.to_string()];
        tokens.extend((0..14).map(|i| format!("t{i}")));
        tokens
    }

    #[test]
    fn round_trips_ids_and_tokens() {
        let vocab = Vocabulary::new(toy_tokens()).unwrap();
        for id in 0..vocab.len() {
            assert_eq!(vocab.id_of(vocab.token(id)), Some(id));
        }
    }

    #[test]
    fn rejects_small_vocabulary() {
        let err = Vocabulary::new(vec![BOS.to_string(), EOS.to_string()]).unwrap_err();
        assert_eq!(err, VocabError::TooSmall(2));
    }

    #[test]
    fn rejects_duplicates_and_missing_reserved() {
        let mut tokens = toy_tokens();
        tokens.push("t0".to_string());
        assert!(matches!(
            Vocabulary::new(tokens).unwrap_err(),
            VocabError::DuplicateToken(t) if t == "t0"
        ));

        let tokens: Vec<String> = (0..20).map(|i| format!("t{i}")).collect();
        assert_eq!(
            Vocabulary::new(tokens).unwrap_err(),
            VocabError::MissingReserved(BOS)
        );
    }

    #[test]
    fn hash_tracks_content() {
        let a = Vocabulary::new(toy_tokens()).unwrap();
        let b = Vocabulary::new(toy_tokens()).unwrap();
        assert_eq!(a.hash(), b.hash());

        let mut tokens = toy_tokens();
        tokens.push("extra".to_string());
        let c = Vocabulary::new(tokens).unwrap();
        assert_ne!(a.hash(), c.hash());
    }
}
