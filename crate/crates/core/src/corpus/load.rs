//! Corpus loading and validation.
//!
//! Layout: a directory holding `vocab.json`, `images.jsonl`,
//! `captions.jsonl`, `degradations.jsonl`, and `splits.json`. Records are
//! kept in file order so loads are deterministic.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::{
    refusal_tokens, CaptionRecord, CaptionRole, Corpus, CorpusError, CultureContext,
    CultureMarkers, DatasetSplit, DegradationAnnotation, ImageRecord,
};
use crate::vocab::Vocabulary;

pub const VOCAB_FILE: &str = "vocab.json";
pub const IMAGES_FILE: &str = "images.jsonl";
pub const CAPTIONS_FILE: &str = "captions.jsonl";
pub const DEGRADATIONS_FILE: &str = "degradations.jsonl";
pub const SPLITS_FILE: &str = "splits.json";

/// A loaded corpus plus non-fatal findings.
#[derive(Debug)]
pub struct LoadOutcome {
    pub corpus: Corpus,
    pub warnings: Vec<String>,
}

#[derive(Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    #[serde(default)]
    western_markers: Vec<String>,
    #[serde(default)]
    eastern_markers: Vec<String>,
}

fn read_file(dir: &Path, name: &str) -> Result<String, CorpusError> {
    let path = dir.join(name);
    fs::read_to_string(&path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(
    file: &str,
    contents: &str,
) -> Result<Vec<(usize, T)>, CorpusError> {
    let mut records = Vec::new();
    for (idx, line) in contents.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let record = serde_json::from_str(trimmed).map_err(|e| CorpusError::MalformedLine {
            file: file.to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        records.push((line_no, record));
    }
    Ok(records)
}

fn check_tokens(
    vocab: &Vocabulary,
    tokens: &[String],
    file: &str,
    line: usize,
) -> Result<(), CorpusError> {
    for token in tokens {
        if !vocab.contains(token) {
            return Err(CorpusError::UnknownToken {
                file: file.to_string(),
                line,
                token: token.clone(),
            });
        }
    }
    Ok(())
}

/// Load and validate a corpus directory.
///
/// Fails on the first malformed line (with its line number), unknown token,
/// duplicate image id, split overlap, or invariant violation. Empty caption
/// or degradation files load with a warning.
pub fn load_corpus(dir: &Path) -> Result<LoadOutcome, CorpusError> {
    let mut warnings = Vec::new();

    let vocab_raw = read_file(dir, VOCAB_FILE)?;
    let vocab_file: VocabFile =
        serde_json::from_str(&vocab_raw).map_err(|e| CorpusError::MalformedLine {
            file: VOCAB_FILE.to_string(),
            line: 1,
            message: e.to_string(),
        })?;
    let vocab = Vocabulary::new(vocab_file.tokens)?;

    let markers = CultureMarkers {
        western: vocab_file.western_markers.iter().cloned().collect(),
        eastern: vocab_file.eastern_markers.iter().cloned().collect(),
    };
    for token in markers.western.iter().chain(markers.eastern.iter()) {
        if !vocab.contains(token) {
            return Err(CorpusError::MarkerNotInVocabulary(token.clone()));
        }
    }
    if let Some(shared) = markers.western.intersection(&markers.eastern).next() {
        return Err(CorpusError::MarkerOverlap(shared.clone()));
    }

    let images_raw = read_file(dir, IMAGES_FILE)?;
    let mut images = Vec::new();
    let mut seen_ids = BTreeSet::new();
    for (line, image) in parse_jsonl::<ImageRecord>(IMAGES_FILE, &images_raw)? {
        if !seen_ids.insert(image.image_id.clone()) {
            return Err(CorpusError::DuplicateImageId(image.image_id));
        }
        if image.descriptor_tokens.is_empty() {
            return Err(CorpusError::EmptyDescriptors(image.image_id));
        }
        check_tokens(&vocab, &image.descriptor_tokens, IMAGES_FILE, line)?;
        images.push(image);
    }

    let captions_raw = read_file(dir, CAPTIONS_FILE)?;
    let mut captions = Vec::new();
    for (line, caption) in parse_jsonl::<CaptionRecord>(CAPTIONS_FILE, &captions_raw)? {
        if !seen_ids.contains(&caption.image_id) {
            return Err(CorpusError::UnknownImageId {
                file: CAPTIONS_FILE.to_string(),
                line,
                image_id: caption.image_id.clone(),
            });
        }
        check_tokens(&vocab, &caption.text, CAPTIONS_FILE, line)?;
        if caption.role == CaptionRole::Refusal && caption.text != refusal_tokens() {
            return Err(CorpusError::BadRefusalText(caption.image_id.clone()));
        }
        captions.push(caption);
    }
    if captions.is_empty() {
        warnings.push(format!("{CAPTIONS_FILE}: no caption records"));
    }

    let degradations_raw = read_file(dir, DEGRADATIONS_FILE)?;
    let mut annotations = Vec::new();
    for (line, annotation) in
        parse_jsonl::<DegradationAnnotation>(DEGRADATIONS_FILE, &degradations_raw)?
    {
        if !seen_ids.contains(&annotation.sample_id) {
            return Err(CorpusError::UnknownImageId {
                file: DEGRADATIONS_FILE.to_string(),
                line,
                image_id: annotation.sample_id.clone(),
            });
        }
        if annotation.evidence_texts.is_empty()
            || annotation.evidence_texts.iter().any(|t| t.is_empty())
        {
            return Err(CorpusError::EmptyEvidence {
                sample_id: annotation.sample_id.clone(),
                direction_id: annotation.direction_id.clone(),
            });
        }
        for text in &annotation.evidence_texts {
            check_tokens(&vocab, text, DEGRADATIONS_FILE, line)?;
        }
        if !annotation.weight.is_finite() || annotation.weight < 0.0 {
            return Err(CorpusError::BadWeight {
                sample_id: annotation.sample_id.clone(),
            });
        }
        annotations.push(annotation);
    }
    if annotations.is_empty() {
        warnings.push(format!("{DEGRADATIONS_FILE}: no degradation annotations"));
    }

    let splits_raw = read_file(dir, SPLITS_FILE)?;
    let split: DatasetSplit =
        serde_json::from_str(&splits_raw).map_err(|e| CorpusError::MalformedLine {
            file: SPLITS_FILE.to_string(),
            line: 1,
            message: e.to_string(),
        })?;
    validate_split(&split, &seen_ids, &mut warnings)?;

    validate_benchmark_references(&split, &captions)?;

    let corpus_hash = hash_inputs(&[
        &vocab_raw,
        &images_raw,
        &captions_raw,
        &degradations_raw,
        &splits_raw,
    ]);

    Ok(LoadOutcome {
        corpus: Corpus {
            vocab,
            markers,
            images,
            captions,
            annotations,
            split,
            corpus_hash,
        },
        warnings,
    })
}

fn validate_split(
    split: &DatasetSplit,
    image_ids: &BTreeSet<String>,
    warnings: &mut Vec<String>,
) -> Result<(), CorpusError> {
    let named: [(&'static str, &[String], usize); 3] = [
        ("train", &split.train_ids, split.declared_counts.0),
        ("dev", &split.dev_ids, split.declared_counts.1),
        ("benchmark", &split.benchmark_ids, split.declared_counts.2),
    ];

    for (name, ids, declared) in &named {
        let distinct: BTreeSet<&String> = ids.iter().collect();
        if distinct.len() != ids.len() {
            return Err(CorpusError::CountMismatch {
                split: name,
                declared: *declared,
                actual: distinct.len(),
            });
        }
        if ids.len() != *declared {
            return Err(CorpusError::CountMismatch {
                split: name,
                declared: *declared,
                actual: ids.len(),
            });
        }
        for id in ids.iter() {
            if !image_ids.contains(id) {
                return Err(CorpusError::UnknownImageId {
                    file: SPLITS_FILE.to_string(),
                    line: 1,
                    image_id: id.clone(),
                });
            }
        }
    }

    for i in 0..named.len() {
        for j in (i + 1)..named.len() {
            let (first_name, first_ids, _) = named[i];
            let (second_name, second_ids, _) = named[j];
            let second_set: BTreeSet<&String> = second_ids.iter().collect();
            if let Some(shared) = first_ids.iter().find(|id| second_set.contains(id)) {
                return Err(CorpusError::SplitOverlap {
                    image_id: shared.clone(),
                    first: first_name,
                    second: second_name,
                });
            }
        }
    }

    let assigned: BTreeSet<&String> = split
        .train_ids
        .iter()
        .chain(&split.dev_ids)
        .chain(&split.benchmark_ids)
        .collect();
    let unassigned = image_ids.iter().filter(|id| !assigned.contains(id)).count();
    if unassigned > 0 {
        warnings.push(format!("{unassigned} image(s) belong to no split"));
    }
    Ok(())
}

/// Benchmark images must carry reference captions under both explicit cultures.
fn validate_benchmark_references(
    split: &DatasetSplit,
    captions: &[CaptionRecord],
) -> Result<(), CorpusError> {
    for image_id in &split.benchmark_ids {
        for context in [CultureContext::Western, CultureContext::Eastern] {
            let found = captions.iter().any(|c| {
                c.image_id == *image_id && c.context == context && c.role == CaptionRole::Reference
            });
            if !found {
                return Err(CorpusError::MissingReference {
                    image_id: image_id.clone(),
                    context,
                });
            }
        }
    }
    Ok(())
}

fn hash_inputs(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part.as_bytes());
        hasher.update([0u8]);
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SynthConfig};
    use std::fs;

    fn write_corpus_files(dir: &Path) {
        generate_synthetic_corpus(&SynthConfig::default(), 11, dir).unwrap();
    }

    #[test]
    fn loads_generated_corpus() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus_files(dir.path());
        let outcome = load_corpus(dir.path()).unwrap();
        let corpus = outcome.corpus;
        assert_eq!(corpus.split.train_ids.len(), corpus.split.declared_counts.0);
        assert!(!corpus.images.is_empty());
        assert!(!corpus.captions.is_empty());
    }

    #[test]
    fn rejects_split_overlap() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus_files(dir.path());
        let splits_path = dir.path().join(SPLITS_FILE);
        let mut split: DatasetSplit =
            serde_json::from_str(&fs::read_to_string(&splits_path).unwrap()).unwrap();
        // Move a benchmark id into train as a duplicate assignment.
        let leaked = split.benchmark_ids[0].clone();
        split.train_ids.pop();
        split.train_ids.push(leaked.clone());
        fs::write(&splits_path, serde_json::to_string(&split).unwrap()).unwrap();

        let err = load_corpus(dir.path()).unwrap_err();
        match err {
            CorpusError::SplitOverlap { image_id, .. } => assert_eq!(image_id, leaked),
            other => panic!("expected SplitOverlap, got {other:?}"),
        }
    }

    #[test]
    fn reports_malformed_line_number() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus_files(dir.path());
        let path = dir.path().join(IMAGES_FILE);
        let mut contents = fs::read_to_string(&path).unwrap();
        contents.push_str("{not json\n");
        let lines = contents.lines().count();
        fs::write(&path, contents).unwrap();

        let err = load_corpus(dir.path()).unwrap_err();
        match err {
            CorpusError::MalformedLine { file, line, .. } => {
                assert_eq!(file, IMAGES_FILE);
                assert_eq!(line, lines);
            }
            other => panic!("expected MalformedLine, got {other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_token() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus_files(dir.path());
        let path = dir.path().join(CAPTIONS_FILE);
        let mut contents = fs::read_to_string(&path).unwrap();
        let first_image = {
            let outcome = load_corpus(dir.path()).unwrap();
            outcome.corpus.images[0].image_id.clone()
        };
        contents.push_str(&format!(
            "{{\"image_id\":\"{first_image}\",\"context\":\"western\",\"text\":[\"nosuchtoken\"],\"role\":\"training\"}}\n"
        ));
        fs::write(&path, contents).unwrap();

        let err = load_corpus(dir.path()).unwrap_err();
        assert!(matches!(
            err,
            CorpusError::UnknownToken { token, .. } if token == "nosuchtoken"
        ));
    }

    #[test]
    fn rejects_duplicate_image_id() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus_files(dir.path());
        let path = dir.path().join(IMAGES_FILE);
        let contents = fs::read_to_string(&path).unwrap();
        let first_line = contents.lines().next().unwrap().to_string();
        fs::write(&path, format!("{contents}{first_line}\n")).unwrap();

        let err = load_corpus(dir.path()).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateImageId(_)));
    }

    #[test]
    fn empty_caption_file_warns_but_loads() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus_files(dir.path());
        fs::write(dir.path().join(CAPTIONS_FILE), "").unwrap();
        // Without captions the benchmark reference invariant cannot hold, so
        // drop the benchmark ids too.
        let splits_path = dir.path().join(SPLITS_FILE);
        let mut split: DatasetSplit =
            serde_json::from_str(&fs::read_to_string(&splits_path).unwrap()).unwrap();
        split.benchmark_ids.clear();
        split.declared_counts.2 = 0;
        fs::write(&splits_path, serde_json::to_string(&split).unwrap()).unwrap();

        let outcome = load_corpus(dir.path()).unwrap();
        assert!(outcome.corpus.captions.is_empty());
        assert!(outcome
            .warnings
            .iter()
            .any(|w| w.contains("no caption records")));
    }

    #[test]
    fn rejects_tampered_refusal_text() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus_files(dir.path());
        let path = dir.path().join(CAPTIONS_FILE);
        let contents = fs::read_to_string(&path).unwrap();
        let tampered: Vec<String> = contents
            .lines()
            .map(|line| {
                if line.contains("\"refusal\"") {
                    line.replace("\"This\"", "\"the\"")
                } else {
                    line.to_string()
                }
            })
            .collect();
        fs::write(&path, tampered.join("\n")).unwrap();

        let err = load_corpus(dir.path()).unwrap_err();
        assert!(matches!(err, CorpusError::BadRefusalText(_)));
    }
}
