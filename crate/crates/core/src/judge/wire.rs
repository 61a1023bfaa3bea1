//! External judge client: JSON-over-HTTP wire protocol, response
//! validation, and a bounded in-flight request pool.
//!
//! Reward integrity rule: a malformed response gets exactly one repair
//! retry and then a hard protocol error. No silent re-ranking; nothing that
//! is not a verified permutation ever reaches reward computation.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    build_rubric_prompt, CandidateRanker, CandidateSet, Choice, DimensionScore, JudgeError,
    JudgeRanking, PairwiseVerdict, PromptMode,
};
use crate::corpus::{CultureContext, ImageRecord};
use crate::seed::seeded_rng;

/// Environment variable holding the judge API key; never configured in files.
pub const JUDGE_API_KEY_ENV: &str = "JUDGE_API_KEY";

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("request timed out after {0} ms")]
    Timeout(u64),
    #[error("transport failure: {0}")]
    Http(String),
}

/// One judge request over the wire.
#[derive(Debug, Clone, Serialize)]
pub struct WireRequest {
    pub task_id: String,
    pub image_descriptor: Vec<String>,
    pub context: String,
    pub candidates: Vec<WireCandidate>,
    pub rubric: String,
    pub mode: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct WireCandidate {
    pub id: String,
    pub text: String,
}

/// Transport abstraction so protocol handling is testable without a server.
pub trait JudgeTransport: Send + Sync {
    fn send(&self, request: &WireRequest) -> Result<String, TransportError>;
}

#[derive(Debug, Clone)]
pub struct JudgeClientConfig {
    pub endpoint: String,
    pub timeout_ms: u64,
    /// Extra attempts after a transport failure (not a protocol failure).
    pub transport_retries: u32,
    /// Bounded in-flight request pool size for batch ranking.
    pub max_in_flight: usize,
}

impl Default for JudgeClientConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            timeout_ms: 30_000,
            transport_retries: 1,
            max_in_flight: 4,
        }
    }
}

/// HTTP POST transport; API key comes from `JUDGE_API_KEY` if set.
pub struct HttpTransport {
    endpoint: String,
    timeout: Duration,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(config: &JudgeClientConfig) -> Self {
        Self {
            endpoint: config.endpoint.clone(),
            timeout: Duration::from_millis(config.timeout_ms),
            api_key: std::env::var(JUDGE_API_KEY_ENV).ok(),
        }
    }
}

impl JudgeTransport for HttpTransport {
    fn send(&self, request: &WireRequest) -> Result<String, TransportError> {
        let mut call = ureq::post(&self.endpoint).timeout(self.timeout);
        if let Some(key) = &self.api_key {
            call = call.set("authorization", &format!("Bearer {key}"));
        }
        let response = call
            .send_json(serde_json::to_value(request).expect("request serializes"))
            .map_err(|e| TransportError::Http(e.to_string()))?;
        response
            .into_string()
            .map_err(|e| TransportError::Http(e.to_string()))
    }
}

/// Accept ids as JSON numbers or numeric strings.
fn parse_id(value: &serde_json::Value) -> Result<usize, String> {
    match value {
        serde_json::Value::Number(n) => n
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| format!("id {n} is not a non-negative integer")),
        serde_json::Value::String(s) => s
            .parse::<usize>()
            .map_err(|_| format!("id {s:?} is not an integer")),
        other => Err(format!("id {other} has the wrong type")),
    }
}

/// Parse and validate a ranking response: must contain each candidate id
/// exactly once. Rejects duplicates, out-of-range ids, and truncation.
pub fn parse_ranking_response(raw: &str, candidates: usize) -> Result<Vec<usize>, String> {
    let value: serde_json::Value =
        serde_json::from_str(raw.trim()).map_err(|e| format!("not valid JSON: {e}"))?;
    let array = match &value {
        serde_json::Value::Object(map) => map
            .get("ranking")
            .ok_or_else(|| "missing 'ranking' field".to_string())?,
        serde_json::Value::Array(_) => &value,
        _ => return Err("response is neither an object nor an array".to_string()),
    };
    let items = array
        .as_array()
        .ok_or_else(|| "'ranking' is not an array".to_string())?;
    if items.len() != candidates {
        return Err(format!(
            "expected {candidates} ids, got {}",
            items.len()
        ));
    }
    let mut ranking = Vec::with_capacity(candidates);
    let mut seen = vec![false; candidates];
    for item in items {
        let id = parse_id(item)?;
        if id >= candidates {
            return Err(format!("id {id} out of range 0..{candidates}"));
        }
        if seen[id] {
            return Err(format!("id {id} appears twice"));
        }
        seen[id] = true;
        ranking.push(id);
    }
    Ok(ranking)
}

fn parse_choice_response(raw: &str) -> Result<usize, String> {
    let value: serde_json::Value =
        serde_json::from_str(raw.trim()).map_err(|e| format!("not valid JSON: {e}"))?;
    let choice = value
        .get("choice")
        .ok_or_else(|| "missing 'choice' field".to_string())?;
    let id = parse_id(choice)?;
    if id > 1 {
        return Err(format!("choice {id} out of range 0..2"));
    }
    Ok(id)
}

#[derive(Deserialize)]
struct WireScores {
    ir: f64,
    cf: f64,
    sr: f64,
    ra: f64,
    hu: f64,
    cr: f64,
}

fn parse_scores_response(raw: &str, candidates: usize) -> Result<Vec<DimensionScore>, String> {
    #[derive(Deserialize)]
    struct ScoresEnvelope {
        scores: BTreeMap<String, WireScores>,
    }
    let envelope: ScoresEnvelope =
        serde_json::from_str(raw.trim()).map_err(|e| format!("not a scores object: {e}"))?;
    let mut out = Vec::with_capacity(candidates);
    for i in 0..candidates {
        let entry = envelope
            .scores
            .get(&i.to_string())
            .ok_or_else(|| format!("missing scores for candidate {i}"))?;
        let score = DimensionScore {
            ir: entry.ir,
            cf: entry.cf,
            sr: entry.sr,
            ra: entry.ra,
            hu: entry.hu,
            cr: entry.cr,
        };
        if !score.in_range() {
            return Err(format!("scores for candidate {i} outside [0, 10]"));
        }
        out.push(score);
    }
    Ok(out)
}

/// Client for an external LLM judge.
pub struct ExternalJudge<T: JudgeTransport> {
    transport: T,
    config: JudgeClientConfig,
}

impl<T: JudgeTransport> ExternalJudge<T> {
    pub fn new(transport: T, config: JudgeClientConfig) -> Self {
        Self { transport, config }
    }

    /// The underlying transport; tests use this to count requests.
    pub fn transport(&self) -> &T {
        &self.transport
    }

    fn send_with_retries(&self, request: &WireRequest) -> Result<String, JudgeError> {
        let mut last = None;
        for _ in 0..=self.config.transport_retries {
            match self.transport.send(request) {
                Ok(raw) => return Ok(raw),
                Err(e) => last = Some(e),
            }
        }
        Err(JudgeError::Unavailable(
            last.expect("at least one attempt was made"),
        ))
    }

    fn repair_request(&self, request: &WireRequest, reason: &str) -> WireRequest {
        let mut repaired = request.clone();
        repaired.task_id = format!("{}/repair", request.task_id);
        repaired.rubric = format!(
            "{}\nYour previous reply was rejected ({reason}). Follow the output \
instruction exactly.\n",
            request.rubric
        );
        repaired
    }

    fn ranking_request(&self, set: &CandidateSet, task_id: &str) -> WireRequest {
        let texts: Vec<String> = (0..=set.k())
            .map(|p| set.presented_text(p).join(" "))
            .collect();
        let rubric = build_rubric_prompt(&set.image, set.context, &texts, PromptMode::Ranking);
        WireRequest {
            task_id: task_id.to_string(),
            image_descriptor: set.image.descriptor_tokens.clone(),
            context: set.context.as_str().to_string(),
            candidates: texts
                .into_iter()
                .enumerate()
                .map(|(i, text)| WireCandidate {
                    id: i.to_string(),
                    text,
                })
                .collect(),
            rubric,
            mode: PromptMode::Ranking.as_str().to_string(),
        }
    }

    fn rank_with_task_id(
        &self,
        set: &CandidateSet,
        task_id: &str,
    ) -> Result<JudgeRanking, JudgeError> {
        let request = self.ranking_request(set, task_id);
        let candidates = set.k() + 1;
        let raw = self.send_with_retries(&request)?;
        match parse_ranking_response(&raw, candidates) {
            Ok(ranking) => JudgeRanking::from_presented(set, ranking),
            Err(reason) => {
                let repaired = self.repair_request(&request, &reason);
                let raw2 = self.send_with_retries(&repaired)?;
                match parse_ranking_response(&raw2, candidates) {
                    Ok(ranking) => JudgeRanking::from_presented(set, ranking),
                    Err(reason2) => Err(JudgeError::Protocol {
                        reason: reason2,
                        raw: raw2,
                    }),
                }
            }
        }
    }

    pub fn rank(&self, set: &CandidateSet) -> Result<JudgeRanking, JudgeError> {
        self.rank_with_task_id(set, &format!("rank/{}", set.image.image_id))
    }

    /// Rank many sets with at most `max_in_flight` concurrent requests.
    /// Results come back in input order regardless of completion order.
    pub fn rank_batch(&self, sets: &[CandidateSet]) -> Vec<Result<JudgeRanking, JudgeError>> {
        let pool = self.config.max_in_flight.max(1);
        let mut results: Vec<Option<Result<JudgeRanking, JudgeError>>> =
            (0..sets.len()).map(|_| None).collect();
        for chunk_start in (0..sets.len()).step_by(pool) {
            let chunk_end = (chunk_start + pool).min(sets.len());
            let outcomes = std::thread::scope(|scope| {
                let handles: Vec<_> = (chunk_start..chunk_end)
                    .map(|i| {
                        let set = &sets[i];
                        scope.spawn(move || (i, self.rank_with_task_id(set, &format!("batch/{i}"))))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("judge worker panicked"))
                    .collect::<Vec<_>>()
            });
            for (i, outcome) in outcomes {
                results[i] = Some(outcome);
            }
        }
        results
            .into_iter()
            .map(|r| r.expect("every slot filled"))
            .collect()
    }

    /// Pairwise comparison with randomized presentation; the verdict is
    /// mapped back to argument order before returning.
    pub fn pairwise(
        &self,
        image: &ImageRecord,
        context: CultureContext,
        caption_a: &[String],
        caption_b: &[String],
        seed: u64,
    ) -> Result<PairwiseVerdict, JudgeError> {
        if caption_a == caption_b {
            return Err(JudgeError::IdenticalPair);
        }
        use rand::Rng;
        let swap: bool = seeded_rng(seed).random();
        let (first, second) = if swap {
            (caption_b, caption_a)
        } else {
            (caption_a, caption_b)
        };
        let texts = vec![first.join(" "), second.join(" ")];
        let rubric = build_rubric_prompt(image, context, &texts, PromptMode::Pairwise);
        let request = WireRequest {
            task_id: format!("pairwise/{}", image.image_id),
            image_descriptor: image.descriptor_tokens.clone(),
            context: context.as_str().to_string(),
            candidates: texts
                .into_iter()
                .enumerate()
                .map(|(i, text)| WireCandidate {
                    id: i.to_string(),
                    text,
                })
                .collect(),
            rubric,
            mode: PromptMode::Pairwise.as_str().to_string(),
        };

        let raw = self.send_with_retries(&request)?;
        let presented = match parse_choice_response(&raw) {
            Ok(id) => id,
            Err(reason) => {
                let repaired = self.repair_request(&request, &reason);
                let raw2 = self.send_with_retries(&repaired)?;
                match parse_choice_response(&raw2) {
                    Ok(id) => id,
                    Err(reason2) => {
                        return Err(JudgeError::Protocol {
                            reason: reason2,
                            raw: raw2,
                        })
                    }
                }
            }
        };
        let original = if swap { 1 - presented } else { presented };
        Ok(PairwiseVerdict {
            chosen: if original == 0 {
                Choice::First
            } else {
                Choice::Second
            },
            raw_response: raw,
        })
    }

    /// Absolute per-dimension scores for a list of captions.
    pub fn score_absolute(
        &self,
        image: &ImageRecord,
        context: CultureContext,
        captions: &[Vec<String>],
    ) -> Result<Vec<DimensionScore>, JudgeError> {
        let texts: Vec<String> = captions.iter().map(|c| c.join(" ")).collect();
        let rubric = build_rubric_prompt(image, context, &texts, PromptMode::Absolute);
        let request = WireRequest {
            task_id: format!("absolute/{}", image.image_id),
            image_descriptor: image.descriptor_tokens.clone(),
            context: context.as_str().to_string(),
            candidates: texts
                .into_iter()
                .enumerate()
                .map(|(i, text)| WireCandidate {
                    id: i.to_string(),
                    text,
                })
                .collect(),
            rubric,
            mode: PromptMode::Absolute.as_str().to_string(),
        };
        let raw = self.send_with_retries(&request)?;
        match parse_scores_response(&raw, captions.len()) {
            Ok(scores) => Ok(scores),
            Err(reason) => {
                let repaired = self.repair_request(&request, &reason);
                let raw2 = self.send_with_retries(&repaired)?;
                parse_scores_response(&raw2, captions.len()).map_err(|reason2| {
                    JudgeError::Protocol {
                        reason: reason2,
                        raw: raw2,
                    }
                })
            }
        }
    }
}

impl<T: JudgeTransport> CandidateRanker for ExternalJudge<T> {
    fn rank_candidates(&self, set: &CandidateSet) -> Result<JudgeRanking, JudgeError> {
        self.rank(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CaptionRecord, CaptionRole};
    use crate::policy::SequenceSample;
    use crate::vocab::{Vocabulary, BOS, EOS};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    struct MockTransport {
        responses: Mutex<Vec<Result<String, TransportError>>>,
        sent: Mutex<Vec<WireRequest>>,
        in_flight: AtomicUsize,
        high_water: AtomicUsize,
    }

    impl MockTransport {
        fn new(responses: Vec<Result<String, TransportError>>) -> Self {
            Self {
                responses: Mutex::new(responses),
                sent: Mutex::new(Vec::new()),
                in_flight: AtomicUsize::new(0),
                high_water: AtomicUsize::new(0),
            }
        }

        fn sends(&self) -> usize {
            self.sent.lock().unwrap().len()
        }
    }

    impl JudgeTransport for MockTransport {
        fn send(&self, request: &WireRequest) -> Result<String, TransportError> {
            let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            self.high_water.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(std::time::Duration::from_millis(2));
            self.sent.lock().unwrap().push(request.clone());
            let response = self.responses.lock().unwrap().remove(0);
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            response
        }
    }

    fn test_vocab() -> Vocabulary {
        let mut tokens = vec![BOS.to_string(), EOS.to_string()];
        tokens.extend((0..14).map(|i| format!("t{i}")));
        Vocabulary::new(tokens).unwrap()
    }

    fn test_set(k: usize) -> CandidateSet {
        let vocab = test_vocab();
        let image = ImageRecord {
            image_id: "img".into(),
            descriptor_tokens: vec!["t0".into(), "t1".into(), "t2".into()],
            source_uri: None,
        };
        let rollouts: Vec<SequenceSample> = (0..k)
            .map(|i| SequenceSample {
                tokens: vec![2 + (i % 4), 3],
                logprob: -1.0,
                per_token_logprobs: vec![-0.5, -0.5],
            })
            .collect();
        let reference = CaptionRecord {
            image_id: "img".into(),
            context: CultureContext::Western,
            text: vec!["t0".into(), "t1".into()],
            role: CaptionRole::Reference,
        };
        CandidateSet::new(
            image,
            CultureContext::Western,
            rollouts,
            &vocab,
            reference,
            11,
        )
        .unwrap()
    }

    fn client(
        responses: Vec<Result<String, TransportError>>,
        max_in_flight: usize,
    ) -> ExternalJudge<MockTransport> {
        ExternalJudge::new(
            MockTransport::new(responses),
            JudgeClientConfig {
                endpoint: "mock".into(),
                timeout_ms: 100,
                transport_retries: 0,
                max_in_flight,
            },
        )
    }

    #[test]
    fn accepts_valid_ranking_in_both_id_forms() {
        let set = test_set(3);
        let judge = client(vec![Ok("{\"ranking\": [3, 1, 0, 2]}".into())], 4);
        let ranking = judge.rank(&set).unwrap();
        assert_eq!(ranking.ranking, vec![3, 1, 0, 2]);

        let judge = client(
            vec![Ok("{\"ranking\": [\"2\", \"0\", \"1\", \"3\"]}".into())],
            4,
        );
        let ranking = judge.rank(&set).unwrap();
        assert_eq!(ranking.ranking, vec![2, 0, 1, 3]);
    }

    #[test]
    fn duplicate_index_fails_after_exactly_one_repair_retry() {
        let set = test_set(3);
        let judge = client(
            vec![
                Ok("[2, 0, 1, 1]".into()),
                Ok("[2, 0, 1, 1]".into()),
            ],
            4,
        );
        let err = judge.rank(&set).unwrap_err();
        assert!(matches!(err, JudgeError::Protocol { .. }));
        assert_eq!(judge.transport.sends(), 2);
        let sent = judge.transport.sent.lock().unwrap();
        assert!(sent[1].task_id.ends_with("/repair"));
        assert!(sent[1].rubric.contains("previous reply was rejected"));
    }

    #[test]
    fn repair_retry_can_recover() {
        let set = test_set(3);
        let judge = client(
            vec![
                Ok("sure! here is my ranking: 2,0,1,3".into()),
                Ok("{\"ranking\": [2, 0, 1, 3]}".into()),
            ],
            4,
        );
        let ranking = judge.rank(&set).unwrap();
        assert_eq!(ranking.ranking, vec![2, 0, 1, 3]);
        assert_eq!(judge.transport.sends(), 2);
    }

    #[test]
    fn malformed_shapes_are_all_rejected() {
        let candidates = 4;
        let cases = [
            "[2, 0, 1, 1]",                  // duplicate
            "[2, 0, 1, 9]",                  // out of range
            "[2, 0, 1]",                     // truncated
            "[2, 0, 1, 3, 2]",               // too long
            "{\"ranking\": [-1, 0, 1, 2]}",  // negative
            "{\"ranking\": \"2013\"}",       // wrong type
            "{\"order\": [2, 0, 1, 3]}",     // wrong field
            "{\"ranking\": [2.5, 0, 1, 3]}", // non-integer
            "not json at all",
            "",
        ];
        for raw in cases {
            assert!(
                parse_ranking_response(raw, candidates).is_err(),
                "{raw:?} was accepted"
            );
        }
    }

    #[test]
    fn transport_failure_maps_to_unavailable() {
        let set = test_set(3);
        let judge = client(vec![Err(TransportError::Timeout(100))], 4);
        let err = judge.rank(&set).unwrap_err();
        assert!(matches!(err, JudgeError::Unavailable(_)));
    }

    #[test]
    fn transport_retries_then_succeeds() {
        let set = test_set(3);
        let transport = MockTransport::new(vec![
            Err(TransportError::Timeout(100)),
            Ok("{\"ranking\": [0, 1, 2, 3]}".into()),
        ]);
        let judge = ExternalJudge::new(
            transport,
            JudgeClientConfig {
                endpoint: "mock".into(),
                timeout_ms: 100,
                transport_retries: 1,
                max_in_flight: 4,
            },
        );
        assert!(judge.rank(&set).is_ok());
        assert_eq!(judge.transport.sends(), 2);
    }

    #[test]
    fn batch_respects_in_flight_bound_and_input_order() {
        let sets: Vec<CandidateSet> = (0..10).map(|_| test_set(3)).collect();
        let responses: Vec<Result<String, TransportError>> = (0..10)
            .map(|_| Ok("{\"ranking\": [0, 1, 2, 3]}".to_string()))
            .collect();
        let judge = client(responses, 3);
        let results = judge.rank_batch(&sets);
        assert_eq!(results.len(), 10);
        assert!(results.iter().all(|r| r.is_ok()));
        assert!(judge.transport.high_water.load(Ordering::SeqCst) <= 3);
        // Correlation ids cover every input exactly once.
        let sent = judge.transport.sent.lock().unwrap();
        let mut ids: Vec<String> = sent.iter().map(|r| r.task_id.clone()).collect();
        ids.sort();
        let mut expected: Vec<String> = (0..10).map(|i| format!("batch/{i}")).collect();
        expected.sort();
        assert_eq!(ids, expected);
    }

    #[test]
    fn pairwise_derandomizes_the_presented_choice() {
        let image = ImageRecord {
            image_id: "img".into(),
            descriptor_tokens: vec!["t0".into()],
            source_uri: None,
        };
        let a = vec!["t0".to_string()];
        let b = vec!["t1".to_string()];
        // Find seeds that present in each order, then check that a mock who
        // always picks presented index 0 yields opposite de-randomized
        // verdicts.
        use rand::Rng;
        let mut seed_noswap = None;
        let mut seed_swap = None;
        for seed in 0..64u64 {
            let swap: bool = seeded_rng(seed).random();
            if swap && seed_swap.is_none() {
                seed_swap = Some(seed);
            }
            if !swap && seed_noswap.is_none() {
                seed_noswap = Some(seed);
            }
        }
        let judge = client(vec![Ok("{\"choice\": 0}".into())], 4);
        let verdict = judge
            .pairwise(&image, CultureContext::None, &a, &b, seed_noswap.unwrap())
            .unwrap();
        assert_eq!(verdict.chosen, Choice::First);

        let judge = client(vec![Ok("{\"choice\": 0}".into())], 4);
        let verdict = judge
            .pairwise(&image, CultureContext::None, &a, &b, seed_swap.unwrap())
            .unwrap();
        assert_eq!(verdict.chosen, Choice::Second);
    }

    #[test]
    fn absolute_scores_parse_and_validate() {
        let image = ImageRecord {
            image_id: "img".into(),
            descriptor_tokens: vec!["t0".into()],
            source_uri: None,
        };
        let captions = vec![vec!["t0".to_string()], vec!["t1".to_string()]];
        let ok = "{\"scores\": {\"0\": {\"ir\": 9, \"cf\": 5, \"sr\": 6, \"ra\": 8, \"hu\": 4, \
\"cr\": 7}, \"1\": {\"ir\": 1, \"cf\": 2, \"sr\": 3, \"ra\": 4, \"hu\": 5, \"cr\": 6}}}";
        let judge = client(vec![Ok(ok.into())], 4);
        let scores = judge
            .score_absolute(&image, CultureContext::Western, &captions)
            .unwrap();
        assert_eq!(scores.len(), 2);
        assert_eq!(scores[0].ir, 9.0);

        let out_of_range = ok.replace("\"ir\": 9", "\"ir\": 11");
        let judge = client(vec![Ok(out_of_range.clone()), Ok(out_of_range)], 4);
        assert!(matches!(
            judge.score_absolute(&image, CultureContext::Western, &captions),
            Err(JudgeError::Protocol { .. })
        ));
    }
}
