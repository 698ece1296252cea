//! Pattern induction: ingest (query, reformulation) pairs, consolidate a
//! pattern library with iterative LLM calls, and label each pair with one
//! pattern.

mod label;
mod library;
pub mod prompt;

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::llm::{ChatRequest, GatewayError, LlmGateway};

pub use label::{label_pair, label_pairs, label_request, read_labels, write_labels, PatternLabel};
pub use library::{
    PatternExample, PatternLibrary, Provenance, ReformulationPattern, DEFAULT_MAX_PATTERNS,
};

pub const DEFAULT_BATCH_SIZE: usize = 50;

#[derive(Debug, thiserror::Error)]
pub enum InductionError {
    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    MalformedLine {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("duplicate pair_id `{0}`")]
    DuplicatePairId(String),
    #[error("no training pairs")]
    NoPairs,
    #[error("batch_size must be at least 1")]
    InvalidBatchSize,
    #[error("invalid library file: {0}")]
    LibraryFormat(String),
    #[error("invalid library: {0}")]
    InvalidLibrary(String),
    #[error(
        "consolidation produced {found} patterns, more than the cap of {max}; \
         lower the batch size or raise the pattern cap"
    )]
    TooManyPatterns { found: usize, max: usize },
    #[error("batch {batch}: unusable consolidation reply ({reason}); raw reply: {raw}")]
    Unparseable {
        batch: usize,
        reason: String,
        raw: String,
    },
    #[error("{context}")]
    Gateway {
        context: String,
        source: GatewayError,
    },
    #[error("pair `{pair_id}`: `{answer}` is not a pattern name; valid names: {}", valid.join(", "))]
    UnknownPattern {
        pair_id: String,
        answer: String,
        valid: Vec<String>,
    },
    #[error("labeling failed for {} pair(s): {}", .0.len(), summarize(.0))]
    LabelingFailed(Vec<(String, String)>),
    #[error("label for `{pair_id}` references pattern {pattern_id}, library has {num_patterns}")]
    LabelOutOfRange {
        pair_id: String,
        pattern_id: usize,
        num_patterns: usize,
    },
}

fn summarize(failures: &[(String, String)]) -> String {
    failures
        .iter()
        .map(|(id, e)| format!("[{id}] {e}"))
        .collect::<Vec<_>>()
        .join("; ")
}

/// A query and an empirically stronger reformulation of it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub pair_id: String,
    pub query: String,
    pub reformulation: String,
}

impl TrainingPair {
    pub fn new(pair_id: impl Into<String>, query: impl Into<String>, reformulation: impl Into<String>) -> Self {
        Self {
            pair_id: pair_id.into(),
            query: query.into(),
            reformulation: reformulation.into(),
        }
    }
}

/// Reads `pair_id<TAB>query<TAB>reformulation` lines in file order. Blank
/// lines are skipped.
pub fn ingest_pairs(path: impl AsRef<Path>) -> Result<Vec<TrainingPair>, InductionError> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path).map_err(|source| InductionError::Io {
        path: path.to_owned(),
        source,
    })?;
    let malformed = |line: usize, message: &str| InductionError::MalformedLine {
        path: path.to_owned(),
        line,
        message: message.to_owned(),
    };
    let mut seen = HashSet::new();
    let mut pairs = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(malformed(
                i + 1,
                &format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let (pair_id, query, reformulation) = (fields[0].trim(), fields[1].trim(), fields[2].trim());
        if pair_id.is_empty() {
            return Err(malformed(i + 1, "empty pair_id"));
        }
        if query.is_empty() {
            return Err(malformed(i + 1, "empty query"));
        }
        if reformulation.is_empty() {
            return Err(malformed(i + 1, "empty reformulation"));
        }
        if query == reformulation {
            return Err(malformed(i + 1, "reformulation equals query"));
        }
        if !seen.insert(pair_id.to_owned()) {
            return Err(InductionError::DuplicatePairId(pair_id.to_owned()));
        }
        pairs.push(TrainingPair::new(pair_id, query, reformulation));
    }
    Ok(pairs)
}

/// Seeded shuffle followed by a prefix take of `n` pairs.
pub fn sample_pairs(pairs: &[TrainingPair], n: usize, seed: u64) -> Vec<TrainingPair> {
    let mut shuffled = pairs.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    shuffled.truncate(n);
    shuffled
}

/// One request/response exchange made during induction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub batch: usize,
    pub attempt: usize,
    pub fingerprint: String,
    pub request: ChatRequest,
    pub response: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), InductionError> {
        let path = path.as_ref();
        let io_err = |source| InductionError::Io {
            path: path.to_owned(),
            source,
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        for entry in &self.entries {
            let line = serde_json::to_string(entry).expect("transcript serializes");
            writeln!(out, "{line}").map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InductionOptions {
    pub batch_size: usize,
    pub max_patterns: usize,
    pub source_dataset: String,
}

impl Default for InductionOptions {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            max_patterns: DEFAULT_MAX_PATTERNS,
            source_dataset: String::new(),
        }
    }
}

/// Why a consolidation reply was not accepted.
fn check_reply(text: &str) -> Result<Vec<ReformulationPattern>, String> {
    let patterns = prompt::parse_consolidated(text)?;
    let mut seen = HashSet::new();
    for p in &patterns {
        if !seen.insert(p.name.trim().to_lowercase()) {
            return Err(format!("duplicate pattern name \"{}\"", p.name));
        }
    }
    Ok(patterns)
}

/// Runs the consolidation loop: each batch of pairs is sent together with
/// the current library, and the reply replaces the working library.
///
/// Every exchange is appended to `transcript`, including the ones made before
/// a failure.
pub fn induce_patterns(
    pairs: &[TrainingPair],
    llm: &LlmGateway,
    options: &InductionOptions,
    existing: Option<&PatternLibrary>,
    transcript: &mut Transcript,
) -> Result<PatternLibrary, InductionError> {
    if pairs.is_empty() {
        return Err(InductionError::NoPairs);
    }
    if options.batch_size == 0 {
        return Err(InductionError::InvalidBatchSize);
    }
    let mut working: Vec<ReformulationPattern> = existing.map(|l| l.patterns.clone()).unwrap_or_default();

    for (batch, chunk) in pairs.chunks(options.batch_size).enumerate() {
        let request = prompt::consolidation_request(chunk, &working);
        let mut attempt_request = request.clone();
        let mut accepted = None;
        for attempt in 0..2 {
            let reply = llm
                .complete_text(&attempt_request)
                .map_err(|source| InductionError::Gateway {
                    context: format!("consolidation batch {batch}"),
                    source,
                })?;
            transcript.entries.push(TranscriptEntry {
                batch,
                attempt,
                fingerprint: attempt_request.fingerprint(),
                request: attempt_request.clone(),
                response: reply.clone(),
            });
            match check_reply(&reply) {
                Ok(patterns) => {
                    accepted = Some(patterns);
                    break;
                }
                Err(reason) if attempt == 0 => {
                    log::warn!("batch {batch}: {reason}; re-asking");
                    attempt_request = prompt::with_format_reminder(&request, &reason);
                }
                Err(reason) => {
                    return Err(InductionError::Unparseable {
                        batch,
                        reason,
                        raw: reply,
                    })
                }
            }
        }
        let patterns = accepted.expect("loop either accepts or returns");
        if patterns.len() > options.max_patterns {
            return Err(InductionError::TooManyPatterns {
                found: patterns.len(),
                max: options.max_patterns,
            });
        }
        working = patterns;
    }

    let prior_pairs = existing.map_or(0, |l| l.provenance.num_pairs);
    let provenance = Provenance {
        source_dataset: options.source_dataset.clone(),
        num_pairs: prior_pairs + pairs.len(),
        induction_model: llm.model().to_owned(),
        config_hash: None,
    };
    PatternLibrary::new(working, provenance, options.max_patterns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::MockScript;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn ingest_in_order() {
        let f = write_tmp("p1\ta\tb\np2\tc\td e\n\np3\tf\tg\n");
        let pairs = ingest_pairs(f.path()).unwrap();
        let ids: Vec<_> = pairs.iter().map(|p| p.pair_id.as_str()).collect();
        assert_eq!(ids, ["p1", "p2", "p3"]);
        assert_eq!(pairs[1].reformulation, "d e");
    }

    #[test]
    fn ingest_rejects_empty_reformulation_with_line() {
        let f = write_tmp("p1\ta\tb\np2\tc\t\n");
        match ingest_pairs(f.path()) {
            Err(InductionError::MalformedLine { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("reformulation"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ingest_rejects_bad_rows() {
        assert!(matches!(
            ingest_pairs(write_tmp("p1\ta\n").path()),
            Err(InductionError::MalformedLine { line: 1, .. })
        ));
        assert!(matches!(
            ingest_pairs(write_tmp("p1\ta\ta\n").path()),
            Err(InductionError::MalformedLine { line: 1, .. })
        ));
        assert!(matches!(
            ingest_pairs(write_tmp("p1\ta\tb\np1\tc\td\n").path()),
            Err(InductionError::DuplicatePairId(_))
        ));
    }

    #[test]
    fn seeded_sampling() {
        let pairs: Vec<_> = (0..20)
            .map(|i| TrainingPair::new(format!("p{i}"), format!("q{i}"), format!("r{i}")))
            .collect();
        let a = sample_pairs(&pairs, 2, 7);
        let b = sample_pairs(&pairs, 2, 7);
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert_eq!(sample_pairs(&pairs, 100, 1).len(), 20);
    }

    fn payload(names: &[&str]) -> String {
        let items: Vec<_> = names
            .iter()
            .map(|n| serde_json::json!({"name": n, "description": "d", "rule": "r", "examples": []}))
            .collect();
        serde_json::json!({ "Consolidated Patterns": items }).to_string()
    }

    fn pairs(n: usize) -> Vec<TrainingPair> {
        (0..n)
            .map(|i| TrainingPair::new(format!("p{i}"), format!("q{i}"), format!("r{i}")))
            .collect()
    }

    #[test]
    fn batches_thread_library_through() {
        // batch 0 sees the empty prior, batch 1 sees batch 0's output
        let mut script = MockScript::default();
        let all = pairs(3);
        let first = prompt::consolidation_request(&all[..2], &[]);
        script.insert(&first, payload(&["A", "B"]));
        let lib_after_first = prompt::parse_consolidated(&payload(&["A", "B"])).unwrap();
        let second = prompt::consolidation_request(&all[2..], &lib_after_first);
        script.insert(&second, format!("Here you go: {}", payload(&["A", "B", "C"])));
        let gw = LlmGateway::mock(script).with_model("mock-model");
        let opts = InductionOptions {
            batch_size: 2,
            ..Default::default()
        };
        let mut transcript = Transcript::default();
        let lib = induce_patterns(&all, &gw, &opts, None, &mut transcript).unwrap();
        assert_eq!(lib.names(), ["A", "B", "C"]);
        assert_eq!(transcript.entries.len(), 2);
        assert_eq!(lib.provenance.num_pairs, 3);
        assert_eq!(lib.provenance.induction_model, "mock-model");
    }

    #[test]
    fn reask_then_accept() {
        let all = pairs(1);
        let first = prompt::consolidation_request(&all, &[]);
        let mut script = MockScript::default();
        script.insert(&first, "I cannot comply");
        let retry = prompt::with_format_reminder(&first, "no JSON object with key \"Consolidated Patterns\"");
        script.insert(&retry, payload(&["Only"]));
        let gw = LlmGateway::mock(script);
        let mut transcript = Transcript::default();
        let lib = induce_patterns(&all, &gw, &InductionOptions::default(), None, &mut transcript).unwrap();
        assert_eq!(lib.names(), ["Only"]);
        assert_eq!(transcript.entries.len(), 2);
        assert_eq!(transcript.entries[1].attempt, 1);
    }

    #[test]
    fn duplicate_names_fail_after_reask() {
        let gw = LlmGateway::mock(MockScript::with_fallback(payload(&["Same", "same"])));
        let mut transcript = Transcript::default();
        let err = induce_patterns(&pairs(2), &gw, &InductionOptions::default(), None, &mut transcript)
            .unwrap_err();
        match err {
            InductionError::Unparseable { reason, raw, .. } => {
                assert!(reason.contains("duplicate"));
                assert!(raw.contains("Same"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(transcript.entries.len(), 2);
    }

    #[test]
    fn too_many_patterns() {
        let names: Vec<String> = (0..5).map(|i| format!("P{i}")).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let gw = LlmGateway::mock(MockScript::with_fallback(payload(&names)));
        let opts = InductionOptions {
            max_patterns: 4,
            ..Default::default()
        };
        let err = induce_patterns(&pairs(1), &gw, &opts, None, &mut Transcript::default()).unwrap_err();
        assert!(matches!(err, InductionError::TooManyPatterns { found: 5, max: 4 }));
        assert!(err.to_string().contains("batch size"));
    }

    #[test]
    fn input_checks() {
        let gw = LlmGateway::mock(MockScript::default());
        let mut t = Transcript::default();
        assert!(matches!(
            induce_patterns(&[], &gw, &InductionOptions::default(), None, &mut t),
            Err(InductionError::NoPairs)
        ));
        let opts = InductionOptions {
            batch_size: 0,
            ..Default::default()
        };
        assert!(matches!(
            induce_patterns(&pairs(1), &gw, &opts, None, &mut t),
            Err(InductionError::InvalidBatchSize)
        ));
    }

    #[test]
    fn existing_library_seeds_prompt() {
        let existing = PatternLibrary::reference();
        let all = pairs(1);
        let req = prompt::consolidation_request(&all, &existing.patterns);
        assert!(req.last_user().unwrap().contains("\"name\":\"Temporal Adjustment\""));
        let mut script = MockScript::default();
        script.insert(&req, payload(&["Merged"]));
        let lib = induce_patterns(
            &all,
            &LlmGateway::mock(script),
            &InductionOptions::default(),
            Some(&existing),
            &mut Transcript::default(),
        )
        .unwrap();
        assert_eq!(lib.names(), ["Merged"]);
        assert_eq!(lib.provenance.num_pairs, 10_001);
    }
}
