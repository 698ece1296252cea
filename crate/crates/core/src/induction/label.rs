//! The pair → pattern assignment, computed as a separate LLM pass over an
//! already consolidated library.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::library::PatternLibrary;
use super::{InductionError, TrainingPair};
use crate::llm::{ChatMessage, ChatRequest, LlmGateway};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternLabel {
    pub pair_id: String,
    pub pattern_id: usize,
}

const SYSTEM: &str = "You classify query reformulations. Given an original search query, a \
reformulation of it that retrieves better results, and a list of reformulation patterns, answer \
with the name of the single pattern that best explains the change. Output only the pattern name.";

pub fn label_request(pair: &TrainingPair, library: &PatternLibrary) -> ChatRequest {
    let mut user = String::from("Patterns:\n");
    for p in &library.patterns {
        user.push_str(&format!("- {}: {}\n", p.name, p.description));
    }
    user.push_str(&format!(
        "\nOriginal query: {}\nReformulation: {}\n\nPattern name:",
        pair.query, pair.reformulation
    ));
    ChatRequest::new(vec![ChatMessage::system(SYSTEM), ChatMessage::user(user)])
}

fn reask_request(first: &ChatRequest, answer: &str, library: &PatternLibrary) -> ChatRequest {
    let mut retry = first.clone();
    retry.messages.push(ChatMessage::assistant(answer));
    retry.messages.push(ChatMessage::user(format!(
        "\"{}\" is not one of the listed patterns. Answer with exactly one of: {}.",
        answer.trim(),
        library.names().join(", ")
    )));
    retry
}

/// Assigns one pattern to `pair`. A single-pattern library needs no call.
pub fn label_pair(
    pair: &TrainingPair,
    library: &PatternLibrary,
    llm: &LlmGateway,
) -> Result<PatternLabel, InductionError> {
    if library.is_empty() {
        return Err(InductionError::InvalidLibrary("library has no patterns".into()));
    }
    let labeled = |pattern_id| PatternLabel {
        pair_id: pair.pair_id.clone(),
        pattern_id,
    };
    if library.len() == 1 {
        return Ok(labeled(0));
    }
    let ask = |request: &ChatRequest| {
        llm.complete_text(request).map_err(|source| InductionError::Gateway {
            context: format!("labeling pair `{}`", pair.pair_id),
            source,
        })
    };
    let first = label_request(pair, library);
    let answer = ask(&first)?;
    if let Some(id) = library.resolve(&answer) {
        return Ok(labeled(id));
    }
    let second = ask(&reask_request(&first, &answer, library))?;
    library.resolve(&second).map(labeled).ok_or_else(|| InductionError::UnknownPattern {
        pair_id: pair.pair_id.clone(),
        answer: second.trim().to_owned(),
        valid: library.names().into_iter().map(str::to_owned).collect(),
    })
}

/// Labels every pair, in input order. Calls run in parallel under the
/// gateway's in-flight cap. Any failure aborts with a per-pair report.
pub fn label_pairs(
    pairs: &[TrainingPair],
    library: &PatternLibrary,
    llm: &LlmGateway,
) -> Result<Vec<PatternLabel>, InductionError> {
    let results: Vec<Result<PatternLabel, InductionError>> =
        pairs.par_iter().map(|p| label_pair(p, library, llm)).collect();
    let mut labels = Vec::with_capacity(pairs.len());
    let mut failures = Vec::new();
    for (pair, result) in pairs.iter().zip(results) {
        match result {
            Ok(label) => labels.push(label),
            Err(e) => failures.push((pair.pair_id.clone(), e.to_string())),
        }
    }
    if failures.is_empty() {
        Ok(labels)
    } else {
        Err(InductionError::LabelingFailed(failures))
    }
}

/// Writes `pair_id<TAB>pattern_id` lines.
pub fn write_labels(path: impl AsRef<Path>, labels: &[PatternLabel]) -> Result<(), InductionError> {
    let path = path.as_ref();
    let io_err = |source| InductionError::Io {
        path: path.to_owned(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    for label in labels {
        writeln!(out, "{}\t{}", label.pair_id, label.pattern_id).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Reads a labels file, checking every id against `num_patterns`.
pub fn read_labels(path: impl AsRef<Path>, num_patterns: usize) -> Result<Vec<PatternLabel>, InductionError> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path).map_err(|source| InductionError::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut labels = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: &str| InductionError::MalformedLine {
            path: path.to_owned(),
            line: i + 1,
            message: message.to_owned(),
        };
        let (pair_id, id) = line.split_once('\t').ok_or_else(|| malformed("expected `pair_id<TAB>pattern_id`"))?;
        let pattern_id: usize = id.trim().parse().map_err(|_| malformed("pattern_id is not an integer"))?;
        if pattern_id >= num_patterns {
            return Err(InductionError::LabelOutOfRange {
                pair_id: pair_id.to_owned(),
                pattern_id,
                num_patterns,
            });
        }
        labels.push(PatternLabel {
            pair_id: pair_id.to_owned(),
            pattern_id,
        });
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::induction::{Provenance, ReformulationPattern};
    use crate::llm::MockScript;

    fn pair() -> TrainingPair {
        TrainingPair::new("p1", "nurse salary", "average salary of a nurse in california 2020")
    }

    #[test]
    fn singleton_library_short_circuits() {
        let lib = PatternLibrary::new(
            vec![ReformulationPattern {
                pattern_id: 0,
                name: "Only".into(),
                description: String::new(),
                rule: String::new(),
                examples: vec![],
            }],
            Provenance::default(),
            16,
        )
        .unwrap();
        let gw = LlmGateway::mock(MockScript::with_fallback("something else entirely"));
        assert_eq!(label_pair(&pair(), &lib, &gw).unwrap().pattern_id, 0);
    }

    #[test]
    fn lowercase_answer_resolves() {
        let lib = PatternLibrary::reference();
        let mut script = MockScript::default();
        script.insert(&label_request(&pair(), &lib), "clarify intent");
        let label = label_pair(&pair(), &lib, &LlmGateway::mock(script)).unwrap();
        assert_eq!(label.pattern_id, 0);
    }

    #[test]
    fn reask_recovers() {
        let lib = PatternLibrary::reference();
        let first = label_request(&pair(), &lib);
        let mut script = MockScript::default();
        script.insert(&first, "Time Stuff");
        script.insert(&reask_request(&first, "Time Stuff", &lib), "Temporal Adjustment");
        let label = label_pair(&pair(), &lib, &LlmGateway::mock(script)).unwrap();
        assert_eq!(label.pattern_id, 9);
    }

    #[test]
    fn unknown_twice_lists_valid_names() {
        let lib = PatternLibrary::reference();
        let gw = LlmGateway::mock(MockScript::with_fallback("Unknown Strategy"));
        match label_pair(&pair(), &lib, &gw) {
            Err(InductionError::UnknownPattern { valid, answer, .. }) => {
                assert_eq!(valid.len(), 10);
                assert_eq!(answer, "Unknown Strategy");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn batch_reports_failures_per_pair() {
        let lib = PatternLibrary::reference();
        let good = TrainingPair::new("good", "a", "b");
        let bad = TrainingPair::new("bad", "c", "d");
        let mut script = MockScript::default();
        script.insert(&label_request(&good, &lib), "Generalization");
        let gw = LlmGateway::mock(script);
        match label_pairs(&[good.clone(), bad], &lib, &gw) {
            Err(InductionError::LabelingFailed(failures)) => {
                assert_eq!(failures.len(), 1);
                assert_eq!(failures[0].0, "bad");
            }
            other => panic!("unexpected {other:?}"),
        }
        let labels = label_pairs(&[good], &lib, &gw).unwrap();
        assert_eq!(labels[0].pattern_id, 5);
    }

    #[test]
    fn labels_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.tsv");
        let labels = vec![
            PatternLabel { pair_id: "a".into(), pattern_id: 3 },
            PatternLabel { pair_id: "b".into(), pattern_id: 0 },
        ];
        write_labels(&path, &labels).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "a\t3\nb\t0\n");
        assert_eq!(read_labels(&path, 10).unwrap(), labels);
        assert!(matches!(read_labels(&path, 3), Err(InductionError::LabelOutOfRange { .. })));
    }
}
