//! Consolidation prompt rendering and tolerant parsing of its JSON payload.

use serde_json::{json, Map, Value};

use super::library::{PatternExample, ReformulationPattern};
use super::TrainingPair;
use crate::llm::{ChatMessage, ChatRequest};

pub const PAYLOAD_KEY: &str = "Consolidated Patterns";

const SYSTEM: &str = "You are QueryReformulationLLM, an intelligent assistant that identifies and \
updates abstract patterns that describe how queries are reformulated to improve retrieval \
effectiveness.";

const USER_TEMPLATE: &str = "Given a set of query reformulation pairs below and optional prior list \
of consolidated patterns, your objectives are:
1. Identify the transformation pattern(s) underlying each reformulation.
2. Consolidate the global pattern set by merging semantically similar strategies and refining \
their names and descriptions.

Query Reformulation Pairs: {query_pairs}

Consolidated Patterns: {existing_patterns}

Each extracted pattern should include a pattern name, an informative description, a generalized \
transformation rule, and representative examples.
Return the results of consolidated patterns:

{\"Consolidated Patterns\": [...]}";

const FORMAT_REMINDER: &str = "Your previous reply could not be used ({reason}). Reply with only a JSON \
object of the form {\"Consolidated Patterns\": [{\"name\": \"...\", \"description\": \"...\", \
\"rule\": \"...\", \"examples\": [{\"query\": \"...\", \"reformulation\": \"...\"}]}]} in which \
every pattern name is unique.";

pub(crate) fn render_pairs(pairs: &[TrainingPair]) -> String {
    let items: Vec<Value> = pairs
        .iter()
        .map(|p| json!({"query": p.query, "reformulation": p.reformulation}))
        .collect();
    Value::Array(items).to_string()
}

pub(crate) fn render_patterns(patterns: &[ReformulationPattern]) -> String {
    let items: Vec<Value> = patterns
        .iter()
        .map(|p| {
            json!({
                "name": p.name,
                "description": p.description,
                "rule": p.rule,
                "examples": p.examples.iter()
                    .map(|e| json!({"query": e.query, "reformulation": e.reformulation}))
                    .collect::<Vec<_>>(),
            })
        })
        .collect();
    Value::Array(items).to_string()
}

/// The consolidation request for one batch of pairs against the current
/// library.
pub fn consolidation_request(pairs: &[TrainingPair], existing: &[ReformulationPattern]) -> ChatRequest {
    let user = USER_TEMPLATE
        .replace("{query_pairs}", &render_pairs(pairs))
        .replace("{existing_patterns}", &render_patterns(existing));
    ChatRequest::new(vec![ChatMessage::system(SYSTEM), ChatMessage::user(user)])
}

/// The same request with a format reminder appended to the user turn.
pub fn with_format_reminder(request: &ChatRequest, reason: &str) -> ChatRequest {
    let mut retry = request.clone();
    if let Some(last) = retry.messages.last_mut() {
        last.content.push_str("\n\n");
        last.content.push_str(&FORMAT_REMINDER.replace("{reason}", reason));
    }
    retry
}

/// Returns the end offset (exclusive) of the balanced `{...}` object that
/// starts at `start`, honoring JSON string escapes.
fn balanced_end(text: &str, start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (offset, c) in text[start..].char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(start + offset + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// Finds the first balanced JSON object in `text` that has `key` at its top
/// level. Surrounding prose and code fences are ignored.
pub fn extract_json_object(text: &str, key: &str) -> Option<Map<String, Value>> {
    for (start, _) in text.match_indices('{') {
        let Some(end) = balanced_end(text, start) else {
            continue;
        };
        if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(&text[start..end]) {
            if map.contains_key(key) {
                return Some(map);
            }
        }
    }
    None
}

fn normalize_key(key: &str) -> String {
    key.chars()
        .filter(|c| c.is_alphanumeric())
        .collect::<String>()
        .to_lowercase()
}

fn field<'a>(obj: &'a Map<String, Value>, aliases: &[&str]) -> Option<&'a Value> {
    obj.iter()
        .find(|(k, _)| aliases.contains(&normalize_key(k).as_str()))
        .map(|(_, v)| v)
}

fn text_field(obj: &Map<String, Value>, aliases: &[&str]) -> String {
    match field(obj, aliases) {
        Some(Value::String(s)) => s.trim().to_owned(),
        Some(Value::Null) | None => String::new(),
        Some(other) => other.to_string(),
    }
}

const NAME_KEYS: &[&str] = &["name", "patternname", "pattern", "title"];
const DESCRIPTION_KEYS: &[&str] = &["description", "informativedescription"];
const RULE_KEYS: &[&str] = &[
    "rule",
    "transformationrule",
    "generalizedtransformationrule",
    "generalizedrule",
];
const EXAMPLE_KEYS: &[&str] = &["examples", "representativeexamples", "example"];
const QUERY_KEYS: &[&str] = &["query", "original", "originalquery", "input", "before"];
const REFORMULATION_KEYS: &[&str] = &[
    "reformulation",
    "reformulated",
    "reformulatedquery",
    "rewrite",
    "output",
    "after",
];

fn parse_example(value: &Value) -> Option<PatternExample> {
    match value {
        Value::Object(obj) => Some(PatternExample {
            query: text_field(obj, QUERY_KEYS),
            reformulation: text_field(obj, REFORMULATION_KEYS),
        }),
        Value::Array(items) if items.len() == 2 => Some(PatternExample {
            query: items[0].as_str()?.trim().to_owned(),
            reformulation: items[1].as_str()?.trim().to_owned(),
        }),
        Value::String(s) => {
            let split = ["→", "->", "=>"].iter().find_map(|sep| s.split_once(sep));
            Some(match split {
                Some((q, r)) => PatternExample {
                    query: q.trim().trim_matches('"').to_owned(),
                    reformulation: r.trim().trim_matches('"').to_owned(),
                },
                None => PatternExample {
                    query: s.trim().to_owned(),
                    reformulation: String::new(),
                },
            })
        }
        _ => None,
    }
}

/// Parses a consolidation reply into patterns (ids assigned in reply order).
/// Does not check name uniqueness.
pub fn parse_consolidated(text: &str) -> Result<Vec<ReformulationPattern>, String> {
    let payload =
        extract_json_object(text, PAYLOAD_KEY).ok_or_else(|| format!("no JSON object with key \"{PAYLOAD_KEY}\""))?;
    let Some(Value::Array(items)) = payload.get(PAYLOAD_KEY) else {
        return Err(format!("\"{PAYLOAD_KEY}\" is not a list"));
    };
    let mut patterns = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let Value::Object(obj) = item else {
            return Err(format!("pattern {i} is not an object"));
        };
        let name = text_field(obj, NAME_KEYS);
        if name.is_empty() {
            return Err(format!("pattern {i} has no name"));
        }
        let examples = match field(obj, EXAMPLE_KEYS) {
            Some(Value::Array(values)) => values.iter().filter_map(parse_example).collect(),
            Some(single) => parse_example(single).into_iter().collect(),
            None => Vec::new(),
        };
        patterns.push(ReformulationPattern {
            pattern_id: i,
            name,
            description: text_field(obj, DESCRIPTION_KEYS),
            rule: text_field(obj, RULE_KEYS),
            examples,
        });
    }
    if patterns.is_empty() {
        return Err("empty pattern list".into());
    }
    Ok(patterns)
}
