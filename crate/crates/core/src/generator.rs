//! Pattern-constrained rewriting through the gateway, and hybrid queries.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::RetrievalContext;
use crate::induction::ReformulationPattern;
use crate::llm::{ChatMessage, ChatRequest, GatewayError, LlmGateway};

pub const MAX_REPETITION: usize = 5;

/// Line that carries the original query in every generation prompt.
pub const ORIGINAL_QUERY_PREFIX: &str = "Original query: ";

const SYSTEM: &str = "You rewrite search queries. Rewrite the query applying exactly the named \
reformulation pattern, so that it retrieves more relevant documents. Output only the reformulated \
query.";

const EMPTY_REMINDER: &str = "Your reply was empty. Output only the reformulated query.";

#[derive(Debug, thiserror::Error)]
pub enum GeneratorError {
    #[error("repetition must be between 1 and {MAX_REPETITION}, got {0}")]
    InvalidRepetition(usize),
    #[error("generating a reformulation for `{query_id}`")]
    Gateway {
        query_id: String,
        #[source]
        source: GatewayError,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reformulation {
    pub query_id: String,
    pub pattern_id: usize,
    /// Single line, never empty.
    pub text: String,
    pub prompt_fingerprint: String,
    /// Set when the model gave nothing usable and the original query stands in.
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HybridQuery {
    pub text: String,
    pub repetition: usize,
}

/// `hook` is extra passage text (e.g. a generated pseudo-document) placed
/// ahead of the retrieved snippets.
pub fn build_generation_prompt<S>(
    query: &str,
    context: &RetrievalContext<S>,
    pattern: &ReformulationPattern,
    hook: Option<&str>,
) -> ChatRequest {
    let mut user = format!(
        "Pattern: {}\nDescription: {}\nRule: {}\n",
        pattern.name, pattern.description, pattern.rule
    );
    if let Some(example) = pattern.examples.first() {
        user.push_str(&format!(
            "Example: \"{}\" -> \"{}\"\n",
            example.query, example.reformulation
        ));
    }
    let hook = hook.map(str::trim).filter(|h| !h.is_empty());
    if hook.is_some() || !context.entries.is_empty() {
        user.push_str("\nContext passages:\n");
        if let Some(h) = hook {
            user.push_str(&format!("[0] {}\n", one_line(h)));
        }
        for (i, e) in context.entries.iter().enumerate() {
            user.push_str(&format!("[{}] {}\n", i + 1, one_line(&e.snippet)));
        }
    }
    user.push_str(&format!("\n{ORIGINAL_QUERY_PREFIX}{}\nReformulated query:", one_line(query)));
    ChatRequest::new(vec![ChatMessage::system(SYSTEM), ChatMessage::user(user)])
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

const QUOTE_PAIRS: &[(&str, &str)] = &[
    ("\"", "\""),
    ("'", "'"),
    ("`", "`"),
    ("\u{201c}", "\u{201d}"),
    ("\u{2018}", "\u{2019}"),
    ("**", "**"),
    ("*", "*"),
    ("_", "_"),
];

const LEAD_LABELS: &[&str] = &["reformulated query:", "reformulation:", "rewritten query:", "query:"];

/// Drops code fences, joins lines, strips answer labels and surrounding
/// quotes or emphasis.
pub fn clean_output(raw: &str) -> String {
    let kept: Vec<&str> = raw.lines().filter(|l| !l.trim_start().starts_with("```")).collect();
    let mut text = one_line(&kept.join(" "));
    loop {
        let before = text.clone();
        let lower = text.to_lowercase();
        if let Some(label) = LEAD_LABELS.iter().find(|l| lower.starts_with(*l)) {
            text = text[label.len()..].trim().to_owned();
        }
        for (open, close) in QUOTE_PAIRS {
            if text.len() >= open.len() + close.len() && text.starts_with(open) && text.ends_with(close) {
                text = text[open.len()..text.len() - close.len()].trim().to_owned();
            }
        }
        if text == before {
            return text;
        }
    }
}

/// Sends the prompt, re-asks once if the cleaned answer is empty, and
/// otherwise falls back to the original query.
pub fn generate_reformulation<S>(
    llm: &LlmGateway,
    query_id: &str,
    query: &str,
    context: &RetrievalContext<S>,
    pattern: &ReformulationPattern,
    hook: Option<&str>,
) -> Result<Reformulation, GeneratorError> {
    let request = build_generation_prompt(query, context, pattern, hook);
    let ask = |r: &ChatRequest| {
        llm.complete_text(r).map_err(|source| GeneratorError::Gateway {
            query_id: query_id.to_owned(),
            source,
        })
    };
    let mut text = clean_output(&ask(&request)?);
    if text.is_empty() {
        let mut retry = request.clone();
        retry.messages.push(ChatMessage::assistant(""));
        retry.messages.push(ChatMessage::user(EMPTY_REMINDER));
        text = clean_output(&ask(&retry)?);
    }
    let fallback = text.is_empty();
    if fallback {
        log::warn!("empty reformulation for `{query_id}`; using the original query");
        text = one_line(query);
    }
    Ok(Reformulation {
        query_id: query_id.to_owned(),
        pattern_id: pattern.pattern_id,
        text,
        prompt_fingerprint: request.fingerprint(),
        fallback,
    })
}

/// The original query `repetition` times, then the reformulation, joined by
/// single spaces.
pub fn compose_hybrid(query: &str, reformulation: &str, repetition: usize) -> Result<HybridQuery, GeneratorError> {
    if repetition == 0 || repetition > MAX_REPETITION {
        return Err(GeneratorError::InvalidRepetition(repetition));
    }
    let query = one_line(query);
    let mut parts: Vec<&str> = Vec::with_capacity(repetition + 1);
    for _ in 0..repetition {
        if !query.is_empty() {
            parts.push(&query);
        }
    }
    let reformulation = one_line(reformulation);
    if !reformulation.is_empty() {
        parts.push(&reformulation);
    }
    Ok(HybridQuery {
        text: parts.join(" "),
        repetition,
    })
}

/// One line of the reformulation log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReformulationRecord {
    pub query_id: String,
    pub pattern_id: usize,
    pub pattern_name: String,
    pub reformulation: String,
    pub hybrid_query: String,
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

pub fn write_records(records: &[ReformulationRecord], mut out: impl Write) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
