use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, GatewayError, Usage};

/// Canned responses keyed by request fingerprint.
///
/// The optional `fallback` template answers any unscripted request. It may
/// contain these placeholders:
///
/// * `{fingerprint}`: the request fingerprint
/// * `{last_user}`: content of the last user message
/// * `{after:PREFIX}`: rest of the first line of the last user message that
///   starts with `PREFIX` (empty if there is none)
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub entries: BTreeMap<String, String>,
    #[serde(default)]
    pub fallback: Option<String>,
}

impl MockScript {
    pub fn with_fallback(template: impl Into<String>) -> Self {
        Self {
            entries: BTreeMap::new(),
            fallback: Some(template.into()),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("reading mock script {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| GatewayError::Config(format!("parsing mock script {}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(self).expect("script serializes");
        std::fs::write(path, json + "\n")
    }

    /// Scripts `content` as the answer to `request`.
    pub fn insert(&mut self, request: &ChatRequest, content: impl Into<String>) {
        self.entries.insert(request.fingerprint(), content.into());
    }

    pub fn lookup(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let fingerprint = request.fingerprint();
        if let Some(content) = self.entries.get(&fingerprint) {
            return Ok(content.clone());
        }
        match &self.fallback {
            Some(template) => Ok(render(template, request, &fingerprint)),
            None => Err(BackendError::ScriptGap(fingerprint)),
        }
    }
}

fn render(template: &str, request: &ChatRequest, fingerprint: &str) -> String {
    let last_user = request.last_user().unwrap_or("");
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        let Some(close) = tail.find('}') else {
            out.push_str(tail);
            return out;
        };
        let key = &tail[1..close];
        match key {
            "fingerprint" => out.push_str(fingerprint),
            "last_user" => out.push_str(last_user),
            _ if key.starts_with("after:") => {
                let prefix = &key["after:".len()..];
                if let Some(line) = last_user.lines().find(|l| l.starts_with(prefix)) {
                    out.push_str(&line[prefix.len()..]);
                }
            }
            _ => out.push_str(&tail[..=close]),
        }
        rest = &tail[close + 1..];
    }
    out.push_str(rest);
    out
}

/// Deterministic offline backend.
#[derive(Clone, Debug, Default)]
pub struct MockBackend {
    script: MockScript,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        Self { script }
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }
}

fn word_count(text: &str) -> u32 {
    text.split_whitespace().count().try_into().unwrap_or(u32::MAX)
}

impl ChatBackend for MockBackend {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let content = self.script.lookup(request)?;
        let prompt_tokens = request.messages.iter().map(|m| word_count(&m.content)).sum();
        Ok(ChatResponse {
            usage: Usage {
                prompt_tokens,
                completion_tokens: word_count(&content),
            },
            content,
            finish_reason: "stop".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ChatMessage, LlmGateway};

    fn req(user: &str) -> ChatRequest {
        ChatRequest::new(vec![ChatMessage::system("sys"), ChatMessage::user(user)])
    }

    #[test]
    fn scripted_lookup() {
        let mut script = MockScript::default();
        let r = req("which pattern?");
        script.insert(&r, "Clarify Intent");
        let gw = LlmGateway::mock(script);
        assert_eq!(gw.complete_chat(&r).unwrap().content, "Clarify Intent");
    }

    #[test]
    fn identical_requests_identical_responses() {
        let gw = LlmGateway::mock(MockScript::with_fallback("echo {last_user}"));
        let a = gw.complete_chat(&req("x")).unwrap();
        let b = gw.complete_chat(&req("x")).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn miss_names_fingerprint() {
        let gw = LlmGateway::mock(MockScript::default());
        let r = req("unscripted");
        match gw.complete_chat(&r) {
            Err(GatewayError::ScriptGap { fingerprint }) => assert_eq!(fingerprint, r.fingerprint()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn template_placeholders() {
        let r = req("Pattern: X\nOriginal query: cheap flights\nend");
        let script = MockScript::with_fallback("[{after:Original query: }] {unknown} {");
        assert_eq!(script.lookup(&r).unwrap(), "[cheap flights] {unknown} {");
        let script = MockScript::with_fallback("{fingerprint}");
        assert_eq!(script.lookup(&r).unwrap(), r.fingerprint());
        let script = MockScript::with_fallback("{after:Missing: }");
        assert_eq!(script.lookup(&r).unwrap(), "");
    }

    #[test]
    fn script_file_format() {
        let json = r#"{"entries": {"abc": "hello"}, "fallback": null}"#;
        let script: MockScript = serde_json::from_str(json).unwrap();
        assert_eq!(script.entries["abc"], "hello");
        assert!(script.fallback.is_none());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.json");
        script.save(&path).unwrap();
        assert_eq!(MockScript::load(&path).unwrap(), script);
    }
}
