//! OpenAI-compatible `POST /v1/chat/completions` backend.

use std::time::Duration;

use serde::Deserialize;
use ureq::Agent;

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, Usage};

pub struct OpenAiBackend {
    url: String,
    api_key: Option<String>,
    agent: Agent,
}

impl std::fmt::Debug for OpenAiBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpenAiBackend")
            .field("url", &self.url)
            .field("api_key", &self.api_key.as_ref().map(|_| "***"))
            .finish()
    }
}

/// Accepts either a base URL (`http://host:8000` or `http://host:8000/v1`)
/// or the full completions endpoint.
pub(crate) fn completions_url(base: &str) -> String {
    let base = base.trim_end_matches('/');
    if base.ends_with("/chat/completions") {
        base.to_owned()
    } else if base.ends_with("/v1") {
        format!("{base}/chat/completions")
    } else {
        format!("{base}/v1/chat/completions")
    }
}

impl OpenAiBackend {
    pub fn new(url: &str, api_key: Option<String>) -> Self {
        Self::with_timeout(url, api_key, Duration::from_secs(120))
    }

    pub fn with_timeout(url: &str, api_key: Option<String>, timeout: Duration) -> Self {
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            url: completions_url(url),
            api_key: api_key.filter(|k| !k.is_empty()),
            agent,
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u32,
    #[serde(default)]
    completion_tokens: u32,
}

pub(crate) fn parse_response(body: &str) -> Result<ChatResponse, BackendError> {
    let wire: WireResponse =
        serde_json::from_str(body).map_err(|e| BackendError::Protocol(format!("{e}: {}", excerpt(body))))?;
    let choice = wire
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
    let finish_reason = choice.finish_reason.unwrap_or_else(|| "stop".into());
    let content = match choice.message.content {
        Some(c) => c,
        None if finish_reason == "stop" => {
            return Err(BackendError::Protocol("stop response without content".into()))
        }
        None => String::new(),
    };
    let usage = wire.usage.map_or(Usage::default(), |u| Usage {
        prompt_tokens: u.prompt_tokens,
        completion_tokens: u.completion_tokens,
    });
    Ok(ChatResponse {
        content,
        finish_reason,
        usage,
    })
}

fn excerpt(body: &str) -> String {
    body.chars().take(200).collect()
}

fn classify_status(status: u16, body: &str) -> BackendError {
    let msg = format!("HTTP {status}: {}", excerpt(body));
    if status == 408 || status == 429 || status >= 500 {
        BackendError::Transient(msg)
    } else {
        BackendError::Fatal(msg)
    }
}

impl ChatBackend for OpenAiBackend {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let mut call = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let body = serde_json::to_string(request).expect("request serializes");
        let mut response = match call.send(body.as_bytes()) {
            Ok(r) => r,
            Err(ureq::Error::BadUri(uri)) => return Err(BackendError::Fatal(format!("bad URI {uri}"))),
            Err(e) => return Err(BackendError::Transient(e.to_string())),
        };
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transient(format!("reading body: {e}")))?;
        if !(200..300).contains(&status) {
            return Err(classify_status(status, &text));
        }
        parse_response(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn url_forms() {
        assert_eq!(completions_url("http://h:8000"), "http://h:8000/v1/chat/completions");
        assert_eq!(completions_url("http://h:8000/v1/"), "http://h:8000/v1/chat/completions");
        assert_eq!(
            completions_url("http://h/v1/chat/completions"),
            "http://h/v1/chat/completions"
        );
    }

    #[test]
    fn parses_standard_body() {
        let body = r#"{"id":"x","choices":[{"index":0,"message":{"role":"assistant","content":"hi"},"finish_reason":"stop"}],"usage":{"prompt_tokens":5,"completion_tokens":1,"total_tokens":6}}"#;
        let r = parse_response(body).unwrap();
        assert_eq!(r.content, "hi");
        assert_eq!(r.usage.prompt_tokens, 5);
    }

    #[test]
    fn malformed_bodies() {
        assert!(matches!(parse_response("not json"), Err(BackendError::Protocol(_))));
        assert!(matches!(parse_response(r#"{"choices":[]}"#), Err(BackendError::Protocol(_))));
        assert!(matches!(
            parse_response(r#"{"choices":[{"message":{"content":null},"finish_reason":"stop"}]}"#),
            Err(BackendError::Protocol(_))
        ));
    }

    #[test]
    fn status_classes() {
        assert!(matches!(classify_status(429, ""), BackendError::Transient(_)));
        assert!(matches!(classify_status(503, ""), BackendError::Transient(_)));
        assert!(matches!(classify_status(401, ""), BackendError::Fatal(_)));
    }
}
