//! Chat backends: the wire contract for remote models, the deterministic
//! rulebook mock, and the retry wrapper.
//!
//! The HTTP contract is a single POST of `{model, messages[{role, content}],
//! temperature, max_tokens}` to the endpoint's chat-completions path; the
//! reply is the first choice's message content. See `docs/FORMAT.md` for the
//! field-by-field description and the rulebook file format.

use std::fs;
use std::path::Path;
use std::time::Duration;

use serde_json::json;

use super::{BackendProfile, ChatMessage, Role};
use crate::error::{Error, Result};
use crate::hashing::sha256_hex;
use crate::orchestrator::{with_retries, RetryPolicy};

/// Environment variable holding the bearer token for HTTP backends.
pub const API_KEY_ENV: &str = "CLEAR_API_KEY";

/// Default reply of a rulebook mock when no pattern matches.
pub const MOCK_FALLBACK: &str = "noop";

pub trait ChatBackend: Send + Sync {
    /// Produce the assistant reply for the given message history.
    fn complete(&self, messages: &[ChatMessage]) -> Result<String>;

    /// Stable digest of the backend configuration, used to prove the
    /// execution agent stays frozen across training.
    fn fingerprint(&self) -> String;
}

fn validate_messages(messages: &[ChatMessage]) -> Result<()> {
    let first = messages
        .first()
        .ok_or_else(|| Error::InvalidArgument("message list is empty".to_string()))?;
    if !matches!(first.role, Role::System | Role::User) {
        return Err(Error::InvalidArgument(
            "first message must be system or user".to_string(),
        ));
    }
    Ok(())
}

/// Remote chat-completions backend.
pub struct HttpBackend {
    profile: BackendProfile,
    url: String,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(profile: BackendProfile) -> Result<Self> {
        profile.validate()?;
        let base = profile.endpoint.trim_end_matches('/');
        let url = if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/v1/chat/completions")
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(profile.timeout_ms)))
            .http_status_as_error(true)
            .build()
            .new_agent();
        Ok(HttpBackend {
            profile,
            url,
            agent,
        })
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
        validate_messages(messages)?;
        let body = json!({
            "model": self.profile.model_name,
            "messages": messages
                .iter()
                .map(|m| json!({"role": m.role.as_str(), "content": m.content}))
                .collect::<Vec<_>>(),
            "temperature": self.profile.temperature,
            "max_tokens": self.profile.max_output_tokens,
        });
        let mut request = self.agent.post(&self.url);
        if let Ok(key) = std::env::var(API_KEY_ENV) {
            request = request.header("authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(&body)
            .map_err(|e| Error::transient(format!("POST {}: {e}", self.url)))?;
        let parsed: serde_json::Value = response
            .body_mut()
            .read_json()
            .map_err(|e| Error::permanent(format!("malformed response body: {e}")))?;
        parsed
            .pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| {
                Error::permanent("response has no choices[0].message.content".to_string())
            })
    }

    fn fingerprint(&self) -> String {
        sha256_hex(
            format!(
                "http|{}|{}|{}|{}",
                self.url,
                self.profile.model_name,
                self.profile.temperature,
                self.profile.max_output_tokens
            )
            .as_bytes(),
        )
    }
}

/// Deterministic mock: responds with the rule whose pattern is the longest
/// substring match against the most recent user or tool message.
pub struct MockRulebook {
    rules: Vec<(String, String)>,
    fallback: String,
    label: String,
}

impl MockRulebook {
    pub fn new(rules: Vec<(String, String)>) -> Self {
        MockRulebook {
            rules,
            fallback: MOCK_FALLBACK.to_string(),
            label: "inline".to_string(),
        }
    }

    pub fn with_fallback(mut self, fallback: impl Into<String>) -> Self {
        self.fallback = fallback.into();
        self
    }

    /// Load a rulebook from a plain text file: one `pattern => response`
    /// per line, `#` comments ignored, `\n`/`\t`/`\\` escapes expanded.
    /// A `@fallback => text` line overrides the unmatched-reply default.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read rulebook {}: {e}", path.display())))?;
        let mut rules = Vec::new();
        let mut fallback = MOCK_FALLBACK.to_string();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (pattern, response) = line.split_once(" => ").ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected `pattern => response`",
                    path.display(),
                    no + 1
                ))
            })?;
            let pattern = unescape(pattern);
            let response = unescape(response);
            if pattern == "@fallback" {
                fallback = response;
            } else {
                rules.push((pattern, response));
            }
        }
        Ok(MockRulebook {
            rules,
            fallback,
            label: path.display().to_string(),
        })
    }
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some('t') => out.push('\t'),
                Some('\\') => out.push('\\'),
                Some(other) => {
                    out.push('\\');
                    out.push(other);
                }
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

impl ChatBackend for MockRulebook {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
        validate_messages(messages)?;
        // The latest environment-side input: observations arrive as tool
        // messages after the initial user turn.
        let probe = messages
            .iter()
            .rev()
            .find(|m| matches!(m.role, Role::User | Role::Tool))
            .map(|m| m.content.as_str())
            .unwrap_or("");
        let best = self
            .rules
            .iter()
            .filter(|(pattern, _)| probe.contains(pattern.as_str()))
            .max_by_key(|(pattern, _)| pattern.len());
        Ok(match best {
            Some((_, response)) => response.clone(),
            None => self.fallback.clone(),
        })
    }

    fn fingerprint(&self) -> String {
        let mut content = String::new();
        for (p, r) in &self.rules {
            content.push_str(p);
            content.push('\x1f');
            content.push_str(r);
            content.push('\x1e');
        }
        content.push_str(&self.fallback);
        sha256_hex(format!("mock|{}|{content}", self.label).as_bytes())
    }
}

/// Retries transient failures with exponential backoff; permanent failures
/// surface immediately.
pub struct RetryingBackend {
    inner: Box<dyn ChatBackend>,
    policy: RetryPolicy,
}

impl RetryingBackend {
    pub fn new(inner: Box<dyn ChatBackend>, policy: RetryPolicy) -> Self {
        RetryingBackend { inner, policy }
    }
}

impl ChatBackend for RetryingBackend {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
        with_retries(&self.policy, || self.inner.complete(messages)).map(|outcome| outcome.value)
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }
}

/// Build the backend a profile describes, wrapped in its retry policy.
pub fn backend_for_profile(profile: &BackendProfile) -> Result<Box<dyn ChatBackend>> {
    let inner: Box<dyn ChatBackend> = if let Some(path) = profile.endpoint.strip_prefix("mock:") {
        Box::new(MockRulebook::from_file(path)?)
    } else if let Some(name) = profile.endpoint.strip_prefix("scripted:") {
        crate::scripted::by_name(name)?
    } else {
        Box::new(HttpBackend::new(profile.clone())?)
    };
    Ok(Box::new(RetryingBackend::new(inner, profile.retry.clone())))
}
