//! HTTP text-completion backend.
//!
//! Speaks the common chat-completion shape: POST a model name, an
//! instruction (system) message, a user message, temperature, and a token
//! cap; read the completion text back. Transient failures are retried with
//! exponential backoff before surfacing `BackendUnavailable`.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::PromptError;

/// One descriptor request: standing instruction plus the base caption.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DescriptorRequest {
    pub instruction: String,
    pub user_text: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl DescriptorRequest {
    pub fn new(
        instruction: String,
        user_text: String,
        temperature: f64,
        max_tokens: u32,
    ) -> Result<Self, PromptError> {
        if instruction.trim().is_empty() || user_text.trim().is_empty() {
            return Err(PromptError::Validation {
                what: "descriptor request".into(),
                message: "instruction and user text must be non-empty".into(),
            });
        }
        if temperature.is_nan() || temperature < 0.0 || max_tokens == 0 {
            return Err(PromptError::Validation {
                what: "descriptor request".into(),
                message: "temperature must be >= 0 and max_tokens >= 1".into(),
            });
        }
        Ok(DescriptorRequest {
            instruction,
            user_text,
            temperature,
            max_tokens,
        })
    }
}

/// A text-completion endpoint the enricher can call.
pub trait TextCompletion: Send + Sync {
    fn complete(&self, req: &DescriptorRequest) -> Result<String, PromptError>;
    fn id(&self) -> &str;
}

/// Transport settings for an HTTP completion endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextBackendConfig {
    pub url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token, if any.
    /// The token itself never appears in config files or flags.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_timeout_secs() -> u64 {
    60
}

fn default_max_attempts() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    500
}

pub struct HttpTextBackend {
    config: TextBackendConfig,
    bearer: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpTextBackend {
    pub fn new(config: TextBackendConfig) -> Result<Self, PromptError> {
        if config.max_attempts == 0 {
            return Err(PromptError::Validation {
                what: "text backend".into(),
                message: "max_attempts must be at least 1".into(),
            });
        }
        let bearer = match &config.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| PromptError::Validation {
                what: "text backend".into(),
                message: format!("environment variable {var} is not set"),
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| PromptError::Protocol(e.to_string()))?;
        Ok(HttpTextBackend {
            config,
            bearer,
            client,
        })
    }

    fn post_once(&self, req: &DescriptorRequest) -> Result<String, AttemptError> {
        let body = json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": req.instruction},
                {"role": "user", "content": req.user_text},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        let mut builder = self.client.post(&self.config.url).json(&body);
        if let Some(token) = &self.bearer {
            builder = builder.bearer_auth(token);
        }
        let response = builder.send().map_err(|e| AttemptError::Retryable(e.to_string()))?;
        let status = response.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(AttemptError::Retryable(format!("status {status}")));
        }
        if !status.is_success() {
            return Err(AttemptError::Fatal(format!("status {status}")));
        }
        let value: serde_json::Value = response
            .json()
            .map_err(|e| AttemptError::Protocol(format!("invalid JSON body: {e}")))?;
        extract_completion(&value)
            .ok_or_else(|| AttemptError::Protocol("no completion text in response".into()))
    }
}

enum AttemptError {
    Retryable(String),
    Fatal(String),
    Protocol(String),
}

/// Completion text from any of the common response shapes.
fn extract_completion(value: &serde_json::Value) -> Option<String> {
    let candidates = [
        value.pointer("/choices/0/message/content"),
        value.pointer("/choices/0/text"),
        value.get("completion"),
        value.get("text"),
    ];
    candidates
        .into_iter()
        .flatten()
        .find_map(|v| v.as_str())
        .map(str::to_string)
}

impl TextCompletion for HttpTextBackend {
    fn complete(&self, req: &DescriptorRequest) -> Result<String, PromptError> {
        let mut last = String::new();
        for attempt in 1..=self.config.max_attempts {
            match self.post_once(req) {
                Ok(text) => return Ok(text),
                Err(AttemptError::Protocol(message)) => return Err(PromptError::Protocol(message)),
                Err(AttemptError::Fatal(message)) => {
                    return Err(PromptError::BackendUnavailable { attempts: attempt, message })
                }
                Err(AttemptError::Retryable(message)) => {
                    log::warn!(
                        "text backend attempt {attempt}/{}: {message}",
                        self.config.max_attempts
                    );
                    last = message;
                    if attempt < self.config.max_attempts {
                        let delay = self.config.backoff_ms.saturating_mul(1 << (attempt - 1));
                        std::thread::sleep(Duration::from_millis(delay.min(10_000)));
                    }
                }
            }
        }
        Err(PromptError::BackendUnavailable {
            attempts: self.config.max_attempts,
            message: last,
        })
    }

    fn id(&self) -> &str {
        &self.config.url
    }
}
