//! Image generation backends.
//!
//! `ImageBackend::generate` performs exactly one attempt and returns
//! encoded PNG bytes; the orchestrator owns the retry loop so manifest
//! entries can record true attempt counts. Two implementations: an HTTP
//! client for txt2img-style servers, and a hermetic in-process mock whose
//! pixels are a documented pure function of (prompt digest, seed,
//! dimensions).

use std::collections::HashMap;
use std::io::Cursor;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::digest::short_hash;
use crate::seed::mix64;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("image backend unavailable: {message}")]
    Unavailable { message: String, retryable: bool },
    #[error("image backend protocol error: {0}")]
    Protocol(String),
    #[error("invalid image response: {0}")]
    Validation(String),
}

/// One txt2img request.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ImageRequest {
    pub prompt: String,
    #[serde(default)]
    pub negative_prompt: String,
    pub width: u32,
    pub height: u32,
    pub steps: u32,
    pub guidance: f64,
    pub seed: u64,
}

impl ImageRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.prompt.trim().is_empty() {
            return Err(BackendError::Validation("prompt must be non-empty".into()));
        }
        if self.width == 0
            || self.height == 0
            || !self.width.is_multiple_of(8)
            || !self.height.is_multiple_of(8)
        {
            return Err(BackendError::Validation(format!(
                "dimensions {}x{} must be positive multiples of 8",
                self.width, self.height
            )));
        }
        if self.steps < 1 {
            return Err(BackendError::Validation("steps must be at least 1".into()));
        }
        if self.guidance.is_nan() || self.guidance <= 0.0 {
            return Err(BackendError::Validation("guidance must be positive".into()));
        }
        Ok(())
    }
}

/// Request-shaping defaults carried in the backend descriptor.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GenerationParams {
    #[serde(default = "default_side")]
    pub width: u32,
    #[serde(default = "default_side")]
    pub height: u32,
    #[serde(default = "default_steps")]
    pub steps: u32,
    #[serde(default = "default_guidance")]
    pub guidance: f64,
    #[serde(default)]
    pub negative_prompt: String,
}

fn default_side() -> u32 {
    512
}

fn default_steps() -> u32 {
    30
}

fn default_guidance() -> f64 {
    7.5
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            width: default_side(),
            height: default_side(),
            steps: default_steps(),
            guidance: default_guidance(),
            negative_prompt: String::new(),
        }
    }
}

impl GenerationParams {
    pub fn request(&self, prompt: String, seed: u64) -> ImageRequest {
        ImageRequest {
            prompt,
            negative_prompt: self.negative_prompt.clone(),
            width: self.width,
            height: self.height,
            steps: self.steps,
            guidance: self.guidance,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct RetryPolicy {
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_max_attempts() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    250
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: default_max_attempts(),
            backoff_ms: default_backoff_ms(),
        }
    }
}

/// A txt2img endpoint. `generate` is one attempt; retries are the caller's.
pub trait ImageBackend: Send + Sync {
    fn generate(&self, req: &ImageRequest) -> Result<Vec<u8>, BackendError>;
    fn id(&self) -> &str;
    fn retry(&self) -> RetryPolicy;
}

// ---------------------------------------------------------------------------
// Mock backend

/// Scripted failure for hermetic fault testing, keyed by request seed.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct FailRule {
    pub seed: u64,
    /// Fail this many attempts before succeeding.
    #[serde(default)]
    pub times: u32,
    /// Fail every attempt, forever.
    #[serde(default)]
    pub permanent: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct MockConfig {
    #[serde(default)]
    pub latency_ms: u64,
    #[serde(default)]
    pub fail: Vec<FailRule>,
}

/// Deterministic in-process backend.
///
/// Pixel content: with `h = first 8 bytes of sha256(prompt)` and
/// `s = mix64(h ^ seed)`, pixel (x, y) takes the low three bytes of
/// `mix64(s ^ (y * width + x))` as RGB. Same (prompt, seed, dimensions)
/// always yields byte-identical PNGs.
pub struct MockImageBackend {
    config: MockConfig,
    attempts_by_seed: Mutex<HashMap<u64, u32>>,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

impl MockImageBackend {
    pub fn new(config: MockConfig) -> Self {
        MockImageBackend {
            config,
            attempts_by_seed: Mutex::new(HashMap::new()),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
        }
    }

    /// Highest number of concurrent `generate` calls observed.
    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn render(req: &ImageRequest) -> Vec<u8> {
        let state = mix64(short_hash(&req.prompt) ^ req.seed);
        let img = image::RgbImage::from_fn(req.width, req.height, |x, y| {
            let v = mix64(state ^ (y as u64 * req.width as u64 + x as u64));
            image::Rgb([v as u8, (v >> 8) as u8, (v >> 16) as u8])
        });
        let mut bytes = Cursor::new(Vec::new());
        image::DynamicImage::ImageRgb8(img)
            .write_to(&mut bytes, image::ImageFormat::Png)
            .expect("in-memory PNG encoding");
        bytes.into_inner()
    }
}

impl ImageBackend for MockImageBackend {
    fn generate(&self, req: &ImageRequest) -> Result<Vec<u8>, BackendError> {
        req.validate()?;
        let current = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(current, Ordering::SeqCst);
        let result = (|| {
            if self.config.latency_ms > 0 {
                std::thread::sleep(Duration::from_millis(self.config.latency_ms));
            }
            if let Some(rule) = self.config.fail.iter().find(|r| r.seed == req.seed) {
                let mut attempts = self.attempts_by_seed.lock().unwrap();
                let seen = attempts.entry(req.seed).or_insert(0);
                *seen += 1;
                if rule.permanent || *seen <= rule.times {
                    return Err(BackendError::Unavailable {
                        message: format!("scripted failure for seed {}", req.seed),
                        retryable: true,
                    });
                }
            }
            Ok(Self::render(req))
        })();
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }

    fn id(&self) -> &str {
        "mock"
    }

    fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: 3,
            backoff_ms: 1,
        }
    }
}

// ---------------------------------------------------------------------------
// HTTP backend

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpImageConfig {
    pub url: String,
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_image_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_image_timeout() -> u64 {
    120
}

pub struct HttpImageBackend {
    config: HttpImageConfig,
    bearer: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpImageBackend {
    pub fn new(config: HttpImageConfig) -> Result<Self, BackendError> {
        let bearer = match &config.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::Validation(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        Ok(HttpImageBackend {
            config,
            bearer,
            client,
        })
    }

    /// Image bytes from a response, content-negotiated: raw bytes for
    /// `image/*` or octet-stream, a base64 field for JSON bodies, or a
    /// bare base64 string for text bodies.
    fn decode_body(content_type: &str, body: &[u8]) -> Result<Vec<u8>, BackendError> {
        if content_type.starts_with("image/") || content_type.starts_with("application/octet-stream") {
            return Ok(body.to_vec());
        }
        let text = std::str::from_utf8(body)
            .map_err(|_| BackendError::Protocol("non-UTF-8 body for a text content type".into()))?;
        let encoded = if content_type.starts_with("application/json") {
            let value: serde_json::Value = serde_json::from_str(text)
                .map_err(|e| BackendError::Protocol(format!("invalid JSON body: {e}")))?;
            let field = [
                value.pointer("/images/0"),
                value.get("image"),
                value.pointer("/data/0/b64_json"),
            ]
            .into_iter()
            .flatten()
            .find_map(|v| v.as_str().map(str::to_string));
            field.ok_or_else(|| BackendError::Protocol("no image field in JSON response".into()))?
        } else {
            text.trim().to_string()
        };
        base64_decode(&encoded).map_err(|e| BackendError::Protocol(format!("invalid base64 image: {e}")))
    }
}

fn base64_decode(text: &str) -> Result<Vec<u8>, base64::DecodeError> {
    use base64::Engine;
    base64::engine::general_purpose::STANDARD.decode(text.trim())
}

impl ImageBackend for HttpImageBackend {
    fn generate(&self, req: &ImageRequest) -> Result<Vec<u8>, BackendError> {
        req.validate()?;
        let body = json!({
            "prompt": req.prompt,
            "negative_prompt": req.negative_prompt,
            "width": req.width,
            "height": req.height,
            "steps": req.steps,
            "guidance": req.guidance,
            "seed": req.seed,
        });
        let mut builder = self.client.post(&self.config.url).json(&body);
        if let Some(token) = &self.bearer {
            builder = builder.bearer_auth(token);
        }
        let response = builder.send().map_err(|e| BackendError::Unavailable {
            message: e.to_string(),
            retryable: true,
        })?;
        let status = response.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(BackendError::Unavailable {
                message: format!("status {status}"),
                retryable: true,
            });
        }
        if !status.is_success() {
            return Err(BackendError::Unavailable {
                message: format!("status {status}"),
                retryable: false,
            });
        }
        let content_type = response
            .headers()
            .get("content-type")
            .and_then(|v| v.to_str().ok())
            .unwrap_or("application/octet-stream")
            .to_string();
        let body = response
            .bytes()
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        let raw = Self::decode_body(&content_type, &body)?;
        let decoded = image::load_from_memory(&raw)
            .map_err(|e| BackendError::Protocol(format!("undecodable image payload: {e}")))?;
        if decoded.width() != req.width || decoded.height() != req.height {
            return Err(BackendError::Validation(format!(
                "backend returned {}x{}, requested {}x{}",
                decoded.width(),
                decoded.height(),
                req.width,
                req.height
            )));
        }
        // normalize to PNG regardless of the wire format
        let mut png = Cursor::new(Vec::new());
        decoded
            .write_to(&mut png, image::ImageFormat::Png)
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        Ok(png.into_inner())
    }

    fn id(&self) -> &str {
        &self.config.url
    }

    fn retry(&self) -> RetryPolicy {
        self.config.retry
    }
}

// ---------------------------------------------------------------------------
// Descriptor files

/// Parsed backend descriptor: `{"kind": "mock", ...}` or
/// `{"kind": "http", "url": ...}` plus optional `"generation"` defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImageBackendKind {
    Mock(MockConfig),
    Http(HttpImageConfig),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageBackendSpec {
    #[serde(flatten)]
    pub kind: ImageBackendKind,
    #[serde(default)]
    pub generation: GenerationParams,
}

impl ImageBackendSpec {
    pub fn mock() -> Self {
        ImageBackendSpec {
            kind: ImageBackendKind::Mock(MockConfig::default()),
            generation: GenerationParams::default(),
        }
    }

    /// `"mock"` literal, or a path to a descriptor JSON file.
    pub fn from_arg(arg: &str) -> Result<Self, BackendError> {
        if arg == "mock" {
            return Ok(Self::mock());
        }
        let text = std::fs::read_to_string(Path::new(arg))
            .map_err(|e| BackendError::Validation(format!("{arg}: {e}")))?;
        serde_json::from_str(&text).map_err(|e| BackendError::Validation(format!("{arg}: {e}")))
    }

    pub fn build(&self) -> Result<Box<dyn ImageBackend>, BackendError> {
        match &self.kind {
            ImageBackendKind::Mock(config) => Ok(Box::new(MockImageBackend::new(config.clone()))),
            ImageBackendKind::Http(config) => Ok(Box::new(HttpImageBackend::new(config.clone())?)),
        }
    }
}
