use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{EvalError, Result};

/// Chat-completions endpoint settings. The API key is read from the
/// environment variable named by `api_key_env`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub url: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout_secs: u64,
    /// Total attempts per image, including the first.
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub max_backoff_ms: u64,
    pub max_in_flight: usize,
    pub requests_per_second: Option<f64>,
}

pub const DEFAULT_API_KEY_ENV: &str = "SELFCROSS_VLM_API_KEY";

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            url: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            timeout_secs: 120,
            max_attempts: 5,
            backoff_ms: 500,
            max_backoff_ms: 30_000,
            max_in_flight: 4,
            requests_per_second: None,
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.max_attempts) {
            return Err(EvalError::Endpoint("max_attempts must be in 1..=5".into()));
        }
        if self.max_in_flight == 0 {
            return Err(EvalError::Endpoint("max_in_flight must be at least 1".into()));
        }
        if self.requests_per_second.is_some_and(|r| !(r > 0.0)) {
            return Err(EvalError::Endpoint("requests_per_second must be positive".into()));
        }
        Ok(())
    }

    /// Delay before retry number `retry` (1-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u64 << (retry.saturating_sub(1)).min(20);
        Duration::from_millis(self.backoff_ms.saturating_mul(factor).min(self.max_backoff_ms))
    }
}

#[derive(Clone, Debug)]
pub struct ImageInput {
    pub bytes: Vec<u8>,
    pub mime: &'static str,
}

impl ImageInput {
    pub fn data_url(&self) -> String {
        format!(
            "data:{};base64,{}",
            self.mime,
            base64::engine::general_purpose::STANDARD.encode(&self.bytes)
        )
    }
}

/// Image MIME type from a file extension, `None` for non-images.
pub fn image_mime(path: &std::path::Path) -> Option<&'static str> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    Some(match ext.as_str() {
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "webp" => "image/webp",
        "gif" => "image/gif",
        _ => return None,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RequestError {
    /// Credentials rejected; the whole batch stops.
    Auth(String),
    /// Worth retrying: timeouts, connection errors, 429 and 5xx.
    Transient(String),
    /// Permanent failure for this image.
    Rejected(String),
}

impl std::fmt::Display for RequestError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Auth(m) => write!(f, "authentication failed: {m}"),
            Self::Transient(m) => write!(f, "transient: {m}"),
            Self::Rejected(m) => write!(f, "rejected: {m}"),
        }
    }
}

/// A vision-language model answering a text prompt about one image.
pub trait VlmClient: Send + Sync {
    fn ask(&self, question: &str, image: &ImageInput) -> std::result::Result<String, RequestError>;
}

pub struct HttpVlmClient {
    config: EndpointConfig,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl HttpVlmClient {
    pub fn new(config: EndpointConfig) -> Result<Self> {
        config.validate()?;
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| EvalError::Endpoint(e.to_string()))?;
        Ok(Self { config, api_key, http })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }
}

impl VlmClient for HttpVlmClient {
    fn ask(&self, question: &str, image: &ImageInput) -> std::result::Result<String, RequestError> {
        let body = json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": question},
                    {"type": "image_url", "image_url": {"url": image.data_url()}},
                ],
            }],
        });
        let mut request = self
            .http
            .post(&self.config.url)
            .header("content-type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .body(body.to_string())
            .send()
            .map_err(|e| RequestError::Transient(e.to_string()))?;
        let status = response.status();
        let text = response.text().map_err(|e| RequestError::Transient(e.to_string()))?;
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(RequestError::Auth(format!("HTTP {status}")));
        }
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(RequestError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(RequestError::Rejected(format!(
                "HTTP {status}: {}",
                truncate(&text, 200)
            )));
        }
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| RequestError::Rejected(format!("response is not JSON: {e}")))?;
        message_text(&value).ok_or_else(|| RequestError::Rejected("response has no message content".into()))
    }
}

/// `choices[0].message.content`, either a string or a list of text parts.
fn message_text(value: &serde_json::Value) -> Option<String> {
    let content = value.pointer("/choices/0/message/content")?;
    match content {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Array(parts) => Some(
            parts
                .iter()
                .filter_map(|p| p.get("text").and_then(|t| t.as_str()))
                .collect::<Vec<_>>()
                .join(""),
        ),
        _ => None,
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_and_caps() {
        let c = EndpointConfig {
            backoff_ms: 100,
            max_backoff_ms: 350,
            ..Default::default()
        };
        let delays: Vec<u64> = (1..=4).map(|r| c.backoff(r).as_millis() as u64).collect();
        assert_eq!(delays, vec![100, 200, 350, 350]);
    }

    #[test]
    fn validation() {
        assert!(EndpointConfig::default().validate().is_ok());
        let c = EndpointConfig {
            max_attempts: 6,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn content_shapes() {
        let v = json!({"choices": [{"message": {"content": "1. True"}}]});
        assert_eq!(message_text(&v).unwrap(), "1. True");
        let v = json!({"choices": [{"message": {"content": [{"type": "text", "text": "a"}, {"text": "b"}]}}]});
        assert_eq!(message_text(&v).unwrap(), "ab");
        assert!(message_text(&json!({})).is_none());
    }

    #[test]
    fn mime_types() {
        assert_eq!(image_mime("x/a.PNG".as_ref()), Some("image/png"));
        assert_eq!(image_mime("a.txt".as_ref()), None);
        let img = ImageInput {
            bytes: vec![1, 2, 3],
            mime: "image/png",
        };
        assert_eq!(img.data_url(), "data:image/png;base64,AQID");
    }
}
