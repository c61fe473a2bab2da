//! Chat-completions / embeddings client for any OpenAI-compatible endpoint.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::sync::Mutex;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::Deserialize;
use serde_json::json;
use tracing::{debug, warn};

use super::{ChatRequest, GatewayError, LlmBackend, LlmConfig};

const MAX_BACKOFF: Duration = Duration::from_secs(30);

pub struct HttpBackend {
    client: Client,
    base_url: String,
    api_key: Option<String>,
    max_retries: u32,
    retry_base_delay: Duration,
    audit: Option<Mutex<File>>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f32>,
}

impl HttpBackend {
    pub fn new(config: &LlmConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let client = Client::builder()
            .timeout(Duration::from_secs_f64(config.request_timeout_secs))
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let api_key = std::env::var(&config.api_key_ref).ok().filter(|k| !k.is_empty());
        if api_key.is_none() {
            warn!(variable = %config.api_key_ref, "no API key in environment; sending unauthenticated requests");
        }
        let audit = match &config.audit_log {
            Some(path) => Some(Mutex::new(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| GatewayError::Transport(format!("cannot open audit log: {e}")))?,
            )),
            None => None,
        };
        Ok(Self {
            client,
            base_url: config.endpoint_url.trim_end_matches('/').to_string(),
            api_key,
            max_retries: config.max_retries,
            retry_base_delay: Duration::from_millis(config.retry_base_delay_ms),
            audit,
        })
    }

    fn audit(&self, url: &str, request: &serde_json::Value, status: Option<u16>, response: &str) {
        let Some(file) = &self.audit else { return };
        let entry = json!({
            "at": chrono::Utc::now().to_rfc3339(),
            "url": url,
            "authorization": self.api_key.as_ref().map(|_| "Bearer ***"),
            "request": request,
            "status": status,
            "response": response,
        });
        let mut f = file.lock().unwrap_or_else(|p| p.into_inner());
        if let Err(e) = writeln!(f, "{entry}") {
            warn!(error = %e, "failed to write LLM audit log");
        }
    }

    fn backoff(&self, attempt: u32, retry_after: Option<Duration>) -> Duration {
        retry_after
            .unwrap_or_else(|| self.retry_base_delay.saturating_mul(1 << attempt.min(16)))
            .min(MAX_BACKOFF)
    }

    /// POSTs `body` and returns the response text, retrying rate limits,
    /// server errors and transport failures with exponential backoff.
    fn post(&self, path: &str, body: &serde_json::Value) -> Result<String, GatewayError> {
        let url = format!("{}/{}", self.base_url, path);
        let mut attempt = 0;
        loop {
            let mut req = self.client.post(&url).json(body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let (error, retry_after) = match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    let retry_after = resp
                        .headers()
                        .get(reqwest::header::RETRY_AFTER)
                        .and_then(|v| v.to_str().ok())
                        .and_then(|v| v.trim().parse::<u64>().ok())
                        .map(Duration::from_secs);
                    let text = resp.text().map_err(|e| GatewayError::Transport(e.to_string()))?;
                    self.audit(&url, body, Some(status.as_u16()), &text);
                    if status.is_success() {
                        return Ok(text);
                    }
                    if status == StatusCode::UNAUTHORIZED || status == StatusCode::FORBIDDEN {
                        return Err(GatewayError::Auth(format!("{status}: {text}")));
                    }
                    let err = GatewayError::Status {
                        status: status.as_u16(),
                        body: text,
                    };
                    if !(status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error()) {
                        return Err(err);
                    }
                    (err, retry_after)
                }
                Err(e) => {
                    self.audit(&url, body, None, &e.to_string());
                    (GatewayError::Transport(e.to_string()), None)
                }
            };
            if attempt >= self.max_retries {
                return Err(error);
            }
            let delay = self.backoff(attempt, retry_after);
            warn!(attempt = attempt + 1, delay_ms = delay.as_millis() as u64, error = %error, "retrying LLM request");
            std::thread::sleep(delay);
            attempt += 1;
        }
    }
}

impl LlmBackend for HttpBackend {
    fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let body = json!({
            "model": request.model,
            "temperature": request.temperature,
            "messages": request.messages,
        });
        let text = self.post("chat/completions", &body)?;
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| GatewayError::Protocol(format!("chat response: {e}")))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| GatewayError::Protocol("chat response has no content".into()))?;
        debug!(chars = content.len(), "chat completion received");
        Ok(content)
    }

    fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
        let body = json!({ "model": model, "input": texts });
        let text = self.post("embeddings", &body)?;
        let parsed: EmbeddingResponse =
            serde_json::from_str(&text).map_err(|e| GatewayError::Protocol(format!("embedding response: {e}")))?;
        if parsed.data.len() != texts.len() {
            return Err(GatewayError::Protocol(format!(
                "{} embeddings for {} inputs",
                parsed.data.len(),
                texts.len()
            )));
        }
        let mut data = parsed.data;
        if data.iter().all(|d| d.index.is_some()) {
            data.sort_by_key(|d| d.index);
        }
        Ok(data.into_iter().map(|d| d.embedding).collect())
    }
}
