//! Chat-completions / embeddings client over a pluggable blocking transport.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde_json::{json, Value};

use super::{Backend, BackendConfig, ChatRequest, LlmError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// One POST of a JSON body. `Err` means the request never produced a status.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        api_key: Option<&str>,
        body: &str,
        timeout: Duration,
    ) -> Result<HttpResponse, String>;
}

/// Counting semaphore capping in-flight requests.
#[derive(Debug)]
struct Semaphore {
    available: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self {
            available: Mutex::new(permits),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().expect("semaphore poisoned");
        while *n == 0 {
            n = self.freed.wait(n).expect("semaphore poisoned");
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("semaphore poisoned") += 1;
        self.0.freed.notify_one();
    }
}

pub struct HttpBackend<T: Transport> {
    transport: T,
    config: BackendConfig,
    api_key: Option<String>,
    permits: Semaphore,
}

impl<T: Transport> HttpBackend<T> {
    pub fn new(transport: T, config: BackendConfig) -> Result<Self, LlmError> {
        config.validate()?;
        Ok(Self {
            transport,
            api_key: config.resolved_api_key(),
            permits: Semaphore::new(config.max_parallel_requests),
            config,
        })
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let base = self.config.retry_backoff_ms;
        if base == 0 {
            return Duration::ZERO;
        }
        let exp = base.saturating_mul(1u64 << attempt.min(10));
        let jitter = rand::rng().random_range(0..=base);
        Duration::from_millis(exp + jitter)
    }

    /// POSTs with retries on transport failures, 429 and 5xx.
    fn post_with_retry(&self, path: &str, body: &Value) -> Result<Value, LlmError> {
        let url = self.url(path);
        let body = body.to_string();
        let timeout = Duration::from_secs_f64(self.config.timeout);
        let attempts = self.config.retry_limit + 1;
        let mut last = LlmError::Transport {
            attempts: 0,
            message: "no attempt made".into(),
        };
        for attempt in 0..attempts {
            let result = {
                let _permit = self.permits.acquire();
                self.transport
                    .post_json(&url, self.api_key.as_deref(), &body, timeout)
            };
            match result {
                Ok(resp) if (200..300).contains(&resp.status) => {
                    return serde_json::from_str(&resp.body).map_err(|e| {
                        LlmError::MalformedResponse(format!("invalid JSON body: {e}"))
                    });
                }
                Ok(resp) if resp.status == 429 || resp.status >= 500 => {
                    last = LlmError::Backend {
                        status: resp.status,
                        body: resp.body,
                    };
                }
                Ok(resp) => {
                    return Err(LlmError::Backend {
                        status: resp.status,
                        body: resp.body,
                    })
                }
                Err(message) => {
                    last = LlmError::Transport {
                        attempts: attempt + 1,
                        message,
                    };
                }
            }
            if attempt + 1 < attempts {
                tracing::debug!(attempt, %url, "retrying backend request");
                std::thread::sleep(self.backoff(attempt));
            }
        }
        Err(last)
    }
}

impl<T: Transport> Backend for HttpBackend<T> {
    fn complete(&self, request: &ChatRequest<'_>) -> Result<String, LlmError> {
        let mut messages = Vec::new();
        if !request.system.is_empty() {
            messages.push(json!({"role": "system", "content": request.system}));
        }
        messages.push(json!({"role": "user", "content": request.user}));
        let body = json!({
            "model": self.config.chat_model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let reply = self.post_with_retry(&self.config.chat_path, &body)?;
        let content = reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| {
                LlmError::MalformedResponse("missing choices[0].message.content".into())
            })?;
        if content.trim().is_empty() {
            return Err(LlmError::MalformedResponse("empty completion".into()));
        }
        Ok(content.to_string())
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, LlmError> {
        let body = json!({
            "model": self.config.embed_model,
            "input": texts,
        });
        let reply = self.post_with_retry(&self.config.embed_path, &body)?;
        let data = reply
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| LlmError::MalformedResponse("missing data array".into()))?;
        let mut out = Vec::with_capacity(data.len());
        for (i, item) in data.iter().enumerate() {
            let values = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| LlmError::MalformedResponse(format!("missing data[{i}].embedding")))?
                .iter()
                .map(|v| {
                    v.as_f64().ok_or_else(|| {
                        LlmError::MalformedResponse(format!("non-numeric entry in data[{i}]"))
                    })
                })
                .collect::<Result<Vec<f64>, _>>()?;
            if let Some(first) = out.first().map(Vec::len) {
                if first != values.len() {
                    return Err(LlmError::DimensionMismatch {
                        expected: first,
                        found: values.len(),
                    });
                }
            }
            out.push(values);
        }
        Ok(out)
    }
}

/// Blocking transport backed by `ureq`.
pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new() -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .new_agent();
        Self { agent }
    }
}

impl Default for UreqTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl Transport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        api_key: Option<&str>,
        body: &str,
        timeout: Duration,
    ) -> Result<HttpResponse, String> {
        let mut req = self
            .agent
            .post(url)
            .config()
            .timeout_global(Some(timeout))
            .build()
            .header("Content-Type", "application/json");
        if let Some(key) = api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| e.to_string())?;
        Ok(HttpResponse { status, body })
    }
}
