//! Chat-completion and embedding access behind one gateway type.
//!
//! Two backends exist: an HTTP client speaking the common chat-completions
//! JSON contract, and a deterministic in-process mock used by tests and
//! offline runs. Both go through [`Gateway`], which validates inputs and
//! outputs identically regardless of the backend.

#[cfg(feature = "http")]
pub mod http;
pub mod mock;

use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use mock::MockBackend;

/// Environment variable that overrides [`BackendConfig::api_key`].
pub const API_KEY_ENV: &str = "DYNAGRAG_API_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("backend returned status {status}: {body}")]
    Backend { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("embedding dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid backend configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub base_url: String,
    pub api_key: Option<String>,
    pub chat_model: String,
    pub embed_model: String,
    pub chat_path: String,
    pub embed_path: String,
    /// Request timeout in seconds.
    pub timeout: f64,
    pub max_parallel_requests: usize,
    pub retry_limit: u32,
    /// Base delay of the exponential backoff, in milliseconds.
    pub retry_backoff_ms: u64,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Vector width produced by the mock embedder.
    pub mock_dimension: usize,
    /// Texts per embedding request.
    pub embed_batch_size: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            base_url: "http://localhost:8080/v1".to_string(),
            api_key: None,
            chat_model: "gpt-4o-mini".to_string(),
            embed_model: "text-embedding-3-small".to_string(),
            chat_path: "/chat/completions".to_string(),
            embed_path: "/embeddings".to_string(),
            timeout: 60.0,
            max_parallel_requests: 4,
            retry_limit: 2,
            retry_backoff_ms: 250,
            temperature: 0.0,
            max_tokens: 1024,
            mock_dimension: 64,
            embed_batch_size: 64,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.max_parallel_requests < 1 {
            return Err(LlmError::Config(
                "max_parallel_requests must be >= 1".into(),
            ));
        }
        if self.timeout.is_nan() || self.timeout <= 0.0 || !self.timeout.is_finite() {
            return Err(LlmError::Config("timeout must be > 0".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::Config("temperature must lie in [0, 2]".into()));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::Config("max_tokens must be positive".into()));
        }
        if self.embed_batch_size == 0 {
            return Err(LlmError::Config("embed_batch_size must be positive".into()));
        }
        if self.kind == BackendKind::Mock && self.mock_dimension == 0 {
            return Err(LlmError::Config("mock_dimension must be positive".into()));
        }
        Ok(())
    }

    /// The API key, with the environment variable taking precedence.
    pub fn resolved_api_key(&self) -> Option<String> {
        std::env::var(API_KEY_ENV)
            .ok()
            .filter(|k| !k.is_empty())
            .or_else(|| self.api_key.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest<'a> {
    pub system: &'a str,
    pub user: &'a str,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub system_text: String,
    pub user_text: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub response_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    /// Hex SHA-256 of the embedded text.
    pub source_text_hash: String,
}

/// A chat + embedding provider. Implementations must be reentrant.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &ChatRequest<'_>) -> Result<String, LlmError>;
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, LlmError>;
}

pub fn text_digest(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Shareable handle used by every pipeline stage.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn Backend>,
    config: BackendConfig,
    dimension: Arc<OnceLock<usize>>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("kind", &self.config.kind)
            .field("dimension", &self.dimension.get())
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, config: BackendConfig) -> Result<Self, LlmError> {
        config.validate()?;
        Ok(Self {
            backend,
            config,
            dimension: Arc::new(OnceLock::new()),
        })
    }

    /// Builds the backend named by `config.kind`. `mock_seed` only matters for the mock.
    pub fn from_config(config: &BackendConfig, mock_seed: u64) -> Result<Self, LlmError> {
        let backend: Arc<dyn Backend> = match config.kind {
            BackendKind::Mock => Arc::new(MockBackend::with_pipeline_rules(
                mock_seed,
                config.mock_dimension,
            )),
            #[cfg(feature = "http")]
            BackendKind::Http => Arc::new(http::HttpBackend::new(
                http::UreqTransport::new(),
                config.clone(),
            )?),
            #[cfg(not(feature = "http"))]
            BackendKind::Http => {
                return Err(LlmError::Config("built without the `http` feature".into()))
            }
        };
        Self::new(backend, config.clone())
    }

    /// Convenience constructor for a rule-equipped mock.
    pub fn mock(seed: u64, dimension: usize) -> Self {
        let config = BackendConfig {
            mock_dimension: dimension,
            ..BackendConfig::default()
        };
        Self::new(
            Arc::new(MockBackend::with_pipeline_rules(seed, dimension)),
            config,
        )
        .expect("default config is valid")
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn max_parallel(&self) -> usize {
        self.config.max_parallel_requests
    }

    pub fn chat(&self, system_text: &str, user_text: &str) -> Result<ChatExchange, LlmError> {
        let request = ChatRequest {
            system: system_text,
            user: user_text,
            temperature: self.config.temperature,
            max_tokens: self.config.max_tokens,
        };
        let response = self.backend.complete(&request)?;
        if response.trim().is_empty() {
            return Err(LlmError::MalformedResponse("empty completion".into()));
        }
        Ok(ChatExchange {
            system_text: system_text.to_string(),
            user_text: user_text.to_string(),
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            response_text: response,
        })
    }

    /// Embeds `texts` in order. Batches larger than the configured size are
    /// split and dispatched concurrently.
    pub fn embed<S: AsRef<str> + Sync>(
        &self,
        texts: &[S],
    ) -> Result<Vec<EmbeddingVector>, LlmError> {
        if texts.is_empty() {
            return Err(LlmError::Input("no texts to embed".into()));
        }
        if let Some(i) = texts.iter().position(|t| t.as_ref().trim().is_empty()) {
            return Err(LlmError::Input(format!("text #{i} is empty")));
        }
        let batches: Vec<&[S]> = texts.chunks(self.config.embed_batch_size).collect();
        let results = crate::parallel::parallel_map(&batches, self.max_parallel(), |batch| {
            let refs: Vec<&str> = batch.iter().map(|t| t.as_ref()).collect();
            self.backend.embed_batch(&refs)
        });
        let mut out = Vec::with_capacity(texts.len());
        for (batch, result) in batches.iter().zip(results) {
            let vectors = result?;
            if vectors.len() != batch.len() {
                return Err(LlmError::MalformedResponse(format!(
                    "expected {} embeddings, got {}",
                    batch.len(),
                    vectors.len()
                )));
            }
            for (text, values) in batch.iter().zip(vectors) {
                self.check_vector(&values)?;
                out.push(EmbeddingVector {
                    values,
                    source_text_hash: text_digest(text.as_ref()),
                });
            }
        }
        Ok(out)
    }

    /// Embeds a single text and returns the raw values.
    pub fn embed_one(&self, text: &str) -> Result<Vec<f64>, LlmError> {
        Ok(self.embed(&[text])?.remove(0).values)
    }

    fn check_vector(&self, values: &[f64]) -> Result<(), LlmError> {
        if values.is_empty() {
            return Err(LlmError::MalformedResponse("empty embedding".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LlmError::MalformedResponse(
                "embedding contains non-finite values".into(),
            ));
        }
        let expected = *self.dimension.get_or_init(|| values.len());
        if expected != values.len() {
            return Err(LlmError::DimensionMismatch {
                expected,
                found: values.len(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    struct Scripted {
        dims: Mutex<Vec<usize>>,
    }

    impl Backend for Scripted {
        fn complete(&self, _request: &ChatRequest<'_>) -> Result<String, LlmError> {
            Ok("   ".into())
        }
        fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, LlmError> {
            let d = self.dims.lock().unwrap().remove(0);
            Ok(texts.iter().map(|_| vec![1.0; d]).collect())
        }
    }

    fn scripted(dims: Vec<usize>) -> Gateway {
        Gateway::new(
            Arc::new(Scripted {
                dims: Mutex::new(dims),
            }),
            BackendConfig {
                embed_batch_size: 1,
                max_parallel_requests: 1,
                ..BackendConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn empty_completion_is_malformed() {
        let gw = scripted(vec![]);
        assert!(matches!(
            gw.chat("", "hi"),
            Err(LlmError::MalformedResponse(_))
        ));
    }

    #[test]
    fn dimension_mismatch_across_batch() {
        let gw = scripted(vec![4, 5]);
        let err = gw.embed(&["a", "b"]).unwrap_err();
        assert_eq!(
            err,
            LlmError::DimensionMismatch {
                expected: 4,
                found: 5
            }
        );
    }

    #[test]
    fn empty_text_rejected() {
        let gw = Gateway::mock(1, 8);
        assert!(matches!(gw.embed(&["ok", "  "]), Err(LlmError::Input(_))));
        assert!(matches!(gw.embed::<&str>(&[]), Err(LlmError::Input(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = BackendConfig::default();
        assert!(c.validate().is_ok());
        c.max_parallel_requests = 0;
        assert!(c.validate().is_err());
        c = BackendConfig {
            timeout: 0.0,
            ..BackendConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
