//! Deterministic offline backend.
//!
//! Embeddings are hashed bags of words: every lowercase word maps to a
//! seeded pseudo-random direction, the directions are summed together with a
//! smaller whole-text direction, and the result is L2-normalized. Texts that
//! share words therefore land close together, and different texts never
//! collide in practice.
//!
//! Chat replies come from the first registered responder that accepts the
//! request, falling back to a digest echo of the input.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Backend, ChatRequest, LlmError};

pub type Responder = Arc<dyn Fn(&ChatRequest<'_>) -> Option<String> + Send + Sync>;

const WHOLE_TEXT_WEIGHT: f64 = 0.25;

#[derive(Clone)]
pub struct MockBackend {
    seed: u64,
    dimension: usize,
    responders: Vec<Responder>,
    chat_calls: Arc<AtomicUsize>,
    embed_calls: Arc<AtomicUsize>,
}

impl MockBackend {
    /// A mock with no responders: every chat reply is a digest echo.
    pub fn new(seed: u64, dimension: usize) -> Self {
        Self {
            seed,
            dimension: dimension.max(1),
            responders: Vec::new(),
            chat_calls: Arc::new(AtomicUsize::new(0)),
            embed_calls: Arc::new(AtomicUsize::new(0)),
        }
    }

    /// A mock that understands the structured prompts the pipeline sends
    /// (extraction, synonym confirmation, helpfulness and nine-metric judging).
    pub fn with_pipeline_rules(seed: u64, dimension: usize) -> Self {
        let mut mock = Self::new(seed, dimension);
        mock.push_system_rule(crate::ingestion::EXTRACTION_SYSTEM, |user| {
            crate::ingestion::mock_extraction_reply(user)
        });
        mock.push_system_rule(crate::consolidation::SYNONYM_SYSTEM, |user| {
            crate::consolidation::mock_synonym_reply(user)
        });
        mock.push_system_rule(crate::orchestration::HELPFULNESS_SYSTEM, move |user| {
            crate::orchestration::mock_helpfulness_reply(seed, user)
        });
        mock.push_system_rule(crate::orchestration::JUDGE_SYSTEM, move |user| {
            crate::orchestration::mock_judge_reply(seed, user)
        });
        mock
    }

    /// Registers a responder that takes precedence over every earlier one.
    pub fn with_responder<F>(mut self, f: F) -> Self
    where
        F: Fn(&ChatRequest<'_>) -> Option<String> + Send + Sync + 'static,
    {
        self.responders.insert(0, Arc::new(f));
        self
    }

    /// Answers every request whose system text equals `system`.
    pub fn with_system_reply<F>(self, system: &str, f: F) -> Self
    where
        F: Fn(&str) -> String + Send + Sync + 'static,
    {
        let system = system.to_string();
        self.with_responder(move |req| (req.system == system).then(|| f(req.user)))
    }

    fn push_system_rule<F>(&mut self, system: &'static str, f: F)
    where
        F: Fn(&str) -> String + Send + Sync + 'static,
    {
        self.responders.push(Arc::new(move |req| {
            (req.system == system).then(|| f(req.user))
        }));
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn chat_calls(&self) -> usize {
        self.chat_calls.load(Ordering::Relaxed)
    }

    pub fn embed_calls(&self) -> usize {
        self.embed_calls.load(Ordering::Relaxed)
    }

    fn seeded_direction(&self, tag: &[u8], key: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(tag);
        hasher.update(key.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        (0..self.dimension)
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect()
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let mut acc = self.seeded_direction(b"text\0", text);
        crate::vector::scale_in_place(&mut acc, WHOLE_TEXT_WEIGHT);
        for word in words(text) {
            let dir = self.seeded_direction(b"word\0", &word);
            crate::vector::add_scaled(&mut acc, &dir, 1.0);
        }
        let norm = crate::vector::l2_norm(&acc);
        if norm > 0.0 {
            crate::vector::scale_in_place(&mut acc, 1.0 / norm);
        } else {
            acc[0] = 1.0;
        }
        acc
    }

    pub fn echo_reply(&self, request: &ChatRequest<'_>) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(request.system.as_bytes());
        hasher.update([0u8]);
        hasher.update(request.user.as_bytes());
        let tag: String = hasher.finalize()[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        let excerpt: Vec<&str> = request.user.split_whitespace().take(24).collect();
        format!("mock response {tag}: {}", excerpt.join(" "))
    }
}

/// Lowercased alphanumeric words.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

impl Backend for MockBackend {
    fn complete(&self, request: &ChatRequest<'_>) -> Result<String, LlmError> {
        self.chat_calls.fetch_add(1, Ordering::Relaxed);
        for responder in &self.responders {
            if let Some(reply) = responder(request) {
                return Ok(reply);
            }
        }
        Ok(self.echo_reply(request))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, LlmError> {
        self.embed_calls.fetch_add(1, Ordering::Relaxed);
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }
}
