//! Pipeline configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::BackendConfig;
use crate::prompting::SimilarityAnchor;

/// Environment variable naming a config file used when none is passed explicitly.
pub const CONFIG_ENV: &str = "DYNAGRAG_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("chunk_tokens must be positive")]
    ZeroChunkTokens,
    #[error("overlap_tokens ({overlap}) must be smaller than chunk_tokens ({chunk})")]
    OverlapTooLarge { overlap: usize, chunk: usize },
    #[error("top_n must be positive")]
    ZeroTopN,
    #[error("top_node_count must be positive")]
    ZeroTopNodeCount,
    #[error("similarity_threshold must lie in (0, 1], got {0}")]
    SimilarityThreshold(f64),
    #[error("char_budget must be at least {minimum}, got {got}")]
    CharBudget { got: usize, minimum: usize },
    #[error("mlp_hidden must be positive")]
    ZeroMlpHidden,
    #[error("gcn_hidden must be positive when gcn_depth > 0")]
    ZeroGcnHidden,
    #[error("{name} must lie in [0, 1], got {value}")]
    Rate { name: &'static str, value: f64 },
    #[error("backend: {0}")]
    Backend(#[from] crate::llm::LlmError),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    #[default]
    Whitespace,
    Heuristic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub mlp_seed: u64,
    pub gcn_seed: u64,
    pub mock_seed: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            mlp_seed: 42,
            gcn_seed: 7,
            mock_seed: 0,
        }
    }
}

/// Smallest `char_budget` accepted; below this a prompt cannot hold more than
/// its header.
pub const MIN_CHAR_BUDGET: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub chunk_tokens: usize,
    pub overlap_tokens: usize,
    pub tokenizer: TokenizerKind,
    pub k_hops: usize,
    pub top_n: usize,
    pub top_node_count: usize,
    pub max_overlap: usize,
    pub diversity_on: bool,
    pub backfill: bool,
    pub similarity_threshold: f64,
    pub use_llm_synonyms: bool,
    pub char_budget: usize,
    pub summaries_per_node: usize,
    pub similarity_anchor: SimilarityAnchor,
    pub mlp_hidden: usize,
    pub gcn_depth: usize,
    pub gcn_hidden: usize,
    /// Trained MLP parameters; seeded initialization when absent.
    pub mlp_params_file: Option<PathBuf>,
    /// Trained GCN parameters; seeded initialization when absent.
    pub gcn_params_file: Option<PathBuf>,
    /// Directory with prompt overrides (intermediate.txt, helpfulness.txt, ...).
    pub prompts_dir: Option<PathBuf>,
    pub extraction_template: Option<PathBuf>,
    /// Ingest aborts when more chunks than this fraction fail extraction.
    pub max_extraction_failure_rate: f64,
    /// Eval exits with an error when more rows than this fraction fail.
    pub max_eval_failure_rate: f64,
    pub store_dir: PathBuf,
    pub seeds: Seeds,
    pub backend: BackendConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            chunk_tokens: 2400,
            overlap_tokens: 200,
            tokenizer: TokenizerKind::Whitespace,
            k_hops: 3,
            top_n: 5,
            top_node_count: 3,
            max_overlap: 0,
            diversity_on: true,
            backfill: true,
            similarity_threshold: 0.9,
            use_llm_synonyms: false,
            char_budget: crate::prompting::DEFAULT_CHAR_BUDGET,
            summaries_per_node: crate::prompting::DEFAULT_SUMMARIES_PER_NODE,
            similarity_anchor: SimilarityAnchor::Query,
            mlp_hidden: crate::pruning::mlp::DEFAULT_HIDDEN,
            gcn_depth: crate::pruning::gcn::DEFAULT_DEPTH,
            gcn_hidden: crate::pruning::gcn::DEFAULT_HIDDEN,
            mlp_params_file: None,
            gcn_params_file: None,
            prompts_dir: None,
            extraction_template: None,
            max_extraction_failure_rate: 0.5,
            max_eval_failure_rate: 0.1,
            store_dir: PathBuf::from("dynagrag-store"),
            seeds: Seeds::default(),
            backend: BackendConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.chunk_tokens == 0 {
            return Err(ConfigError::ZeroChunkTokens);
        }
        if self.overlap_tokens >= self.chunk_tokens {
            return Err(ConfigError::OverlapTooLarge {
                overlap: self.overlap_tokens,
                chunk: self.chunk_tokens,
            });
        }
        if self.top_n == 0 {
            return Err(ConfigError::ZeroTopN);
        }
        if self.top_node_count == 0 {
            return Err(ConfigError::ZeroTopNodeCount);
        }
        if !(self.similarity_threshold > 0.0 && self.similarity_threshold <= 1.0) {
            return Err(ConfigError::SimilarityThreshold(self.similarity_threshold));
        }
        if self.char_budget < MIN_CHAR_BUDGET {
            return Err(ConfigError::CharBudget {
                got: self.char_budget,
                minimum: MIN_CHAR_BUDGET,
            });
        }
        if self.mlp_hidden == 0 {
            return Err(ConfigError::ZeroMlpHidden);
        }
        if self.gcn_depth > 0 && self.gcn_hidden == 0 {
            return Err(ConfigError::ZeroGcnHidden);
        }
        for (name, value) in [
            (
                "max_extraction_failure_rate",
                self.max_extraction_failure_rate,
            ),
            ("max_eval_failure_rate", self.max_eval_failure_rate),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(ConfigError::Rate { name, value });
            }
        }
        self.backend.validate()?;
        Ok(())
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    /// `explicit`, else the file named by `DYNAGRAG_CONFIG`, else defaults.
    pub fn load(explicit: Option<&Path>) -> Result<Self, ConfigError> {
        if let Some(p) = explicit {
            return Self::from_file(p);
        }
        match std::env::var_os(CONFIG_ENV) {
            Some(p) if !p.is_empty() => Self::from_file(Path::new(&p)),
            _ => Ok(Self::default()),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
