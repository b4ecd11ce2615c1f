//! Graph retrieval-augmented generation over k-hop ego-graphs.
//!
//! Text is chunked and mined for entities and relations, synonyms are pooled
//! into a weighted knowledge graph, and every node's ego-graph is embedded
//! into a searchable index. A query retrieves diverse ego-graphs, scores and
//! soft-masks their elements, renders each as an outline prompt, answers per
//! subgraph and synthesizes a final answer.

pub mod config;
pub mod consolidation;
pub mod ego_index;
pub mod export;
pub mod graph;
pub mod ingestion;
pub mod llm;
pub mod orchestration;
pub mod parallel;
pub mod pipeline;
pub mod prompting;
pub mod pruning;
pub mod retrieval;
pub mod store;
pub mod vector;

pub use config::PipelineConfig;
pub use graph::{Entity, KnowledgeGraph, PairKey, Relation};
pub use llm::Gateway;
pub use pipeline::{Engine, EvalMode, PipelineError, QueryOptions};
pub use store::GraphStore;
