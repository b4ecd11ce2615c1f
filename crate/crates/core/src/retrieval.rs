//! Cosine ranking of ego-graphs with top-node diversity.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ego_index::{EgoIndex, EncodedEgoGraph};
use crate::vector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("index is empty")]
    EmptyIndex,
    #[error("top_n must be positive")]
    ZeroTopN,
}

/// Cosine similarity with an explicit degeneracy flag for zero vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub degenerate: bool,
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<Cosine, RetrievalError> {
    if a.len() != b.len() {
        return Err(RetrievalError::Dimension(a.len(), b.len()));
    }
    let degenerate = vector::l2_norm(a) == 0.0 || vector::l2_norm(b) == 0.0;
    Ok(Cosine {
        value: vector::cosine_unchecked(a, b),
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRequest {
    pub query_text: String,
    pub query_embedding: Vec<f64>,
    pub top_n: usize,
    pub diversity_on: bool,
    pub max_overlap: usize,
    /// Fill unused slots with the best skipped candidates.
    pub backfill: bool,
}

impl RetrievalRequest {
    pub fn new(query_text: impl Into<String>, query_embedding: Vec<f64>) -> Self {
        Self {
            query_text: query_text.into(),
            query_embedding,
            top_n: 5,
            diversity_on: true,
            max_overlap: 0,
            backfill: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved<'a> {
    pub entry: &'a EncodedEgoGraph,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult<'a> {
    pub selected: Vec<Retrieved<'a>>,
    /// Candidates passed over by the overlap rule during the scan.
    pub skipped_for_diversity: usize,
    /// How many of `selected` came from backfill.
    pub backfilled: usize,
}

/// All entries by descending similarity, ties by center label.
pub fn rank<'a>(index: &'a EgoIndex, query: &[f64]) -> Result<Vec<Retrieved<'a>>, RetrievalError> {
    if query.len() != index.dimension() {
        return Err(RetrievalError::Dimension(query.len(), index.dimension()));
    }
    let mut ranked: Vec<Retrieved<'a>> = index
        .entries()
        .iter()
        .map(|entry| Retrieved {
            entry,
            similarity: vector::cosine_unchecked(&entry.embedding, query),
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then_with(|| a.entry.ego.center.cmp(&b.entry.ego.center))
    });
    Ok(ranked)
}

pub fn retrieve<'a>(
    index: &'a EgoIndex,
    request: &RetrievalRequest,
) -> Result<RetrievalResult<'a>, RetrievalError> {
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    if request.top_n == 0 {
        return Err(RetrievalError::ZeroTopN);
    }
    let ranked = rank(index, &request.query_embedding)?;
    if !request.diversity_on {
        return Ok(RetrievalResult {
            selected: ranked.into_iter().take(request.top_n).collect(),
            skipped_for_diversity: 0,
            backfilled: 0,
        });
    }
    let mut covered: BTreeSet<&str> = BTreeSet::new();
    let mut selected = Vec::new();
    let mut skipped = Vec::new();
    for cand in ranked {
        if selected.len() == request.top_n {
            break;
        }
        let overlap = cand
            .entry
            .top_nodes
            .iter()
            .filter(|l| covered.contains(l.as_str()))
            .count();
        if overlap <= request.max_overlap {
            covered.extend(cand.entry.top_nodes.iter().map(String::as_str));
            selected.push(cand);
        } else {
            skipped.push(cand);
        }
    }
    let skipped_for_diversity = skipped.len();
    let mut backfilled = 0;
    if request.backfill && selected.len() < request.top_n {
        let missing = request.top_n - selected.len();
        backfilled = missing.min(skipped.len());
        selected.extend(skipped.into_iter().take(missing));
        selected.sort_by(|a, b| {
            b.similarity
                .total_cmp(&a.similarity)
                .then_with(|| a.entry.ego.center.cmp(&b.entry.ego.center))
        });
    }
    Ok(RetrievalResult {
        selected,
        skipped_for_diversity,
        backfilled,
    })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use crate::ego_index::EgoGraph;

    /// Index made only of the given (center, embedding, top nodes) entries.
    pub fn synthetic_index(entries: &[(&str, Vec<f64>, &[&str])]) -> EgoIndex {
        let d = entries[0].1.len();
        let encoded = entries
            .iter()
            .map(|(center, emb, top)| {
                let mut node_labels: BTreeSet<String> = top.iter().map(|s| s.to_string()).collect();
                node_labels.insert(center.to_string());
                EncodedEgoGraph {
                    ego: EgoGraph {
                        center: center.to_string(),
                        k: 0,
                        node_labels,
                        edge_pairs: BTreeSet::new(),
                    },
                    embedding: emb.clone(),
                    total_weight: 1.0,
                    top_nodes: top.iter().map(|s| s.to_string()).collect(),
                }
            })
            .collect();
        EgoIndex::from_entries(encoded, d, 0, 3)
    }
}
