//! Query-conditioned relevance scores for ego-graph elements, GCN refinement
//! and soft masking.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::ego_index::EgoGraph;
use crate::graph::{KnowledgeGraph, PairKey};
use crate::vector;

mod dense;
pub mod gcn;
pub mod mlp;
pub mod params_io;

pub use dense::Dense;
pub use gcn::{gcn_refine, GcnParams};
pub use mlp::{relevance_mlp, MlpParams};
pub use params_io::{read_params, write_params, PruningParams};

/// Scores are kept away from 0 and 1 so logits and divisions stay finite.
pub const SCORE_EPSILON: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("inconsistent scores: {0}")]
    Consistency(String),
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("invalid parameter file: {0}")]
    Format(String),
    #[error("parameter file io: {0}")]
    Io(#[from] std::io::Error),
}

pub fn open_unit(x: f64) -> f64 {
    x.clamp(SCORE_EPSILON, 1.0 - SCORE_EPSILON)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RelevanceScores {
    pub node_scores: BTreeMap<String, f64>,
    pub edge_scores: BTreeMap<PairKey, f64>,
}

impl RelevanceScores {
    /// Exactly one score per ego element, each strictly inside (0, 1).
    pub fn check_covers(&self, ego: &EgoGraph) -> Result<(), PruneError> {
        if self.node_scores.len() != ego.node_labels.len()
            || ego
                .node_labels
                .iter()
                .any(|l| !self.node_scores.contains_key(l))
        {
            return Err(PruneError::Consistency(format!(
                "node scores do not match ego-graph of '{}'",
                ego.center
            )));
        }
        if self.edge_scores.len() != ego.edge_pairs.len()
            || ego
                .edge_pairs
                .iter()
                .any(|p| !self.edge_scores.contains_key(p))
        {
            return Err(PruneError::Consistency(format!(
                "edge scores do not match ego-graph of '{}'",
                ego.center
            )));
        }
        let bad = self
            .node_scores
            .values()
            .chain(self.edge_scores.values())
            .any(|s| !(*s > 0.0 && *s < 1.0));
        if bad {
            return Err(PruneError::Consistency("score outside (0, 1)".into()));
        }
        Ok(())
    }
}

fn checked_distance(a: &[f64], q: &[f64]) -> Result<f64, PruneError> {
    if a.len() != q.len() {
        return Err(PruneError::Input(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            q.len()
        )));
    }
    Ok(vector::l2_distance(a, q))
}

pub fn node_query_distance(h: &[f64], q: &[f64]) -> Result<f64, PruneError> {
    checked_distance(h, q)
}

pub fn edge_query_distance(r: &[f64], q: &[f64]) -> Result<f64, PruneError> {
    checked_distance(r, q)
}

/// MLP scores for every element of `ego`. Distances are divided by the largest
/// distance in the subgraph, nodes and edges together.
pub fn score_initial(
    graph: &KnowledgeGraph,
    ego: &EgoGraph,
    q: &[f64],
    mlp: &MlpParams,
) -> Result<RelevanceScores, PruneError> {
    let missing = |what: String| PruneError::Consistency(format!("{what} not in graph"));
    let mut nodes = Vec::with_capacity(ego.node_labels.len());
    for label in &ego.node_labels {
        let e = graph.entity(label).ok_or_else(|| missing(label.clone()))?;
        nodes.push((
            label,
            node_query_distance(&e.embedding, q)?,
            e.weight as f64,
        ));
    }
    let mut edges = Vec::with_capacity(ego.edge_pairs.len());
    for pair in &ego.edge_pairs {
        let r = graph
            .relation_by_key(pair)
            .ok_or_else(|| missing(pair.to_string()))?;
        edges.push((pair, edge_query_distance(&r.embedding, q)?, r.weight as f64));
    }
    let max = nodes
        .iter()
        .map(|n| n.1)
        .chain(edges.iter().map(|e| e.1))
        .fold(0.0, f64::max);
    let norm = |d: f64| if max > 0.0 { d / max } else { 0.0 };
    let mut scores = RelevanceScores::default();
    for (label, d, w) in nodes {
        scores
            .node_scores
            .insert(label.clone(), relevance_mlp(mlp, norm(d), w)?);
    }
    for (pair, d, w) in edges {
        scores
            .edge_scores
            .insert(pair.clone(), relevance_mlp(mlp, norm(d), w)?);
    }
    Ok(scores)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrunedSubgraph {
    pub ego: EgoGraph,
    pub pruned_node_weights: BTreeMap<String, f64>,
    pub pruned_edge_weights: BTreeMap<PairKey, f64>,
    pub pruning_scores: RelevanceScores,
}

pub fn soft_mask(
    ego: &EgoGraph,
    graph: &KnowledgeGraph,
    scores: &RelevanceScores,
) -> Result<PrunedSubgraph, PruneError> {
    scores.check_covers(ego)?;
    let mut pruned_node_weights = BTreeMap::new();
    for (label, s) in &scores.node_scores {
        let e = graph
            .entity(label)
            .ok_or_else(|| PruneError::Consistency(format!("{label} not in graph")))?;
        pruned_node_weights.insert(label.clone(), e.weight as f64 * s);
    }
    let mut pruned_edge_weights = BTreeMap::new();
    for (pair, s) in &scores.edge_scores {
        let r = graph
            .relation_by_key(pair)
            .ok_or_else(|| PruneError::Consistency(format!("{pair} not in graph")))?;
        pruned_edge_weights.insert(pair.clone(), r.weight as f64 * s);
    }
    Ok(PrunedSubgraph {
        ego: ego.clone(),
        pruned_node_weights,
        pruned_edge_weights,
        pruning_scores: scores.clone(),
    })
}

/// Initial scores, GCN refinement and soft mask in one call.
pub fn prune(
    graph: &KnowledgeGraph,
    ego: &EgoGraph,
    q: &[f64],
    mlp: &MlpParams,
    gcn: &GcnParams,
) -> Result<PrunedSubgraph, PruneError> {
    let initial = score_initial(graph, ego, q, mlp)?;
    let refined = gcn_refine(gcn, ego, graph, &initial)?;
    soft_mask(ego, graph, &refined)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ego_index::build_ego;
    use crate::graph::fixtures::{entity, path, relation};
    use proptest::prelude::*;

    #[test]
    fn distances() {
        assert_eq!(node_query_distance(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 5.0);
        assert_eq!(
            node_query_distance(&[1.5, -2.0], &[1.5, -2.0]).unwrap(),
            0.0
        );
        assert_eq!(edge_query_distance(&[1.0, 1.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert!(matches!(
            node_query_distance(&[1.0], &[1.0, 2.0]),
            Err(PruneError::Input(_))
        ));
    }

    #[test]
    fn mask_multiplies() {
        let g = KnowledgeGraph::new([entity("a", vec![1.0], 4)], []).unwrap();
        let ego = build_ego(&g, "a", 1).unwrap();
        let s = RelevanceScores {
            node_scores: [("a".to_string(), 0.25)].into(),
            edge_scores: BTreeMap::new(),
        };
        let p = soft_mask(&ego, &g, &s).unwrap();
        assert_eq!(p.pruned_node_weights["a"], 1.0);
    }

    #[test]
    fn near_unit_mask_is_identity() {
        let g = path(&["a", "b", "c"]);
        let ego = build_ego(&g, "b", 1).unwrap();
        let one = open_unit(1.0);
        let s = RelevanceScores {
            node_scores: ego.node_labels.iter().map(|l| (l.clone(), one)).collect(),
            edge_scores: ego.edge_pairs.iter().map(|p| (p.clone(), one)).collect(),
        };
        let p = soft_mask(&ego, &g, &s).unwrap();
        for (l, w) in &p.pruned_node_weights {
            assert!((w - g.entity(l).unwrap().weight as f64).abs() < 1e-9);
        }
        for (k, w) in &p.pruned_edge_weights {
            assert!((w - g.relation_by_key(k).unwrap().weight as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn closer_node_scores_higher() {
        let g = KnowledgeGraph::new(
            [
                entity("near", vec![1.0, 0.0], 2),
                entity("far", vec![-1.0, 0.0], 2),
            ],
            [relation("near", "far", vec![0.0, 1.0], 1)],
        )
        .unwrap();
        let ego = build_ego(&g, "near", 1).unwrap();
        let s = score_initial(&g, &ego, &[1.0, 0.0], &MlpParams::seeded(42, 8)).unwrap();
        assert!(s.node_scores["near"] > s.node_scores["far"]);
        s.check_covers(&ego).unwrap();
    }

    #[test]
    fn query_at_every_element_normalizes_to_zero() {
        let g = path(&["a"]);
        let ego = build_ego(&g, "a", 1).unwrap();
        let q = g.entity("a").unwrap().embedding.clone();
        let s = score_initial(&g, &ego, &q, &MlpParams::seeded(1, 8)).unwrap();
        let direct = relevance_mlp(&MlpParams::seeded(1, 8), 0.0, 1.0).unwrap();
        assert_eq!(s.node_scores["a"], direct);
    }

    #[test]
    fn prune_is_deterministic() {
        let g = path(&["a", "b", "c", "d"]);
        let ego = build_ego(&g, "b", 2).unwrap();
        let run = || {
            prune(
                &g,
                &ego,
                &[0.3, 1.2],
                &MlpParams::seeded(42, 8),
                &GcnParams::seeded(7, 2, 8),
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #[test]
        fn masked_weights_reconstruct(weights in proptest::collection::vec(1u64..50, 2..8), q in proptest::collection::vec(-2.0f64..2.0, 2)) {
            let labels: Vec<String> = (0..weights.len()).map(|i| format!("n{i}")).collect();
            let entities = labels.iter().zip(&weights).enumerate()
                .map(|(i, (l, w))| entity(l, vec![i as f64 * 0.3, 1.0 - i as f64 * 0.1], *w));
            let relations = labels.windows(2).map(|w| relation(&w[0], &w[1], vec![0.2, -0.4], 3));
            let g = KnowledgeGraph::new(entities, relations).unwrap();
            let ego = build_ego(&g, "n0", 3).unwrap();
            let p = prune(&g, &ego, &q, &MlpParams::seeded(3, 8), &GcnParams::seeded(4, 2, 8)).unwrap();
            for (l, pw) in &p.pruned_node_weights {
                let s = p.pruning_scores.node_scores[l];
                prop_assert!(s > 0.0 && s < 1.0 && *pw > 0.0);
                let w = g.entity(l).unwrap().weight as f64;
                prop_assert!((pw / s - w).abs() <= 1e-9 * w.max(1.0));
            }
            for (k, pw) in &p.pruned_edge_weights {
                let s = p.pruning_scores.edge_scores[k];
                prop_assert!(s > 0.0 && s < 1.0 && *pw > 0.0);
                prop_assert!((pw / s - 3.0).abs() <= 1e-9 * 3.0);
            }
        }
    }
}
