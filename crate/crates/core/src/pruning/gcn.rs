use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dense::Dense;
use super::{PruneError, RelevanceScores};
use crate::ego_index::EgoGraph;
use crate::graph::KnowledgeGraph;
use crate::vector::{logit, sigmoid};

/// Per-node input channels: relevance score and `ln(1 + weight)`.
pub const FEATURE_WIDTH: usize = 2;
pub const DEFAULT_DEPTH: usize = 2;
pub const DEFAULT_HIDDEN: usize = 8;
/// Share of the refined endpoint signal in an edge's updated score.
pub const EDGE_BLEND: f64 = 0.5;

const HEAD_GAIN: f64 = 0.5;

/// Graph convolution stack with a sigmoid head.
///
/// Each layer computes `tanh(A_hat H W^T + b)` where `A_hat` is the
/// symmetric-normalized adjacency with self loops. The head adds a learned
/// correction to the logit of each node's incoming score. With no layers the
/// network is the identity on scores.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    pub seed: u64,
    pub layers: Vec<Dense>,
    /// Present iff `layers` is non-empty.
    pub head: Option<Dense>,
}

impl GcnParams {
    pub fn seeded(seed: u64, depth: usize, hidden: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(depth);
        let mut width = FEATURE_WIDTH;
        for _ in 0..depth {
            layers.push(Dense::glorot(width, hidden, 1.0, &mut rng));
            width = hidden;
        }
        let head = (depth > 0).then(|| Dense::glorot(width, 1, HEAD_GAIN, &mut rng));
        Self { seed, layers, head }
    }

    pub fn identity() -> Self {
        Self {
            seed: 0,
            layers: Vec::new(),
            head: None,
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

/// Symmetric-normalized adjacency with self loops, as sparse rows over `nodes`.
fn normalized_adjacency(ego: &EgoGraph, nodes: &[&String]) -> Vec<Vec<(usize, f64)>> {
    let pos: BTreeMap<&str, usize> = nodes
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let mut nbrs: Vec<Vec<usize>> = (0..nodes.len()).map(|i| vec![i]).collect();
    for p in &ego.edge_pairs {
        let (a, b) = (pos[p.first()], pos[p.second()]);
        nbrs[a].push(b);
        nbrs[b].push(a);
    }
    let deg: Vec<f64> = nbrs.iter().map(|n| n.len() as f64).collect();
    nbrs.iter()
        .enumerate()
        .map(|(i, row)| {
            let mut row: Vec<(usize, f64)> = row
                .iter()
                .map(|&j| (j, 1.0 / (deg[i] * deg[j]).sqrt()))
                .collect();
            row.sort_by_key(|(j, _)| *j);
            row
        })
        .collect()
}

pub fn gcn_refine(
    params: &GcnParams,
    ego: &EgoGraph,
    graph: &KnowledgeGraph,
    scores: &RelevanceScores,
) -> Result<RelevanceScores, PruneError> {
    scores.check_covers(ego)?;
    if params.layers.is_empty() {
        return Ok(scores.clone());
    }
    let head = params
        .head
        .as_ref()
        .ok_or_else(|| PruneError::Params("GCN with layers needs a head".into()))?;
    let nodes: Vec<&String> = ego.node_labels.iter().collect();
    let adjacency = normalized_adjacency(ego, &nodes);
    let mut h: Vec<Vec<f64>> = nodes
        .iter()
        .map(|l| {
            let w = graph
                .entity(l)
                .ok_or_else(|| PruneError::Consistency(format!("node '{l}' not in graph")))?
                .weight as f64;
            Ok(vec![scores.node_scores[l.as_str()], w.ln_1p()])
        })
        .collect::<Result<_, PruneError>>()?;
    for layer in &params.layers {
        if layer.inputs != h[0].len() {
            return Err(PruneError::Params(format!(
                "layer expects {} inputs, got {}",
                layer.inputs,
                h[0].len()
            )));
        }
        h = adjacency
            .iter()
            .map(|row| {
                let mut agg = vec![0.0; layer.inputs];
                for &(j, a) in row {
                    crate::vector::add_scaled(&mut agg, &h[j], a);
                }
                layer.apply(&agg).into_iter().map(f64::tanh).collect()
            })
            .collect();
    }
    if head.inputs != h[0].len() || head.outputs != 1 {
        return Err(PruneError::Params("head shape mismatch".into()));
    }
    let mut node_scores = BTreeMap::new();
    for (label, hv) in nodes.iter().zip(&h) {
        let prior = logit(scores.node_scores[label.as_str()]);
        let s = sigmoid(prior + head.apply(hv)[0]);
        node_scores.insert((*label).clone(), super::open_unit(s));
    }
    let edge_scores = ego
        .edge_pairs
        .iter()
        .map(|p| {
            let endpoint =
                sigmoid(0.5 * (logit(node_scores[p.first()]) + logit(node_scores[p.second()])));
            let blended = EDGE_BLEND * endpoint + (1.0 - EDGE_BLEND) * scores.edge_scores[p];
            (p.clone(), super::open_unit(blended))
        })
        .collect();
    Ok(RelevanceScores {
        node_scores,
        edge_scores,
    })
}
