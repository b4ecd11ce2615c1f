//! Similarity-ordered BFS over a pruned ego-graph and its outline rendering.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{KnowledgeGraph, PairKey};
use crate::pruning::PrunedSubgraph;
use crate::vector;

pub const DEFAULT_CHAR_BUDGET: usize = 12_000;
pub const DEFAULT_SUMMARIES_PER_NODE: usize = 2;
pub const TRUNCATION_MARKER: &str = "[truncated]\n";
pub const CROSS_LINKS_HEADING: &str = "Cross-links:\n";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("center '{0}' is not in the subgraph")]
    MissingCenter(String),
    #[error("'{0}' is not in the graph")]
    MissingElement(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("char budget {budget} is below the minimum {minimum}")]
    Budget { budget: usize, minimum: usize },
    #[error("tree does not match the pruned subgraph: {0}")]
    Inconsistent(String),
}

/// What each node is compared against when ordering a frontier.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityAnchor {
    #[default]
    Query,
    Parent,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraversalTree {
    pub root: String,
    pub parent: BTreeMap<String, String>,
    pub children: BTreeMap<String, Vec<String>>,
    pub depth: BTreeMap<String, usize>,
    pub visit_order: Vec<String>,
    pub similarity: BTreeMap<String, f64>,
    pub non_tree_edges: Vec<PairKey>,
}

impl TraversalTree {
    pub fn tree_edge_count(&self) -> usize {
        self.parent.len()
    }

    /// Labels in pre-order, with depth.
    pub fn preorder(&self) -> Vec<(&str, usize)> {
        let mut out = Vec::with_capacity(self.visit_order.len());
        let mut stack = vec![(self.root.as_str(), 0usize)];
        while let Some((label, d)) = stack.pop() {
            out.push((label, d));
            if let Some(kids) = self.children.get(label) {
                for k in kids.iter().rev() {
                    stack.push((k.as_str(), d + 1));
                }
            }
        }
        out
    }
}

fn by_similarity(
    sim: &BTreeMap<String, f64>,
) -> impl Fn(&String, &String) -> std::cmp::Ordering + '_ {
    move |a, b| sim[b].total_cmp(&sim[a]).then_with(|| a.cmp(b))
}

/// Level-synchronous BFS from the ego center. Each frontier is dequeued by
/// descending similarity, ties by label; the first node to reach an unvisited
/// neighbor becomes its parent. Ego edges outside the tree are returned as
/// cross-links in pair order.
pub fn dsa_bfs(
    pruned: &PrunedSubgraph,
    graph: &KnowledgeGraph,
    q: &[f64],
    anchor: SimilarityAnchor,
) -> Result<TraversalTree, PromptError> {
    let ego = &pruned.ego;
    let root = ego.center.clone();
    if !ego.node_labels.contains(&root) {
        return Err(PromptError::MissingCenter(root));
    }
    let embedding = |label: &str| -> Result<&[f64], PromptError> {
        let e = graph
            .entity(label)
            .ok_or_else(|| PromptError::MissingElement(label.to_string()))?;
        if e.embedding.len() != q.len() {
            return Err(PromptError::Dimension {
                expected: q.len(),
                found: e.embedding.len(),
            });
        }
        Ok(&e.embedding)
    };

    let mut tree = TraversalTree {
        root: root.clone(),
        parent: BTreeMap::new(),
        children: BTreeMap::new(),
        depth: BTreeMap::from([(root.clone(), 0)]),
        visit_order: Vec::with_capacity(ego.node_labels.len()),
        similarity: BTreeMap::from([(
            root.clone(),
            vector::cosine_unchecked(embedding(&root)?, q),
        )]),
        non_tree_edges: Vec::new(),
    };
    let mut frontier = vec![root];
    let mut level = 0;
    while !frontier.is_empty() {
        frontier.sort_by(by_similarity(&tree.similarity));
        let mut next = Vec::new();
        for node in &frontier {
            tree.visit_order.push(node.clone());
            for nb in ego.neighbors(node) {
                if tree.depth.contains_key(nb) {
                    continue;
                }
                let target = match anchor {
                    SimilarityAnchor::Query => q,
                    SimilarityAnchor::Parent => embedding(node)?,
                };
                let sim = vector::cosine_unchecked(embedding(nb)?, target);
                tree.similarity.insert(nb.to_string(), sim);
                tree.depth.insert(nb.to_string(), level + 1);
                tree.parent.insert(nb.to_string(), node.clone());
                tree.children
                    .entry(node.clone())
                    .or_default()
                    .push(nb.to_string());
                next.push(nb.to_string());
            }
        }
        frontier = next;
        level += 1;
    }
    {
        let order = by_similarity(&tree.similarity);
        for kids in tree.children.values_mut() {
            kids.sort_by(&order);
        }
    }
    tree.non_tree_edges = ego
        .edge_pairs
        .iter()
        .filter(|p| {
            tree.parent.get(p.first()).map(String::as_str) != Some(p.second())
                && tree.parent.get(p.second()).map(String::as_str) != Some(p.first())
        })
        .cloned()
        .collect();
    Ok(tree)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub char_budget: usize,
    pub summaries_per_node: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            char_budget: DEFAULT_CHAR_BUDGET,
            summaries_per_node: DEFAULT_SUMMARIES_PER_NODE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HardPrompt {
    pub text: String,
    pub node_count: usize,
    pub edge_count: usize,
    pub char_budget: usize,
    pub truncated: bool,
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn header(tree: &TraversalTree, pruned: &PrunedSubgraph) -> String {
    format!(
        "Subgraph around {}: {} nodes, {} edges\n",
        one_line(&tree.root),
        pruned.ego.node_labels.len(),
        pruned.ego.edge_pairs.len()
    )
}

/// Smallest budget `render_prompt` accepts for this tree.
pub fn minimum_budget(tree: &TraversalTree, pruned: &PrunedSubgraph) -> usize {
    header(tree, pruned).chars().count() + TRUNCATION_MARKER.len()
}

/// Pre-order outline: one block per node indented two spaces per level, each
/// child introduced by its connecting relation and pruned edge weight, then a
/// cross-link section for non-tree edges. Blocks that do not fit the budget are
/// dropped whole and a marker line is appended.
pub fn render_prompt(
    tree: &TraversalTree,
    pruned: &PrunedSubgraph,
    graph: &KnowledgeGraph,
    opts: RenderOptions,
) -> Result<HardPrompt, PromptError> {
    let minimum = minimum_budget(tree, pruned);
    if opts.char_budget < minimum {
        return Err(PromptError::Budget {
            budget: opts.char_budget,
            minimum,
        });
    }
    if tree.visit_order.len() != pruned.ego.node_labels.len()
        || tree.tree_edge_count() + tree.non_tree_edges.len() != pruned.ego.edge_pairs.len()
    {
        return Err(PromptError::Inconsistent(format!(
            "tree over '{}' does not cover its subgraph",
            tree.root
        )));
    }
    let node_weight = |l: &str| {
        pruned
            .pruned_node_weights
            .get(l)
            .copied()
            .ok_or_else(|| PromptError::Inconsistent(format!("no weight for '{l}'")))
    };
    let edge = |a: &str, b: &str| -> Result<(String, f64), PromptError> {
        let key = PairKey::new(a, b);
        let w = pruned
            .pruned_edge_weights
            .get(&key)
            .copied()
            .ok_or_else(|| PromptError::Inconsistent(format!("no weight for {key}")))?;
        let r = graph
            .relation_by_key(&key)
            .ok_or_else(|| PromptError::MissingElement(key.to_string()))?;
        Ok((one_line(r.description()), w))
    };

    let mut blocks = Vec::new();
    for (label, depth) in tree.preorder() {
        let entity = graph
            .entity(label)
            .ok_or_else(|| PromptError::MissingElement(label.to_string()))?;
        let indent = " ".repeat(2 * depth);
        let mut block = indent.clone();
        if let Some(parent) = tree.parent.get(label) {
            let (desc, w) = edge(parent, label)?;
            block.push_str(&format!("[{desc}, weight {w:.2}] "));
        }
        block.push_str(&format!(
            "{} (weight {:.2})\n",
            one_line(label),
            node_weight(label)?
        ));
        for s in entity.summaries.iter().take(opts.summaries_per_node) {
            block.push_str(&format!("{indent}| {}\n", one_line(s)));
        }
        blocks.push(block);
    }
    if !tree.non_tree_edges.is_empty() {
        blocks.push(CROSS_LINKS_HEADING.to_string());
        for p in &tree.non_tree_edges {
            let (desc, w) = edge(p.first(), p.second())?;
            blocks.push(format!(
                "{} -- [{desc}, weight {w:.2}] -- {}\n",
                one_line(p.first()),
                one_line(p.second())
            ));
        }
    }

    let mut text = header(tree, pruned);
    let mut used = text.chars().count();
    let total: usize = blocks.iter().map(|b| b.chars().count()).sum();
    let truncated = used + total > opts.char_budget;
    let room = if truncated {
        opts.char_budget - TRUNCATION_MARKER.len()
    } else {
        opts.char_budget
    };
    for b in &blocks {
        let n = b.chars().count();
        if used + n > room {
            break;
        }
        text.push_str(b);
        used += n;
    }
    if truncated {
        text.push_str(TRUNCATION_MARKER);
    }
    Ok(HardPrompt {
        text,
        node_count: pruned.ego.node_labels.len(),
        edge_count: pruned.ego.edge_pairs.len(),
        char_budget: opts.char_budget,
        truncated,
    })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use crate::ego_index::build_ego;
    use crate::pruning::{soft_mask, RelevanceScores};

    /// Soft mask with one score for every element.
    pub fn uniform_pruned(
        graph: &KnowledgeGraph,
        center: &str,
        k: usize,
        s: f64,
    ) -> PrunedSubgraph {
        let ego = build_ego(graph, center, k).unwrap();
        let scores = RelevanceScores {
            node_scores: ego.node_labels.iter().map(|l| (l.clone(), s)).collect(),
            edge_scores: ego.edge_pairs.iter().map(|p| (p.clone(), s)).collect(),
        };
        soft_mask(&ego, graph, &scores).unwrap()
    }
}
