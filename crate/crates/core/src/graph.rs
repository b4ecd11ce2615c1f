//! Knowledge-graph types: consolidated entities, undirected relations.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lowercased, trimmed, internal whitespace collapsed.
pub fn normalize_label(label: &str) -> String {
    label
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("unknown entity '{0}'")]
    UnknownEntity(String),
    #[error("relation {0} references missing entity '{1}'")]
    DanglingEndpoint(PairKey, String),
    #[error("relation endpoints must differ ('{0}')")]
    SelfLoop(String),
    #[error("duplicate entity '{0}'")]
    DuplicateEntity(String),
    #[error("duplicate relation {0}")]
    DuplicateRelation(PairKey),
    #[error("embedding dimension mismatch: expected {expected}, found {found} ({what})")]
    Dimension {
        expected: usize,
        found: usize,
        what: String,
    },
}

/// An unordered pair of distinct labels, stored in sorted order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairKey(String, String);

impl PairKey {
    pub fn new(a: impl Into<String>, b: impl Into<String>) -> Self {
        let (a, b) = (a.into(), b.into());
        if a <= b {
            Self(a, b)
        } else {
            Self(b, a)
        }
    }

    pub fn first(&self) -> &str {
        &self.0
    }

    pub fn second(&self) -> &str {
        &self.1
    }

    pub fn contains(&self, label: &str) -> bool {
        self.0 == label || self.1 == label
    }

    pub fn is_loop(&self) -> bool {
        self.0 == self.1
    }
}

impl std::fmt::Display for PairKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.0, self.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub canonical_label: String,
    pub member_labels: BTreeSet<String>,
    pub embedding: Vec<f64>,
    /// Number of contributing mentions.
    pub weight: u64,
    pub summaries: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub endpoints: PairKey,
    pub embedding: Vec<f64>,
    pub weight: u64,
    pub descriptions: Vec<String>,
}

impl Relation {
    pub fn description(&self) -> &str {
        self.descriptions
            .first()
            .map_or("related to", String::as_str)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeGraph {
    entities: BTreeMap<String, Entity>,
    relations: BTreeMap<PairKey, Relation>,
    adjacency: BTreeMap<String, BTreeSet<String>>,
}

impl KnowledgeGraph {
    pub fn new(
        entities: impl IntoIterator<Item = Entity>,
        relations: impl IntoIterator<Item = Relation>,
    ) -> Result<Self, GraphError> {
        let mut graph = Self::default();
        let mut dim = None;
        let mut check_dim = |len: usize, what: &dyn Fn() -> String| -> Result<(), GraphError> {
            let expected = *dim.get_or_insert(len);
            if expected != len {
                return Err(GraphError::Dimension {
                    expected,
                    found: len,
                    what: what(),
                });
            }
            Ok(())
        };
        for e in entities {
            check_dim(e.embedding.len(), &|| e.canonical_label.clone())?;
            let label = e.canonical_label.clone();
            if graph.entities.insert(label.clone(), e).is_some() {
                return Err(GraphError::DuplicateEntity(label));
            }
            graph.adjacency.insert(label, BTreeSet::new());
        }
        for r in relations {
            let key = r.endpoints.clone();
            check_dim(r.embedding.len(), &|| key.to_string())?;
            if key.is_loop() {
                return Err(GraphError::SelfLoop(key.0));
            }
            for end in [key.first(), key.second()] {
                if !graph.entities.contains_key(end) {
                    return Err(GraphError::DanglingEndpoint(key.clone(), end.to_string()));
                }
            }
            graph
                .adjacency
                .get_mut(key.first())
                .expect("endpoint checked")
                .insert(key.1.clone());
            graph
                .adjacency
                .get_mut(key.second())
                .expect("endpoint checked")
                .insert(key.0.clone());
            if graph.relations.insert(key.clone(), r).is_some() {
                return Err(GraphError::DuplicateRelation(key));
            }
        }
        Ok(graph)
    }

    pub fn node_count(&self) -> usize {
        self.entities.len()
    }

    pub fn edge_count(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    /// Embedding width, or 0 for an empty graph.
    pub fn dimension(&self) -> usize {
        self.entities
            .values()
            .next()
            .map_or(0, |e| e.embedding.len())
    }

    pub fn entity(&self, label: &str) -> Option<&Entity> {
        self.entities.get(label)
    }

    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        self.entities.values()
    }

    pub fn labels(&self) -> impl Iterator<Item = &String> {
        self.entities.keys()
    }

    pub fn relation(&self, a: &str, b: &str) -> Option<&Relation> {
        self.relations.get(&PairKey::new(a, b))
    }

    pub fn relation_by_key(&self, key: &PairKey) -> Option<&Relation> {
        self.relations.get(key)
    }

    pub fn relations(&self) -> impl Iterator<Item = &Relation> {
        self.relations.values()
    }

    /// Neighbors in label order. Unknown labels yield nothing.
    pub fn neighbors<'a>(&'a self, label: &str) -> impl Iterator<Item = &'a String> + 'a {
        self.adjacency.get(label).into_iter().flatten()
    }

    /// Hop distances from any of `sources`, limited to `max_hops`.
    pub fn hop_distances<'a, I>(&self, sources: I, max_hops: usize) -> BTreeMap<String, usize>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut dist = BTreeMap::new();
        let mut queue = VecDeque::new();
        for s in sources {
            if self.entities.contains_key(s) && !dist.contains_key(s) {
                dist.insert(s.to_string(), 0);
                queue.push_back(s.to_string());
            }
        }
        while let Some(u) = queue.pop_front() {
            let d = dist[&u];
            if d == max_hops {
                continue;
            }
            for v in self.neighbors(&u) {
                if !dist.contains_key(v) {
                    dist.insert(v.clone(), d + 1);
                    queue.push_back(v.clone());
                }
            }
        }
        dist
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn entity(label: &str, embedding: Vec<f64>, weight: u64) -> Entity {
        Entity {
            canonical_label: label.into(),
            member_labels: [label.to_string()].into(),
            embedding,
            weight,
            summaries: vec![format!("{label} summary")],
        }
    }

    pub fn relation(a: &str, b: &str, embedding: Vec<f64>, weight: u64) -> Relation {
        Relation {
            endpoints: PairKey::new(a, b),
            embedding,
            weight,
            descriptions: vec![format!("{a} relates to {b}")],
        }
    }

    /// Path graph over `labels` with unit weights and 2-d embeddings.
    pub fn path(labels: &[&str]) -> KnowledgeGraph {
        let entities = labels
            .iter()
            .enumerate()
            .map(|(i, l)| entity(l, vec![1.0, i as f64], 1));
        let relations = labels
            .windows(2)
            .map(|w| relation(w[0], w[1], vec![0.5, 0.5], 1));
        KnowledgeGraph::new(entities, relations).unwrap()
    }
}
