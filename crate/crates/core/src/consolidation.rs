//! Entity/relation de-duplication with two-step mean pooling.
//!
//! Step one averages the mentions that share a normalized label. Step two
//! averages the per-label means of a synonym cluster with one vote per label,
//! so a label mentioned fifty times does not drown out a rarer variant.
//! Pools carry sums and counts (never running means) so that partial pools
//! built from separate documents merge exactly.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{normalize_label, Entity, GraphError, KnowledgeGraph, PairKey, Relation};
use crate::ingestion::{EntityMention, RelationMention};
use crate::llm::{Gateway, LlmError};
use crate::vector;

pub const SYNONYM_SYSTEM: &str =
    "You decide whether two knowledge-graph entity labels name the same thing. Answer only yes or no.";

/// Candidate pairs for LLM confirmation start this far below the threshold.
pub const LLM_CANDIDATE_SLACK: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ConsolidationError {
    #[error("internal consolidation error: {0}")]
    Internal(String),
    #[error("inconsistent input: {0}")]
    Consistency(String),
    #[error("invalid consolidation options: {0}")]
    Config(String),
    #[error(transparent)]
    Gateway(#[from] LlmError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Step-one pool of every mention sharing one normalized label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledLabel {
    pub label: String,
    pub sum: Vec<f64>,
    pub count: u64,
    pub summaries: Vec<String>,
}

impl PooledLabel {
    pub fn embedding(&self) -> Vec<f64> {
        self.sum.iter().map(|x| x / self.count as f64).collect()
    }
}

/// Step-one pool of relation mentions sharing endpoints and description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationPool {
    /// Normalized mention endpoints, before canonical remapping.
    pub endpoints: PairKey,
    pub description: String,
    pub sum: Vec<f64>,
    pub count: u64,
}

/// Accumulated step-one pools; the unit of incremental consolidation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MentionPools {
    entities: BTreeMap<String, PooledLabel>,
    relations: Vec<RelationPool>,
    relation_index: HashMap<(PairKey, String), usize>,
}

fn check_dim(expected: &mut Option<usize>, v: &[f64]) -> Result<(), ConsolidationError> {
    let d = *expected.get_or_insert(v.len());
    if d != v.len() {
        return Err(ConsolidationError::Consistency(format!(
            "embedding width {} differs from {d}",
            v.len()
        )));
    }
    Ok(())
}

impl MentionPools {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_parts(entities: Vec<PooledLabel>, relations: Vec<RelationPool>) -> Self {
        let mut pools = Self::new();
        for e in entities {
            pools.entities.insert(e.label.clone(), e);
        }
        for r in relations {
            pools.relation_index.insert(
                (r.endpoints.clone(), r.description.clone()),
                pools.relations.len(),
            );
            pools.relations.push(r);
        }
        pools
    }

    pub fn entity_pools(&self) -> impl Iterator<Item = &PooledLabel> {
        self.entities.values()
    }

    pub fn relation_pools(&self) -> &[RelationPool] {
        &self.relations
    }

    pub fn entity_mentions(&self) -> u64 {
        self.entities.values().map(|p| p.count).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    fn dimension(&self) -> Option<usize> {
        self.entities
            .values()
            .next()
            .map(|p| p.sum.len())
            .or_else(|| self.relations.first().map(|r| r.sum.len()))
    }

    pub fn add_entities(
        &mut self,
        mentions: &[EntityMention],
        embeddings: &[Vec<f64>],
    ) -> Result<(), ConsolidationError> {
        if mentions.len() != embeddings.len() {
            return Err(ConsolidationError::Internal(format!(
                "{} entity mentions but {} embeddings",
                mentions.len(),
                embeddings.len()
            )));
        }
        let mut dim = self.dimension();
        for (m, emb) in mentions.iter().zip(embeddings) {
            check_dim(&mut dim, emb)?;
            let label = normalize_label(&m.label);
            if label.is_empty() {
                return Err(ConsolidationError::Consistency("empty entity label".into()));
            }
            let pool = self
                .entities
                .entry(label.clone())
                .or_insert_with(|| PooledLabel {
                    label,
                    sum: vec![0.0; emb.len()],
                    count: 0,
                    summaries: Vec::new(),
                });
            vector::add_scaled(&mut pool.sum, emb, 1.0);
            pool.count += 1;
            let summary = m.summary.trim();
            if !summary.is_empty() && !pool.summaries.iter().any(|s| s == summary) {
                pool.summaries.push(summary.to_string());
            }
        }
        Ok(())
    }

    pub fn add_relations(
        &mut self,
        mentions: &[RelationMention],
        embeddings: &[Vec<f64>],
    ) -> Result<(), ConsolidationError> {
        if mentions.len() != embeddings.len() {
            return Err(ConsolidationError::Internal(format!(
                "{} relation mentions but {} embeddings",
                mentions.len(),
                embeddings.len()
            )));
        }
        let mut dim = self.dimension();
        for (m, emb) in mentions.iter().zip(embeddings) {
            check_dim(&mut dim, emb)?;
            let endpoints = PairKey::new(
                normalize_label(&m.source_label),
                normalize_label(&m.target_label),
            );
            let description = m
                .description
                .split_whitespace()
                .collect::<Vec<_>>()
                .join(" ");
            let key = (endpoints.clone(), description.to_lowercase());
            let idx = match self.relation_index.get(&key) {
                Some(&i) => i,
                None => {
                    self.relations.push(RelationPool {
                        endpoints,
                        description,
                        sum: vec![0.0; emb.len()],
                        count: 0,
                    });
                    self.relation_index.insert(key, self.relations.len() - 1);
                    self.relations.len() - 1
                }
            };
            let pool = &mut self.relations[idx];
            vector::add_scaled(&mut pool.sum, emb, 1.0);
            pool.count += 1;
        }
        Ok(())
    }
}

/// Groups mentions by normalized label; the result is in label order.
pub fn pool_identical(
    mentions: &[EntityMention],
    embeddings: &[Vec<f64>],
) -> Result<Vec<PooledLabel>, ConsolidationError> {
    let mut pools = MentionPools::new();
    pools.add_entities(mentions, embeddings)?;
    Ok(pools.entities.into_values().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterOptions {
    pub similarity_threshold: f64,
    pub use_llm: bool,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        Self {
            similarity_threshold: 0.9,
            use_llm: false,
        }
    }
}

impl ClusterOptions {
    pub fn validate(&self) -> Result<(), ConsolidationError> {
        if !(self.similarity_threshold > 0.0 && self.similarity_threshold <= 1.0) {
            return Err(ConsolidationError::Config(format!(
                "similarity_threshold {} outside (0, 1]",
                self.similarity_threshold
            )));
        }
        Ok(())
    }
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

pub fn synonym_prompt(a: &str, b: &str) -> String {
    format!("Do the labels \"{a}\" and \"{b}\" refer to the same entity?\nAnswer yes or no.")
}

/// Mock rule: labels are synonyms when one label's words start the other's.
pub fn mock_synonym_reply(user: &str) -> String {
    let quoted: Vec<&str> = user.split('"').skip(1).step_by(2).collect();
    if quoted.len() < 2 {
        return "no".into();
    }
    let a: Vec<String> = crate::llm::mock::words(quoted[0]).collect();
    let b: Vec<String> = crate::llm::mock::words(quoted[1]).collect();
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    if !short.is_empty() && long.starts_with(&short) {
        "yes".into()
    } else {
        "no".into()
    }
}

/// Partitions `labels` into synonym clusters: connected components over pairs
/// whose embeddings reach the cosine threshold, optionally confirmed by the LLM.
/// Clusters and their members come back sorted.
pub fn find_synonym_clusters(
    gateway: Option<&Gateway>,
    labels: &[String],
    embeddings: &[Vec<f64>],
    options: &ClusterOptions,
) -> Result<Vec<Vec<String>>, ConsolidationError> {
    options.validate()?;
    if labels.len() != embeddings.len() {
        return Err(ConsolidationError::Internal(
            "label and embedding counts differ".into(),
        ));
    }
    let n = labels.len();
    let cutoff = if options.use_llm {
        options.similarity_threshold - LLM_CANDIDATE_SLACK
    } else {
        options.similarity_threshold
    };
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if vector::cosine_unchecked(&embeddings[i], &embeddings[j]) >= cutoff {
                pairs.push((i, j));
            }
        }
    }
    if options.use_llm && !pairs.is_empty() {
        let gateway = gateway.ok_or_else(|| {
            ConsolidationError::Config("LLM synonym confirmation needs a gateway".into())
        })?;
        let verdicts = crate::parallel::parallel_map(&pairs, gateway.max_parallel(), |&(i, j)| {
            gateway
                .chat(SYNONYM_SYSTEM, &synonym_prompt(&labels[i], &labels[j]))
                .map(|ex| {
                    ex.response_text
                        .trim()
                        .to_ascii_lowercase()
                        .starts_with("yes")
                })
        });
        let mut confirmed = Vec::new();
        for (pair, verdict) in pairs.into_iter().zip(verdicts) {
            if verdict? {
                confirmed.push(pair);
            }
        }
        pairs = confirmed;
    }
    let mut sets = DisjointSet::new(n);
    for (i, j) in pairs {
        sets.union(i, j);
    }
    let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (i, label) in labels.iter().enumerate().take(n) {
        let root = sets.find(i);
        groups.entry(root).or_default().push(label.clone());
    }
    let mut clusters: Vec<Vec<String>> = groups
        .into_values()
        .map(|mut g| {
            g.sort();
            g
        })
        .collect();
    clusters.sort();
    Ok(clusters)
}

/// Step two: one vote per distinct label.
pub fn merge_cluster(cluster: &[&PooledLabel]) -> Result<Entity, ConsolidationError> {
    if cluster.is_empty() {
        return Err(ConsolidationError::Internal("empty cluster".into()));
    }
    let canonical = cluster
        .iter()
        .max_by(|a, b| a.count.cmp(&b.count).then_with(|| b.label.cmp(&a.label)))
        .expect("non-empty");
    let means: Vec<Vec<f64>> = cluster.iter().map(|p| p.embedding()).collect();
    let embedding = vector::mean(means.iter().map(Vec::as_slice)).expect("non-empty");
    let mut ordered: Vec<&&PooledLabel> = cluster.iter().collect();
    ordered.sort_by(|a, b| {
        (a.label != canonical.label)
            .cmp(&(b.label != canonical.label))
            .then_with(|| a.label.cmp(&b.label))
    });
    let mut summaries: Vec<String> = Vec::new();
    for p in ordered {
        for s in &p.summaries {
            if !summaries.contains(s) {
                summaries.push(s.clone());
            }
        }
    }
    Ok(Entity {
        canonical_label: canonical.label.clone(),
        member_labels: cluster.iter().map(|p| p.label.clone()).collect(),
        embedding,
        weight: cluster.iter().map(|p| p.count).sum(),
        summaries,
    })
}

/// Maps every member label to its entity's canonical label.
pub fn canonical_map(entities: &[Entity]) -> BTreeMap<String, String> {
    entities
        .iter()
        .flat_map(|e| {
            e.member_labels
                .iter()
                .map(move |m| (m.clone(), e.canonical_label.clone()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuiltGraph {
    pub graph: KnowledgeGraph,
    /// Relation mentions whose endpoints merged into one entity.
    pub collapsed_relations: u64,
}

/// Remaps relation pools onto canonical endpoints and pools them in two steps:
/// identical descriptions first, then one vote per description.
/// (description key, display text, embedding sum, mention count)
type DescriptionGroup = (String, String, Vec<f64>, u64);

pub fn build_graph_from_pools(
    entities: Vec<Entity>,
    relation_pools: &[RelationPool],
    canonical: &BTreeMap<String, String>,
) -> Result<BuiltGraph, ConsolidationError> {
    let mut grouped: BTreeMap<PairKey, Vec<DescriptionGroup>> = BTreeMap::new();
    let mut collapsed = 0;
    for pool in relation_pools {
        let map = |label: &str| {
            canonical.get(label).cloned().ok_or_else(|| {
                ConsolidationError::Consistency(format!("relation endpoint '{label}' is unmapped"))
            })
        };
        let (a, b) = (map(pool.endpoints.first())?, map(pool.endpoints.second())?);
        if a == b {
            collapsed += pool.count;
            continue;
        }
        let groups = grouped.entry(PairKey::new(a, b)).or_default();
        let key = pool.description.to_lowercase();
        match groups.iter_mut().find(|g| g.0 == key) {
            Some(g) => {
                vector::add_scaled(&mut g.2, &pool.sum, 1.0);
                g.3 += pool.count;
            }
            None => groups.push((key, pool.description.clone(), pool.sum.clone(), pool.count)),
        }
    }
    let relations = grouped.into_iter().map(|(endpoints, groups)| {
        let means: Vec<Vec<f64>> = groups
            .iter()
            .map(|g| g.2.iter().map(|x| x / g.3 as f64).collect())
            .collect();
        Relation {
            endpoints,
            embedding: vector::mean(means.iter().map(Vec::as_slice)).expect("non-empty group"),
            weight: groups.iter().map(|g| g.3).sum(),
            descriptions: groups.into_iter().map(|g| g.1).collect(),
        }
    });
    Ok(BuiltGraph {
        graph: KnowledgeGraph::new(entities, relations)?,
        collapsed_relations: collapsed,
    })
}

pub fn build_graph(
    entities: Vec<Entity>,
    relation_mentions: &[RelationMention],
    relation_embeddings: &[Vec<f64>],
    canonical: &BTreeMap<String, String>,
) -> Result<BuiltGraph, ConsolidationError> {
    let mut pools = MentionPools::new();
    pools.add_relations(relation_mentions, relation_embeddings)?;
    build_graph_from_pools(entities, &pools.relations, canonical)
}

/// Full consolidation: cluster the label pools, merge clusters and build the graph.
pub fn consolidate(
    pools: &MentionPools,
    gateway: Option<&Gateway>,
    options: &ClusterOptions,
) -> Result<BuiltGraph, ConsolidationError> {
    let records: Vec<&PooledLabel> = pools.entity_pools().collect();
    let labels: Vec<String> = records.iter().map(|p| p.label.clone()).collect();
    let embeddings: Vec<Vec<f64>> = records.iter().map(|p| p.embedding()).collect();
    let clusters = find_synonym_clusters(gateway, &labels, &embeddings, options)?;
    let by_label: BTreeMap<&str, &PooledLabel> =
        records.iter().map(|p| (p.label.as_str(), *p)).collect();
    let entities = clusters
        .iter()
        .map(|c| {
            let members: Vec<&PooledLabel> = c.iter().map(|l| by_label[l.as_str()]).collect();
            merge_cluster(&members)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let canonical = canonical_map(&entities);
    build_graph_from_pools(entities, &pools.relations, &canonical)
}

/// Labels whose entity record or incident relations differ between graphs.
pub fn changed_nodes(old: &KnowledgeGraph, new: &KnowledgeGraph) -> BTreeSet<String> {
    let mut changed = BTreeSet::new();
    for label in old.labels().chain(new.labels()) {
        if old.entity(label) != new.entity(label) {
            changed.insert(label.clone());
        }
    }
    let keys: BTreeSet<&PairKey> = old
        .relations()
        .chain(new.relations())
        .map(|r| &r.endpoints)
        .collect();
    for key in keys {
        if old.relation_by_key(key) != new.relation_by_key(key) {
            changed.insert(key.first().to_string());
            changed.insert(key.second().to_string());
        }
    }
    changed
}
