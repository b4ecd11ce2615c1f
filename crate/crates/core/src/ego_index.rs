//! Pre-computed k-hop ego-graphs and their total graph embeddings.
//!
//! Every node `i` contributes `h_i * w_i`, every edge contributes the mean of
//! its two endpoint embeddings and its relation embedding scaled by `w_ij`,
//! and the sum is divided by the total node plus edge weight.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use thiserror::Error;

use crate::graph::{Entity, KnowledgeGraph, PairKey, Relation};
use crate::vector;

pub const INDEX_MAGIC: &[u8; 4] = b"DGEI";
pub const INDEX_VERSION: u32 = 1;

/// Embeddings averaged into an edge feature: source, target and relation.
const EDGE_FEATURE_PARTS: f64 = 3.0;

#[derive(Debug, Error)]
pub enum EgoError {
    #[error("unknown center '{0}'")]
    UnknownCenter(String),
    #[error("ego-graph element missing from graph: {0}")]
    MissingElement(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("relation {0} does not join the given endpoints")]
    EndpointMismatch(PairKey),
    #[error("graph is empty")]
    EmptyGraph,
    #[error("invalid index file: {0}")]
    Format(String),
    #[error("index io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EgoGraph {
    pub center: String,
    pub k: usize,
    pub node_labels: BTreeSet<String>,
    pub edge_pairs: BTreeSet<PairKey>,
}

impl EgoGraph {
    /// Neighbors of `label` inside the ego-graph, in label order.
    pub fn neighbors<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.edge_pairs.iter().filter_map(move |p| {
            if p.first() == label {
                Some(p.second())
            } else if p.second() == label {
                Some(p.first())
            } else {
                None
            }
        })
    }
}

fn induced_edges(graph: &KnowledgeGraph, nodes: &BTreeSet<String>) -> BTreeSet<PairKey> {
    let mut edges = BTreeSet::new();
    for u in nodes {
        for v in graph.neighbors(u) {
            if u < v && nodes.contains(v) {
                edges.insert(PairKey::new(u.clone(), v.clone()));
            }
        }
    }
    edges
}

pub fn build_ego(graph: &KnowledgeGraph, center: &str, k: usize) -> Result<EgoGraph, EgoError> {
    if graph.entity(center).is_none() {
        return Err(EgoError::UnknownCenter(center.to_string()));
    }
    let node_labels: BTreeSet<String> = graph.hop_distances([center], k).into_keys().collect();
    let edge_pairs = induced_edges(graph, &node_labels);
    Ok(EgoGraph {
        center: center.to_string(),
        k,
        node_labels,
        edge_pairs,
    })
}

pub fn weighted_node_feature(entity: &Entity) -> Vec<f64> {
    let w = entity.weight as f64;
    entity.embedding.iter().map(|x| x * w).collect()
}

pub fn weighted_edge_feature(
    source: &Entity,
    target: &Entity,
    relation: &Relation,
) -> Result<Vec<f64>, EgoError> {
    let key = &relation.endpoints;
    if *key
        != PairKey::new(
            source.canonical_label.clone(),
            target.canonical_label.clone(),
        )
    {
        return Err(EgoError::EndpointMismatch(key.clone()));
    }
    let d = source.embedding.len();
    for v in [&target.embedding, &relation.embedding] {
        if v.len() != d {
            return Err(EgoError::Dimension {
                expected: d,
                found: v.len(),
            });
        }
    }
    let scale = relation.weight as f64 / EDGE_FEATURE_PARTS;
    Ok((0..d)
        .map(|j| (source.embedding[j] + target.embedding[j] + relation.embedding[j]) * scale)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedEgoGraph {
    pub ego: EgoGraph,
    pub embedding: Vec<f64>,
    pub total_weight: f64,
    pub top_nodes: Vec<String>,
}

/// The `m` heaviest labels, ties broken lexicographically.
pub fn top_nodes(graph: &KnowledgeGraph, labels: &BTreeSet<String>, m: usize) -> Vec<String> {
    let mut weighted: Vec<(u64, &String)> = labels
        .iter()
        .filter_map(|l| graph.entity(l).map(|e| (e.weight, l)))
        .collect();
    weighted.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    weighted
        .into_iter()
        .take(m)
        .map(|(_, l)| l.clone())
        .collect()
}

pub fn encode_ego(
    graph: &KnowledgeGraph,
    ego: &EgoGraph,
    m: usize,
) -> Result<EncodedEgoGraph, EgoError> {
    let d = graph.dimension();
    let mut acc = vec![0.0; d];
    let mut total_weight = 0.0;
    for label in &ego.node_labels {
        let e = graph
            .entity(label)
            .ok_or_else(|| EgoError::MissingElement(label.clone()))?;
        vector::add_scaled(&mut acc, &weighted_node_feature(e), 1.0);
        total_weight += e.weight as f64;
    }
    for key in &ego.edge_pairs {
        let r = graph
            .relation_by_key(key)
            .ok_or_else(|| EgoError::MissingElement(key.to_string()))?;
        let (s, t) = (
            graph
                .entity(key.first())
                .ok_or_else(|| EgoError::MissingElement(key.to_string()))?,
            graph
                .entity(key.second())
                .ok_or_else(|| EgoError::MissingElement(key.to_string()))?,
        );
        vector::add_scaled(&mut acc, &weighted_edge_feature(s, t, r)?, 1.0);
        total_weight += r.weight as f64;
    }
    if total_weight <= 0.0 || total_weight.is_nan() {
        return Err(EgoError::MissingElement(format!(
            "ego-graph of '{}' has no weight",
            ego.center
        )));
    }
    vector::scale_in_place(&mut acc, 1.0 / total_weight);
    Ok(EncodedEgoGraph {
        ego: ego.clone(),
        embedding: acc,
        total_weight,
        top_nodes: top_nodes(graph, &ego.node_labels, m),
    })
}

fn encode_center(
    graph: &KnowledgeGraph,
    center: &str,
    k: usize,
    m: usize,
) -> Result<EncodedEgoGraph, EgoError> {
    encode_ego(graph, &build_ego(graph, center, k)?, m)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IndexUpdate {
    pub reencoded: usize,
    pub reused: usize,
    pub removed: usize,
    pub affected: BTreeSet<String>,
}

/// Immutable searchable set of encoded ego-graphs, one per node, sorted by center.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoIndex {
    entries: Vec<EncodedEgoGraph>,
    dimension: usize,
    k: usize,
    m: usize,
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

pub fn build_index(graph: &KnowledgeGraph, k: usize, m: usize) -> Result<EgoIndex, EgoError> {
    if graph.is_empty() {
        return Err(EgoError::EmptyGraph);
    }
    let centers: Vec<&String> = graph.labels().collect();
    let entries =
        crate::parallel::parallel_map(&centers, workers(), |c| encode_center(graph, c, k, m))
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
    Ok(EgoIndex {
        entries,
        dimension: graph.dimension(),
        k,
        m,
    })
}

/// Centers whose k-ball, in either graph, contains a changed node.
pub fn affected_centers(
    old: &KnowledgeGraph,
    new: &KnowledgeGraph,
    changed: &BTreeSet<String>,
    k: usize,
) -> BTreeSet<String> {
    let sources = changed.iter().map(String::as_str);
    let mut affected: BTreeSet<String> =
        old.hop_distances(sources.clone(), k).into_keys().collect();
    affected.extend(new.hop_distances(sources, k).into_keys());
    affected
}

impl EgoIndex {
    /// Assembles an index from already encoded entries, sorting them by center.
    pub fn from_entries(
        mut entries: Vec<EncodedEgoGraph>,
        dimension: usize,
        k: usize,
        m: usize,
    ) -> Self {
        entries.sort_by(|a, b| a.ego.center.cmp(&b.ego.center));
        Self {
            entries,
            dimension,
            k,
            m,
        }
    }

    pub fn entries(&self) -> &[EncodedEgoGraph] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn get(&self, center: &str) -> Option<&EncodedEgoGraph> {
        self.entries
            .binary_search_by(|e| e.ego.center.as_str().cmp(center))
            .ok()
            .map(|i| &self.entries[i])
    }

    /// Re-encodes only the ego-graphs touched by the change from `old` to `new`.
    pub fn update(
        &self,
        old: &KnowledgeGraph,
        new: &KnowledgeGraph,
        changed: &BTreeSet<String>,
    ) -> Result<(EgoIndex, IndexUpdate), EgoError> {
        if new.is_empty() {
            return Err(EgoError::EmptyGraph);
        }
        let affected = affected_centers(old, new, changed, self.k);
        let previous: BTreeMap<&str, &EncodedEgoGraph> = self
            .entries
            .iter()
            .map(|e| (e.ego.center.as_str(), e))
            .collect();
        let mut stats = IndexUpdate {
            affected: affected.clone(),
            ..IndexUpdate::default()
        };
        let centers: Vec<&String> = new.labels().collect();
        let plan: Vec<(&String, Option<&EncodedEgoGraph>)> = centers
            .iter()
            .map(|c| {
                let reuse = (!affected.contains(*c))
                    .then(|| previous.get(c.as_str()).copied())
                    .flatten();
                (*c, reuse)
            })
            .collect();
        stats.reencoded = plan.iter().filter(|(_, r)| r.is_none()).count();
        stats.reused = plan.len() - stats.reencoded;
        stats.removed = previous.keys().filter(|c| new.entity(c).is_none()).count();
        let entries = crate::parallel::parallel_map(&plan, workers(), |(c, reuse)| match reuse {
            Some(e) => Ok((*e).clone()),
            None => encode_center(new, c, self.k, self.m),
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
        Ok((
            EgoIndex {
                entries,
                dimension: new.dimension(),
                k: self.k,
                m: self.m,
            },
            stats,
        ))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), EgoError> {
        w.write_all(INDEX_MAGIC)?;
        for v in [
            INDEX_VERSION,
            self.dimension as u32,
            self.k as u32,
            self.m as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for e in &self.entries {
            write_str(&mut w, &e.ego.center)?;
            w.write_all(&(e.ego.node_labels.len() as u32).to_le_bytes())?;
            for l in &e.ego.node_labels {
                write_str(&mut w, l)?;
            }
            for x in &e.embedding {
                w.write_all(&x.to_le_bytes())?;
            }
            w.write_all(&e.total_weight.to_le_bytes())?;
            w.write_all(&(e.top_nodes.len() as u32).to_le_bytes())?;
            for l in &e.top_nodes {
                write_str(&mut w, l)?;
            }
        }
        Ok(())
    }

    /// Reads an index; edges are re-derived from `graph` as induced subgraphs.
    pub fn read_from<R: Read>(mut r: R, graph: &KnowledgeGraph) -> Result<EgoIndex, EgoError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(EgoError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != INDEX_VERSION {
            return Err(EgoError::Format(format!("unsupported version {version}")));
        }
        let dimension = read_u32(&mut r)? as usize;
        let k = read_u32(&mut r)? as usize;
        let m = read_u32(&mut r)? as usize;
        let mut count = [0u8; 8];
        r.read_exact(&mut count)?;
        let count = u64::from_le_bytes(count) as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let center = read_str(&mut r)?;
            let n = read_u32(&mut r)? as usize;
            let mut node_labels = BTreeSet::new();
            for _ in 0..n {
                let l = read_str(&mut r)?;
                if graph.entity(&l).is_none() {
                    return Err(EgoError::Format(format!("label '{l}' not in graph")));
                }
                node_labels.insert(l);
            }
            let mut embedding = Vec::with_capacity(dimension);
            for _ in 0..dimension {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                embedding.push(f64::from_le_bytes(b));
            }
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            let total_weight = f64::from_le_bytes(b);
            let t = read_u32(&mut r)? as usize;
            let top_nodes = (0..t)
                .map(|_| read_str(&mut r))
                .collect::<Result<Vec<_>, _>>()?;
            let edge_pairs = induced_edges(graph, &node_labels);
            entries.push(EncodedEgoGraph {
                ego: EgoGraph {
                    center,
                    k,
                    node_labels,
                    edge_pairs,
                },
                embedding,
                total_weight,
                top_nodes,
            });
        }
        Ok(EgoIndex {
            entries,
            dimension,
            k,
            m,
        })
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, EgoError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String, EgoError> {
    let len = read_u32(r)? as usize;
    if len > 1 << 24 {
        return Err(EgoError::Format("string too long".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| EgoError::Format("label is not UTF-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures::{entity, path, relation};
    use proptest::prelude::*;

    fn two_node() -> KnowledgeGraph {
        KnowledgeGraph::new(
            [
                entity("a", vec![1.0, 0.0], 1),
                entity("b", vec![0.0, 1.0], 1),
            ],
            [relation("a", "b", vec![1.0, 1.0], 2)],
        )
        .unwrap()
    }

    #[test]
    fn ego_radius() {
        let g = path(&["A", "B", "C"]);
        let e0 = build_ego(&g, "A", 0).unwrap();
        assert_eq!(e0.node_labels.len(), 1);
        assert!(e0.edge_pairs.is_empty());
        let e1 = build_ego(&g, "A", 1).unwrap();
        assert_eq!(e1.node_labels, ["A", "B"].map(String::from).into());
        assert_eq!(e1.edge_pairs.len(), 1);
        let e3 = build_ego(&g, "A", 3).unwrap();
        assert_eq!(e3.node_labels.len(), 3);
        assert_eq!(e3.edge_pairs.len(), 2);
        assert!(matches!(
            build_ego(&g, "Z", 1),
            Err(EgoError::UnknownCenter(_))
        ));
    }

    #[test]
    fn node_features() {
        assert_eq!(
            weighted_node_feature(&entity("a", vec![1.0, 2.0], 1)),
            vec![1.0, 2.0]
        );
        assert_eq!(
            weighted_node_feature(&entity("a", vec![1.0, 2.0], 3)),
            vec![3.0, 6.0]
        );
        assert_eq!(
            weighted_node_feature(&entity("a", vec![0.0, 0.0], 9)),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn edge_features() {
        let (a, b) = (
            entity("a", vec![1.0, 0.0], 1),
            entity("b", vec![0.0, 1.0], 1),
        );
        let r = relation("a", "b", vec![1.0, 1.0], 2);
        let f = weighted_edge_feature(&a, &b, &r).unwrap();
        assert!((f[0] - 4.0 / 3.0).abs() < 1e-15 && (f[1] - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(f, weighted_edge_feature(&b, &a, &r).unwrap());
        let z = entity("a", vec![0.0, 0.0], 1);
        let zb = entity("b", vec![0.0, 0.0], 1);
        let zr = relation("a", "b", vec![0.0, 0.0], 5);
        assert_eq!(weighted_edge_feature(&z, &zb, &zr).unwrap(), vec![0.0, 0.0]);
        let c = entity("c", vec![0.0, 0.0], 1);
        assert!(weighted_edge_feature(&a, &c, &r).is_err());
    }

    #[test]
    fn encode_single_node() {
        let g = KnowledgeGraph::new([entity("a", vec![1.0, 0.0], 2)], []).unwrap();
        let enc = encode_ego(&g, &build_ego(&g, "a", 3).unwrap(), 3).unwrap();
        assert_eq!(enc.embedding, vec![1.0, 0.0]);
        assert_eq!(enc.total_weight, 2.0);
        assert_eq!(enc.top_nodes, vec!["a".to_string()]);
    }

    #[test]
    fn encode_two_nodes() {
        let g = two_node();
        let enc = encode_ego(&g, &build_ego(&g, "a", 1).unwrap(), 3).unwrap();
        // ([1,0] + [0,1] + [4/3,4/3]) / 4
        let expected: f64 = (1.0 + 4.0 / 3.0) / 4.0;
        assert!((expected - 7.0 / 12.0).abs() < 1e-15);
        for x in &enc.embedding {
            assert!((x - 7.0 / 12.0).abs() < 1e-12);
        }
        assert_eq!(enc.total_weight, 4.0);
    }

    #[test]
    fn common_vector_is_fixed_point() {
        let v = vec![0.3, -0.2];
        let g = KnowledgeGraph::new(
            [
                entity("a", v.clone(), 5),
                entity("b", v.clone(), 2),
                entity("c", v.clone(), 7),
            ],
            [
                relation("a", "b", v.clone(), 3),
                relation("b", "c", v.clone(), 11),
            ],
        )
        .unwrap();
        let enc = encode_ego(&g, &build_ego(&g, "b", 1).unwrap(), 2).unwrap();
        for (x, y) in enc.embedding.iter().zip(&v) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(enc.top_nodes, vec!["c".to_string(), "a".to_string()]);
    }

    #[test]
    fn top_node_ties_lexicographic() {
        let g = KnowledgeGraph::new(
            [
                entity("b", vec![1.0], 2),
                entity("a", vec![1.0], 2),
                entity("c", vec![1.0], 1),
            ],
            [],
        )
        .unwrap();
        let all: BTreeSet<String> = g.labels().cloned().collect();
        assert_eq!(top_nodes(&g, &all, 3), vec!["a", "b", "c"]);
    }

    #[test]
    fn index_sizes() {
        let g = KnowledgeGraph::new([entity("a", vec![1.0], 1)], []).unwrap();
        assert_eq!(build_index(&g, 3, 3).unwrap().len(), 1);
        let g = path(&["A", "B", "C"]);
        let idx = build_index(&g, 3, 3).unwrap();
        assert_eq!(idx.len(), 3);
        assert!(idx.get("B").is_some() && idx.get("Q").is_none());
        assert!(matches!(
            build_index(&KnowledgeGraph::default(), 3, 3),
            Err(EgoError::EmptyGraph)
        ));
    }

    #[test]
    fn binary_round_trip() {
        let g = two_node();
        let idx = build_index(&g, 2, 3).unwrap();
        let mut buf = Vec::new();
        idx.write_to(&mut buf).unwrap();
        let back = EgoIndex::read_from(&buf[..], &g).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.k(), 2);
        assert_eq!(back, idx);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(buf, again);
        assert!(EgoIndex::read_from(&b"XXXX"[..], &g).is_err());
    }

    fn random_graph(n: usize, edges: &[(usize, usize)]) -> KnowledgeGraph {
        let ents =
            (0..n).map(|i| entity(&format!("n{i:02}"), vec![i as f64, 1.0], 1 + i as u64 % 3));
        let mut seen = BTreeSet::new();
        let rels: Vec<_> = edges
            .iter()
            .filter(|(a, b)| a % n != b % n)
            .filter(|(a, b)| {
                seen.insert(PairKey::new(
                    format!("n{:02}", a % n),
                    format!("n{:02}", b % n),
                ))
            })
            .map(|(a, b)| {
                relation(
                    &format!("n{:02}", a % n),
                    &format!("n{:02}", b % n),
                    vec![0.5, -0.5],
                    1,
                )
            })
            .collect();
        KnowledgeGraph::new(ents, rels).unwrap()
    }

    proptest! {
        #[test]
        fn ego_matches_brute_force_ball(n in 1usize..25, edges in prop::collection::vec((0usize..25, 0usize..25), 0..60), k in 0usize..4) {
            let g = random_graph(n, &edges);
            let labels: Vec<String> = g.labels().cloned().collect();
            // Floyd-Warshall oracle for hop distances.
            let inf = usize::MAX / 4;
            let mut dist = vec![vec![inf; n]; n];
            for (i, row) in dist.iter_mut().enumerate() { row[i] = 0; }
            for r in g.relations() {
                let a = labels.iter().position(|l| l == r.endpoints.first()).unwrap();
                let b = labels.iter().position(|l| l == r.endpoints.second()).unwrap();
                dist[a][b] = 1; dist[b][a] = 1;
            }
            for m in 0..n { for i in 0..n { for j in 0..n {
                if dist[i][m] + dist[m][j] < dist[i][j] { dist[i][j] = dist[i][m] + dist[m][j]; }
            }}}
            let idx = build_index(&g, k, 3).unwrap();
            prop_assert_eq!(idx.len(), n);
            for (i, entry) in idx.entries().iter().enumerate() {
                let ball: BTreeSet<String> = (0..n).filter(|&j| dist[i][j] <= k).map(|j| labels[j].clone()).collect();
                prop_assert_eq!(&entry.ego.node_labels, &ball);
                for p in &entry.ego.edge_pairs {
                    prop_assert!(ball.contains(p.first()) && ball.contains(p.second()));
                }
                let induced = g.relations().filter(|r| ball.contains(r.endpoints.first()) && ball.contains(r.endpoints.second())).count();
                prop_assert_eq!(entry.ego.edge_pairs.len(), induced);
            }
        }
    }
}
