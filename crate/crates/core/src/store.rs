//! On-disk graph store.
//!
//! A store directory holds `entities.ndjson`, `relations.ndjson`, the binary
//! ego index `index.bin`, the step-one mention pools `pools.ndjson` used by
//! incremental ingest, and `manifest.json`. Output is a pure function of the
//! stored data, so saving the same graph twice yields identical bytes.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consolidation::{MentionPools, PooledLabel, RelationPool};
use crate::ego_index::{EgoError, EgoIndex};
use crate::graph::{Entity, GraphError, KnowledgeGraph, PairKey, Relation};

pub const ENTITIES_FILE: &str = "entities.ndjson";
pub const RELATIONS_FILE: &str = "relations.ndjson";
pub const INDEX_FILE: &str = "index.bin";
pub const POOLS_FILE: &str = "pools.ndjson";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const STORE_FORMAT: &str = "dynagrag-store";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("no store at {0} (run `dynagrag ingest` first)")]
    Missing(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("index: {0}")]
    Index(#[from] EgoError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub label: String,
    pub members: Vec<String>,
    pub embedding: Vec<f64>,
    pub weight: u64,
    pub summaries: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationRecord {
    pub source: String,
    pub target: String,
    pub embedding: Vec<f64>,
    pub weight: u64,
    pub descriptions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PoolRecord {
    Entity {
        label: String,
        sum: Vec<f64>,
        count: u64,
        summaries: Vec<String>,
    },
    Relation {
        source: String,
        target: String,
        description: String,
        sum: Vec<f64>,
        count: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// Incremented by every ingest into the same directory.
    pub generation: u64,
    pub entities: usize,
    pub relations: usize,
    pub index_entries: usize,
    pub k_hops: usize,
    pub top_node_count: usize,
}

impl From<&Entity> for EntityRecord {
    fn from(e: &Entity) -> Self {
        Self {
            label: e.canonical_label.clone(),
            members: e.member_labels.iter().cloned().collect(),
            embedding: e.embedding.clone(),
            weight: e.weight,
            summaries: e.summaries.clone(),
        }
    }
}

impl From<EntityRecord> for Entity {
    fn from(r: EntityRecord) -> Self {
        Self {
            canonical_label: r.label,
            member_labels: r.members.into_iter().collect(),
            embedding: r.embedding,
            weight: r.weight,
            summaries: r.summaries,
        }
    }
}

impl From<&Relation> for RelationRecord {
    fn from(r: &Relation) -> Self {
        Self {
            source: r.endpoints.first().to_string(),
            target: r.endpoints.second().to_string(),
            embedding: r.embedding.clone(),
            weight: r.weight,
            descriptions: r.descriptions.clone(),
        }
    }
}

impl From<RelationRecord> for Relation {
    fn from(r: RelationRecord) -> Self {
        Self {
            endpoints: PairKey::new(r.source, r.target),
            embedding: r.embedding,
            weight: r.weight,
            descriptions: r.descriptions,
        }
    }
}

pub fn pool_records(pools: &MentionPools) -> Vec<PoolRecord> {
    let entities = pools.entity_pools().map(|p| PoolRecord::Entity {
        label: p.label.clone(),
        sum: p.sum.clone(),
        count: p.count,
        summaries: p.summaries.clone(),
    });
    let relations = pools.relation_pools().iter().map(|r| PoolRecord::Relation {
        source: r.endpoints.first().to_string(),
        target: r.endpoints.second().to_string(),
        description: r.description.clone(),
        sum: r.sum.clone(),
        count: r.count,
    });
    entities.chain(relations).collect()
}

pub fn pools_from_records(records: Vec<PoolRecord>) -> MentionPools {
    let mut entities = Vec::new();
    let mut relations = Vec::new();
    for r in records {
        match r {
            PoolRecord::Entity {
                label,
                sum,
                count,
                summaries,
            } => entities.push(PooledLabel {
                label,
                sum,
                count,
                summaries,
            }),
            PoolRecord::Relation {
                source,
                target,
                description,
                sum,
                count,
            } => relations.push(RelationPool {
                endpoints: PairKey::new(source, target),
                description,
                sum,
                count,
            }),
        }
    }
    MentionPools::from_parts(entities, relations)
}

pub fn to_ndjson<T: Serialize>(records: impl IntoIterator<Item = T>) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(&r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn from_ndjson<T: for<'de> Deserialize<'de>>(
    path: &Path,
    text: &str,
) -> Result<Vec<T>, StoreError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| StoreError::Record {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Everything a query or an incremental ingest needs.
#[derive(Debug, Clone)]
pub struct StoreSnapshot {
    pub graph: KnowledgeGraph,
    pub index: EgoIndex,
    pub pools: MentionPools,
    pub manifest: Manifest,
}

#[derive(Debug, Clone)]
pub struct GraphStore {
    dir: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes through a sibling temp file and a rename so readers never see a
/// half-written file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

impl GraphStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    pub fn exists(&self) -> bool {
        self.path(MANIFEST_FILE).is_file()
    }

    pub fn read_manifest(&self) -> Result<Manifest, StoreError> {
        let path = self.path(MANIFEST_FILE);
        if !path.is_file() {
            return Err(StoreError::Missing(self.dir.clone()));
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| StoreError::Manifest(e.to_string()))?;
        if m.format != STORE_FORMAT || m.version != STORE_VERSION {
            return Err(StoreError::Manifest(format!(
                "unsupported store {} v{}",
                m.format, m.version
            )));
        }
        Ok(m)
    }

    pub fn save(
        &self,
        graph: &KnowledgeGraph,
        index: &EgoIndex,
        pools: &MentionPools,
        generation: u64,
    ) -> Result<Manifest, StoreError> {
        fs::create_dir_all(&self.dir).map_err(io_err(&self.dir))?;
        let entities = to_ndjson(graph.entities().map(EntityRecord::from));
        let relations = to_ndjson(graph.relations().map(RelationRecord::from));
        let pools_text = to_ndjson(pool_records(pools));
        let mut index_bytes = Vec::new();
        index.write_to(&mut index_bytes)?;
        let manifest = Manifest {
            format: STORE_FORMAT.into(),
            version: STORE_VERSION,
            generation,
            entities: graph.node_count(),
            relations: graph.edge_count(),
            index_entries: index.len(),
            k_hops: index.k(),
            top_node_count: index.m(),
        };
        let mut manifest_text =
            serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        manifest_text.push('\n');
        write_atomic(&self.path(ENTITIES_FILE), entities.as_bytes())?;
        write_atomic(&self.path(RELATIONS_FILE), relations.as_bytes())?;
        write_atomic(&self.path(POOLS_FILE), pools_text.as_bytes())?;
        write_atomic(&self.path(INDEX_FILE), &index_bytes)?;
        // the manifest goes last: its presence marks a complete store
        write_atomic(&self.path(MANIFEST_FILE), manifest_text.as_bytes())?;
        Ok(manifest)
    }

    fn read_records<T: for<'de> Deserialize<'de>>(&self, file: &str) -> Result<Vec<T>, StoreError> {
        let path = self.path(file);
        let f = fs::File::open(&path).map_err(io_err(&path))?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(io_err(&path))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| StoreError::Record {
                path: path.clone(),
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(out)
    }

    pub fn load_graph(&self) -> Result<KnowledgeGraph, StoreError> {
        let entities: Vec<EntityRecord> = self.read_records(ENTITIES_FILE)?;
        let relations: Vec<RelationRecord> = self.read_records(RELATIONS_FILE)?;
        Ok(KnowledgeGraph::new(
            entities.into_iter().map(Entity::from),
            relations.into_iter().map(Relation::from),
        )?)
    }

    pub fn load(&self) -> Result<StoreSnapshot, StoreError> {
        let manifest = self.read_manifest()?;
        let graph = self.load_graph()?;
        let path = self.path(INDEX_FILE);
        let f = fs::File::open(&path).map_err(io_err(&path))?;
        let index = EgoIndex::read_from(std::io::BufReader::new(f), &graph)?;
        let pools = pools_from_records(self.read_records(POOLS_FILE)?);
        if manifest.entities != graph.node_count()
            || manifest.relations != graph.edge_count()
            || manifest.index_entries != index.len()
        {
            return Err(StoreError::Manifest(
                "counts disagree with store files".into(),
            ));
        }
        Ok(StoreSnapshot {
            graph,
            index,
            pools,
            manifest,
        })
    }
}
