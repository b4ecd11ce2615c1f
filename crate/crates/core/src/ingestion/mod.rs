//! Document chunking and LLM-driven entity/relation extraction.

mod chunking;
mod extract;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::llm::{Gateway, LlmError};

pub use chunking::{
    chunk_document, chunk_windows, HeuristicTokenizer, TextChunk, Tokenizer, WhitespaceTokenizer,
};
pub use extract::{
    extract_mentions, mock_extraction_reply, validate_template, ChunkRef, EntityMention,
    Extraction, RelationMention, DEFAULT_EXTRACTION_TEMPLATE, EXTRACTION_SYSTEM, TEXT_PLACEHOLDER,
};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("invalid ingestion configuration: {0}")]
    Config(String),
    #[error("no input files")]
    NoInputFiles,
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("could not parse extraction reply for {doc_id}#{chunk_index}: {raw}")]
    Extraction {
        doc_id: String,
        chunk_index: usize,
        raw: String,
    },
    #[error("nothing to embed")]
    NoMentions,
    #[error(transparent)]
    Gateway(#[from] LlmError),
}

/// Embeddings aligned with the mention lists they were computed from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MentionEmbeddings {
    pub entities: Vec<Vec<f64>>,
    pub relations: Vec<Vec<f64>>,
}

impl MentionEmbeddings {
    pub fn len(&self) -> usize {
        self.entities.len() + self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn entity_embedding_text(m: &EntityMention) -> String {
    format!("{}: {}", m.label, m.summary)
}

pub fn relation_embedding_text(m: &RelationMention) -> String {
    format!("{} {} {}", m.source_label, m.description, m.target_label)
}

pub fn embed_mentions(
    gateway: &Gateway,
    entities: &[EntityMention],
    relations: &[RelationMention],
) -> Result<MentionEmbeddings, IngestError> {
    if entities.is_empty() && relations.is_empty() {
        return Err(IngestError::NoMentions);
    }
    let texts: Vec<String> = entities
        .iter()
        .map(entity_embedding_text)
        .chain(relations.iter().map(relation_embedding_text))
        .collect();
    let mut vectors: Vec<Vec<f64>> = gateway
        .embed(&texts)?
        .into_iter()
        .map(|v| v.values)
        .collect();
    let relations = vectors.split_off(entities.len());
    Ok(MentionEmbeddings {
        entities: vectors,
        relations,
    })
}

/// Expands files and directories (recursively, `*.txt` only) into a sorted,
/// de-duplicated file list.
pub fn collect_input_files<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<PathBuf>, IngestError> {
    let mut files = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let meta = std::fs::metadata(p).map_err(|source| IngestError::Io {
            path: p.to_path_buf(),
            source,
        })?;
        if meta.is_dir() {
            for entry in walkdir::WalkDir::new(p).sort_by_file_name() {
                let entry = entry.map_err(|e| IngestError::Io {
                    path: p.to_path_buf(),
                    source: e.into(),
                })?;
                if entry.file_type().is_file()
                    && entry.path().extension().is_some_and(|x| x == "txt")
                {
                    files.push(entry.into_path());
                }
            }
        } else {
            files.push(p.to_path_buf());
        }
    }
    files.sort();
    files.dedup();
    if files.is_empty() {
        return Err(IngestError::NoInputFiles);
    }
    Ok(files)
}

pub fn read_document(path: &Path) -> Result<String, IngestError> {
    std::fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}
