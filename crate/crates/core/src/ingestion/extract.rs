use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{IngestError, TextChunk};
use crate::graph::normalize_label;
use crate::llm::Gateway;

/// System instruction sent with every extraction prompt.
pub const EXTRACTION_SYSTEM: &str = "You build knowledge graphs from text. Reply only with ENTITY and RELATION lines in the requested format.";

pub const DEFAULT_EXTRACTION_TEMPLATE: &str = include_str!("../../prompts/extraction.txt");

/// Placeholder replaced by the chunk text.
pub const TEXT_PLACEHOLDER: &str = "{text}";

const TEXT_MARKER: &str = "---TEXT---";

const REASK_SUFFIX: &str = "\n\nYour previous reply could not be parsed. Reply again using only the ENTITY | ... and RELATION | ... line formats, or NONE.";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChunkRef {
    pub doc_id: String,
    pub chunk_index: usize,
}

impl From<&TextChunk> for ChunkRef {
    fn from(c: &TextChunk) -> Self {
        Self {
            doc_id: c.doc_id.clone(),
            chunk_index: c.chunk_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMention {
    pub label: String,
    pub summary: String,
    pub chunk_ref: ChunkRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationMention {
    pub source_label: String,
    pub target_label: String,
    pub description: String,
    pub chunk_ref: ChunkRef,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Extraction {
    pub entities: Vec<EntityMention>,
    pub relations: Vec<RelationMention>,
    /// Relations whose endpoints were not extracted as entities.
    pub dropped_relations: usize,
    /// Relations whose endpoints normalize to the same label.
    pub self_loops: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Record {
    Entity {
        label: String,
        summary: String,
    },
    Relation {
        source: String,
        target: String,
        description: String,
    },
}

/// Parses the line-oriented extraction reply. Lines that are not records are
/// ignored; a reply with no records must be `NONE`.
fn parse_reply(reply: &str) -> Result<Vec<Record>, String> {
    let mut records = Vec::new();
    let mut saw_none = false;
    for raw in reply.lines() {
        let line = raw.trim().trim_start_matches(['-', '*']).trim();
        if line.eq_ignore_ascii_case("none") {
            saw_none = true;
            continue;
        }
        let Some((kind, rest)) = line.split_once('|') else {
            continue;
        };
        match kind.trim().to_ascii_uppercase().as_str() {
            "ENTITY" => {
                let fields: Vec<&str> = rest.splitn(2, '|').map(str::trim).collect();
                if fields.len() != 2 || fields[0].is_empty() {
                    return Err(format!("malformed entity line: {raw}"));
                }
                records.push(Record::Entity {
                    label: fields[0].to_string(),
                    summary: fields[1].to_string(),
                });
            }
            "RELATION" => {
                let fields: Vec<&str> = rest.splitn(3, '|').map(str::trim).collect();
                if fields.len() != 3 || fields[0].is_empty() || fields[1].is_empty() {
                    return Err(format!("malformed relation line: {raw}"));
                }
                records.push(Record::Relation {
                    source: fields[0].to_string(),
                    target: fields[1].to_string(),
                    description: fields[2].to_string(),
                });
            }
            _ => {}
        }
    }
    if records.is_empty() && !saw_none {
        return Err("reply contains no ENTITY/RELATION records".into());
    }
    Ok(records)
}

fn assemble(records: Vec<Record>, chunk_ref: &ChunkRef) -> Extraction {
    let mut out = Extraction::default();
    let mut known = HashSet::new();
    for r in &records {
        if let Record::Entity { label, summary } = r {
            known.insert(normalize_label(label));
            out.entities.push(EntityMention {
                label: label.clone(),
                summary: summary.clone(),
                chunk_ref: chunk_ref.clone(),
            });
        }
    }
    for r in records {
        if let Record::Relation {
            source,
            target,
            description,
        } = r
        {
            let (s, t) = (normalize_label(&source), normalize_label(&target));
            if s == t {
                out.self_loops += 1;
                continue;
            }
            if !known.contains(&s) || !known.contains(&t) {
                out.dropped_relations += 1;
                continue;
            }
            out.relations.push(RelationMention {
                source_label: source,
                target_label: target,
                description,
                chunk_ref: chunk_ref.clone(),
            });
        }
    }
    if out.dropped_relations > 0 {
        tracing::warn!(
            doc = %chunk_ref.doc_id,
            chunk = chunk_ref.chunk_index,
            dropped = out.dropped_relations,
            "relations referencing unextracted entities were dropped"
        );
    }
    out
}

pub fn validate_template(template: &str) -> Result<(), IngestError> {
    if template.contains(TEXT_PLACEHOLDER) {
        Ok(())
    } else {
        Err(IngestError::Config(format!(
            "extraction prompt must contain {TEXT_PLACEHOLDER}"
        )))
    }
}

/// Asks the LLM for the entities and relations in one chunk. A reply that
/// cannot be parsed is re-requested once.
pub fn extract_mentions(
    gateway: &Gateway,
    chunk: &TextChunk,
    template: &str,
) -> Result<Extraction, IngestError> {
    validate_template(template)?;
    let prompt = template.replace(TEXT_PLACEHOLDER, &chunk.text);
    let chunk_ref = ChunkRef::from(chunk);
    let first = gateway.chat(EXTRACTION_SYSTEM, &prompt)?.response_text;
    match parse_reply(&first) {
        Ok(records) => Ok(assemble(records, &chunk_ref)),
        Err(reason) => {
            tracing::debug!(%reason, "re-asking extraction");
            let second = gateway
                .chat(EXTRACTION_SYSTEM, &format!("{prompt}{REASK_SUFFIX}"))?
                .response_text;
            parse_reply(&second)
                .map(|records| assemble(records, &chunk_ref))
                .map_err(|_| IngestError::Extraction {
                    doc_id: chunk_ref.doc_id.clone(),
                    chunk_index: chunk_ref.chunk_index,
                    raw: second,
                })
        }
    }
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "as", "at", "but", "by", "for", "from", "he", "her", "his", "i", "if", "in",
    "it", "its", "my", "no", "not", "of", "on", "or", "our", "she", "so", "that", "the", "their",
    "then", "there", "these", "they", "this", "those", "to", "we", "what", "when", "where",
    "which", "who", "why", "with", "yes", "you", "your", "well", "now", "okay", "yeah", "also",
    "how", "do", "does", "is", "are", "was", "were", "be", "one", "all", "some", "many", "most",
];

fn is_entity_word(word: &str) -> bool {
    let mut chars = word.chars();
    let Some(first) = chars.next() else {
        return false;
    };
    (first.is_uppercase() || first.is_ascii_digit() && word.chars().any(char::is_alphabetic))
        && word.chars().count() >= 2
        && !STOPWORDS.contains(&word.to_lowercase().as_str())
}

fn clean_word(w: &str) -> &str {
    w.trim_matches(|c: char| !(c.is_alphanumeric() || c == '-' || c == '.'))
        .trim_end_matches('.')
}

fn shorten(text: &str, max_chars: usize) -> String {
    let t: String = text.chars().take(max_chars).collect();
    t.trim().to_string()
}

/// Drops a transcript speaker tag such as `Host:` or `Maria Okafor:`.
fn strip_speaker(line: &str) -> &str {
    match line.split_once(':') {
        Some((tag, rest))
            if (1..=3).contains(&tag.split_whitespace().count())
                && tag
                    .split_whitespace()
                    .all(|w| w.starts_with(char::is_uppercase)) =>
        {
            rest
        }
        _ => line,
    }
}

/// Deterministic stand-in for an LLM extraction: capitalized word runs become
/// entities, one mention per sentence occurrence; consecutive entities inside
/// a sentence become a relation described by the words between them. Speaker
/// tags at the start of a line are ignored.
pub fn mock_extraction_reply(user: &str) -> String {
    let text = user.rsplit(TEXT_MARKER).next().unwrap_or(user);
    let text: Vec<&str> = text.lines().map(strip_speaker).collect();
    let text = text.join("\n");
    let mut lines = Vec::new();
    for sentence in text
        .split(['.', '!', '?', '\n'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
    {
        // (label, start word index, end word index)
        let words: Vec<&str> = sentence.split_whitespace().collect();
        let mut found: Vec<(String, usize, usize)> = Vec::new();
        let mut i = 0;
        while i < words.len() {
            let w = clean_word(words[i]);
            if is_entity_word(w) {
                let start = i;
                let mut parts = vec![w];
                while i + 1 < words.len() && is_entity_word(clean_word(words[i + 1])) {
                    i += 1;
                    parts.push(clean_word(words[i]));
                }
                // a lone capital at sentence start is usually just grammar
                if start > 0 || parts.len() > 1 {
                    found.push((parts.join(" "), start, i + 1));
                }
            }
            i += 1;
        }
        let summary = shorten(sentence, 160);
        let mut seen = HashSet::new();
        for (label, _, _) in &found {
            if seen.insert(label.to_lowercase()) {
                lines.push(format!("ENTITY | {label} | {summary}"));
            }
        }
        for pair in found.windows(2) {
            let (a, _, a_end) = &pair[0];
            let (b, b_start, _) = &pair[1];
            if a.eq_ignore_ascii_case(b) {
                continue;
            }
            let between: Vec<&str> = words[*a_end..*b_start]
                .iter()
                .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
                .filter(|w| !w.is_empty())
                .collect();
            let description = if between.is_empty() {
                "related to".to_string()
            } else {
                shorten(&between.join(" "), 80)
            };
            lines.push(format!("RELATION | {a} | {b} | {description}"));
        }
    }
    if lines.is_empty() {
        "NONE".to_string()
    } else {
        lines.join("\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::MockBackend;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn chunk(text: &str) -> TextChunk {
        TextChunk {
            doc_id: "doc".into(),
            chunk_index: 0,
            text: text.into(),
            token_span: (0, 1),
        }
    }

    fn gateway_replying(reply: &'static str) -> Gateway {
        let mock =
            MockBackend::new(0, 8).with_system_reply(EXTRACTION_SYSTEM, move |_| reply.into());
        Gateway::new(Arc::new(mock), Default::default()).unwrap()
    }

    #[test]
    fn golden_two_entities_one_relation() {
        let gw = gateway_replying(
            "ENTITY | Anthropic | An AI lab.\nENTITY | Claude | A model.\nRELATION | Anthropic | Claude | trains",
        );
        let out = extract_mentions(&gw, &chunk("x"), DEFAULT_EXTRACTION_TEMPLATE).unwrap();
        assert_eq!(out.entities.len(), 2);
        assert_eq!(out.entities[0].label, "Anthropic");
        assert_eq!(out.entities[1].summary, "A model.");
        assert_eq!(out.relations.len(), 1);
        assert_eq!(out.relations[0].description, "trains");
        assert_eq!(out.dropped_relations, 0);
    }

    #[test]
    fn relation_with_missing_endpoint_dropped() {
        let gw = gateway_replying("ENTITY | A | first\nRELATION | A | B | links");
        let out = extract_mentions(&gw, &chunk("x"), DEFAULT_EXTRACTION_TEMPLATE).unwrap();
        assert!(out.relations.is_empty());
        assert_eq!(out.dropped_relations, 1);
    }

    #[test]
    fn self_loop_rejected() {
        let gw = gateway_replying("ENTITY | GPU | chip\nRELATION | GPU | gpu | itself");
        let out = extract_mentions(&gw, &chunk("x"), DEFAULT_EXTRACTION_TEMPLATE).unwrap();
        assert!(out.relations.is_empty());
        assert_eq!(out.self_loops, 1);
    }

    #[test]
    fn malformed_twice_is_error() {
        let calls = Arc::new(AtomicUsize::new(0));
        let c = calls.clone();
        let mock = MockBackend::new(0, 8).with_system_reply(EXTRACTION_SYSTEM, move |_| {
            c.fetch_add(1, Ordering::SeqCst);
            "I could not find anything useful.".into()
        });
        let gw = Gateway::new(Arc::new(mock), Default::default()).unwrap();
        let err = extract_mentions(&gw, &chunk("x"), DEFAULT_EXTRACTION_TEMPLATE).unwrap_err();
        assert!(
            matches!(err, IngestError::Extraction { ref raw, .. } if raw.contains("could not"))
        );
        assert_eq!(calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn reask_recovers() {
        let calls = Arc::new(AtomicUsize::new(0));
        let c = calls.clone();
        let mock = MockBackend::new(0, 8).with_system_reply(EXTRACTION_SYSTEM, move |_| {
            if c.fetch_add(1, Ordering::SeqCst) == 0 {
                "garbage".into()
            } else {
                "ENTITY | A | ok".into()
            }
        });
        let gw = Gateway::new(Arc::new(mock), Default::default()).unwrap();
        let out = extract_mentions(&gw, &chunk("x"), DEFAULT_EXTRACTION_TEMPLATE).unwrap();
        assert_eq!(out.entities.len(), 1);
    }

    #[test]
    fn none_reply_is_empty() {
        let gw = gateway_replying("NONE");
        let out = extract_mentions(&gw, &chunk("x"), DEFAULT_EXTRACTION_TEMPLATE).unwrap();
        assert!(out.entities.is_empty() && out.relations.is_empty());
    }

    #[test]
    fn malformed_record_line() {
        assert!(parse_reply("ENTITY | | summary").is_err());
        assert!(parse_reply("RELATION | A | B").is_err());
        assert!(parse_reply("ENTITY | A | s\n  - RELATION | A | B | d").is_ok());
    }

    #[test]
    fn template_needs_placeholder() {
        let gw = Gateway::mock(0, 8);
        assert!(matches!(
            extract_mentions(&gw, &chunk("x"), "no placeholder"),
            Err(IngestError::Config(_))
        ));
    }

    #[test]
    fn mock_extraction_heuristic() {
        let reply = mock_extraction_reply(
            "prompt\n---TEXT---\nGeoffrey Hinton warned Google about AI risk. the weather was nice.",
        );
        let records = parse_reply(&reply).unwrap();
        assert!(records.contains(&Record::Entity {
            label: "Geoffrey Hinton".into(),
            summary: "Geoffrey Hinton warned Google about AI risk".into()
        }));
        assert!(records.contains(&Record::Relation {
            source: "Geoffrey Hinton".into(),
            target: "Google".into(),
            description: "warned".into()
        }));
        assert_eq!(mock_extraction_reply("---TEXT---\nlowercase only"), "NONE");
    }

    #[test]
    fn mock_extraction_skips_speakers_and_sentence_capitals() {
        let reply = mock_extraction_reply(
            "---TEXT---\nHost: Thanks for visiting Millbrook Village.\nAna Duarte: Students like Heron Creek.",
        );
        let labels: Vec<String> = parse_reply(&reply)
            .unwrap()
            .into_iter()
            .filter_map(|r| match r {
                Record::Entity { label, .. } => Some(label),
                _ => None,
            })
            .collect();
        assert_eq!(labels, ["Millbrook Village", "Heron Creek"]);
    }

    #[test]
    fn mock_pipeline_extraction_deterministic() {
        let gw = Gateway::mock(1, 8);
        let c = chunk("Anthropic builds Claude. Claude runs on GPUs from Nvidia.");
        let a = extract_mentions(&gw, &c, DEFAULT_EXTRACTION_TEMPLATE).unwrap();
        let b = extract_mentions(&gw, &c, DEFAULT_EXTRACTION_TEMPLATE).unwrap();
        assert_eq!(a, b);
        assert!(a.entities.iter().any(|e| e.label == "Nvidia"));
        assert!(!a.relations.is_empty());
    }
}
