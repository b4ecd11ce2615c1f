//! Graph export to Graphviz DOT and CSV tables.

use std::str::FromStr;

use thiserror::Error;

use crate::graph::KnowledgeGraph;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("unknown export format '{0}' (expected dot or csv)")]
    UnknownFormat(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Dot,
    Csv,
}

impl FromStr for ExportFormat {
    type Err = ExportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dot" => Ok(Self::Dot),
            "csv" => Ok(Self::Csv),
            _ => Err(ExportError::UnknownFormat(s.to_string())),
        }
    }
}

fn quoted(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' | '\r' => out.push(' '),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

pub fn to_dot(graph: &KnowledgeGraph) -> String {
    let mut out = String::from("graph dynagrag {\n");
    for e in graph.entities() {
        out.push_str(&format!(
            "  {} [weight={}];\n",
            quoted(&e.canonical_label),
            e.weight
        ));
    }
    for r in graph.relations() {
        out.push_str(&format!(
            "  {} -- {} [weight={}, label={}];\n",
            quoted(r.endpoints.first()),
            quoted(r.endpoints.second()),
            r.weight,
            quoted(r.description())
        ));
    }
    out.push_str("}\n");
    out
}

pub const NODE_COLUMNS: [&str; 4] = ["label", "weight", "members", "summary"];
pub const EDGE_COLUMNS: [&str; 4] = ["source", "target", "weight", "description"];

/// Node and edge tables. Members are joined with `;`.
pub fn to_csv(graph: &KnowledgeGraph) -> Result<(String, String), ExportError> {
    let mut nodes = csv::Writer::from_writer(Vec::new());
    nodes.write_record(NODE_COLUMNS)?;
    for e in graph.entities() {
        let members: Vec<&str> = e.member_labels.iter().map(String::as_str).collect();
        nodes.write_record([
            e.canonical_label.as_str(),
            &e.weight.to_string(),
            &members.join(";"),
            e.summaries.first().map_or("", String::as_str),
        ])?;
    }
    let mut edges = csv::Writer::from_writer(Vec::new());
    edges.write_record(EDGE_COLUMNS)?;
    for r in graph.relations() {
        edges.write_record([
            r.endpoints.first(),
            r.endpoints.second(),
            &r.weight.to_string(),
            r.description(),
        ])?;
    }
    let finish = |w: csv::Writer<Vec<u8>>| -> Result<String, ExportError> {
        let bytes = w
            .into_inner()
            .map_err(|e| csv::Error::from(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv of utf-8 fields is utf-8"))
    };
    Ok((finish(nodes)?, finish(edges)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures::{entity, path, relation};

    #[test]
    fn single_node_dot() {
        let g = KnowledgeGraph::new([entity("only", vec![1.0], 2)], []).unwrap();
        let dot = to_dot(&g);
        assert_eq!(dot, "graph dynagrag {\n  \"only\" [weight=2];\n}\n");
    }

    #[test]
    fn dot_escapes() {
        let g = KnowledgeGraph::new(
            [
                entity("say \"hi\"", vec![1.0], 1),
                entity("b\\c", vec![1.0], 1),
            ],
            [relation("say \"hi\"", "b\\c", vec![1.0], 4)],
        )
        .unwrap();
        let dot = to_dot(&g);
        assert!(dot.contains(r#""say \"hi\"""#));
        assert!(dot.contains(r#""b\\c""#));
        assert!(dot.contains("weight=4"));
    }

    #[test]
    fn csv_counts() {
        let g = path(&["a", "b, with comma", "c"]);
        let (nodes, edges) = to_csv(&g).unwrap();
        let mut r = csv::Reader::from_reader(nodes.as_bytes());
        assert_eq!(r.records().count(), 3);
        let mut r = csv::Reader::from_reader(edges.as_bytes());
        assert_eq!(r.records().count(), 2);
    }

    #[test]
    fn unknown_format() {
        assert_eq!("DOT".parse::<ExportFormat>().unwrap(), ExportFormat::Dot);
        assert!(matches!(
            "svg".parse::<ExportFormat>(),
            Err(ExportError::UnknownFormat(_))
        ));
    }
}
