use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;

use dynagrag_core::consolidation::changed_nodes;
use dynagrag_core::ego_index::{affected_centers, build_index};
use dynagrag_core::export;
use dynagrag_core::ingestion::IngestError;
use dynagrag_core::pipeline::IngestReport;
use dynagrag_core::store::{ENTITIES_FILE, INDEX_FILE, MANIFEST_FILE, POOLS_FILE, RELATIONS_FILE};
use dynagrag_core::{Engine, GraphStore, PipelineConfig, PipelineError, QueryOptions};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn engine() -> Engine {
    Engine::new(PipelineConfig::default()).unwrap()
}

const STORE_FILES: [&str; 5] = [
    ENTITIES_FILE,
    RELATIONS_FILE,
    INDEX_FILE,
    POOLS_FILE,
    MANIFEST_FILE,
];

fn store_bytes(store: &GraphStore) -> Vec<Vec<u8>> {
    STORE_FILES
        .iter()
        .map(|f| fs::read(store.path(f)).unwrap())
        .collect()
}

#[test]
fn single_transcript_golden_counts() {
    let dir = tempfile::tempdir().unwrap();
    let store = GraphStore::new(dir.path());
    let doc = fixtures().join("corpus/episode_01_river.txt");
    let (_, report) = engine().ingest_paths(&[doc], &store, false).unwrap();
    let IngestReport {
        chunks,
        entity_mentions,
        relation_mentions,
        entities,
        relations,
        ..
    } = report;
    assert_eq!(
        (
            chunks,
            entity_mentions,
            relation_mentions,
            entities,
            relations
        ),
        GOLDEN_EPISODE_01,
        "{report:?}"
    );
}

const GOLDEN_EPISODE_01: (usize, usize, usize, usize, usize) = (1, 25, 8, 11, 8);

#[test]
fn reingest_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let corpus = fixtures().join("corpus");
    let (sa, sb) = (GraphStore::new(a.path()), GraphStore::new(b.path()));
    engine().ingest_paths(&[&corpus], &sa, false).unwrap();
    engine().ingest_paths(&[&corpus], &sb, false).unwrap();
    assert_eq!(store_bytes(&sa), store_bytes(&sb));
    // again into the same directory
    let first = store_bytes(&sa);
    engine().ingest_paths(&[&corpus], &sa, false).unwrap();
    assert_eq!(store_bytes(&sa), first);
}

#[test]
fn empty_directory_has_no_input_files() {
    let dir = tempfile::tempdir().unwrap();
    let store = GraphStore::new(dir.path().join("store"));
    let err = engine()
        .ingest_paths(&[dir.path()], &store, false)
        .unwrap_err();
    assert!(matches!(
        err,
        PipelineError::Ingest(IngestError::NoInputFiles)
    ));
    assert_eq!(err.to_string(), "no input files");
}

#[test]
fn missing_store_is_a_state_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = engine()
        .load_store(&GraphStore::new(dir.path().join("nope")))
        .unwrap_err();
    assert!(matches!(err, PipelineError::State(_)));
}

#[test]
fn append_matches_rebuild_and_reencodes_only_affected() {
    let dir = tempfile::tempdir().unwrap();
    let store = GraphStore::new(dir.path());
    let e = engine();
    let (before, _) = e
        .ingest_paths(&[fixtures().join("corpus")], &store, false)
        .unwrap();
    let (after, report) = e
        .ingest_paths(&[fixtures().join("append")], &store, true)
        .unwrap();
    assert_eq!(after.manifest.generation, 2);

    let changed = changed_nodes(&before.graph, &after.graph);
    let affected: BTreeSet<String> = affected_centers(&before.graph, &after.graph, &changed, 3)
        .into_iter()
        .filter(|c| after.graph.entity(c).is_some())
        .collect();
    assert_eq!(report.reencoded, affected.len());
    assert_eq!(report.reused, after.graph.node_count() - affected.len());
    assert!(report.reused > 0, "{report:?}");

    let rebuilt = build_index(&after.graph, 3, 3).unwrap();
    assert_eq!(rebuilt.len(), after.index.len());
    for (a, b) in rebuilt.entries().iter().zip(after.index.entries()) {
        assert_eq!(a.ego, b.ego);
        assert_eq!(a.top_nodes, b.top_nodes);
        for (x, y) in a.embedding.iter().zip(&b.embedding) {
            assert!((x - y).abs() <= 1e-9);
        }
    }

    // the stored result loads back to the same index
    let reloaded = store.load().unwrap();
    assert_eq!(reloaded.index, after.index);
}

#[test]
fn query_is_deterministic_across_engines() {
    let dir = tempfile::tempdir().unwrap();
    let store = GraphStore::new(dir.path());
    engine()
        .ingest_paths(&[fixtures().join("corpus")], &store, false)
        .unwrap();
    let q = "What happened after the Holloway Dam was removed?";
    let run = || {
        let e = engine();
        let snap = e.load_store(&store).unwrap();
        e.query(
            &snap,
            q,
            &QueryOptions {
                trace: true,
                ..Default::default()
            },
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.answer, b.answer);
    assert_eq!(
        serde_json::to_string(&a.trace).unwrap(),
        serde_json::to_string(&b.trace).unwrap()
    );
}

/// Minimal RFC 4180 reader used as an oracle for the exporter.
fn parse_csv(text: &str) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    let mut row = Vec::new();
    let mut field = String::new();
    let mut quoted = false;
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        match (quoted, c) {
            (true, '"') if chars.peek() == Some(&'"') => {
                chars.next();
                field.push('"');
            }
            (true, '"') => quoted = false,
            (true, c) => field.push(c),
            (false, '"') => quoted = true,
            (false, ',') => row.push(std::mem::take(&mut field)),
            (false, '\n') => {
                row.push(std::mem::take(&mut field));
                rows.push(std::mem::take(&mut row));
            }
            (false, '\r') => {}
            (false, c) => field.push(c),
        }
    }
    if !field.is_empty() || !row.is_empty() {
        row.push(field);
        rows.push(row);
    }
    rows
}

#[test]
fn csv_export_round_trips_through_independent_parser() {
    let dir = tempfile::tempdir().unwrap();
    let store = GraphStore::new(dir.path());
    let (snap, _) = engine()
        .ingest_paths(&[fixtures().join("corpus")], &store, false)
        .unwrap();
    let (nodes, edges) = export::to_csv(&snap.graph).unwrap();
    let nodes = parse_csv(&nodes);
    let edges = parse_csv(&edges);
    assert_eq!(nodes[0], export::NODE_COLUMNS);
    assert_eq!(edges[0], export::EDGE_COLUMNS);
    assert_eq!(nodes.len() - 1, snap.graph.node_count());
    assert_eq!(edges.len() - 1, snap.graph.edge_count());
    for row in &nodes[1..] {
        let e = snap.graph.entity(&row[0]).unwrap();
        assert_eq!(row[1].parse::<u64>().unwrap(), e.weight);
    }
    for row in &edges[1..] {
        let r = snap.graph.relation(&row[0], &row[1]).unwrap();
        assert_eq!(row[2].parse::<u64>().unwrap(), r.weight);
    }

    let dot = export::to_dot(&snap.graph);
    assert_eq!(dot.matches(" -- ").count(), snap.graph.edge_count());
    assert_eq!(
        dot.lines()
            .filter(|l| l.trim_end().ends_with("];") && !l.contains(" -- "))
            .count(),
        snap.graph.node_count()
    );
}
