mod common;

use std::fs;
use std::net::TcpListener;
use std::process::Command;

use serde_json::{json, Value};

use common::{agent, fixtures, run, run_ok, Server, BIN};

fn ingested() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    run_ok(
        dir.path(),
        &["ingest", fixtures().join("corpus").to_str().unwrap()],
    );
    dir
}

#[test]
fn query_without_store_fails_with_hint() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&dir.path().join("missing"), &["query", "anything"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("dynagrag ingest"), "{err}");
}

#[test]
fn ingest_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = run(
        &dir.path().join("store"),
        &["ingest", empty.to_str().unwrap()],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no input files"));
}

#[test]
fn query_dumps_one_prompt_per_subgraph() {
    let dir = ingested();
    let prompts = dir.path().join("prompts");
    let out = run_ok(
        dir.path(),
        &[
            "query",
            "Who is Lena Hart?",
            "--top-n",
            "2",
            "--dump-prompts",
            prompts.to_str().unwrap(),
            "--json",
        ],
    );
    let body: Value = serde_json::from_str(&out).unwrap();
    let used = body["used_subgraphs"].as_array().unwrap();
    assert_eq!(used.len(), 2);
    let mut files: Vec<_> = fs::read_dir(&prompts)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    assert_eq!(files.len(), 2);
    let first = fs::read_to_string(&files[0]).unwrap();
    assert!(first.starts_with("Subgraph around "), "{first}");
    assert!(files[0]
        .file_name()
        .unwrap()
        .to_str()
        .unwrap()
        .starts_with("prompt_01_"));
}

#[test]
fn trace_includes_pruning_and_traversal() {
    let dir = ingested();
    let out = run_ok(
        dir.path(),
        &[
            "query",
            "brook trout",
            "--trace",
            "--no-diversity",
            "--top-n",
            "3",
        ],
    );
    let body: Value = serde_json::from_str(&out).unwrap();
    let trace = &body["trace"];
    assert_eq!(trace["skipped_for_diversity"], 0);
    let subgraphs = trace["subgraphs"].as_array().unwrap();
    assert_eq!(subgraphs.len(), 3);
    for s in subgraphs {
        assert!(!s["visit_order"].as_array().unwrap().is_empty());
        for n in s["nodes"].as_array().unwrap() {
            let score = n["score"].as_f64().unwrap();
            assert!(score > 0.0 && score < 1.0);
        }
    }
}

#[test]
fn export_dot_and_csv() {
    let dir = ingested();
    let stats = {
        let m: Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap())
                .unwrap();
        (
            m["entities"].as_u64().unwrap() as usize,
            m["relations"].as_u64().unwrap() as usize,
        )
    };
    let dot = run_ok(dir.path(), &["export", "--format", "dot"]);
    assert!(dot.starts_with("graph dynagrag {"));
    assert_eq!(dot.matches(" -- ").count(), stats.1);

    let out = dir.path().join("csv");
    run_ok(
        dir.path(),
        &[
            "export",
            "--format",
            "csv",
            "--output",
            out.to_str().unwrap(),
        ],
    );
    let nodes = fs::read_to_string(out.join("nodes.csv")).unwrap();
    let edges = fs::read_to_string(out.join("edges.csv")).unwrap();
    assert!(nodes.starts_with("label,weight,members,summary\n"));
    assert!(edges.starts_with("source,target,weight,description\n"));
    // no field in the fixture spans lines
    assert_eq!(nodes.lines().count(), stats.0 + 1);
    assert_eq!(edges.lines().count(), stats.1 + 1);

    let bad = run(dir.path(), &["export", "--format", "gml"]);
    assert!(!bad.status.success());
}

#[test]
fn eval_prints_table_and_rejects_empty_queries() {
    let dir = ingested();
    let queries = dir.path().join("q.txt");
    fs::write(&queries, "Who is Lena Hart?\n").unwrap();
    let table = run_ok(dir.path(), &["eval", queries.to_str().unwrap()]);
    assert!(table.contains("Ethical Alignment"));
    assert!(table.contains("Overall"));

    fs::write(&queries, "\n  \n").unwrap();
    let out = run(
        dir.path(),
        &["eval", queries.to_str().unwrap(), "--mode", "no-graph"],
    );
    assert!(!out.status.success());
}

#[test]
fn config_from_environment() {
    let dir = ingested();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "top_n = 0\n").unwrap();
    let out = Command::new(BIN)
        .arg("--store")
        .arg(dir.path())
        .args(["query", "x"])
        .env("DYNAGRAG_CONFIG", &config)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config"));
}

#[test]
fn service_endpoints() {
    let dir = ingested();
    let server = Server::start(dir.path());
    let http = agent();

    let mut health = http.get(&server.url("/healthz")).call().unwrap();
    assert_eq!(health.status(), 200);
    let body: Value = health.body_mut().read_json().unwrap();
    assert_eq!(body["version"], env!("CARGO_PKG_VERSION"));

    let mut stats = http.get(&server.url("/graph/stats")).call().unwrap();
    let before: Value = stats.body_mut().read_json().unwrap();
    assert!(before["entities"].as_u64().unwrap() > 0);
    assert_eq!(before["entities"], before["index_entries"]);

    let empty = http.post(&server.url("/query")).send("").unwrap();
    assert_eq!(empty.status(), 400);
    let blank = http
        .post(&server.url("/query"))
        .send_json(json!({ "query": "  " }))
        .unwrap();
    assert_eq!(blank.status(), 400);
    let zero = http
        .post(&server.url("/query"))
        .send_json(json!({ "query": "dam", "top_n": 0 }))
        .unwrap();
    assert_eq!(zero.status(), 400);

    let mut traced = http
        .post(&server.url("/query"))
        .send_json(json!({ "query": "dam", "top_n": 2, "diversity": false, "trace": true }))
        .unwrap();
    assert_eq!(traced.status(), 200);
    let traced: Value = traced.body_mut().read_json().unwrap();
    assert_eq!(traced["used_subgraphs"].as_array().unwrap().len(), 2);
    assert!(traced["trace"]["subgraphs"].is_array());

    let bad_ingest = http
        .post(&server.url("/ingest"))
        .send_json(json!({ "paths": [dir.path().join("nope").to_str().unwrap()] }))
        .unwrap();
    assert_eq!(bad_ingest.status(), 400);

    let mut ingest = http
        .post(&server.url("/ingest"))
        .send_json(json!({ "paths": [fixtures().join("append").to_str().unwrap()] }))
        .unwrap();
    assert_eq!(ingest.status(), 200);
    let report: Value = ingest.body_mut().read_json().unwrap();
    assert!(report["reused"].as_u64().unwrap() > 0);

    let mut stats = http.get(&server.url("/graph/stats")).call().unwrap();
    let after: Value = stats.body_mut().read_json().unwrap();
    assert!(after["entities"].as_u64() > before["entities"].as_u64());
    assert_eq!(after["entities"], report["entities"]);
    assert_eq!(after["generation"], 2);
}

#[test]
fn serve_fails_when_port_is_taken() {
    let dir = ingested();
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let out = run(dir.path(), &["serve", "--port", &port]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("binding"));
}
