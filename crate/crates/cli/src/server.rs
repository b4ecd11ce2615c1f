//! HTTP service. Queries read an immutable snapshot; an ingest builds a new
//! one off to the side and swaps it in when the store has been written.

use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use anyhow::{Context, Result};
use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dynagrag_core::orchestration::OrchestrationError;
use dynagrag_core::store::StoreSnapshot;
use dynagrag_core::{Engine, GraphStore, PipelineError, QueryOptions};
use serde::Deserialize;
use serde_json::{json, Value};

struct AppState {
    engine: Engine,
    store: GraphStore,
    snapshot: RwLock<Arc<StoreSnapshot>>,
    ingest_lock: Mutex<()>,
}

impl AppState {
    fn current(&self) -> Arc<StoreSnapshot> {
        self.snapshot
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .clone()
    }
}

#[derive(Deserialize)]
struct QueryBody {
    query: String,
    top_n: Option<usize>,
    diversity: Option<bool>,
    #[serde(default)]
    trace: bool,
}

#[derive(Deserialize)]
struct IngestBody {
    paths: Vec<PathBuf>,
    /// Defaults to extending the served store.
    append: Option<bool>,
}

pub async fn serve(
    engine: Engine,
    store: GraphStore,
    snapshot: StoreSnapshot,
    host: &str,
    port: u16,
) -> Result<()> {
    let state = Arc::new(AppState {
        engine,
        store,
        snapshot: RwLock::new(Arc::new(snapshot)),
        ingest_lock: Mutex::new(()),
    });
    let listener = tokio::net::TcpListener::bind((host, port))
        .await
        .with_context(|| format!("binding {host}:{port}"))?;
    let addr = listener.local_addr()?;
    println!("listening on http://{addr}");
    std::io::stdout().flush()?;
    tracing::info!(%addr, "serving");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown_signal())
        .await?;
    Ok(())
}

fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/graph/stats", get(stats))
        .route("/query", post(query))
        .route("/ingest", post(ingest))
        .with_state(state)
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

fn error(status: StatusCode, message: impl std::fmt::Display) -> Response {
    (status, Json(json!({ "error": message.to_string() }))).into_response()
}

fn pipeline_status(e: &PipelineError) -> StatusCode {
    match e {
        PipelineError::Orchestration(OrchestrationError::Input(_))
        | PipelineError::Ingest(_)
        | PipelineError::Retrieval(_) => StatusCode::BAD_REQUEST,
        PipelineError::ExtractionFailureRate { .. } => StatusCode::UNPROCESSABLE_ENTITY,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

#[allow(clippy::result_large_err)]
fn parse<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, Response> {
    if body.is_empty() {
        return Err(error(StatusCode::BAD_REQUEST, "empty request body"));
    }
    serde_json::from_slice(body)
        .map_err(|e| error(StatusCode::BAD_REQUEST, format!("bad json: {e}")))
}

async fn healthz() -> Json<Value> {
    Json(json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }))
}

async fn stats(State(state): State<Arc<AppState>>) -> Json<Value> {
    let snap = state.current();
    Json(json!({
        "entities": snap.graph.node_count(),
        "relations": snap.graph.edge_count(),
        "index_entries": snap.index.len(),
        "generation": snap.manifest.generation,
    }))
}

async fn query(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: QueryBody = match parse(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    if req.query.trim().is_empty() {
        return error(StatusCode::BAD_REQUEST, "query must not be empty");
    }
    if req.top_n == Some(0) {
        return error(StatusCode::BAD_REQUEST, "top_n must be at least 1");
    }
    let snapshot = state.current();
    let worker = state.clone();
    let result = tokio::task::spawn_blocking(move || {
        let opts = QueryOptions {
            top_n: req.top_n,
            diversity: req.diversity,
            trace: req.trace,
        };
        worker.engine.query(&snapshot, &req.query, &opts)
    })
    .await;
    match result {
        Ok(Ok(outcome)) => {
            let mut body = json!({
                "answer": outcome.answer.text,
                "used_subgraphs": outcome.answer.used_responses,
            });
            if let Some(t) = outcome.trace {
                body["trace"] = serde_json::to_value(t).unwrap_or(Value::Null);
            }
            Json(body).into_response()
        }
        Ok(Err(e)) => error(pipeline_status(&e), e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

async fn ingest(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: IngestBody = match parse(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    if req.paths.is_empty() {
        return error(StatusCode::BAD_REQUEST, "paths must not be empty");
    }
    let worker = state.clone();
    let result = tokio::task::spawn_blocking(move || {
        let _guard = worker.ingest_lock.lock().unwrap_or_else(|p| p.into_inner());
        let (snapshot, report) =
            worker
                .engine
                .ingest_paths(&req.paths, &worker.store, req.append.unwrap_or(true))?;
        *worker.snapshot.write().unwrap_or_else(|p| p.into_inner()) = Arc::new(snapshot);
        Ok::<_, PipelineError>(report)
    })
    .await;
    match result {
        Ok(Ok(report)) => Json(serde_json::to_value(report).unwrap_or(Value::Null)).into_response(),
        Ok(Err(e)) => error(pipeline_status(&e), e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}
