//! In-browser demo. Builds a graph from pasted text with the mock backend and
//! exposes retrieval, pruning and prompt rendering as JSON strings.

use dynagrag_core::export;
use dynagrag_core::prompting::{dsa_bfs, render_prompt, RenderOptions};
use dynagrag_core::pruning::prune;
use dynagrag_core::retrieval::{retrieve, RetrievalRequest};
use dynagrag_core::store::StoreSnapshot;
use dynagrag_core::{Engine, PipelineConfig};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// The Rust side of the demo, usable without a JS host.
pub struct Session {
    engine: Engine,
    snapshot: StoreSnapshot,
}

impl Session {
    pub fn build(text: &str) -> Result<Session, String> {
        let engine = Engine::new(PipelineConfig::default()).map_err(|e| e.to_string())?;
        let docs = [("pasted".to_string(), text.to_string())];
        let (snapshot, _) = engine
            .ingest_documents(&docs, None)
            .map_err(|e| e.to_string())?;
        Ok(Session { engine, snapshot })
    }

    pub fn stats(&self) -> Value {
        let g = &self.snapshot.graph;
        let mut entities: Vec<(&str, u64)> = g
            .entities()
            .map(|e| (e.canonical_label.as_str(), e.weight))
            .collect();
        entities.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        json!({
            "entities": g.node_count(),
            "relations": g.edge_count(),
            "index_entries": self.snapshot.index.len(),
            "heaviest": entities.iter().take(10).map(|(l, w)| json!({"label": l, "weight": w})).collect::<Vec<_>>(),
        })
    }

    pub fn retrieve(&self, query: &str, top_n: usize, diversity: bool) -> Result<Value, String> {
        let config = self.engine.config();
        let q = self
            .engine
            .gateway()
            .embed_one(query)
            .map_err(|e| e.to_string())?;
        let mut req = RetrievalRequest::new(query, q);
        req.top_n = top_n;
        req.diversity_on = diversity;
        req.max_overlap = config.max_overlap;
        req.backfill = config.backfill;
        let result = retrieve(&self.snapshot.index, &req).map_err(|e| e.to_string())?;
        Ok(json!({
            "selected": result.selected.iter().map(|r| json!({
                "center": r.entry.ego.center,
                "similarity": r.similarity,
                "nodes": r.entry.ego.node_labels.len(),
                "top_nodes": r.entry.top_nodes,
            })).collect::<Vec<_>>(),
            "skipped_for_diversity": result.skipped_for_diversity,
            "backfilled": result.backfilled,
        }))
    }

    /// Pruning scores, traversal order and the rendered prompt for one center.
    pub fn explain(&self, query: &str, center: &str) -> Result<Value, String> {
        let config = self.engine.config();
        let graph = &self.snapshot.graph;
        let entry = self
            .snapshot
            .index
            .get(center)
            .ok_or_else(|| format!("no ego-graph centered on '{center}'"))?;
        let q = self
            .engine
            .gateway()
            .embed_one(query)
            .map_err(|e| e.to_string())?;
        let (mlp, gcn) = self.engine.pruning_params();
        let pruned = prune(graph, &entry.ego, &q, mlp, gcn).map_err(|e| e.to_string())?;
        let tree =
            dsa_bfs(&pruned, graph, &q, config.similarity_anchor).map_err(|e| e.to_string())?;
        let opts = RenderOptions {
            char_budget: config.char_budget,
            summaries_per_node: config.summaries_per_node,
        };
        let prompt = render_prompt(&tree, &pruned, graph, opts).map_err(|e| e.to_string())?;
        let scores = &pruned.pruning_scores;
        Ok(json!({
            "center": center,
            "visit_order": tree.visit_order,
            "nodes": scores.node_scores.iter().map(|(l, s)| json!({
                "label": l,
                "score": s,
                "pruned_weight": pruned.pruned_node_weights[l],
            })).collect::<Vec<_>>(),
            "edges": scores.edge_scores.iter().map(|(k, s)| json!({
                "pair": k.to_string(),
                "score": s,
                "pruned_weight": pruned.pruned_edge_weights[k],
            })).collect::<Vec<_>>(),
            "prompt": prompt.text,
            "truncated": prompt.truncated,
        }))
    }

    pub fn dot(&self) -> String {
        export::to_dot(&self.snapshot.graph)
    }
}

#[wasm_bindgen]
pub struct Demo {
    session: Session,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(text: &str) -> Result<Demo, JsError> {
        Session::build(text)
            .map(|session| Demo { session })
            .map_err(|e| JsError::new(&e))
    }

    pub fn stats(&self) -> String {
        self.session.stats().to_string()
    }

    pub fn retrieve(&self, query: &str, top_n: usize, diversity: bool) -> Result<String, JsError> {
        self.session
            .retrieve(query, top_n, diversity)
            .map(|v| v.to_string())
            .map_err(|e| JsError::new(&e))
    }

    pub fn explain(&self, query: &str, center: &str) -> Result<String, JsError> {
        self.session
            .explain(query, center)
            .map(|v| v.to_string())
            .map_err(|e| JsError::new(&e))
    }

    pub fn dot(&self) -> String {
        self.session.dot()
    }
}
