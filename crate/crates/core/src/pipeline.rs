//! End-to-end ingest, query and evaluation over a graph store.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, PipelineConfig, TokenizerKind};
use crate::consolidation::{self, ClusterOptions, ConsolidationError, MentionPools};
use crate::ego_index::{build_index, EgoError, EgoIndex};
use crate::graph::PairKey;
use crate::ingestion::{
    self, chunk_document, embed_mentions, extract_mentions, HeuristicTokenizer, IngestError,
    TextChunk, Tokenizer, WhitespaceTokenizer,
};
use crate::llm::{Gateway, LlmError};
use crate::orchestration::{
    self, FinalAnswer, IntermediateResponse, JudgeReport, MetricScore, OrchestrationError,
    PromptSet, NINE_METRICS,
};
use crate::parallel::parallel_map;
use crate::prompting::{dsa_bfs, render_prompt, HardPrompt, PromptError, RenderOptions};
use crate::pruning::{self, GcnParams, MlpParams, PruneError, PruningParams};
use crate::retrieval::{self, RetrievalError, RetrievalRequest};
use crate::store::{GraphStore, StoreError, StoreSnapshot};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("consolidation: {0}")]
    Consolidation(#[from] ConsolidationError),
    #[error("index: {0}")]
    Index(#[from] EgoError),
    #[error("retrieval: {0}")]
    Retrieval(#[from] RetrievalError),
    #[error("pruning: {0}")]
    Prune(#[from] PruneError),
    #[error("prompt: {0}")]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Orchestration(#[from] OrchestrationError),
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error(transparent)]
    Gateway(#[from] LlmError),
    #[error("{failed} of {total} chunks failed extraction; first failures:\n{diagnostics}")]
    ExtractionFailureRate {
        failed: usize,
        total: usize,
        diagnostics: String,
    },
    #[error("{0}")]
    State(String),
    #[error("queries file contains no queries")]
    EmptyQueries,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct IngestReport {
    pub documents: usize,
    pub chunks: usize,
    pub failed_chunks: usize,
    pub entity_mentions: usize,
    pub relation_mentions: usize,
    pub dropped_relations: usize,
    pub collapsed_relations: u64,
    pub entities: usize,
    pub relations: usize,
    pub index_entries: usize,
    pub reencoded: usize,
    pub reused: usize,
    pub removed: usize,
    pub generation: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QueryOptions {
    pub top_n: Option<usize>,
    pub diversity: Option<bool>,
    pub trace: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateTrace {
    pub center: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredElement {
    pub id: String,
    pub score: f64,
    pub pruned_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubgraphTrace {
    pub center: String,
    pub similarity: f64,
    pub nodes: Vec<ScoredElement>,
    pub edges: Vec<ScoredElement>,
    pub visit_order: Vec<String>,
    pub non_tree_edges: Vec<String>,
    pub prompt: String,
    pub response: IntermediateResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryTrace {
    pub ranking: Vec<CandidateTrace>,
    pub skipped_for_diversity: usize,
    pub backfilled: usize,
    pub subgraphs: Vec<SubgraphTrace>,
    pub synthesis_prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryOutcome {
    pub answer: FinalAnswer,
    pub prompts: Vec<(String, HardPrompt)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<QueryTrace>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    Dynagrag,
    NoGraph,
}

impl std::str::FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dynagrag" => Ok(Self::Dynagrag),
            "no-graph" => Ok(Self::NoGraph),
            other => Err(format!(
                "unknown eval mode '{other}' (expected dynagrag or no-graph)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub query: String,
    pub answer: Option<String>,
    pub report: Option<JudgeReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub rows: Vec<EvalRow>,
    /// Per-metric means over rows that were judged; empty when none were.
    pub means: Vec<MetricScore>,
    pub overall: Option<f64>,
    pub failed: usize,
    pub max_failure_rate: f64,
}

impl EvalReport {
    pub fn failure_rate(&self) -> f64 {
        if self.rows.is_empty() {
            0.0
        } else {
            self.failed as f64 / self.rows.len() as f64
        }
    }

    pub fn too_many_failures(&self) -> bool {
        self.failure_rate() > self.max_failure_rate
    }

    /// Plain-text table of per-metric means.
    pub fn table(&self) -> String {
        let width = NINE_METRICS.iter().map(|m| m.len()).max().unwrap_or(0);
        let mut out = format!(
            "mode: {}\nrows: {} judged, {} failed\n",
            match self.mode {
                EvalMode::Dynagrag => "dynagrag",
                EvalMode::NoGraph => "no-graph",
            },
            self.rows.len() - self.failed,
            self.failed
        );
        for m in &self.means {
            out.push_str(&format!("{:<width$}  {:.4}\n", m.name, m.score));
        }
        match self.overall {
            Some(o) => out.push_str(&format!("{:<width$}  {:.4}\n", "Overall", o)),
            None => out.push_str("no rows were judged\n"),
        }
        out
    }
}

/// Column means of judged rows; `None` when no row was judged.
pub fn eval_means(rows: &[EvalRow]) -> (Vec<MetricScore>, Option<f64>) {
    let reports: Vec<&JudgeReport> = rows.iter().filter_map(|r| r.report.as_ref()).collect();
    if reports.is_empty() {
        return (Vec::new(), None);
    }
    let n = reports.len() as f64;
    let means = NINE_METRICS
        .iter()
        .enumerate()
        .map(|(i, name)| MetricScore {
            name: name.to_string(),
            score: reports.iter().map(|r| r.scores[i].score).sum::<f64>() / n,
        })
        .collect();
    let overall = reports.iter().map(|r| r.overall).sum::<f64>() / n;
    (means, Some(overall))
}

pub fn read_queries(text: &str) -> Result<Vec<String>, PipelineError> {
    let queries: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if queries.is_empty() {
        return Err(PipelineError::EmptyQueries);
    }
    Ok(queries)
}

pub struct Engine {
    config: PipelineConfig,
    gateway: Gateway,
    prompts: PromptSet,
    extraction_template: String,
    mlp: MlpParams,
    gcn: GcnParams,
}

fn read_param_file(path: &Path) -> Result<PruningParams, PipelineError> {
    let f = std::fs::File::open(path).map_err(|e| {
        PipelineError::Prune(PruneError::Format(format!("{}: {e}", path.display())))
    })?;
    Ok(pruning::read_params(std::io::BufReader::new(f))?)
}

impl Engine {
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        let gateway = Gateway::from_config(&config.backend, config.seeds.mock_seed)?;
        Self::with_gateway(config, gateway)
    }

    pub fn with_gateway(config: PipelineConfig, gateway: Gateway) -> Result<Self, PipelineError> {
        config.validate()?;
        let prompts = match &config.prompts_dir {
            Some(dir) => PromptSet::load_dir(dir)?,
            None => PromptSet::default(),
        };
        let extraction_template = match &config.extraction_template {
            Some(p) => ingestion::read_document(p)?,
            None => ingestion::DEFAULT_EXTRACTION_TEMPLATE.to_string(),
        };
        ingestion::validate_template(&extraction_template)?;
        let mlp = match &config.mlp_params_file {
            Some(p) => match read_param_file(p)? {
                PruningParams::Mlp(m) => m,
                PruningParams::Gcn(_) => {
                    return Err(
                        PruneError::Params(format!("{} holds GCN parameters", p.display())).into(),
                    )
                }
            },
            None => MlpParams::seeded(config.seeds.mlp_seed, config.mlp_hidden),
        };
        let gcn = match &config.gcn_params_file {
            Some(p) => match read_param_file(p)? {
                PruningParams::Gcn(g) => g,
                PruningParams::Mlp(_) => {
                    return Err(
                        PruneError::Params(format!("{} holds MLP parameters", p.display())).into(),
                    )
                }
            },
            None if config.gcn_depth == 0 => GcnParams::identity(),
            None => GcnParams::seeded(config.seeds.gcn_seed, config.gcn_depth, config.gcn_hidden),
        };
        Ok(Self {
            config,
            gateway,
            prompts,
            extraction_template,
            mlp,
            gcn,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn prompts(&self) -> &PromptSet {
        &self.prompts
    }

    pub fn pruning_params(&self) -> (&MlpParams, &GcnParams) {
        (&self.mlp, &self.gcn)
    }

    fn tokenizer(&self) -> Box<dyn Tokenizer> {
        match self.config.tokenizer {
            TokenizerKind::Whitespace => Box::new(WhitespaceTokenizer),
            TokenizerKind::Heuristic => Box::new(HeuristicTokenizer),
        }
    }

    /// Builds a snapshot from `(doc_id, text)` pairs, extending `base` when given.
    pub fn ingest_documents(
        &self,
        documents: &[(String, String)],
        base: Option<&StoreSnapshot>,
    ) -> Result<(StoreSnapshot, IngestReport), PipelineError> {
        let tokenizer = self.tokenizer();
        let mut chunks: Vec<TextChunk> = Vec::new();
        for (doc_id, text) in documents {
            chunks.extend(chunk_document(
                doc_id,
                text,
                self.config.chunk_tokens,
                self.config.overlap_tokens,
                tokenizer.as_ref(),
            )?);
        }
        let mut report = IngestReport {
            documents: documents.len(),
            chunks: chunks.len(),
            ..Default::default()
        };
        let results = parallel_map(&chunks, self.gateway.max_parallel(), |c| {
            extract_mentions(&self.gateway, c, &self.extraction_template)
        });
        let mut entity_mentions = Vec::new();
        let mut relation_mentions = Vec::new();
        let mut failures = Vec::new();
        for (chunk, r) in chunks.iter().zip(results) {
            match r {
                Ok(ex) => {
                    report.dropped_relations += ex.dropped_relations;
                    entity_mentions.extend(ex.entities);
                    relation_mentions.extend(ex.relations);
                }
                Err(e) => failures.push(format!("{}#{}: {e}", chunk.doc_id, chunk.chunk_index)),
            }
        }
        report.failed_chunks = failures.len();
        if !chunks.is_empty()
            && failures.len() as f64 / chunks.len() as f64 > self.config.max_extraction_failure_rate
        {
            return Err(PipelineError::ExtractionFailureRate {
                failed: failures.len(),
                total: chunks.len(),
                diagnostics: failures
                    .iter()
                    .take(5)
                    .cloned()
                    .collect::<Vec<_>>()
                    .join("\n"),
            });
        }
        for f in &failures {
            tracing::warn!(failure = %f, "chunk skipped");
        }
        report.entity_mentions = entity_mentions.len();
        report.relation_mentions = relation_mentions.len();

        let mut pools = base.map_or_else(MentionPools::new, |b| b.pools.clone());
        if !(entity_mentions.is_empty() && relation_mentions.is_empty()) {
            let emb = embed_mentions(&self.gateway, &entity_mentions, &relation_mentions)?;
            pools.add_entities(&entity_mentions, &emb.entities)?;
            pools.add_relations(&relation_mentions, &emb.relations)?;
        }
        if pools.is_empty() {
            return Err(IngestError::NoMentions.into());
        }
        let options = ClusterOptions {
            similarity_threshold: self.config.similarity_threshold,
            use_llm: self.config.use_llm_synonyms,
        };
        let built = consolidation::consolidate(&pools, Some(&self.gateway), &options)?;
        report.collapsed_relations = built.collapsed_relations;
        let graph = built.graph;
        let (k, m) = (self.config.k_hops, self.config.top_node_count);

        let index = match base {
            Some(b)
                if b.index.k() == k
                    && b.index.m() == m
                    && b.index.dimension() == graph.dimension() =>
            {
                let changed = consolidation::changed_nodes(&b.graph, &graph);
                let (index, stats) = b.index.update(&b.graph, &graph, &changed)?;
                report.reencoded = stats.reencoded;
                report.reused = stats.reused;
                report.removed = stats.removed;
                index
            }
            _ => {
                let index = build_index(&graph, k, m)?;
                report.reencoded = index.len();
                index
            }
        };
        report.generation = base.map_or(1, |b| b.manifest.generation + 1);
        report.entities = graph.node_count();
        report.relations = graph.edge_count();
        report.index_entries = index.len();
        let manifest = crate::store::Manifest {
            format: crate::store::STORE_FORMAT.into(),
            version: crate::store::STORE_VERSION,
            generation: report.generation,
            entities: graph.node_count(),
            relations: graph.edge_count(),
            index_entries: index.len(),
            k_hops: k,
            top_node_count: m,
        };
        Ok((
            StoreSnapshot {
                graph,
                index,
                pools,
                manifest,
            },
            report,
        ))
    }

    /// Reads the input files, ingests them and saves the store. With `append`
    /// an existing store is extended and its index updated incrementally.
    pub fn ingest_paths<P: AsRef<Path>>(
        &self,
        paths: &[P],
        store: &GraphStore,
        append: bool,
    ) -> Result<(StoreSnapshot, IngestReport), PipelineError> {
        let files: Vec<PathBuf> = ingestion::collect_input_files(paths)?;
        let mut documents = Vec::with_capacity(files.len());
        for f in &files {
            documents.push((f.display().to_string(), ingestion::read_document(f)?));
        }
        let base = if append && store.exists() {
            Some(store.load()?)
        } else {
            None
        };
        let (snapshot, report) = self.ingest_documents(&documents, base.as_ref())?;
        store.save(
            &snapshot.graph,
            &snapshot.index,
            &snapshot.pools,
            snapshot.manifest.generation,
        )?;
        Ok((snapshot, report))
    }

    pub fn load_store(&self, store: &GraphStore) -> Result<StoreSnapshot, PipelineError> {
        if !store.exists() {
            return Err(PipelineError::State(format!(
                "no store at {} (run `dynagrag ingest` first)",
                store.dir().display()
            )));
        }
        Ok(store.load()?)
    }

    pub fn query(
        &self,
        snapshot: &StoreSnapshot,
        query: &str,
        opts: &QueryOptions,
    ) -> Result<QueryOutcome, PipelineError> {
        if query.trim().is_empty() {
            return Err(OrchestrationError::Input("empty query".into()).into());
        }
        let q = self.gateway.embed_one(query)?;
        let mut request = RetrievalRequest::new(query, q.clone());
        request.top_n = opts.top_n.unwrap_or(self.config.top_n);
        request.diversity_on = opts.diversity.unwrap_or(self.config.diversity_on);
        request.max_overlap = self.config.max_overlap;
        request.backfill = self.config.backfill;
        let result = retrieval::retrieve(&snapshot.index, &request)?;
        let graph = &snapshot.graph;
        let render = RenderOptions {
            char_budget: self.config.char_budget,
            summaries_per_node: self.config.summaries_per_node,
        };

        let per_subgraph = parallel_map(&result.selected, self.gateway.max_parallel(), |sel| {
            let ego = &sel.entry.ego;
            let pruned = pruning::prune(graph, ego, &q, &self.mlp, &self.gcn)?;
            let tree = dsa_bfs(&pruned, graph, &q, self.config.similarity_anchor)?;
            let prompt = render_prompt(&tree, &pruned, graph, render)?;
            let response = orchestration::answer_subgraph(
                &self.gateway,
                &self.prompts,
                query,
                &ego.center,
                &prompt,
            )?;
            let response =
                orchestration::score_helpfulness(&self.gateway, &self.prompts, query, response)?;
            Ok::<_, PipelineError>((sel.similarity, pruned, tree, prompt, response))
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;

        let responses: Vec<IntermediateResponse> =
            per_subgraph.iter().map(|s| s.4.clone()).collect();
        let answer =
            orchestration::synthesize_final(&self.gateway, &self.prompts, query, &responses)?;

        let trace = opts.trace.then(|| {
            let mut sorted = responses.clone();
            orchestration::sort_by_helpfulness(&mut sorted);
            QueryTrace {
                ranking: retrieval::rank(&snapshot.index, &q)
                    .map(|r| {
                        r.into_iter()
                            .map(|c| CandidateTrace {
                                center: c.entry.ego.center.clone(),
                                similarity: c.similarity,
                            })
                            .collect()
                    })
                    .unwrap_or_default(),
                skipped_for_diversity: result.skipped_for_diversity,
                backfilled: result.backfilled,
                subgraphs: per_subgraph
                    .iter()
                    .map(|(sim, pruned, tree, prompt, response)| SubgraphTrace {
                        center: pruned.ego.center.clone(),
                        similarity: *sim,
                        nodes: pruned
                            .pruning_scores
                            .node_scores
                            .iter()
                            .map(|(l, s)| ScoredElement {
                                id: l.clone(),
                                score: *s,
                                pruned_weight: pruned.pruned_node_weights[l],
                            })
                            .collect(),
                        edges: pruned
                            .pruning_scores
                            .edge_scores
                            .iter()
                            .map(|(p, s)| ScoredElement {
                                id: p.to_string(),
                                score: *s,
                                pruned_weight: pruned.pruned_edge_weights[p],
                            })
                            .collect(),
                        visit_order: tree.visit_order.clone(),
                        non_tree_edges: tree
                            .non_tree_edges
                            .iter()
                            .map(PairKey::to_string)
                            .collect(),
                        prompt: prompt.text.clone(),
                        response: response.clone(),
                    })
                    .collect(),
                synthesis_prompt: orchestration::synthesis_prompt(&self.prompts, query, &sorted),
            }
        });
        Ok(QueryOutcome {
            answer,
            prompts: per_subgraph
                .into_iter()
                .map(|(_, pruned, _, prompt, _)| (pruned.ego.center, prompt))
                .collect(),
            trace,
        })
    }

    /// Judges every query's answer. Rows that fail are recorded and left out
    /// of the means; the caller decides what the failure rate means.
    pub fn eval(
        &self,
        snapshot: Option<&StoreSnapshot>,
        queries: &[String],
        mode: EvalMode,
    ) -> Result<EvalReport, PipelineError> {
        if queries.is_empty() {
            return Err(PipelineError::EmptyQueries);
        }
        if mode == EvalMode::Dynagrag && snapshot.is_none() {
            return Err(PipelineError::State("dynagrag mode needs a store".into()));
        }
        let mut rows = Vec::with_capacity(queries.len());
        for query in queries {
            let answer = match (mode, snapshot) {
                (EvalMode::Dynagrag, Some(s)) => self
                    .query(s, query, &QueryOptions::default())
                    .map(|o| o.answer.text),
                _ => {
                    orchestration::vanilla_answer(&self.gateway, query).map_err(PipelineError::from)
                }
            };
            let row = match answer {
                Ok(answer) => {
                    match orchestration::judge_nine_metrics(
                        &self.gateway,
                        &self.prompts,
                        query,
                        &answer,
                    ) {
                        Ok(report) => EvalRow {
                            query: query.clone(),
                            answer: Some(answer),
                            report: Some(report),
                            error: None,
                        },
                        Err(e) => EvalRow {
                            query: query.clone(),
                            answer: Some(answer),
                            report: None,
                            error: Some(e.to_string()),
                        },
                    }
                }
                Err(e) => EvalRow {
                    query: query.clone(),
                    answer: None,
                    report: None,
                    error: Some(e.to_string()),
                },
            };
            rows.push(row);
        }
        let failed = rows.iter().filter(|r| r.report.is_none()).count();
        let (means, overall) = eval_means(&rows);
        Ok(EvalReport {
            mode,
            rows,
            means,
            overall,
            failed,
            max_failure_rate: self.config.max_eval_failure_rate,
        })
    }
}

/// Every center whose ego-graph contains a node of `labels`; handy for
/// inspecting what an append touched.
pub fn centers_touching(index: &EgoIndex, labels: &BTreeSet<String>) -> Vec<String> {
    index
        .entries()
        .iter()
        .filter(|e| e.ego.node_labels.iter().any(|l| labels.contains(l)))
        .map(|e| e.ego.center.clone())
        .collect()
}
