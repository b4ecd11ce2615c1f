use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dynagrag_core::config::CONFIG_ENV;
use dynagrag_core::export::{self, ExportFormat};
use dynagrag_core::pipeline::{self, QueryOutcome};
use dynagrag_core::{Engine, EvalMode, GraphStore, PipelineConfig, QueryOptions};
use serde_json::json;

mod server;

#[derive(Parser, Debug)]
#[command(name = "dynagrag", version, about = "Graph RAG over ego-graph indexes")]
struct Cli {
    /// TOML config file; falls back to $DYNAGRAG_CONFIG, then built-in defaults.
    #[arg(long, global = true, value_name = "F")]
    config: Option<PathBuf>,
    /// Store directory, overriding `store_dir` from the config.
    #[arg(long, global = true, value_name = "DIR")]
    store: Option<PathBuf>,
    /// Log at debug level.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build (or extend) the graph store from text files or directories.
    Ingest {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        /// Extend the existing store and update its index incrementally.
        #[arg(long)]
        append: bool,
    },
    /// Answer one query against the store.
    Query {
        text: String,
        /// Print the full retrieval/pruning/traversal trace as JSON.
        #[arg(long)]
        trace: bool,
        #[arg(long, value_name = "N")]
        top_n: Option<usize>,
        #[arg(long)]
        no_diversity: bool,
        /// Write each rendered subgraph prompt to DIR.
        #[arg(long, value_name = "DIR")]
        dump_prompts: Option<PathBuf>,
        /// Print `{answer, used_subgraphs}` as JSON instead of plain text.
        #[arg(long)]
        json: bool,
    },
    /// Judge answers to every line of a queries file on the nine metrics.
    Eval {
        queries: PathBuf,
        #[arg(long, default_value = "dynagrag")]
        mode: EvalMode,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Export the stored graph.
    Export {
        #[arg(long, default_value = "dot")]
        format: ExportFormat,
        /// Output file (dot) or directory for nodes.csv/edges.csv (csv).
        /// Without it the export goes to stdout.
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(if cli.verbose {
            tracing::Level::DEBUG
        } else {
            tracing::Level::WARN
        })
        .init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = PipelineConfig::load(cli.config.as_deref())
        .with_context(|| format!("loading config (flag --config or ${CONFIG_ENV})"))?;
    if let Some(dir) = &cli.store {
        config.store_dir = dir.clone();
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let config = load_config(&cli)?;
    let store = GraphStore::new(config.store_dir.clone());
    let engine = Engine::new(config)?;
    match cli.command {
        Command::Ingest { paths, append } => {
            let (_, report) = engine.ingest_paths(&paths, &store, append)?;
            emit(&format!("{}\n", serde_json::to_string_pretty(&report)?))?;
        }
        Command::Query {
            text,
            trace,
            top_n,
            no_diversity,
            dump_prompts,
            json,
        } => {
            let snapshot = engine.load_store(&store)?;
            let opts = QueryOptions {
                top_n,
                diversity: no_diversity.then_some(false),
                trace,
            };
            let outcome = engine.query(&snapshot, &text, &opts)?;
            if let Some(dir) = &dump_prompts {
                dump(dir, &outcome)?;
            }
            if trace || json {
                let mut body = json!({
                    "answer": outcome.answer.text,
                    "used_subgraphs": outcome.answer.used_responses,
                });
                if let Some(t) = &outcome.trace {
                    body["trace"] = serde_json::to_value(t)?;
                }
                emit(&format!("{}\n", serde_json::to_string_pretty(&body)?))?;
            } else {
                emit(&format!(
                    "{}\n\nused subgraphs: {}\n",
                    outcome.answer.text,
                    outcome.answer.used_responses.join(", ")
                ))?;
            }
        }
        Command::Eval {
            queries,
            mode,
            json,
        } => {
            let text = fs::read_to_string(&queries)
                .with_context(|| format!("reading {}", queries.display()))?;
            let queries = pipeline::read_queries(&text)?;
            let snapshot = match mode {
                EvalMode::Dynagrag => Some(engine.load_store(&store)?),
                EvalMode::NoGraph => None,
            };
            let report = engine.eval(snapshot.as_ref(), &queries, mode)?;
            if json {
                emit(&format!("{}\n", serde_json::to_string_pretty(&report)?))?;
            } else {
                emit(&report.table())?;
            }
            for row in report.rows.iter().filter(|r| r.error.is_some()) {
                eprintln!(
                    "failed: {}: {}",
                    row.query,
                    row.error.as_deref().unwrap_or("")
                );
            }
            if report.too_many_failures() {
                eprintln!(
                    "error: failure rate {:.3} exceeds {:.3}",
                    report.failure_rate(),
                    report.max_failure_rate
                );
                return Ok(ExitCode::from(1));
            }
        }
        Command::Serve { port, host } => {
            let snapshot = engine.load_store(&store)?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(server::serve(engine, store, snapshot, &host, port))?;
        }
        Command::Export { format, output } => {
            let graph = engine.load_store(&store)?.graph;
            match (format, output) {
                (ExportFormat::Dot, None) => emit(&export::to_dot(&graph))?,
                (ExportFormat::Dot, Some(path)) => write(&path, &export::to_dot(&graph))?,
                (ExportFormat::Csv, None) => {
                    let (nodes, edges) = export::to_csv(&graph)?;
                    emit(&format!("{nodes}\n{edges}"))?;
                }
                (ExportFormat::Csv, Some(dir)) => {
                    let (nodes, edges) = export::to_csv(&graph)?;
                    fs::create_dir_all(&dir)?;
                    write(&dir.join("nodes.csv"), &nodes)?;
                    write(&dir.join("edges.csv"), &edges)?;
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Writes to stdout, treating a closed pipe as success.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn dump(dir: &Path, outcome: &QueryOutcome) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    if outcome.prompts.is_empty() {
        bail!("no prompts to dump");
    }
    for (i, (center, prompt)) in outcome.prompts.iter().enumerate() {
        let name = format!("prompt_{:02}_{}.txt", i + 1, file_stem(center));
        write(&dir.join(name), &prompt.text)?;
    }
    Ok(())
}

fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}
