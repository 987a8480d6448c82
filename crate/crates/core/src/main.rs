use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use docfusion::chunker::{chunk_stats, ChunkMethod, ChunkStats, Chunker};
use docfusion::pipeline::{
    self, build_trees, chunk_corpus, load_corpus, ChunkInput, Corpus, EvalInputs, Run,
    StageSummary,
};
use docfusion::provider::{HierarchyProvider, ProviderConfig, ProviderKind};
use docfusion::store::{self, ConfigSnapshot};

#[derive(Parser)]
#[command(name = "docfusion", version, about = "Hierarchy-aware document chunking and BM25 evaluation")]
struct Cli {
    /// Worker threads for document-level parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// TOML file with [chunk], [provider] and [retrieval] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build document trees from layouts.
    Tree {
        #[arg(long)]
        layouts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        provider: ProviderFlags,
    },
    /// Chunk layouts (building trees first for the hierarchical method).
    Chunk {
        #[arg(long)]
        layouts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        chunk: ChunkFlags,
        #[command(flatten)]
        provider: ProviderFlags,
    },
    /// Build the BM25 index over a run's chunks.
    Index {
        #[arg(long)]
        out: PathBuf,
        /// Chunks to index instead of <out>/chunks.jsonl.
        #[arg(long)]
        chunks: Option<PathBuf>,
        #[command(flatten)]
        bm25: Bm25Flags,
    },
    /// Retrieve top-k chunks for every question.
    Retrieve {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        qa: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Score retrieval results (and optionally trees and answers).
    Eval {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        layouts: PathBuf,
        #[arg(long)]
        qa: PathBuf,
        #[command(flatten)]
        extra: EvalFlags,
    },
    /// tree, chunk, index, retrieve and eval in one go.
    Pipeline {
        #[arg(long)]
        layouts: PathBuf,
        #[arg(long)]
        qa: PathBuf,
        /// Run directory; defaults to runs/<run_id>.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        chunk: ChunkFlags,
        #[command(flatten)]
        provider: ProviderFlags,
        #[command(flatten)]
        bm25: Bm25Flags,
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        extra: EvalFlags,
    },
    /// Chunk statistics: one chunks file, or every method over a corpus.
    Stats {
        #[arg(long, conflicts_with = "layouts", required_unless_present = "layouts")]
        chunks: Option<PathBuf>,
        #[arg(long)]
        layouts: Option<PathBuf>,
        #[arg(long)]
        max_len: Option<usize>,
        #[command(flatten)]
        provider: ProviderFlags,
    },
}

#[derive(Args, Default)]
struct ChunkFlags {
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Multidocfusion,
    Length,
    Structure,
}

impl From<MethodArg> for ChunkMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Multidocfusion => ChunkMethod::MultiDocFusion,
            MethodArg::Length => ChunkMethod::Length,
            MethodArg::Structure => ChunkMethod::Structure,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProviderArg {
    Heuristic,
    File,
    Llm,
}

#[derive(Args, Default)]
struct ProviderFlags {
    #[arg(long, value_enum)]
    provider: Option<ProviderArg>,
    /// Assignment file for the file provider.
    #[arg(long)]
    assignments: Option<PathBuf>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Environment variable holding the bearer token.
    #[arg(long)]
    api_key_env: Option<String>,
    #[arg(long)]
    timeout: Option<f64>,
    #[arg(long)]
    retries: Option<u32>,
    #[arg(long)]
    max_concurrent: Option<usize>,
}

#[derive(Args, Default)]
struct Bm25Flags {
    #[arg(long)]
    k1: Option<f64>,
    #[arg(long)]
    b: Option<f64>,
}

#[derive(Args, Default)]
struct EvalFlags {
    /// Directory of gold tree files for TEDS and hierarchy F1.
    #[arg(long)]
    gold_trees: Option<PathBuf>,
    /// JSON lines of {query_id, answer} for ANLS and ROUGE-L.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

impl EvalFlags {
    fn inputs(&self) -> EvalInputs {
        EvalInputs {
            gold_trees: self.gold_trees.clone(),
            predictions: self.predictions.clone(),
        }
    }
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    chunk: docfusion::ChunkConfig,
    provider: ProviderConfig,
    retrieval: store::RetrievalSettings,
    jobs: Option<usize>,
}

fn load_config_file(path: &Path) -> Result<ConfigFile> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

impl ChunkFlags {
    fn apply(&self, config: &mut ConfigSnapshot) {
        if let Some(m) = self.method {
            config.chunk.method = m.into();
        }
        if let Some(n) = self.max_len {
            config.chunk.max_len = n;
        }
    }
}

impl Bm25Flags {
    fn apply(&self, config: &mut ConfigSnapshot) {
        if let Some(k1) = self.k1 {
            config.retrieval.k1 = k1;
        }
        if let Some(b) = self.b {
            config.retrieval.b = b;
        }
    }
}

impl ProviderFlags {
    fn apply(&self, config: &mut ConfigSnapshot) -> Result<()> {
        let provider = &mut config.provider;
        match self.provider {
            Some(ProviderArg::Heuristic) => provider.kind = ProviderKind::Heuristic,
            Some(ProviderArg::File) => {
                let path = match (&self.assignments, &provider.kind) {
                    (Some(p), _) => p.clone(),
                    (None, ProviderKind::File { file_path }) => file_path.clone(),
                    (None, _) => bail!("--provider file needs --assignments <path>"),
                };
                provider.kind = ProviderKind::File { file_path: path };
            }
            Some(ProviderArg::Llm) if !matches!(provider.kind, ProviderKind::LlmEndpoint { .. }) => {
                let Some(url) = &self.endpoint else {
                    bail!("--provider llm needs --endpoint <url>");
                };
                provider.kind = ProviderConfig::llm(url.clone(), self.model.clone().unwrap_or_default()).kind;
            }
            _ => {}
        }
        if let ProviderKind::File { file_path } = &mut provider.kind {
            if let Some(p) = &self.assignments {
                *file_path = p.clone();
            }
        }
        if let ProviderKind::LlmEndpoint {
            endpoint_url,
            model_name,
            api_key_env_var,
            request_timeout_seconds,
            max_retries,
        } = &mut provider.kind
        {
            if let Some(v) = &self.endpoint {
                *endpoint_url = v.clone();
            }
            if let Some(v) = &self.model {
                *model_name = v.clone();
            }
            if let Some(v) = &self.api_key_env {
                *api_key_env_var = Some(v.clone());
            }
            if let Some(v) = self.timeout {
                *request_timeout_seconds = v;
            }
            if let Some(v) = self.retries {
                *max_retries = v;
            }
        }
        if let Some(n) = self.max_concurrent {
            provider.max_concurrent_requests = n;
        }
        provider.validate()?;
        Ok(())
    }
}

/// Config precedence: flags, then the --config file, then the run's
/// existing manifest, then defaults.
fn base_config(file: Option<&ConfigFile>, run_dir: Option<&Path>) -> ConfigSnapshot {
    if let Some(f) = file {
        return ConfigSnapshot {
            chunk: f.chunk.clone(),
            provider: f.provider.clone(),
            retrieval: f.retrieval,
        };
    }
    run_dir
        .and_then(|d| store::read_manifest(d).ok())
        .map(|m| m.config)
        .unwrap_or_default()
}

fn existing_digest(run_dir: &Path) -> String {
    store::read_manifest(run_dir)
        .map(|m| m.corpus_digest)
        .unwrap_or_default()
}

fn report_failures(summary: &StageSummary) {
    for f in &summary.failures {
        eprintln!("skipped {}: {}", f.document, f.error);
    }
}

fn stats_table(rows: &[(&str, ChunkStats)]) -> String {
    let mut out = format!("{:<18}{:>10}{:>14}{:>14}\n", "Method", "# Chunks", "Avg. Chars", "Avg. Tokens");
    for (name, s) in rows {
        out.push_str(&format!(
            "{:<18}{:>10}{:>14.2}{:>14.2}\n",
            name, s.chunk_count, s.avg_chars, s.avg_tokens
        ));
    }
    out
}

fn read_qa(path: &Path) -> Result<Vec<docfusion::metrics::QaRecord>> {
    let qa = store::read_qa(path)?;
    if qa.is_empty() {
        bail!("no questions in {}", path.display());
    }
    Ok(qa)
}

fn run(cli: Cli) -> Result<i32> {
    let file = cli.config.as_deref().map(load_config_file).transpose()?;
    if let Some(jobs) = cli.jobs.or(file.as_ref().and_then(|f| f.jobs)) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .context("configuring worker threads")?;
    }

    match cli.command {
        Command::Tree { layouts, out, provider } => {
            let corpus = load_corpus(&layouts)?;
            let mut config = base_config(file.as_ref(), Some(&out));
            provider.apply(&mut config)?;
            let mut run = Run::open(&out, config, &corpus.digest)?;
            let summary = pipeline::tree_stage(&mut run, &corpus)?;
            report_failures(&summary);
            println!(
                "trees: {}  fallbacks: {}  skipped: {}",
                summary.processed,
                run.manifest.fallback_count,
                summary.failures.len()
            );
            Ok(summary.exit_code())
        }
        Command::Chunk { layouts, out, chunk, provider } => {
            let corpus = load_corpus(&layouts)?;
            let mut config = base_config(file.as_ref(), Some(&out));
            chunk.apply(&mut config);
            provider.apply(&mut config)?;
            let mut run = Run::open(&out, config, &corpus.digest)?;
            let (summary, stats) = pipeline::chunk_stage(&mut run, &corpus)?;
            report_failures(&summary);
            print!("{}", stats_table(&[(run.config().chunk.method.display_name(), stats)]));
            Ok(summary.exit_code())
        }
        Command::Index { out, chunks, bm25 } => {
            let mut config = base_config(file.as_ref(), Some(&out));
            bm25.apply(&mut config);
            let mut run = Run::open(&out, config, &existing_digest(&out))?;
            if let Some(src) = chunks {
                let records = store::read_chunks(&src)?;
                store::write_chunks(&run.path(store::CHUNKS_FILE), &records)?;
            }
            let index = pipeline::index_stage(&mut run)?;
            println!(
                "indexed {} chunks (avg length {:.2}) into {}",
                index.n_docs(),
                index.avg_doc_length(),
                run.path(store::INDEX_FILE).display()
            );
            Ok(0)
        }
        Command::Retrieve { out, qa, k } => {
            let mut config = base_config(file.as_ref(), Some(&out));
            if let Some(k) = k {
                config.retrieval.top_k = k;
            }
            if config.retrieval.top_k == 0 {
                bail!("--k must be at least 1");
            }
            let qa = read_qa(&qa)?;
            let mut run = Run::open(&out, config, &existing_digest(&out))?;
            let results = pipeline::retrieve_stage(&mut run, &qa)?;
            println!(
                "retrieved top-{} for {} questions into {}",
                run.config().retrieval.top_k,
                results.len(),
                run.path(store::RESULTS_FILE).display()
            );
            Ok(0)
        }
        Command::Eval { out, layouts, qa, extra } => {
            let corpus = load_corpus(&layouts)?;
            let config = base_config(file.as_ref(), Some(&out));
            let qa = read_qa(&qa)?;
            let mut run = Run::open(&out, config, &corpus.digest)?;
            let report = pipeline::eval_stage(&mut run, &corpus, &qa, &extra.inputs())?;
            print!("{}", report.to_table());
            Ok(0)
        }
        Command::Pipeline { layouts, qa, out, chunk, provider, bm25, k, extra } => {
            let corpus = load_corpus(&layouts)?;
            let mut config = base_config(file.as_ref(), out.as_deref());
            chunk.apply(&mut config);
            provider.apply(&mut config)?;
            bm25.apply(&mut config);
            if let Some(k) = k {
                config.retrieval.top_k = k;
            }
            let qa = read_qa(&qa)?;
            let dir = out.unwrap_or_else(|| Run::default_dir(Path::new("runs"), &config, &corpus.digest));
            let mut run = Run::open(&dir, config, &corpus.digest)?;
            let outcome = pipeline::run_pipeline(&mut run, &corpus, &qa, &extra.inputs())?;
            report_failures(&outcome.summary);
            print!("{}", stats_table(&[(run.config().chunk.method.display_name(), outcome.stats)]));
            println!();
            print!("{}", outcome.report.to_table());
            println!("run directory: {}", run.dir.display());
            Ok(outcome.summary.exit_code())
        }
        Command::Stats { chunks, layouts, max_len, provider } => {
            if let Some(path) = chunks {
                let records = store::read_chunks(&path)?;
                print!("{}", stats_table(&[(path.display().to_string().as_str(), chunk_stats(&records))]));
                return Ok(0);
            }
            let corpus: Corpus = load_corpus(layouts.as_deref().expect("clap requires one input"))?;
            let mut config = base_config(file.as_ref(), None);
            if let Some(n) = max_len {
                config.chunk.max_len = n;
            }
            provider.apply(&mut config)?;
            let trees = build_trees(&corpus.layouts, &HierarchyProvider::new(config.provider.clone())?);
            let mut rows = Vec::new();
            for method in [ChunkMethod::MultiDocFusion, ChunkMethod::Length, ChunkMethod::Structure] {
                let mut chunk_config = config.chunk.clone();
                chunk_config.method = method;
                let chunker = Chunker::new(chunk_config)?;
                let input = match method {
                    ChunkMethod::MultiDocFusion => ChunkInput::Trees(&trees.trees),
                    _ => ChunkInput::Layouts(&corpus.layouts),
                };
                rows.push((method.display_name(), chunk_stats(&chunk_corpus(input, &chunker))));
            }
            print!("{}", stats_table(&rows));
            let skipped = corpus.failures.len() + trees.failures.len();
            Ok(if skipped == 0 { 0 } else { 2 })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
