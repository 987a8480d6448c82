//! Stage orchestration over a run directory.
//!
//! Each stage reads its inputs from the run directory (or the layout
//! corpus), writes its outputs there, and records them in the manifest. The
//! composed pipeline is the same stages called in order.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::Utc;
use log::{info, warn};
use rayon::prelude::*;
use thiserror::Error;

use crate::chunker::{chunk_stats, ChunkError, ChunkMethod, ChunkStats, Chunker};
use crate::hierarchy::{build_document_tree, DocumentTree, HierarchyAssignment};
use crate::layout::{extract_header_list, parse_layout, AnnotatedLayout};
use crate::metrics::{
    evaluate_answers, evaluate_retrieval, evaluate_structure, label_relevance, EvalReport,
    LayoutIndex, MetricsError, QaRecord, RunMetadata, EVAL_KS,
};
use crate::provider::{HierarchyProvider, ProviderError};
use crate::retrieval::{Bm25Index, Bm25Params, RetrievalError, RetrievalResult};
use crate::store::{self, ConfigSnapshot, RunManifest, StoreError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no documents in {0}")]
    NoDocuments(PathBuf),
    #[error("every document failed")]
    AllFailed,
    #[error("{0}")]
    Missing(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Chunk(#[from] ChunkError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// A document skipped by a stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocFailure {
    pub document: String,
    pub error: String,
}

#[derive(Debug, Default)]
pub struct Corpus {
    pub layouts: Vec<AnnotatedLayout>,
    pub digest: String,
    pub failures: Vec<DocFailure>,
}

impl Corpus {
    pub fn from_layouts(layouts: Vec<AnnotatedLayout>) -> Self {
        let serialized: Vec<String> = layouts.iter().map(crate::layout::serialize_layout).collect();
        Corpus {
            digest: store::corpus_digest(&serialized),
            layouts,
            failures: Vec::new(),
        }
    }
}

/// Reads every `*.json` layout in `dir`. Unparseable files and repeated
/// document ids become failures rather than errors.
pub fn load_corpus(dir: &Path) -> Result<Corpus, PipelineError> {
    let files = store::list_json_files(dir)?;
    if files.is_empty() {
        return Err(PipelineError::NoDocuments(dir.to_path_buf()));
    }
    let loaded: Vec<(PathBuf, Result<Vec<u8>, StoreError>)> = files
        .into_par_iter()
        .map(|p| {
            let bytes = fs::read(&p).map_err(|source| StoreError::Io {
                path: p.clone(),
                source,
            });
            (p, bytes)
        })
        .collect();

    let mut corpus = Corpus::default();
    let mut blobs = Vec::with_capacity(loaded.len());
    let mut seen = HashSet::new();
    for (path, bytes) in loaded {
        let name = path.display().to_string();
        let bytes = match bytes {
            Ok(b) => b,
            Err(e) => {
                corpus.failures.push(DocFailure { document: name, error: e.to_string() });
                continue;
            }
        };
        match parse_layout(&bytes) {
            Ok(layout) if !seen.insert(layout.document_id.clone()) => {
                corpus.failures.push(DocFailure {
                    document: name,
                    error: format!("duplicate document_id {}", layout.document_id),
                });
            }
            Ok(layout) => corpus.layouts.push(layout),
            Err(e) => corpus.failures.push(DocFailure { document: name, error: e.to_string() }),
        }
        blobs.push(bytes);
    }
    for f in &corpus.failures {
        warn!("skipping {}: {}", f.document, f.error);
    }
    corpus.digest = store::corpus_digest(&blobs);
    Ok(corpus)
}

#[derive(Debug, Default)]
pub struct TreeStage {
    pub trees: Vec<DocumentTree>,
    pub assignments: BTreeMap<String, HierarchyAssignment>,
    pub fallbacks: BTreeMap<String, String>,
    pub failures: Vec<DocFailure>,
}

pub fn build_trees(layouts: &[AnnotatedLayout], provider: &HierarchyProvider) -> TreeStage {
    let docs: Vec<(String, _)> = layouts
        .iter()
        .map(|l| (l.document_id.clone(), extract_header_list(l)))
        .collect();
    let resolutions = provider.resolve_many(&docs);
    let mut stage = TreeStage::default();
    for ((layout, (doc_id, headers)), resolution) in layouts.iter().zip(&docs).zip(resolutions) {
        let built = resolution.map_err(|e| e.to_string()).and_then(|r| {
            let tree =
                build_document_tree(layout, headers, &r.assignment).map_err(|e| e.to_string())?;
            Ok((tree, r))
        });
        match built {
            Ok((tree, r)) => {
                if let Some(reason) = r.fallback {
                    stage.fallbacks.insert(doc_id.clone(), reason);
                }
                stage.assignments.insert(doc_id.clone(), r.assignment);
                stage.trees.push(tree);
            }
            Err(error) => {
                warn!("{doc_id}: {error}");
                stage.failures.push(DocFailure { document: doc_id.clone(), error });
            }
        }
    }
    stage
}

/// Chunks a corpus. The hierarchical method chunks `trees`; the baselines
/// chunk `layouts`. Output order follows the input order.
pub fn chunk_corpus(
    method_input: ChunkInput<'_>,
    chunker: &Chunker,
) -> Vec<crate::chunker::Chunk> {
    let nested: Vec<Vec<_>> = match method_input {
        ChunkInput::Trees(trees) => trees.par_iter().map(|t| chunker.dfs_chunk(t)).collect(),
        ChunkInput::Layouts(layouts) => match chunker.config().method {
            ChunkMethod::Structure => layouts.par_iter().map(|l| chunker.structure_chunk(l)).collect(),
            _ => layouts.par_iter().map(|l| chunker.length_chunk(l)).collect(),
        },
    };
    nested.into_iter().flatten().collect()
}

#[derive(Debug, Clone, Copy)]
pub enum ChunkInput<'a> {
    Trees(&'a [DocumentTree]),
    Layouts(&'a [AnnotatedLayout]),
}

pub fn retrieve_all(index: &Bm25Index, qa: &[QaRecord], k: usize) -> Vec<RetrievalResult> {
    qa.par_iter()
        .map(|q| index.query(&q.query_id, &q.question, k))
        .collect()
}

/// A run directory and its manifest.
#[derive(Debug)]
pub struct Run {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

impl Run {
    /// Opens `dir`. For the same corpus the existing manifest is kept, with
    /// its config replaced by `config`; a different corpus starts afresh.
    pub fn open(dir: &Path, config: ConfigSnapshot, corpus_digest: &str) -> Result<Run, PipelineError> {
        fs::create_dir_all(dir).map_err(|source| StoreError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let fresh = RunManifest::new(config, corpus_digest);
        let manifest = match store::read_manifest(dir) {
            Ok(old) if old.corpus_digest == fresh.corpus_digest => {
                if old.config != fresh.config {
                    info!("{}: config changed", dir.display());
                }
                RunManifest {
                    config: fresh.config,
                    ..old
                }
            }
            Ok(old) => {
                info!("{}: corpus changed, starting a new manifest", dir.display());
                RunManifest {
                    created_at: old.created_at,
                    ..fresh
                }
            }
            Err(StoreError::Io { .. }) => fresh,
            Err(e) => return Err(e.into()),
        };
        Ok(Run {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    /// Default location for a run: `<root>/<run_id>`.
    pub fn default_dir(root: &Path, config: &ConfigSnapshot, corpus_digest: &str) -> PathBuf {
        root.join(store::run_id(corpus_digest, config))
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn record(&mut self, name: &str, rel: &str) {
        self.manifest.outputs.insert(name.to_string(), PathBuf::from(rel));
    }

    pub fn save(&mut self) -> Result<(), PipelineError> {
        self.manifest.updated_at = Utc::now();
        store::write_manifest(&self.dir, &self.manifest)?;
        Ok(())
    }

    pub fn config(&self) -> &ConfigSnapshot {
        &self.manifest.config
    }
}

#[derive(Debug, Default)]
pub struct StageSummary {
    pub processed: usize,
    pub failures: Vec<DocFailure>,
}

impl StageSummary {
    /// 0 on success, 2 when some documents were skipped, 1 when all were.
    pub fn exit_code(&self) -> i32 {
        match (self.processed, self.failures.len()) {
            (_, 0) => 0,
            (0, _) => 1,
            _ => 2,
        }
    }
}

pub fn tree_stage(run: &mut Run, corpus: &Corpus) -> Result<StageSummary, PipelineError> {
    let provider = HierarchyProvider::new(run.config().provider.clone())?;
    let stage = build_trees(&corpus.layouts, &provider);
    let trees_dir = run.path(store::TREES_DIR);
    if trees_dir.exists() {
        fs::remove_dir_all(&trees_dir).map_err(|source| StoreError::Io {
            path: trees_dir.clone(),
            source,
        })?;
    }
    fs::create_dir_all(&trees_dir).map_err(|source| StoreError::Io {
        path: trees_dir.clone(),
        source,
    })?;
    for tree in &stage.trees {
        store::write_tree(&store::tree_path(&trees_dir, &tree.document_id), tree)?;
    }
    store::write_assignments(&run.path(store::ASSIGNMENTS_FILE), &stage.assignments)?;
    run.record("trees", store::TREES_DIR);
    run.record("assignments", store::ASSIGNMENTS_FILE);
    run.manifest.fallback_count = stage.fallbacks.len();
    run.manifest.fallbacks = stage.fallbacks;
    run.save()?;

    let mut failures = corpus.failures.clone();
    failures.extend(stage.failures);
    if stage.trees.is_empty() && !failures.is_empty() {
        return Err(PipelineError::AllFailed);
    }
    Ok(StageSummary {
        processed: stage.trees.len(),
        failures,
    })
}

/// Chunks the corpus into `chunks.jsonl`. The hierarchical method reads the
/// run's trees, building them first when absent.
pub fn chunk_stage(run: &mut Run, corpus: &Corpus) -> Result<(StageSummary, ChunkStats), PipelineError> {
    let chunker = Chunker::new(run.config().chunk.clone())?;
    let mut summary = StageSummary {
        failures: corpus.failures.clone(),
        ..Default::default()
    };
    let chunks = match chunker.config().method {
        ChunkMethod::MultiDocFusion => {
            if !run.manifest.outputs.contains_key("trees") {
                summary = tree_stage(run, corpus)?;
            }
            let trees = store::read_tree_dir(&run.path(store::TREES_DIR))?;
            let ordered: Vec<DocumentTree> = corpus
                .layouts
                .iter()
                .filter_map(|l| trees.get(&l.document_id).cloned())
                .collect();
            summary.processed = ordered.len();
            chunk_corpus(ChunkInput::Trees(&ordered), &chunker)
        }
        _ => {
            summary.processed = corpus.layouts.len();
            chunk_corpus(ChunkInput::Layouts(&corpus.layouts), &chunker)
        }
    };
    if summary.processed == 0 {
        return Err(PipelineError::AllFailed);
    }
    store::write_chunks(&run.path(store::CHUNKS_FILE), &chunks)?;
    run.record("chunks", store::CHUNKS_FILE);
    run.save()?;
    Ok((summary, chunk_stats(&chunks)))
}

pub fn index_stage(run: &mut Run) -> Result<Bm25Index, PipelineError> {
    let chunks = store::read_chunks(&run.path(store::CHUNKS_FILE))?;
    let settings = run.config().retrieval;
    let index = Bm25Index::build(&chunks, Bm25Params { k1: settings.k1, b: settings.b })?;
    store::write_index(&run.path(store::INDEX_FILE), &index)?;
    run.record("index", store::INDEX_FILE);
    run.save()?;
    Ok(index)
}

pub fn retrieve_stage(run: &mut Run, qa: &[QaRecord]) -> Result<Vec<RetrievalResult>, PipelineError> {
    let index = store::read_index(&run.path(store::INDEX_FILE))?;
    let results = retrieve_all(&index, qa, run.config().retrieval.top_k);
    store::write_results(&run.path(store::RESULTS_FILE), &results)?;
    run.record("results", store::RESULTS_FILE);
    run.save()?;
    Ok(results)
}

/// Optional inputs to evaluation.
#[derive(Debug, Default, Clone)]
pub struct EvalInputs {
    pub gold_trees: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
}

pub fn eval_stage(
    run: &mut Run,
    corpus: &Corpus,
    qa: &[QaRecord],
    extra: &EvalInputs,
) -> Result<EvalReport, PipelineError> {
    let chunks = store::read_chunks(&run.path(store::CHUNKS_FILE))?;
    let results = store::read_results(&run.path(store::RESULTS_FILE))?;
    let index = LayoutIndex::from_layouts(&corpus.layouts);
    let judgments = qa
        .par_iter()
        .map(|q| label_relevance(&chunks, q, &index))
        .collect::<Result<Vec<_>, _>>()?;
    let config = run.config();
    let metadata = RunMetadata {
        method: config.chunk.method.as_str().to_string(),
        provider: config.provider.name().to_string(),
        max_len: config.chunk.max_len,
        top_k: config.retrieval.top_k,
        k1: config.retrieval.k1,
        b: config.retrieval.b,
        fallback_count: run.manifest.fallback_count,
    };
    let mut report = EvalReport::new(metadata, evaluate_retrieval(&results, &judgments, &EVAL_KS));

    if let Some(dir) = &extra.gold_trees {
        let gold = store::read_tree_dir(dir)?;
        let pred_dir = run.path(store::TREES_DIR);
        if !pred_dir.exists() {
            return Err(PipelineError::Missing(format!(
                "{} not found; run `tree` before evaluating against gold trees",
                pred_dir.display()
            )));
        }
        let pred = store::read_tree_dir(&pred_dir)?;
        let pairs: Vec<(&DocumentTree, &DocumentTree)> = gold
            .iter()
            .filter_map(|(id, g)| pred.get(id).map(|p| (p, g)))
            .collect();
        if pairs.len() < gold.len() {
            warn!("{} gold trees have no predicted tree", gold.len() - pairs.len());
        }
        report.structure = Some(evaluate_structure(&pairs)?);
    }
    if let Some(path) = &extra.predictions {
        let predictions = store::read_predictions(path)?;
        report.answers = Some(evaluate_answers(qa, &predictions));
    }

    store::write_report(&run.path(store::REPORT_FILE), &report)?;
    let table = report.to_table();
    store::write_atomic(&run.path(store::REPORT_TABLE_FILE), |w| w.write_all(table.as_bytes()))?;
    run.record("report", store::REPORT_FILE);
    run.record("report_table", store::REPORT_TABLE_FILE);
    run.save()?;
    Ok(report)
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub report: EvalReport,
    pub stats: ChunkStats,
    pub summary: StageSummary,
}

/// tree (hierarchical method only), chunk, index, retrieve, eval.
pub fn run_pipeline(
    run: &mut Run,
    corpus: &Corpus,
    qa: &[QaRecord],
    extra: &EvalInputs,
) -> Result<PipelineOutcome, PipelineError> {
    let needs_trees =
        run.config().chunk.method == ChunkMethod::MultiDocFusion || extra.gold_trees.is_some();
    let mut summary = StageSummary::default();
    if needs_trees {
        summary = tree_stage(run, corpus)?;
    }
    let (chunk_summary, stats) = chunk_stage(run, corpus)?;
    if !needs_trees {
        summary = chunk_summary;
    }
    index_stage(run)?;
    retrieve_stage(run, qa)?;
    let report = eval_stage(run, corpus, qa, extra)?;
    Ok(PipelineOutcome {
        report,
        stats,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunker::ChunkConfig;
    use crate::layout::{BoundingBox, Segment, SegmentType};

    fn layout(id: &str) -> AnnotatedLayout {
        let seg = |sid: &str, ty, top, text: &str| Segment::new(sid, ty, BoundingBox::new(0, top, 0), text);
        AnnotatedLayout::new(
            id,
            vec![
                seg("t", SegmentType::Title, 0, &format!("Report {id}")),
                seg("h1", SegmentType::SectionHeader, 10, "1 Budget"),
                seg("p1", SegmentType::Text, 20, "the budget is forty units"),
                seg("h2", SegmentType::SectionHeader, 30, "2 Staff"),
                seg("p2", SegmentType::Text, 40, "the staff count is nine"),
            ],
        )
        .unwrap()
    }

    fn qa() -> Vec<QaRecord> {
        vec![QaRecord {
            query_id: "q1".into(),
            question: "what is the budget of report alpha".into(),
            gold_answers: vec!["forty units".into()],
            gold_evidence: Some(vec![crate::metrics::Evidence {
                document_id: "alpha".into(),
                segment_id: Some("p1".into()),
                page_number: None,
            }]),
        }]
    }

    fn write_corpus(dir: &Path) {
        for id in ["alpha", "beta"] {
            store::write_layout(&dir.join(format!("{id}.json")), &layout(id)).unwrap();
        }
    }

    #[test]
    fn empty_dir_has_no_documents() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_corpus(dir.path()), Err(PipelineError::NoDocuments(_))));
    }

    #[test]
    fn bad_layout_is_isolated() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path());
        fs::write(dir.path().join("broken.json"), "{").unwrap();
        let corpus = load_corpus(dir.path()).unwrap();
        assert_eq!(corpus.layouts.len(), 2);
        assert_eq!(corpus.failures.len(), 1);
        let out = tempfile::tempdir().unwrap();
        let mut run = Run::open(out.path(), ConfigSnapshot::default(), &corpus.digest).unwrap();
        let summary = tree_stage(&mut run, &corpus).unwrap();
        assert_eq!(summary.exit_code(), 2);
    }

    #[test]
    fn composed_pipeline_matches_stages() {
        let input = tempfile::tempdir().unwrap();
        write_corpus(input.path());
        let corpus = load_corpus(input.path()).unwrap();
        let config = ConfigSnapshot::default();

        let a = tempfile::tempdir().unwrap();
        let mut run = Run::open(a.path(), config.clone(), &corpus.digest).unwrap();
        let outcome = run_pipeline(&mut run, &corpus, &qa(), &EvalInputs::default()).unwrap();
        assert_eq!(outcome.report.retrieval.per_k[0].scores.ndcg, 1.0);

        let b = tempfile::tempdir().unwrap();
        let mut run = Run::open(b.path(), config, &corpus.digest).unwrap();
        tree_stage(&mut run, &corpus).unwrap();
        chunk_stage(&mut run, &corpus).unwrap();
        index_stage(&mut run).unwrap();
        retrieve_stage(&mut run, &qa()).unwrap();
        eval_stage(&mut run, &corpus, &qa(), &EvalInputs::default()).unwrap();

        for file in [store::REPORT_FILE, store::CHUNKS_FILE, store::REPORT_TABLE_FILE] {
            assert_eq!(
                fs::read(a.path().join(file)).unwrap(),
                fs::read(b.path().join(file)).unwrap(),
                "{file}"
            );
        }
        let manifest = store::read_manifest(b.path()).unwrap();
        assert_eq!(manifest.outputs.len(), 7);
    }

    #[test]
    fn chunk_stage_builds_missing_trees() {
        let corpus = Corpus::from_layouts(vec![layout("alpha")]);
        let out = tempfile::tempdir().unwrap();
        let mut run = Run::open(out.path(), ConfigSnapshot::default(), &corpus.digest).unwrap();
        let (summary, stats) = chunk_stage(&mut run, &corpus).unwrap();
        assert_eq!(summary.exit_code(), 0);
        assert_eq!(stats.chunk_count, 2);
        assert!(out.path().join("trees/alpha.json").exists());
    }

    #[test]
    fn baselines_skip_trees() {
        let corpus = Corpus::from_layouts(vec![layout("alpha")]);
        let out = tempfile::tempdir().unwrap();
        let config = ConfigSnapshot {
            chunk: ChunkConfig::new(ChunkMethod::Length, 4),
            ..Default::default()
        };
        let mut run = Run::open(out.path(), config, &corpus.digest).unwrap();
        let (_, stats) = chunk_stage(&mut run, &corpus).unwrap();
        assert_eq!(stats.chunk_count, 4);
        assert!(!out.path().join("trees").exists());
    }
}
