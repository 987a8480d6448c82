//! On-disk artifacts and run manifests.
//!
//! Every write goes to a temporary file in the target directory and is then
//! renamed into place. Versioned files carry a `major.minor` format version;
//! readers reject a newer major.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chunker::{Chunk, ChunkConfig};
use crate::hierarchy::{DocumentTree, HierarchyAssignment, HierarchyError, NestedNode};
use crate::layout::{parse_layout, serialize_layout, AnnotatedLayout, LayoutError};
use crate::metrics::{EvalReport, Prediction, QaRecord};
use crate::provider::ProviderConfig;
use crate::retrieval::{Bm25Index, RetrievalError, RetrievalResult};

pub const FORMAT_VERSION: &str = "1.0";
const SUPPORTED_MAJOR: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHUNKS_FILE: &str = "chunks.jsonl";
pub const TREES_DIR: &str = "trees";
pub const ASSIGNMENTS_FILE: &str = "assignments.json";
pub const INDEX_FILE: &str = "index.bin";
pub const RESULTS_FILE: &str = "results.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_TABLE_FILE: &str = "report.txt";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Json {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: unsupported format version {found} (this build reads {SUPPORTED_MAJOR}.x)")]
    Version { path: PathBuf, found: String },
    #[error("{path}: {source}")]
    Layout { path: PathBuf, source: LayoutError },
    #[error("{path}: {source}")]
    Tree {
        path: PathBuf,
        source: HierarchyError,
    },
    #[error("{path}: {source}")]
    Index {
        path: PathBuf,
        source: RetrievalError,
    },
    #[error("manifest references missing output {0}")]
    MissingOutput(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn json_err(path: &Path, line: usize) -> impl FnOnce(serde_json::Error) -> StoreError + '_ {
    move |e| StoreError::Json {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

fn check_version(path: &Path, version: &str) -> Result<(), StoreError> {
    let major = version.split('.').next().and_then(|m| m.parse::<u32>().ok());
    match major {
        Some(m) if m <= SUPPORTED_MAJOR => Ok(()),
        _ => Err(StoreError::Version {
            path: path.to_path_buf(),
            found: version.to_string(),
        }),
    }
}

/// Writes through a temporary sibling file, then renames over `path`.
pub fn write_atomic(
    path: &Path,
    fill: impl FnOnce(&mut dyn Write) -> io::Result<()>,
) -> Result<(), StoreError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        fill(&mut w).map_err(io_err(path))?;
        w.flush().map_err(io_err(path))?;
    }
    tmp.persist(path).map_err(|e| StoreError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, StoreError> {
    fs::read(path).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let text = serde_json::to_string_pretty(value).map_err(json_err(path, 0))?;
    write_atomic(path, |w| {
        w.write_all(text.as_bytes())?;
        w.write_all(b"\n")
    })
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(json_err(path, 1))
}

#[derive(Serialize, Deserialize)]
struct JsonlHeader {
    format: String,
    version: String,
}

/// JSON lines preceded by a `{format, version}` header line. An empty
/// record list writes an empty file.
fn write_jsonl<T: Serialize>(path: &Path, format: &str, records: &[T]) -> Result<(), StoreError> {
    let mut lines = Vec::with_capacity(records.len() + 1);
    if !records.is_empty() {
        let header = JsonlHeader {
            format: format.to_string(),
            version: FORMAT_VERSION.to_string(),
        };
        lines.push(serde_json::to_string(&header).map_err(json_err(path, 1))?);
    }
    for (i, r) in records.iter().enumerate() {
        lines.push(serde_json::to_string(r).map_err(json_err(path, i + 2))?);
    }
    write_atomic(path, |w| {
        for line in &lines {
            w.write_all(line.as_bytes())?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

fn read_jsonl<T: DeserializeOwned>(path: &Path, format: &str) -> Result<Vec<T>, StoreError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    let mut header_seen = false;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            let header: JsonlHeader = serde_json::from_str(&line).map_err(json_err(path, i + 1))?;
            if header.format != format {
                return Err(StoreError::Json {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("expected a {format} file, found {}", header.format),
                });
            }
            check_version(path, &header.version)?;
            header_seen = true;
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(json_err(path, i + 1))?);
    }
    Ok(out)
}

/// Plain JSON lines without a header, as used for QA and prediction inputs.
fn read_plain_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(json_err(path, i + 1))?);
        }
    }
    Ok(out)
}

pub fn write_chunks(path: &Path, chunks: &[Chunk]) -> Result<(), StoreError> {
    write_jsonl(path, "chunks", chunks)
}

pub fn read_chunks(path: &Path) -> Result<Vec<Chunk>, StoreError> {
    read_jsonl(path, "chunks")
}

pub fn write_results(path: &Path, results: &[RetrievalResult]) -> Result<(), StoreError> {
    write_jsonl(path, "results", results)
}

pub fn read_results(path: &Path) -> Result<Vec<RetrievalResult>, StoreError> {
    read_jsonl(path, "results")
}

pub fn read_qa(path: &Path) -> Result<Vec<QaRecord>, StoreError> {
    read_plain_jsonl(path)
}

pub fn write_qa(path: &Path, records: &[QaRecord]) -> Result<(), StoreError> {
    let lines: Vec<String> = records
        .iter()
        .map(|r| serde_json::to_string(r).expect("qa record serializes"))
        .collect();
    write_atomic(path, |w| {
        for line in &lines {
            writeln!(w, "{line}")?;
        }
        Ok(())
    })
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>, StoreError> {
    read_plain_jsonl(path)
}

pub fn write_layout(path: &Path, layout: &AnnotatedLayout) -> Result<(), StoreError> {
    let text = serialize_layout(layout);
    write_atomic(path, |w| w.write_all(text.as_bytes()))
}

pub fn read_layout(path: &Path) -> Result<AnnotatedLayout, StoreError> {
    parse_layout(&read_bytes(path)?).map_err(|source| StoreError::Layout {
        path: path.to_path_buf(),
        source,
    })
}

/// `*.json` files directly inside `dir`, sorted by name.
pub fn list_json_files(dir: &Path) -> Result<Vec<PathBuf>, StoreError> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "json") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

#[derive(Serialize, Deserialize)]
struct TreeFile {
    version: String,
    document_id: String,
    tree: NestedNode,
}

/// File-system-safe stem for a document id.
pub fn file_stem(document_id: &str) -> String {
    let stem: String = document_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    if stem.is_empty() || stem.starts_with('.') {
        format!("_{stem}")
    } else {
        stem
    }
}

pub fn tree_path(dir: &Path, document_id: &str) -> PathBuf {
    dir.join(format!("{}.json", file_stem(document_id)))
}

pub fn write_tree(path: &Path, tree: &DocumentTree) -> Result<(), StoreError> {
    write_json(
        path,
        &TreeFile {
            version: FORMAT_VERSION.to_string(),
            document_id: tree.document_id.clone(),
            tree: tree.to_nested(),
        },
    )
}

pub fn read_tree(path: &Path) -> Result<DocumentTree, StoreError> {
    let file: TreeFile = read_json(path)?;
    check_version(path, &file.version)?;
    DocumentTree::from_nested(file.document_id, &file.tree).map_err(|source| StoreError::Tree {
        path: path.to_path_buf(),
        source,
    })
}

/// Every tree file in `dir`, keyed by document id.
pub fn read_tree_dir(dir: &Path) -> Result<BTreeMap<String, DocumentTree>, StoreError> {
    list_json_files(dir)?
        .iter()
        .map(|p| read_tree(p).map(|t| (t.document_id.clone(), t)))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct AssignmentsFile {
    version: String,
    documents: BTreeMap<String, HierarchyAssignment>,
}

/// Also readable by the file provider.
pub fn write_assignments(
    path: &Path,
    assignments: &BTreeMap<String, HierarchyAssignment>,
) -> Result<(), StoreError> {
    write_json(
        path,
        &AssignmentsFile {
            version: FORMAT_VERSION.to_string(),
            documents: assignments.clone(),
        },
    )
}

pub fn read_assignments(path: &Path) -> Result<BTreeMap<String, HierarchyAssignment>, StoreError> {
    let file: AssignmentsFile = read_json(path)?;
    check_version(path, &file.version)?;
    Ok(file.documents)
}

pub fn write_index(path: &Path, index: &Bm25Index) -> Result<(), StoreError> {
    let mut bytes = Vec::new();
    index.write_to(&mut bytes).map_err(|source| StoreError::Index {
        path: path.to_path_buf(),
        source,
    })?;
    write_atomic(path, |w| w.write_all(&bytes))
}

pub fn read_index(path: &Path) -> Result<Bm25Index, StoreError> {
    let bytes = read_bytes(path)?;
    Bm25Index::read_from(bytes.as_slice()).map_err(|source| StoreError::Index {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<(), StoreError> {
    let text = report.to_json();
    write_atomic(path, |w| w.write_all(text.as_bytes()))
}

pub fn read_report(path: &Path) -> Result<EvalReport, StoreError> {
    let report: EvalReport = read_json(path)?;
    check_version(path, &report.version)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSettings {
    pub k1: f64,
    pub b: f64,
    pub top_k: usize,
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        RetrievalSettings {
            k1: crate::retrieval::DEFAULT_K1,
            b: crate::retrieval::DEFAULT_B,
            top_k: crate::retrieval::DEFAULT_TOP_K,
        }
    }
}

/// The effective configuration of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfigSnapshot {
    pub chunk: ChunkConfig,
    pub provider: ProviderConfig,
    pub retrieval: RetrievalSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub run_id: String,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    pub config: ConfigSnapshot,
    pub corpus_digest: String,
    /// Output name to path, relative to the run directory.
    pub outputs: BTreeMap<String, PathBuf>,
    pub fallback_count: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub fallbacks: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(config: ConfigSnapshot, corpus_digest: impl Into<String>) -> Self {
        let corpus_digest = corpus_digest.into();
        let now = Utc::now();
        RunManifest {
            version: FORMAT_VERSION.to_string(),
            run_id: run_id(&corpus_digest, &config),
            created_at: now,
            updated_at: now,
            config,
            corpus_digest,
            outputs: BTreeMap::new(),
            fallback_count: 0,
            fallbacks: BTreeMap::new(),
        }
    }
}

/// Writes `manifest.json` into `run_dir` after checking that every output
/// it names exists.
pub fn write_manifest(run_dir: &Path, manifest: &RunManifest) -> Result<(), StoreError> {
    for rel in manifest.outputs.values() {
        let full = run_dir.join(rel);
        if !full.exists() {
            return Err(StoreError::MissingOutput(full));
        }
    }
    write_json(&run_dir.join(MANIFEST_FILE), manifest)
}

pub fn read_manifest(run_dir: &Path) -> Result<RunManifest, StoreError> {
    let path = run_dir.join(MANIFEST_FILE);
    let manifest: RunManifest = read_json(&path)?;
    check_version(&path, &manifest.version)?;
    Ok(manifest)
}

/// SHA-256 over the sorted per-document SHA-256 digests, so file order does
/// not matter.
pub fn corpus_digest<B: AsRef<[u8]>>(documents: &[B]) -> String {
    let mut hashes: Vec<String> = documents
        .iter()
        .map(|d| hex::encode(Sha256::digest(d.as_ref())))
        .collect();
    hashes.sort();
    let mut hasher = Sha256::new();
    for h in &hashes {
        hasher.update(h.as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

/// Stable id for a corpus and configuration pair.
pub fn run_id(corpus_digest: &str, config: &ConfigSnapshot) -> String {
    let mut hasher = Sha256::new();
    hasher.update(corpus_digest.as_bytes());
    hasher.update(serde_json::to_vec(config).expect("config serializes"));
    let digest = hex::encode(hasher.finalize());
    format!("{}-{}", config.chunk.method.as_str(), &digest[..12])
}
