//! Chunk construction.
//!
//! Three methods are provided:
//!
//! * `MultiDocFusion`: depth-first grouping over a [`DocumentTree`]. Every
//!   content node becomes a chunk prefixed with the Markdown headings of its
//!   ancestor sections; bodies that do not fit the token budget are split
//!   into `text_split_<n> : ` pieces, each repeating the heading context.
//! * `Length`: fixed windows of `max_len` tokens over the concatenated text.
//! * `Structure`: segments rendered as `[<Type>] <text>` and packed greedily
//!   in reading order, with no hierarchy.

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use log::warn;
use once_cell::sync::Lazy;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{DocumentTree, NodeKind};
use crate::layout::{AnnotatedLayout, Segment, SegmentType};

pub const DEFAULT_MAX_LEN: usize = 550;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChunkError {
    #[error("max_len must be at least 1")]
    ZeroMaxLen,
    #[error("unknown token counter `{0}`")]
    UnknownCounter(String),
    #[error("unknown chunking method `{0}`")]
    UnknownMethod(String),
}

/// Splits text into tokens. Implementations must be pure and deterministic.
pub trait TokenCounter: Send + Sync {
    fn name(&self) -> &str;

    /// Byte ranges of the tokens of `text`, in order and non-overlapping.
    fn token_spans(&self, text: &str) -> Vec<Range<usize>>;

    fn count(&self, text: &str) -> usize {
        self.token_spans(text).len()
    }
}

/// Maximal runs of non-whitespace characters (Unicode `White_Space`).
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceCounter;

impl TokenCounter for WhitespaceCounter {
    fn name(&self) -> &str {
        "whitespace"
    }

    fn token_spans(&self, text: &str) -> Vec<Range<usize>> {
        let mut spans = Vec::new();
        let mut start = None;
        for (i, c) in text.char_indices() {
            match (c.is_whitespace(), start) {
                (true, Some(s)) => {
                    spans.push(s..i);
                    start = None;
                }
                (false, None) => start = Some(i),
                _ => {}
            }
        }
        if let Some(s) = start {
            spans.push(s..text.len());
        }
        spans
    }

    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

/// Every non-whitespace character is its own token. A rough stand-in for
/// subword tokenizers on scripts without word spacing.
#[derive(Debug, Clone, Copy, Default)]
pub struct CharCounter;

impl TokenCounter for CharCounter {
    fn name(&self) -> &str {
        "char"
    }

    fn token_spans(&self, text: &str) -> Vec<Range<usize>> {
        text.char_indices()
            .filter(|(_, c)| !c.is_whitespace())
            .map(|(i, c)| i..i + c.len_utf8())
            .collect()
    }
}

static COUNTERS: Lazy<RwLock<HashMap<String, Arc<dyn TokenCounter>>>> = Lazy::new(|| {
    let mut map: HashMap<String, Arc<dyn TokenCounter>> = HashMap::new();
    map.insert("whitespace".into(), Arc::new(WhitespaceCounter));
    map.insert("char".into(), Arc::new(CharCounter));
    RwLock::new(map)
});

/// Makes `counter` available as `TokenCounterKind::Pluggable(counter.name())`.
pub fn register_token_counter(counter: Arc<dyn TokenCounter>) {
    COUNTERS
        .write()
        .expect("token counter registry poisoned")
        .insert(counter.name().to_string(), counter);
}

/// Whitespace token count.
pub fn count_tokens(text: &str) -> usize {
    WhitespaceCounter.count(text)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenCounterKind {
    #[default]
    Whitespace,
    Pluggable(String),
}

impl TokenCounterKind {
    pub fn resolve(&self) -> Result<Arc<dyn TokenCounter>, ChunkError> {
        match self {
            TokenCounterKind::Whitespace => Ok(Arc::new(WhitespaceCounter)),
            TokenCounterKind::Pluggable(name) => COUNTERS
                .read()
                .expect("token counter registry poisoned")
                .get(name)
                .cloned()
                .ok_or_else(|| ChunkError::UnknownCounter(name.clone())),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChunkMethod {
    #[default]
    MultiDocFusion,
    Length,
    Structure,
}

impl ChunkMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            ChunkMethod::MultiDocFusion => "multidocfusion",
            ChunkMethod::Length => "length",
            ChunkMethod::Structure => "structure",
        }
    }

    /// Human-readable name used in reports.
    pub fn display_name(&self) -> &'static str {
        match self {
            ChunkMethod::MultiDocFusion => "MultiDocFusion",
            ChunkMethod::Length => "Length chunking",
            ChunkMethod::Structure => "Structure-based",
        }
    }
}

impl fmt::Display for ChunkMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ChunkMethod {
    type Err = ChunkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "multidocfusion" | "mdf" => Ok(ChunkMethod::MultiDocFusion),
            "length" => Ok(ChunkMethod::Length),
            "structure" => Ok(ChunkMethod::Structure),
            _ => Err(ChunkError::UnknownMethod(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChunkConfig {
    pub max_len: usize,
    pub method: ChunkMethod,
    pub token_counter: TokenCounterKind,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        ChunkConfig {
            max_len: DEFAULT_MAX_LEN,
            method: ChunkMethod::MultiDocFusion,
            token_counter: TokenCounterKind::Whitespace,
        }
    }
}

impl ChunkConfig {
    pub fn new(method: ChunkMethod, max_len: usize) -> Self {
        ChunkConfig {
            max_len,
            method,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub document_id: String,
    pub text: String,
    pub source_node_ids: Vec<String>,
    pub split_index: usize,
    pub token_count: usize,
    /// Set when the chunk could not be brought under the budget.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub oversize: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ChunkStats {
    pub chunk_count: usize,
    pub avg_chars: f64,
    pub avg_tokens: f64,
}

pub fn chunk_stats(chunks: &[Chunk]) -> ChunkStats {
    if chunks.is_empty() {
        return ChunkStats::default();
    }
    let n = chunks.len() as f64;
    let chars: usize = chunks.iter().map(|c| c.text.chars().count()).sum();
    let tokens: usize = chunks.iter().map(|c| c.token_count).sum();
    ChunkStats {
        chunk_count: chunks.len(),
        avg_chars: chars as f64 / n,
        avg_tokens: tokens as f64 / n,
    }
}

/// Label used for a segment type in structure-based chunks.
pub fn structure_label(ty: SegmentType) -> &'static str {
    match ty {
        SegmentType::SectionHeader => "Section",
        other => other.as_str(),
    }
}

/// Markdown heading for a header at `depth` (1 = top level).
pub fn heading_line(depth: usize, text: &str) -> String {
    let hashes = "#".repeat(depth.max(1));
    let title = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if title.is_empty() {
        hashes
    } else {
        format!("{hashes} {title}")
    }
}

pub fn split_prefix(n: usize) -> String {
    format!("text_split_{n} : ")
}

/// A chunking configuration with its token counter resolved.
#[derive(Clone)]
pub struct Chunker {
    config: ChunkConfig,
    counter: Arc<dyn TokenCounter>,
}

impl fmt::Debug for Chunker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Chunker")
            .field("config", &self.config)
            .field("counter", &self.counter.name())
            .finish()
    }
}

struct ChunkSink<'a> {
    document_id: &'a str,
    chunks: Vec<Chunk>,
}

impl ChunkSink<'_> {
    fn emit(&mut self, text: String, sources: Vec<String>, split_index: usize, tokens: usize, max_len: usize) {
        let chunk_id = format!("{}#{}", self.document_id, self.chunks.len());
        self.chunks.push(Chunk {
            chunk_id,
            document_id: self.document_id.to_string(),
            text,
            source_node_ids: sources,
            split_index,
            token_count: tokens,
            oversize: tokens > max_len,
        });
    }
}

impl Chunker {
    pub fn new(config: ChunkConfig) -> Result<Self, ChunkError> {
        if config.max_len == 0 {
            return Err(ChunkError::ZeroMaxLen);
        }
        let counter = config.token_counter.resolve()?;
        Ok(Chunker { config, counter })
    }

    pub fn config(&self) -> &ChunkConfig {
        &self.config
    }

    pub fn counter(&self) -> &dyn TokenCounter {
        self.counter.as_ref()
    }

    fn max_len(&self) -> usize {
        self.config.max_len
    }

    /// Depth-first grouping over a document tree.
    pub fn dfs_chunk(&self, tree: &DocumentTree) -> Vec<Chunk> {
        let mut sink = ChunkSink {
            document_id: &tree.document_id,
            chunks: Vec::new(),
        };
        for idx in tree.pre_order() {
            let node = tree.node(idx);
            if node.kind != NodeKind::General || self.counter.count(&node.text) == 0 {
                continue;
            }
            let headings: Vec<String> = tree
                .header_path(idx)
                .into_iter()
                .map(|h| heading_line(tree.node(h).depth, &tree.node(h).text))
                .collect();
            self.emit_node(&mut sink, headings, &node.id, &node.text);
        }
        sink.chunks
    }

    fn emit_node(&self, sink: &mut ChunkSink<'_>, mut headings: Vec<String>, id: &str, body: &str) {
        let max_len = self.max_len();
        let prefix_tokens = self.counter.count(&split_prefix(1));
        loop {
            let context = headings.join("\n");
            let whole = join_context(&context, body);
            let whole_tokens = self.counter.count(&whole);
            if whole_tokens <= max_len {
                sink.emit(whole, vec![id.to_string()], 0, whole_tokens, max_len);
                return;
            }
            let context_tokens = self.counter.count(&context);
            if context_tokens + prefix_tokens < max_len || headings.is_empty() {
                self.emit_splits(sink, &context, id, body);
                return;
            }
            if headings.len() == 1 && context_tokens > max_len {
                warn!("heading for node `{id}` alone exceeds max_len={max_len}; emitting oversize chunk");
                sink.emit(whole, vec![id.to_string()], 0, whole_tokens, max_len);
                return;
            }
            warn!("heading context for node `{id}` leaves no room under max_len={max_len}; dropping deepest heading");
            headings.pop();
        }
    }

    fn emit_splits(&self, sink: &mut ChunkSink<'_>, context: &str, id: &str, body: &str) {
        let max_len = self.max_len();
        let spans = self.counter.token_spans(body);
        let fixed = self.counter.count(&join_context(context, &split_prefix(1)));
        let budget = max_len.saturating_sub(fixed).max(1);

        let mut start_token = 0;
        let mut piece_no = 1;
        while start_token < spans.len() {
            let mut take = budget.min(spans.len() - start_token);
            loop {
                let text = self.render_piece(context, piece_no, body, &spans, start_token, take);
                let tokens = self.counter.count(&text);
                // Non-additive counters may need a smaller piece.
                if tokens > max_len && take > 1 {
                    take -= 1;
                    continue;
                }
                sink.emit(text, vec![id.to_string()], piece_no, tokens, max_len);
                break;
            }
            start_token += take;
            piece_no += 1;
        }
    }

    fn render_piece(
        &self,
        context: &str,
        piece_no: usize,
        body: &str,
        spans: &[Range<usize>],
        start_token: usize,
        take: usize,
    ) -> String {
        let from = if start_token == 0 { 0 } else { spans[start_token].start };
        let to = spans
            .get(start_token + take)
            .map_or(body.len(), |s| s.start);
        let mut piece = split_prefix(piece_no);
        piece.push_str(&body[from..to]);
        join_context(context, &piece)
    }

    /// Fixed-size token windows over the whole document text.
    pub fn length_chunk(&self, layout: &AnnotatedLayout) -> Vec<Chunk> {
        let mut text = String::new();
        let mut owners: Vec<(usize, &str)> = Vec::with_capacity(layout.segments.len());
        for (i, seg) in layout.segments.iter().enumerate() {
            if i > 0 {
                text.push(' ');
            }
            owners.push((text.len(), seg.id.as_str()));
            text.push_str(&seg.text);
        }
        let spans = self.counter.token_spans(&text);
        let owner_of = |offset: usize| {
            let pos = owners.partition_point(|(start, _)| *start <= offset);
            owners[pos.saturating_sub(1)].1
        };

        let mut sink = ChunkSink {
            document_id: &layout.document_id,
            chunks: Vec::new(),
        };
        for window in spans.chunks(self.max_len()) {
            let range = window[0].start..window[window.len() - 1].end;
            let mut sources: Vec<String> = Vec::new();
            for span in window {
                let owner = owner_of(span.start);
                if sources.last().map(String::as_str) != Some(owner) {
                    sources.push(owner.to_string());
                }
            }
            let chunk_text = text[range].to_string();
            let tokens = self.counter.count(&chunk_text);
            sink.emit(chunk_text, sources, 0, tokens, self.max_len());
        }
        sink.chunks
    }

    /// Greedy packing of type-tagged segments in reading order.
    pub fn structure_chunk(&self, layout: &AnnotatedLayout) -> Vec<Chunk> {
        const SEPARATOR: &str = " - ";
        let max_len = self.max_len();
        let mut sink = ChunkSink {
            document_id: &layout.document_id,
            chunks: Vec::new(),
        };
        let mut current: Option<(String, Vec<String>)> = None;
        let flush = |sink: &mut ChunkSink<'_>, current: &mut Option<(String, Vec<String>)>| {
            if let Some((text, sources)) = current.take() {
                let tokens = self.counter.count(&text);
                sink.emit(text, sources, 0, tokens, max_len);
            }
        };

        for seg in &layout.segments {
            let rendered = render_structure_segment(seg);
            if self.counter.count(&rendered) > max_len {
                flush(&mut sink, &mut current);
                let spans = self.counter.token_spans(&rendered);
                for window in spans.chunks(max_len) {
                    let text = rendered[window[0].start..window[window.len() - 1].end].to_string();
                    let tokens = self.counter.count(&text);
                    sink.emit(text, vec![seg.id.clone()], 0, tokens, max_len);
                }
                continue;
            }
            match current.as_mut() {
                Some((text, sources)) => {
                    let candidate = format!("{text}{SEPARATOR}{rendered}");
                    if self.counter.count(&candidate) <= max_len {
                        *text = candidate;
                        sources.push(seg.id.clone());
                    } else {
                        flush(&mut sink, &mut current);
                        current = Some((rendered, vec![seg.id.clone()]));
                    }
                }
                None => current = Some((rendered, vec![seg.id.clone()])),
            }
        }
        flush(&mut sink, &mut current);
        sink.chunks
    }
}

fn join_context(context: &str, body: &str) -> String {
    if context.is_empty() {
        body.to_string()
    } else {
        format!("{context}\n{body}")
    }
}

fn render_structure_segment(seg: &Segment) -> String {
    let label = structure_label(seg.segment_type);
    if seg.text.trim().is_empty() {
        format!("[{label}]")
    } else {
        format!("[{label}] {}", seg.text)
    }
}

/// Chunks a tree with depth-first grouping.
pub fn dfs_chunk(tree: &DocumentTree, config: &ChunkConfig) -> Result<Vec<Chunk>, ChunkError> {
    Ok(Chunker::new(config.clone())?.dfs_chunk(tree))
}

pub fn length_chunk(layout: &AnnotatedLayout, config: &ChunkConfig) -> Result<Vec<Chunk>, ChunkError> {
    Ok(Chunker::new(config.clone())?.length_chunk(layout))
}

pub fn structure_chunk(
    layout: &AnnotatedLayout,
    config: &ChunkConfig,
) -> Result<Vec<Chunk>, ChunkError> {
    Ok(Chunker::new(config.clone())?.structure_chunk(layout))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::{build_document_tree, heuristic_hierarchy, FAKE_ROOT_ID};
    use crate::layout::{extract_header_list, BoundingBox};
    use proptest::prelude::*;

    fn seg(id: &str, ty: SegmentType, top: u32, text: &str) -> Segment {
        Segment::new(id, ty, BoundingBox::new(0, top, 0), text)
    }

    fn tree_of(segments: Vec<Segment>) -> DocumentTree {
        let layout = AnnotatedLayout::new("doc", segments).unwrap();
        let headers = extract_header_list(&layout);
        let assignment = heuristic_hierarchy(&headers);
        build_document_tree(&layout, &headers, &assignment).unwrap()
    }

    fn words(n: usize, tag: &str) -> String {
        (0..n).map(|i| format!("{tag}{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn whitespace_counts() {
        assert_eq!(count_tokens("hello world"), 2);
        assert_eq!(count_tokens(""), 0);
        assert_eq!(count_tokens("a  b\nc"), 3);
        let re = regex::Regex::new(r"\S+").unwrap();
        for s in ["a  b\nc", " \u{a0}x\u{2003}y ", "tab\tsep\r\nnext", "😀 ok"] {
            assert_eq!(count_tokens(s), re.find_iter(s).count(), "{s:?}");
            let spans = WhitespaceCounter.token_spans(s);
            let via_regex: Vec<_> = re.find_iter(s).map(|m| m.range()).collect();
            assert_eq!(spans, via_regex);
        }
    }

    #[test]
    fn pluggable_counters_resolve() {
        let c = TokenCounterKind::Pluggable("char".into()).resolve().unwrap();
        assert_eq!(c.count("ab c"), 3);
        assert!(matches!(
            TokenCounterKind::Pluggable("nope".into()).resolve(),
            Err(ChunkError::UnknownCounter(_))
        ));
    }

    #[test]
    fn zero_max_len_rejected() {
        assert_eq!(
            Chunker::new(ChunkConfig::new(ChunkMethod::Length, 0)).unwrap_err(),
            ChunkError::ZeroMaxLen
        );
    }

    #[test]
    fn renders_heading_path() {
        let layout = AnnotatedLayout::new(
            "doc",
            vec![
                seg("t", SegmentType::Title, 0, "Document Title"),
                seg("s1", SegmentType::SectionHeader, 1, "Section 1 {name}"),
                seg("s11", SegmentType::SectionHeader, 2, "Section 1.1 {name}"),
                seg("x", SegmentType::Text, 3, "Section 1.1 {Text Content...}"),
            ],
        )
        .unwrap();
        let assignment = crate::hierarchy::parse_assignment(
            br#"[{"id":"t","parent":null},{"id":"s1","parent":"t"},{"id":"s11","parent":"s1"}]"#,
        )
        .unwrap();
        let tree =
            build_document_tree(&layout, &extract_header_list(&layout), &assignment).unwrap();
        let chunks = dfs_chunk(&tree, &ChunkConfig::default()).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(
            chunks[0].text,
            "# Document Title\n## Section 1 {name}\n### Section 1.1 {name}\nSection 1.1 {Text Content...}"
        );
        assert_eq!(chunks[0].source_node_ids, ["x"]);
        assert_eq!(chunks[0].split_index, 0);
        assert_eq!(chunks[0].chunk_id, "doc#0");
    }

    #[test]
    fn long_body_splits_into_labelled_pieces() {
        let max_len = 20;
        // "# Design" costs 2 tokens and each split label costs 2 more.
        let budget = max_len - 2 - 2;
        let body = words(3 * budget, "w");
        let tree = tree_of(vec![
            seg("t", SegmentType::Title, 0, "Design"),
            seg("x", SegmentType::Text, 1, &body),
        ]);
        let chunks = dfs_chunk(&tree, &ChunkConfig::new(ChunkMethod::MultiDocFusion, max_len)).unwrap();
        assert_eq!(chunks.len(), 3);
        for (i, c) in chunks.iter().enumerate() {
            assert!(c.text.starts_with(&format!("# Design\ntext_split_{} : ", i + 1)));
            assert_eq!(c.split_index, i + 1);
            assert_eq!(c.token_count, max_len);
            assert!(!c.oversize);
        }
        let rebuilt: String = chunks
            .iter()
            .map(|c| c.text.split_once(" : ").unwrap().1)
            .collect();
        assert_eq!(rebuilt, body);
    }

    #[test]
    fn root_only_tree_yields_nothing() {
        let tree = DocumentTree::new("d");
        assert!(dfs_chunk(&tree, &ChunkConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn pre_header_text_has_no_context() {
        let tree = tree_of(vec![
            seg("x", SegmentType::Text, 0, "preamble"),
            seg("h", SegmentType::SectionHeader, 1, "1 Scope"),
        ]);
        let chunks = dfs_chunk(&tree, &ChunkConfig::default()).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].text, "preamble");
        assert_eq!(tree.parent_id("x"), Some(FAKE_ROOT_ID));
    }

    #[test]
    fn deep_headings_are_dropped_when_context_overflows() {
        let tree = tree_of(vec![
            seg("a", SegmentType::SectionHeader, 0, "1 top"),
            seg("b", SegmentType::SectionHeader, 1, &format!("1.1 {}", words(8, "m"))),
            seg("x", SegmentType::Text, 2, &words(30, "b")),
        ]);
        // Context is 3 + 10 tokens; with max_len 12 nothing is left for the body.
        let chunks = dfs_chunk(&tree, &ChunkConfig::new(ChunkMethod::MultiDocFusion, 12)).unwrap();
        assert!(chunks.iter().all(|c| c.text.starts_with("# 1 top\ntext_split_")));
        assert!(chunks.iter().all(|c| c.token_count <= 12 && !c.oversize));
    }

    #[test]
    fn oversize_heading_is_flagged() {
        let tree = tree_of(vec![
            seg("a", SegmentType::SectionHeader, 0, &words(15, "h")),
            seg("x", SegmentType::Text, 1, "body"),
        ]);
        let chunks = dfs_chunk(&tree, &ChunkConfig::new(ChunkMethod::MultiDocFusion, 10)).unwrap();
        assert_eq!(chunks.len(), 1);
        assert!(chunks[0].oversize);
    }

    #[test]
    fn heading_that_nearly_fills_budget_is_dropped() {
        let tree = tree_of(vec![
            seg("a", SegmentType::SectionHeader, 0, &words(9, "h")),
            seg("x", SegmentType::Text, 1, &words(5, "b")),
        ]);
        let chunks = dfs_chunk(&tree, &ChunkConfig::new(ChunkMethod::MultiDocFusion, 10)).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].text, words(5, "b"));
        assert!(!chunks[0].oversize);
    }

    fn layout_of_tokens(counts: &[usize]) -> AnnotatedLayout {
        let segments = counts
            .iter()
            .enumerate()
            .map(|(i, &n)| seg(&format!("s{i}"), SegmentType::Text, i as u32, &words(n, "t")))
            .collect();
        AnnotatedLayout::new("doc", segments).unwrap()
    }

    #[test]
    fn length_windows() {
        let cfg = ChunkConfig::new(ChunkMethod::Length, 550);
        let sizes: Vec<usize> = length_chunk(&layout_of_tokens(&[600, 500]), &cfg)
            .unwrap()
            .iter()
            .map(|c| c.token_count)
            .collect();
        assert_eq!(sizes, [550, 550]);
        let sizes: Vec<usize> = length_chunk(&layout_of_tokens(&[10]), &cfg)
            .unwrap()
            .iter()
            .map(|c| c.token_count)
            .collect();
        assert_eq!(sizes, [10]);
        let chunks = length_chunk(&layout_of_tokens(&[300, 251]), &cfg).unwrap();
        let sizes: Vec<usize> = chunks.iter().map(|c| c.token_count).collect();
        assert_eq!(sizes, [550, 1]);
        assert_eq!(chunks[0].source_node_ids, ["s0", "s1"]);
        assert_eq!(chunks[1].source_node_ids, ["s1"]);
    }

    #[test]
    fn structure_rendering_and_packing() {
        let layout = AnnotatedLayout::new(
            "doc",
            vec![
                seg("h", SegmentType::SectionHeader, 0, "INTRODUCTION"),
                seg("x", SegmentType::Text, 1, "Design Write has prepared the following proposal"),
            ],
        )
        .unwrap();
        let chunks = structure_chunk(&layout, &ChunkConfig::new(ChunkMethod::Structure, 550)).unwrap();
        assert_eq!(chunks.len(), 1);
        assert!(chunks[0].text.starts_with("[Section] INTRODUCTION - [Text] Design Write"));
        assert_eq!(chunks[0].source_node_ids, ["h", "x"]);

        let single = AnnotatedLayout::new("d", vec![seg("x", SegmentType::Text, 0, "small")]).unwrap();
        let chunks = structure_chunk(&single, &ChunkConfig::new(ChunkMethod::Structure, 550)).unwrap();
        assert_eq!(chunks[0].text, "[Text] small");

        let chunks = structure_chunk(
            &layout_of_tokens(&[300, 300]),
            &ChunkConfig::new(ChunkMethod::Structure, 550),
        )
        .unwrap();
        assert_eq!(chunks.len(), 2);
    }

    #[test]
    fn structure_splits_oversize_segment() {
        let chunks = structure_chunk(
            &layout_of_tokens(&[3, 25, 3]),
            &ChunkConfig::new(ChunkMethod::Structure, 10),
        )
        .unwrap();
        let sizes: Vec<usize> = chunks.iter().map(|c| c.token_count).collect();
        // [Text] + 3 words, then 26 tokens split 10/10/6, then 4.
        assert_eq!(sizes, [4, 10, 10, 6, 4]);
        assert!(chunks.iter().all(|c| !c.oversize));
    }

    /// Greedy bin-fill oracle over token counts.
    fn greedy_oracle(sizes: &[usize], max_len: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur: Option<usize> = None;
        for &s in sizes {
            if s > max_len {
                if let Some(c) = cur.take() {
                    out.push(c);
                }
                let mut left = s;
                while left > 0 {
                    out.push(left.min(max_len));
                    left -= left.min(max_len);
                }
                continue;
            }
            cur = match cur {
                Some(c) if c + 1 + s <= max_len => Some(c + 1 + s),
                Some(c) => {
                    out.push(c);
                    Some(s)
                }
                None => Some(s),
            };
        }
        out.extend(cur);
        out
    }

    #[test]
    fn chunk_stats_means() {
        let mk = |tokens: usize, text: &str| Chunk {
            chunk_id: "c".into(),
            document_id: "d".into(),
            text: text.into(),
            source_node_ids: vec!["s".into()],
            split_index: 0,
            token_count: tokens,
            oversize: false,
        };
        let stats = chunk_stats(&[mk(100, "ab"), mk(200, "abcd"), mk(300, "é")]);
        assert_eq!(stats.chunk_count, 3);
        assert_eq!(stats.avg_tokens, 200.0);
        assert_eq!(stats.avg_chars, 7.0 / 3.0);
        assert_eq!(chunk_stats(&[]), ChunkStats::default());
    }

    proptest! {
        #[test]
        fn length_chunk_count_is_ceiling(sizes in proptest::collection::vec(0usize..80, 1..8), max_len in 1usize..60) {
            let layout = layout_of_tokens(&sizes);
            let total: usize = sizes.iter().sum();
            let chunks = length_chunk(&layout, &ChunkConfig::new(ChunkMethod::Length, max_len)).unwrap();
            prop_assert_eq!(chunks.len(), total.div_ceil(max_len));
            prop_assert!(chunks.iter().all(|c| c.token_count <= max_len));
        }

        #[test]
        fn structure_matches_greedy_oracle(sizes in proptest::collection::vec(1usize..40, 1..10), max_len in 5usize..60) {
            let layout = layout_of_tokens(&sizes);
            let chunks = structure_chunk(&layout, &ChunkConfig::new(ChunkMethod::Structure, max_len)).unwrap();
            let rendered: Vec<usize> = sizes.iter().map(|s| s + 1).collect();
            let got: Vec<usize> = chunks.iter().map(|c| c.token_count).collect();
            prop_assert_eq!(got, greedy_oracle(&rendered, max_len));
        }

        #[test]
        fn dfs_is_within_budget_and_covers_text(
            bodies in proptest::collection::vec("[a-z]{1,6}( [a-z]{1,6}){0,40}", 1..6),
            max_len in 8usize..40,
        ) {
            let mut segs = vec![seg("h", SegmentType::SectionHeader, 0, "1 Head")];
            for (i, b) in bodies.iter().enumerate() {
                segs.push(seg(&format!("x{i}"), SegmentType::Text, 1 + i as u32, b));
            }
            let tree = tree_of(segs);
            let chunks = dfs_chunk(&tree, &ChunkConfig::new(ChunkMethod::MultiDocFusion, max_len)).unwrap();
            for (i, b) in bodies.iter().enumerate() {
                let id = format!("x{i}");
                let mine: Vec<_> = chunks.iter().filter(|c| c.source_node_ids == [id.clone()]).collect();
                let rebuilt: String = mine.iter().map(|c| {
                    let rest = c.text.strip_prefix("# 1 Head\n").unwrap();
                    if c.split_index == 0 { rest.to_string() } else {
                        rest.strip_prefix(&split_prefix(c.split_index)).unwrap().to_string()
                    }
                }).collect();
                prop_assert_eq!(&rebuilt, b);
            }
            prop_assert!(chunks.iter().all(|c| c.token_count <= max_len && !c.oversize));
            prop_assert!(chunks.iter().all(|c| c.token_count == count_tokens(&c.text)));
        }
    }
}
