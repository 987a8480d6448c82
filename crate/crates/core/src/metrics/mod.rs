//! Retrieval, structure and answer metrics, plus chunk relevance labeling.

mod ted;
mod text;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunker::Chunk;
use crate::hierarchy::{DocumentTree, HierarchyAssignment};
use crate::layout::AnnotatedLayout;
use crate::retrieval::RetrievalResult;

pub use ted::{normalize_label, teds, teds_ordered, tree_edit_distance, OrderedTree};
pub use text::{
    anls, lcs_len, levenshtein, normalized_similarity, rouge_l, rouge_l_multi, ANLS_THRESHOLD,
};

pub const REPORT_VERSION: &str = "1.0";

/// Cutoffs reported in every evaluation.
pub const EVAL_KS: [usize; 4] = [1, 2, 3, 4];

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("query {query_id}: unknown document {document_id} in evidence")]
    UnknownDocument { query_id: String, document_id: String },
    #[error("query {query_id}: unknown segment {segment_id} in document {document_id}")]
    UnknownSegment {
        query_id: String,
        document_id: String,
        segment_id: String,
    },
    #[error("query {query_id}: document {document_id} has no page {page_number}")]
    UnknownPage {
        query_id: String,
        document_id: String,
        page_number: u32,
    },
    #[error("query {query_id}: evidence needs a segment_id or page_number")]
    EmptyEvidence { query_id: String },
    #[error("query {0}: gold_answers is empty")]
    NoGoldAnswers(String),
    #[error("assignments share no ids")]
    DisjointIds,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub document_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub page_number: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub query_id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_evidence: Option<Vec<Evidence>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub query_id: String,
    pub answer: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceJudgment {
    pub query_id: String,
    pub relevant_chunk_ids: BTreeSet<String>,
}

/// Segment id to page number, per document.
#[derive(Debug, Clone, Default)]
pub struct LayoutIndex {
    docs: HashMap<String, HashMap<String, u32>>,
}

impl LayoutIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_layouts<'a>(layouts: impl IntoIterator<Item = &'a AnnotatedLayout>) -> Self {
        let mut index = LayoutIndex::new();
        for layout in layouts {
            index.insert(layout);
        }
        index
    }

    pub fn insert(&mut self, layout: &AnnotatedLayout) {
        let pages = layout
            .segments
            .iter()
            .map(|s| (s.id.clone(), s.bbox.page_number))
            .collect();
        self.docs.insert(layout.document_id.clone(), pages);
    }

    pub fn page_of(&self, document_id: &str, segment_id: &str) -> Option<u32> {
        self.docs.get(document_id)?.get(segment_id).copied()
    }

    fn has_page(&self, document_id: &str, page: u32) -> bool {
        self.docs
            .get(document_id)
            .is_some_and(|segs| segs.values().any(|&p| p == page))
    }
}

/// Lowercase, strip punctuation, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let cleaned: String = text
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    cleaned
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn check_evidence(qa: &QaRecord, index: &LayoutIndex) -> Result<(), MetricsError> {
    for ev in qa.gold_evidence.iter().flatten() {
        let Some(segs) = index.docs.get(&ev.document_id) else {
            return Err(MetricsError::UnknownDocument {
                query_id: qa.query_id.clone(),
                document_id: ev.document_id.clone(),
            });
        };
        match (&ev.segment_id, ev.page_number) {
            (Some(seg), _) if !segs.contains_key(seg) => {
                return Err(MetricsError::UnknownSegment {
                    query_id: qa.query_id.clone(),
                    document_id: ev.document_id.clone(),
                    segment_id: seg.clone(),
                })
            }
            (None, Some(page)) if !index.has_page(&ev.document_id, page) => {
                return Err(MetricsError::UnknownPage {
                    query_id: qa.query_id.clone(),
                    document_id: ev.document_id.clone(),
                    page_number: page,
                })
            }
            (None, None) => {
                return Err(MetricsError::EmptyEvidence {
                    query_id: qa.query_id.clone(),
                })
            }
            _ => {}
        }
    }
    Ok(())
}

/// Whether one chunk answers one query.
///
/// With evidence, the chunk must share a segment with it or sit on an
/// evidence page of the evidence document. Without evidence, a normalized
/// gold answer must occur in the normalized chunk text.
pub fn is_relevant(chunk: &Chunk, qa: &QaRecord, index: &LayoutIndex) -> bool {
    match qa.gold_evidence.as_deref() {
        Some(evidence) if !evidence.is_empty() => evidence.iter().any(|ev| {
            ev.document_id == chunk.document_id
                && chunk.source_node_ids.iter().any(|src| {
                    ev.segment_id.as_deref() == Some(src.as_str())
                        || (ev.segment_id.is_none()
                            && ev.page_number.is_some()
                            && index.page_of(&chunk.document_id, src) == ev.page_number)
                })
        }),
        _ => {
            let text = normalize_answer(&chunk.text);
            qa.gold_answers.iter().any(|answer| {
                let answer = normalize_answer(answer);
                !answer.is_empty() && text.contains(&answer)
            })
        }
    }
}

pub fn label_relevance(
    chunks: &[Chunk],
    qa: &QaRecord,
    index: &LayoutIndex,
) -> Result<RelevanceJudgment, MetricsError> {
    if qa.gold_answers.is_empty() {
        return Err(MetricsError::NoGoldAnswers(qa.query_id.clone()));
    }
    check_evidence(qa, index)?;
    Ok(RelevanceJudgment {
        query_id: qa.query_id.clone(),
        relevant_chunk_ids: chunks
            .iter()
            .filter(|c| is_relevant(c, qa, index))
            .map(|c| c.chunk_id.clone())
            .collect(),
    })
}

fn hits_in_top_k(result: &RetrievalResult, judgment: &RelevanceJudgment, k: usize) -> usize {
    result
        .hits
        .iter()
        .take(k)
        .filter(|h| judgment.relevant_chunk_ids.contains(&h.chunk_id))
        .count()
}

/// `None` when the judgment is empty or `k` is zero.
pub fn precision_recall_at_k(
    result: &RetrievalResult,
    judgment: &RelevanceJudgment,
    k: usize,
) -> Option<(f64, f64)> {
    if judgment.relevant_chunk_ids.is_empty() || k == 0 {
        return None;
    }
    let found = hits_in_top_k(result, judgment, k) as f64;
    Some((found / k as f64, found / judgment.relevant_chunk_ids.len() as f64))
}

/// Binary-gain nDCG; `None` when the judgment is empty or `k` is zero.
pub fn ndcg_at_k(result: &RetrievalResult, judgment: &RelevanceJudgment, k: usize) -> Option<f64> {
    if judgment.relevant_chunk_ids.is_empty() || k == 0 {
        return None;
    }
    let discount = |rank: usize| 1.0 / ((rank + 2) as f64).log2();
    let dcg: f64 = result
        .hits
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, h)| judgment.relevant_chunk_ids.contains(&h.chunk_id))
        .map(|(i, _)| discount(i))
        .sum();
    let ideal: f64 = (0..k.min(judgment.relevant_chunk_ids.len())).map(discount).sum();
    Some(dcg / ideal)
}

/// F1 over `(id, parent)` edges.
pub fn hierarchy_f1(
    pred: &HierarchyAssignment,
    gold: &HierarchyAssignment,
) -> Result<f64, MetricsError> {
    if pred.is_empty() && gold.is_empty() {
        return Ok(1.0);
    }
    if pred.is_empty() || gold.is_empty() {
        return Ok(0.0);
    }
    let pred_ids: HashSet<&str> = pred.entries.iter().map(|e| e.id.as_str()).collect();
    if !gold.entries.iter().any(|e| pred_ids.contains(e.id.as_str())) {
        return Err(MetricsError::DisjointIds);
    }
    let mut gold_edges: HashMap<(&str, Option<&str>), usize> = HashMap::new();
    for e in &gold.entries {
        *gold_edges.entry((&e.id, e.parent.as_deref())).or_default() += 1;
    }
    let mut matched = 0usize;
    for e in &pred.entries {
        if let Some(n) = gold_edges.get_mut(&(e.id.as_str(), e.parent.as_deref())) {
            if *n > 0 {
                *n -= 1;
                matched += 1;
            }
        }
    }
    if matched == 0 {
        return Ok(0.0);
    }
    let precision = matched as f64 / pred.len() as f64;
    let recall = matched as f64 / gold.len() as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub method: String,
    pub provider: String,
    pub max_len: usize,
    pub top_k: usize,
    pub k1: f64,
    pub b: f64,
    pub fallback_count: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RankScores {
    pub recall: f64,
    pub precision: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoresAtK {
    pub k: usize,
    #[serde(flatten)]
    pub scores: RankScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSummary {
    pub scored_queries: usize,
    /// Queries with no relevant chunk, excluded from the averages.
    pub skipped_queries: Vec<String>,
    pub per_k: Vec<ScoresAtK>,
    pub average: RankScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureSummary {
    pub documents: usize,
    pub teds: f64,
    pub hierarchy_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerSummary {
    pub queries: usize,
    pub predicted: usize,
    pub anls: f64,
    pub rouge_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: String,
    pub metadata: RunMetadata,
    pub retrieval: RetrievalSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structure: Option<StructureSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answers: Option<AnswerSummary>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Averages P/R/nDCG at each cutoff over queries with a non-empty judgment.
/// A judged query without a result counts as an empty ranking.
pub fn evaluate_retrieval(
    results: &[RetrievalResult],
    judgments: &[RelevanceJudgment],
    ks: &[usize],
) -> RetrievalSummary {
    let by_query: HashMap<&str, &RetrievalResult> =
        results.iter().map(|r| (r.query_id.as_str(), r)).collect();
    let mut skipped = Vec::new();
    let mut scored: Vec<(&RelevanceJudgment, RetrievalResult)> = Vec::new();
    for judgment in judgments {
        if judgment.relevant_chunk_ids.is_empty() {
            skipped.push(judgment.query_id.clone());
            continue;
        }
        let result = by_query
            .get(judgment.query_id.as_str())
            .map(|r| (*r).clone())
            .unwrap_or_else(|| RetrievalResult {
                query_id: judgment.query_id.clone(),
                hits: Vec::new(),
            });
        scored.push((judgment, result));
    }

    let per_k: Vec<ScoresAtK> = ks
        .iter()
        .map(|&k| {
            let pr: Vec<(f64, f64)> = scored
                .iter()
                .filter_map(|(j, r)| precision_recall_at_k(r, j, k))
                .collect();
            ScoresAtK {
                k,
                scores: RankScores {
                    precision: mean(pr.iter().map(|p| p.0)),
                    recall: mean(pr.iter().map(|p| p.1)),
                    ndcg: mean(scored.iter().filter_map(|(j, r)| ndcg_at_k(r, j, k))),
                },
            }
        })
        .collect();
    let average = RankScores {
        recall: mean(per_k.iter().map(|s| s.scores.recall)),
        precision: mean(per_k.iter().map(|s| s.scores.precision)),
        ndcg: mean(per_k.iter().map(|s| s.scores.ndcg)),
    };
    RetrievalSummary {
        scored_queries: scored.len(),
        skipped_queries: skipped,
        per_k,
        average,
    }
}

/// TEDS and parent-edge F1 averaged over `(predicted, gold)` tree pairs.
pub fn evaluate_structure(
    pairs: &[(&DocumentTree, &DocumentTree)],
) -> Result<StructureSummary, MetricsError> {
    let mut f1s = Vec::with_capacity(pairs.len());
    for (pred, gold) in pairs {
        f1s.push(hierarchy_f1(&pred.header_assignment(), &gold.header_assignment())?);
    }
    Ok(StructureSummary {
        documents: pairs.len(),
        teds: mean(pairs.iter().map(|(p, g)| teds(p, g))),
        hierarchy_f1: mean(f1s.into_iter()),
    })
}

/// ANLS and ROUGE-L over every QA record; a missing prediction scores as
/// an empty answer.
pub fn evaluate_answers(qa: &[QaRecord], predictions: &[Prediction]) -> AnswerSummary {
    let by_query: HashMap<&str, &str> = predictions
        .iter()
        .map(|p| (p.query_id.as_str(), p.answer.as_str()))
        .collect();
    let answers: Vec<(&QaRecord, &str)> = qa
        .iter()
        .map(|q| (q, by_query.get(q.query_id.as_str()).copied().unwrap_or("")))
        .collect();
    AnswerSummary {
        queries: qa.len(),
        predicted: qa.iter().filter(|q| by_query.contains_key(q.query_id.as_str())).count(),
        anls: mean(answers.iter().map(|(q, a)| anls(a, &q.gold_answers))),
        rouge_l: mean(answers.iter().map(|(q, a)| rouge_l_multi(a, &q.gold_answers))),
    }
}

impl EvalReport {
    pub fn new(metadata: RunMetadata, retrieval: RetrievalSummary) -> Self {
        EvalReport {
            version: REPORT_VERSION.to_string(),
            metadata,
            retrieval,
            structure: None,
            answers: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Aligned plain-text table: one row per cutoff, then the average.
    pub fn to_table(&self) -> String {
        let m = &self.metadata;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "method: {}  provider: {}  max_len: {}  top_k: {}  k1: {}  b: {}  fallbacks: {}",
            m.method, m.provider, m.max_len, m.top_k, m.k1, m.b, m.fallback_count
        );
        let r = &self.retrieval;
        let _ = writeln!(
            out,
            "queries scored: {}  skipped (no relevant chunk): {}",
            r.scored_queries,
            r.skipped_queries.len()
        );
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<6}{:>10}{:>11}{:>9}", "k", "Recall", "Precision", "nDCG");
        let row = |out: &mut String, label: &str, s: &RankScores| {
            let _ = writeln!(
                out,
                "{:<6}{:>10.4}{:>11.4}{:>9.4}",
                label, s.recall, s.precision, s.ndcg
            );
        };
        for at in &r.per_k {
            row(&mut out, &at.k.to_string(), &at.scores);
        }
        row(&mut out, "avg", &r.average);
        if let Some(s) = &self.structure {
            let _ = writeln!(out);
            let _ = writeln!(out, "{:<10}{:>8}{:>10}", "documents", "TEDS", "F1");
            let _ = writeln!(out, "{:<10}{:>8.4}{:>10.4}", s.documents, s.teds, s.hierarchy_f1);
        }
        if let Some(a) = &self.answers {
            let _ = writeln!(out);
            let _ = writeln!(out, "{:<10}{:>8}{:>10}", "answers", "ANLS", "ROUGE-L");
            let _ = writeln!(out, "{:<10}{:>8.4}{:>10.4}", a.predicted, a.anls, a.rouge_l);
        }
        out
    }
}
