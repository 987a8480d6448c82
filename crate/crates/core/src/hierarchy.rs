//! Section hierarchy: parent assignments for headers, and the document tree
//! built from them.
//!
//! The tree has a single synthetic root ([`FAKE_ROOT_ID`]) that adopts every
//! top-level header. Non-header segments are attached as leaves under the
//! header that most recently precedes them in reading order.

use std::collections::{HashMap, HashSet};

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::layout::{AnnotatedLayout, HeaderList, Segment, SegmentType};

pub const FAKE_ROOT_ID: &str = "FAKE_ROOT";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HierarchyError {
    #[error("assignment is not valid JSON: {0}")]
    Json(String),
    #[error("no JSON array found in assignment text")]
    NoArray,
    #[error("assignment entry {index}: {reason}")]
    BadEntry { index: usize, reason: String },
    #[error("duplicate id `{0}` in assignment")]
    DuplicateId(String),
    #[error("`{id}` references unknown parent `{parent}`")]
    UnknownParent { id: String, parent: String },
    #[error("cycle in assignment: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
    #[error("assignment id `{0}` is not a header of this document")]
    UnknownHeader(String),
    #[error("segment id `{0}` is reserved")]
    ReservedId(String),
    #[error("malformed tree: {0}")]
    MalformedTree(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AssignmentEntry {
    pub id: String,
    pub parent: Option<String>,
}

impl AssignmentEntry {
    pub fn new(id: impl Into<String>, parent: Option<&str>) -> Self {
        AssignmentEntry {
            id: id.into(),
            parent: parent.map(str::to_string),
        }
    }
}

/// Flat `{id, parent}` records; `parent: None` marks a top-level header.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HierarchyAssignment {
    pub entries: Vec<AssignmentEntry>,
}

impl HierarchyAssignment {
    pub fn new(entries: Vec<AssignmentEntry>) -> Self {
        HierarchyAssignment { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn parent_of(&self, id: &str) -> Option<Option<&str>> {
        self.entries
            .iter()
            .find(|e| e.id == id)
            .map(|e| e.parent.as_deref())
    }

    /// Checks id uniqueness, that every parent is itself an entry, and
    /// acyclicity.
    pub fn validate(&self) -> Result<(), HierarchyError> {
        let ids = self.unique_ids()?;
        self.validate_parents(|p| ids.contains(p))?;
        self.check_acyclic()
    }

    /// Like [`validate`](Self::validate) but accepts parents that are any id
    /// in `headers`, and requires every entry id to be a header.
    pub fn validate_against(&self, headers: &HeaderList) -> Result<(), HierarchyError> {
        let header_ids: HashSet<&str> = headers.iter().map(|h| h.id.as_str()).collect();
        self.unique_ids()?;
        if let Some(e) = self.entries.iter().find(|e| !header_ids.contains(e.id.as_str())) {
            return Err(HierarchyError::UnknownHeader(e.id.clone()));
        }
        self.validate_parents(|p| header_ids.contains(p))?;
        self.check_acyclic()
    }

    fn unique_ids(&self) -> Result<HashSet<&str>, HierarchyError> {
        let mut ids = HashSet::with_capacity(self.entries.len());
        for e in &self.entries {
            if !ids.insert(e.id.as_str()) {
                return Err(HierarchyError::DuplicateId(e.id.clone()));
            }
        }
        Ok(ids)
    }

    fn validate_parents(&self, known: impl Fn(&str) -> bool) -> Result<(), HierarchyError> {
        for e in &self.entries {
            if let Some(p) = &e.parent {
                if p != &e.id && !known(p) {
                    return Err(HierarchyError::UnknownParent {
                        id: e.id.clone(),
                        parent: p.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    fn check_acyclic(&self) -> Result<(), HierarchyError> {
        let parent: HashMap<&str, &str> = self
            .entries
            .iter()
            .filter_map(|e| e.parent.as_deref().map(|p| (e.id.as_str(), p)))
            .collect();
        // 1 = on the current walk, 2 = known to reach a root.
        let mut state: HashMap<&str, u8> = HashMap::new();
        for e in &self.entries {
            let mut path: Vec<&str> = Vec::new();
            let mut cur = Some(e.id.as_str());
            while let Some(id) = cur {
                match state.get(id) {
                    Some(2) => break,
                    Some(1) => {
                        let start = path.iter().position(|p| *p == id).unwrap_or(0);
                        let mut cycle: Vec<String> =
                            path[start..].iter().map(|s| s.to_string()).collect();
                        cycle.push(id.to_string());
                        return Err(HierarchyError::Cycle(cycle));
                    }
                    _ => {}
                }
                state.insert(id, 1);
                path.push(id);
                cur = parent.get(id).copied();
            }
            for id in path {
                state.insert(id, 2);
            }
        }
        Ok(())
    }
}

/// Parses an assignment from raw text, tolerating wrapper text around the
/// JSON array (such as Markdown code fences).
pub fn parse_assignment(bytes: &[u8]) -> Result<HierarchyAssignment, HierarchyError> {
    let text = String::from_utf8_lossy(bytes);
    let body = extract_json_array(&text).ok_or(HierarchyError::NoArray)?;
    let value: Value = serde_json::from_str(body).map_err(|e| HierarchyError::Json(e.to_string()))?;
    let assignment = assignment_from_value(&value)?;
    assignment.validate()?;
    Ok(assignment)
}

/// Slices the outermost `[ ... ]` out of `text`.
pub fn extract_json_array(text: &str) -> Option<&str> {
    let start = text.find('[')?;
    let end = text.rfind(']')?;
    (end > start).then(|| &text[start..=end])
}

pub(crate) fn assignment_from_value(value: &Value) -> Result<HierarchyAssignment, HierarchyError> {
    let items = value.as_array().ok_or(HierarchyError::NoArray)?;
    let mut entries = Vec::with_capacity(items.len());
    for (index, item) in items.iter().enumerate() {
        let bad = |reason: &str| HierarchyError::BadEntry {
            index,
            reason: reason.to_string(),
        };
        let obj = item.as_object().ok_or_else(|| bad("expected an object"))?;
        let id = match obj.get("id") {
            Some(Value::String(s)) if !s.is_empty() => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            Some(_) => return Err(bad("`id` must be a non-empty string")),
            None => return Err(bad("missing `id`")),
        };
        let parent = match obj.get("parent") {
            None | Some(Value::Null) => None,
            // Models occasionally quote the null or leave it blank.
            Some(Value::String(s)) if s.is_empty() || s == "null" => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(Value::Number(n)) => Some(n.to_string()),
            Some(_) => return Err(bad("`parent` must be a string or null")),
        };
        entries.push(AssignmentEntry { id, parent });
    }
    Ok(HierarchyAssignment { entries })
}

static SECTION_NUMBER: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"^\s*(\d+(?:\.\d+)*)(\.?)").expect("valid regex"));

/// Leading dotted section number of a header, e.g. `"3.1.2 Scope"` → `[3, 1, 2]`.
pub fn section_number(text: &str) -> Option<Vec<u32>> {
    let caps = SECTION_NUMBER.captures(text)?;
    let whole = caps.get(0)?;
    let trailing_dot = !caps[2].is_empty();
    let rest = &text[whole.end()..];
    // "3D printing" or "1st quarter" are not section numbers.
    if !trailing_dot && rest.chars().next().is_some_and(char::is_alphanumeric) {
        return None;
    }
    caps[1].split('.').map(|p| p.parse().ok()).collect()
}

/// Rule-based hierarchy from section numbering.
///
/// A header numbered `a.b.c` is placed under the most recent header numbered
/// `a.b` (falling back to shorter prefixes when that level is absent);
/// single-level numbers and titles are top level. Unnumbered section headers
/// go under the most recent numbered header or title.
pub fn heuristic_hierarchy(headers: &HeaderList) -> HierarchyAssignment {
    let mut by_number: HashMap<Vec<u32>, &str> = HashMap::new();
    let mut anchor: Option<&str> = None;
    let mut entries = Vec::with_capacity(headers.len());

    for header in headers.iter() {
        let id = header.id.as_str();
        let parent = if header.segment_type == SegmentType::Title {
            anchor = Some(id);
            None
        } else if let Some(number) = section_number(&header.text) {
            let parent = (1..number.len())
                .rev()
                .find_map(|len| by_number.get(&number[..len]).copied());
            by_number.insert(number, id);
            anchor = Some(id);
            parent
        } else {
            anchor
        };
        entries.push(AssignmentEntry {
            id: id.to_string(),
            parent: parent.map(str::to_string),
        });
    }
    HierarchyAssignment { entries }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    FakeRoot,
    Header,
    General,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeNode {
    pub id: String,
    pub kind: NodeKind,
    pub segment_type: Option<SegmentType>,
    pub text: String,
    pub children: Vec<usize>,
    pub parent: Option<usize>,
    pub depth: usize,
}

/// Arena-backed ordered tree. Node 0 is always the synthetic root.
///
/// Equality is structural: arena order does not matter.
#[derive(Debug, Clone)]
pub struct DocumentTree {
    pub document_id: String,
    nodes: Vec<TreeNode>,
    index: HashMap<String, usize>,
}

impl DocumentTree {
    pub fn new(document_id: impl Into<String>) -> Self {
        let root = TreeNode {
            id: FAKE_ROOT_ID.to_string(),
            kind: NodeKind::FakeRoot,
            segment_type: None,
            text: String::new(),
            children: Vec::new(),
            parent: None,
            depth: 0,
        };
        DocumentTree {
            document_id: document_id.into(),
            index: HashMap::from([(FAKE_ROOT_ID.to_string(), 0)]),
            nodes: vec![root],
        }
    }

    pub const ROOT: usize = 0;

    pub fn root(&self) -> &TreeNode {
        &self.nodes[Self::ROOT]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() == 1
    }

    pub fn node(&self, idx: usize) -> &TreeNode {
        &self.nodes[idx]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&TreeNode> {
        self.index_of(id).map(|i| &self.nodes[i])
    }

    pub fn parent_id(&self, id: &str) -> Option<&str> {
        let node = self.get(id)?;
        node.parent.map(|p| self.nodes[p].id.as_str())
    }

    fn push(&mut self, segment: &Segment, kind: NodeKind, parent: usize) -> usize {
        let idx = self.nodes.len();
        self.nodes.push(TreeNode {
            id: segment.id.clone(),
            kind,
            segment_type: Some(segment.segment_type),
            text: segment.text.clone(),
            children: Vec::new(),
            parent: None,
            depth: 0,
        });
        self.index.insert(segment.id.clone(), idx);
        self.link(idx, parent);
        idx
    }

    fn link(&mut self, child: usize, parent: usize) {
        self.nodes[child].parent = Some(parent);
        self.nodes[parent].children.push(child);
    }

    fn recompute_depths(&mut self) {
        let mut stack = vec![(Self::ROOT, 0usize)];
        while let Some((idx, depth)) = stack.pop() {
            self.nodes[idx].depth = depth;
            stack.extend(self.nodes[idx].children.iter().map(|&c| (c, depth + 1)));
        }
    }

    /// Node indices in depth-first pre-order, starting at the root.
    pub fn pre_order(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![Self::ROOT];
        while let Some(idx) = stack.pop() {
            out.push(idx);
            stack.extend(self.nodes[idx].children.iter().rev());
        }
        out
    }

    /// Header ancestors of `idx`, outermost first (excludes the root and
    /// `idx` itself).
    pub fn header_path(&self, idx: usize) -> Vec<usize> {
        let mut path = Vec::new();
        let mut cur = self.nodes[idx].parent;
        while let Some(p) = cur {
            if self.nodes[p].kind == NodeKind::Header {
                path.push(p);
            }
            cur = self.nodes[p].parent;
        }
        path.reverse();
        path
    }

    /// The header structure of this tree as a flat assignment, in pre-order.
    pub fn header_assignment(&self) -> HierarchyAssignment {
        let entries = self
            .pre_order()
            .into_iter()
            .filter(|&i| self.nodes[i].kind == NodeKind::Header)
            .map(|i| {
                let parent = self.nodes[i]
                    .parent
                    .filter(|&p| p != Self::ROOT)
                    .map(|p| self.nodes[p].id.clone());
                AssignmentEntry {
                    id: self.nodes[i].id.clone(),
                    parent,
                }
            })
            .collect();
        HierarchyAssignment { entries }
    }

    pub fn to_nested(&self) -> NestedNode {
        fn build(tree: &DocumentTree, idx: usize) -> NestedNode {
            let n = &tree.nodes[idx];
            NestedNode {
                id: n.id.clone(),
                kind: n.kind,
                segment_type: n.segment_type,
                text: n.text.clone(),
                children: n.children.iter().map(|&c| build(tree, c)).collect(),
            }
        }
        build(self, Self::ROOT)
    }

    pub fn from_nested(
        document_id: impl Into<String>,
        root: &NestedNode,
    ) -> Result<DocumentTree, HierarchyError> {
        if root.kind != NodeKind::FakeRoot {
            return Err(HierarchyError::MalformedTree("root must be FakeRoot".into()));
        }
        let mut tree = DocumentTree::new(document_id);
        tree.nodes[0].id = root.id.clone();
        tree.index = HashMap::from([(root.id.clone(), 0)]);
        let mut stack: Vec<(&NestedNode, usize)> =
            root.children.iter().rev().map(|c| (c, 0)).collect();
        while let Some((node, parent)) = stack.pop() {
            if node.kind == NodeKind::FakeRoot {
                return Err(HierarchyError::MalformedTree(format!(
                    "nested FakeRoot `{}`",
                    node.id
                )));
            }
            if tree.nodes[parent].kind == NodeKind::General {
                return Err(HierarchyError::MalformedTree(format!(
                    "general node `{}` has children",
                    tree.nodes[parent].id
                )));
            }
            if tree.index.contains_key(&node.id) {
                return Err(HierarchyError::MalformedTree(format!(
                    "duplicate node id `{}`",
                    node.id
                )));
            }
            let idx = tree.nodes.len();
            tree.nodes.push(TreeNode {
                id: node.id.clone(),
                kind: node.kind,
                segment_type: node.segment_type,
                text: node.text.clone(),
                children: Vec::new(),
                parent: None,
                depth: 0,
            });
            tree.index.insert(node.id.clone(), idx);
            tree.link(idx, parent);
            stack.extend(node.children.iter().rev().map(|c| (c, idx)));
        }
        tree.recompute_depths();
        Ok(tree)
    }
}

impl PartialEq for DocumentTree {
    fn eq(&self, other: &Self) -> bool {
        self.document_id == other.document_id && self.to_nested() == other.to_nested()
    }
}

impl Eq for DocumentTree {}

/// Nested serialization form of a tree node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NestedNode {
    pub id: String,
    pub kind: NodeKind,
    pub segment_type: Option<SegmentType>,
    pub text: String,
    pub children: Vec<NestedNode>,
}

/// Builds the header-only tree. Headers absent from `assignment`, or
/// assigned a null parent, hang directly under the root. Siblings keep the
/// reading order of `headers`.
pub fn build_header_tree(
    document_id: &str,
    headers: &HeaderList,
    assignment: &HierarchyAssignment,
) -> Result<DocumentTree, HierarchyError> {
    if let Some(h) = headers.iter().find(|h| h.id == FAKE_ROOT_ID) {
        return Err(HierarchyError::ReservedId(h.id.clone()));
    }
    assignment.validate_against(headers)?;

    let parent_of: HashMap<&str, &str> = assignment
        .entries
        .iter()
        .filter_map(|e| e.parent.as_deref().map(|p| (e.id.as_str(), p)))
        .collect();

    let mut tree = DocumentTree::new(document_id);
    for header in headers.iter() {
        tree.push(header, NodeKind::Header, DocumentTree::ROOT);
    }
    // Relink in a second pass so a parent may appear after its child.
    for idx in 1..tree.nodes.len() {
        let Some(&parent_id) = parent_of.get(tree.nodes[idx].id.as_str()) else {
            continue;
        };
        let parent = tree.index[parent_id];
        tree.nodes[DocumentTree::ROOT].children.retain(|&c| c != idx);
        tree.link(idx, parent);
    }
    for node in &mut tree.nodes {
        node.children.sort_unstable();
    }
    tree.recompute_depths();
    Ok(tree)
}

/// Attaches every non-header segment of `layout` as a leaf under the header
/// that most recently precedes it in reading order (or under the root when no
/// header precedes it). Headers of `layout` missing from `tree` are added
/// under the root. All sibling lists end up in reading order.
pub fn attach_general_nodes(mut tree: DocumentTree, layout: &AnnotatedLayout) -> DocumentTree {
    let mut position: HashMap<usize, usize> = HashMap::with_capacity(layout.segments.len());
    let mut current = DocumentTree::ROOT;
    for (pos, segment) in layout.segments.iter().enumerate() {
        if segment.is_header() {
            current = match tree.index_of(&segment.id) {
                Some(idx) => idx,
                None => tree.push(segment, NodeKind::Header, DocumentTree::ROOT),
            };
            position.insert(current, pos);
        } else if tree.index_of(&segment.id).is_none() {
            let idx = tree.push(segment, NodeKind::General, current);
            position.insert(idx, pos);
        }
    }
    for node in &mut tree.nodes {
        node.children
            .sort_by_key(|c| position.get(c).copied().unwrap_or(usize::MAX));
    }
    tree.recompute_depths();
    tree
}

/// Header tree plus attached general nodes for one layout.
pub fn build_document_tree(
    layout: &AnnotatedLayout,
    headers: &HeaderList,
    assignment: &HierarchyAssignment,
) -> Result<DocumentTree, HierarchyError> {
    if let Some(s) = layout.segments.iter().find(|s| s.id == FAKE_ROOT_ID) {
        return Err(HierarchyError::ReservedId(s.id.clone()));
    }
    let tree = build_header_tree(&layout.document_id, headers, assignment)?;
    Ok(attach_general_nodes(tree, layout))
}
