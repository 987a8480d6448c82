//! Annotated-layout ingestion.
//!
//! A layout is the per-document product of region detection plus OCR: a list
//! of typed, positioned segments carrying recognized text. This module parses
//! the JSON interchange format, validates it, puts segments into reading
//! order and extracts the candidate section headers.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LayoutError {
    #[error("malformed layout JSON at byte {offset}: {message}")]
    Json { offset: usize, message: String },
    #[error("layout is missing required field `{0}`")]
    MissingDocumentField(&'static str),
    #[error("segment {index}: missing required field `{field}`")]
    MissingField { index: usize, field: &'static str },
    #[error("segment {index}: invalid value for `{field}`: {reason}")]
    InvalidField {
        index: usize,
        field: &'static str,
        reason: String,
    },
    #[error("layout field `{field}` is invalid: {reason}")]
    InvalidDocumentField { field: &'static str, reason: String },
    #[error("duplicate segment id `{0}`")]
    DuplicateId(String),
}

/// Position of a segment on its page, in page pixels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub page_number: u32,
    pub top: u32,
    pub left: u32,
    #[serde(default)]
    pub width: u32,
    #[serde(default)]
    pub height: u32,
}

impl BoundingBox {
    pub fn new(page_number: u32, top: u32, left: u32) -> Self {
        BoundingBox {
            page_number,
            top,
            left,
            width: 0,
            height: 0,
        }
    }

    /// Total reading-order key: page first, then vertical, then horizontal.
    pub fn reading_key(&self) -> (u32, u32, u32) {
        (self.page_number, self.top, self.left)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SegmentType {
    Title,
    SectionHeader,
    Text,
    Table,
    Figure,
    List,
    Caption,
    Other,
}

impl SegmentType {
    pub const ALL: [SegmentType; 8] = [
        SegmentType::Title,
        SegmentType::SectionHeader,
        SegmentType::Text,
        SegmentType::Table,
        SegmentType::Figure,
        SegmentType::List,
        SegmentType::Caption,
        SegmentType::Other,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SegmentType::Title => "Title",
            SegmentType::SectionHeader => "SectionHeader",
            SegmentType::Text => "Text",
            SegmentType::Table => "Table",
            SegmentType::Figure => "Figure",
            SegmentType::List => "List",
            SegmentType::Caption => "Caption",
            SegmentType::Other => "Other",
        }
    }

    /// Parses a type name leniently. Case, spaces, dashes and underscores are
    /// ignored and the common detector label spellings (`Section-header`,
    /// `Picture`, `List-item`) are recognised. Anything else is `Other`.
    pub fn parse_lenient(name: &str) -> SegmentType {
        let key: String = name
            .chars()
            .filter(|c| c.is_alphanumeric())
            .flat_map(char::to_lowercase)
            .collect();
        match key.as_str() {
            "title" => SegmentType::Title,
            "sectionheader" | "section" | "header" | "heading" => SegmentType::SectionHeader,
            "text" | "paragraph" => SegmentType::Text,
            "table" => SegmentType::Table,
            "figure" | "picture" | "image" => SegmentType::Figure,
            "list" | "listitem" => SegmentType::List,
            "caption" => SegmentType::Caption,
            _ => SegmentType::Other,
        }
    }

    pub fn is_header(&self) -> bool {
        matches!(self, SegmentType::Title | SegmentType::SectionHeader)
    }
}

impl fmt::Display for SegmentType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for SegmentType {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for SegmentType {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let name = String::deserialize(deserializer)?;
        Ok(SegmentType::parse_lenient(&name))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub id: String,
    pub segment_type: SegmentType,
    #[serde(flatten)]
    pub bbox: BoundingBox,
    pub text: String,
}

impl Segment {
    pub fn new(
        id: impl Into<String>,
        segment_type: SegmentType,
        bbox: BoundingBox,
        text: impl Into<String>,
    ) -> Self {
        Segment {
            id: id.into(),
            segment_type,
            bbox,
            text: text.into(),
        }
    }

    pub fn is_header(&self) -> bool {
        self.segment_type.is_header()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedLayout {
    pub document_id: String,
    pub segments: Vec<Segment>,
}

impl AnnotatedLayout {
    /// Builds a layout from already-typed segments, applying the same
    /// validation and ordering as [`parse_layout`].
    pub fn new(
        document_id: impl Into<String>,
        segments: Vec<Segment>,
    ) -> Result<Self, LayoutError> {
        let document_id = document_id.into();
        if document_id.is_empty() {
            return Err(LayoutError::InvalidDocumentField {
                field: "document_id",
                reason: "must not be empty".into(),
            });
        }
        let mut seen = HashSet::with_capacity(segments.len());
        for (index, seg) in segments.iter().enumerate() {
            if seg.id.is_empty() {
                return Err(LayoutError::InvalidField {
                    index,
                    field: "id",
                    reason: "must not be empty".into(),
                });
            }
            if !seen.insert(seg.id.as_str()) {
                return Err(LayoutError::DuplicateId(seg.id.clone()));
            }
        }
        Ok(AnnotatedLayout {
            document_id,
            segments: reading_order_sort(segments),
        })
    }

    pub fn segment(&self, id: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.id == id)
    }
}

/// Ordered candidate section headers (Title and SectionHeader segments).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HeaderList {
    pub headers: Vec<Segment>,
}

impl HeaderList {
    pub fn len(&self) -> usize {
        self.headers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.headers.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Segment> {
        self.headers.iter()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.headers.iter().any(|h| h.id == id)
    }
}

/// Stable sort by `(page_number, top, left)`.
pub fn reading_order_sort(mut segments: Vec<Segment>) -> Vec<Segment> {
    segments.sort_by_key(|s| s.bbox.reading_key());
    segments
}

pub fn extract_header_list(layout: &AnnotatedLayout) -> HeaderList {
    HeaderList {
        headers: layout
            .segments
            .iter()
            .filter(|s| s.is_header())
            .cloned()
            .collect(),
    }
}

/// Parses and validates one layout document.
pub fn parse_layout(bytes: &[u8]) -> Result<AnnotatedLayout, LayoutError> {
    let root: Value = serde_json::from_slice(bytes).map_err(|e| LayoutError::Json {
        offset: byte_offset(bytes, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let obj = root.as_object().ok_or_else(|| LayoutError::Json {
        offset: 0,
        message: "top-level value must be an object".into(),
    })?;

    let document_id = match obj.get("document_id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        Some(_) => {
            return Err(LayoutError::InvalidDocumentField {
                field: "document_id",
                reason: "expected a string".into(),
            })
        }
        None => return Err(LayoutError::MissingDocumentField("document_id")),
    };
    let raw_segments = match obj.get("segments") {
        Some(Value::Array(a)) => a,
        Some(_) => {
            return Err(LayoutError::InvalidDocumentField {
                field: "segments",
                reason: "expected an array".into(),
            })
        }
        None => return Err(LayoutError::MissingDocumentField("segments")),
    };

    let segments = raw_segments
        .iter()
        .enumerate()
        .map(|(index, value)| parse_segment(index, value))
        .collect::<Result<Vec<_>, _>>()?;
    AnnotatedLayout::new(document_id, segments)
}

/// Canonical pretty-printed JSON for a layout.
pub fn serialize_layout(layout: &AnnotatedLayout) -> String {
    serde_json::to_string_pretty(layout).expect("layout serialization is infallible")
}

fn parse_segment(index: usize, value: &Value) -> Result<Segment, LayoutError> {
    let obj = value.as_object().ok_or(LayoutError::InvalidField {
        index,
        field: "segment",
        reason: "expected an object".into(),
    })?;

    let id = match obj.get("id") {
        Some(Value::String(s)) => s.clone(),
        // Detector outputs frequently use numeric ids.
        Some(Value::Number(n)) => n.to_string(),
        Some(_) => {
            return Err(LayoutError::InvalidField {
                index,
                field: "id",
                reason: "expected a string".into(),
            })
        }
        None => return Err(LayoutError::MissingField { index, field: "id" }),
    };
    let segment_type = match obj.get("segment_type") {
        Some(Value::String(s)) => SegmentType::parse_lenient(s),
        Some(_) => SegmentType::Other,
        None => {
            return Err(LayoutError::MissingField {
                index,
                field: "segment_type",
            })
        }
    };
    let bbox = BoundingBox {
        page_number: required_u32(obj, index, "page_number")?,
        top: required_u32(obj, index, "top")?,
        left: required_u32(obj, index, "left")?,
        width: optional_u32(obj, index, "width")?,
        height: optional_u32(obj, index, "height")?,
    };
    let text = match obj.get("text") {
        Some(Value::String(s)) => normalize_trailing_newlines(s),
        Some(Value::Null) => String::new(),
        Some(_) => {
            return Err(LayoutError::InvalidField {
                index,
                field: "text",
                reason: "expected a string".into(),
            })
        }
        None => return Err(LayoutError::MissingField { index, field: "text" }),
    };
    Ok(Segment {
        id,
        segment_type,
        bbox,
        text,
    })
}

fn required_u32(
    obj: &Map<String, Value>,
    index: usize,
    field: &'static str,
) -> Result<u32, LayoutError> {
    match obj.get(field) {
        None | Some(Value::Null) => Err(LayoutError::MissingField { index, field }),
        Some(v) => to_u32(v, index, field),
    }
}

fn optional_u32(
    obj: &Map<String, Value>,
    index: usize,
    field: &'static str,
) -> Result<u32, LayoutError> {
    match obj.get(field) {
        None | Some(Value::Null) => Ok(0),
        Some(v) => to_u32(v, index, field),
    }
}

fn to_u32(value: &Value, index: usize, field: &'static str) -> Result<u32, LayoutError> {
    let invalid = |reason: &str| LayoutError::InvalidField {
        index,
        field,
        reason: reason.to_string(),
    };
    let Value::Number(n) = value else {
        return Err(invalid("expected a number"));
    };
    if let Some(u) = n.as_u64() {
        return u32::try_from(u).map_err(|_| invalid("out of range"));
    }
    if n.as_i64().is_some() {
        return Err(invalid("must be non-negative"));
    }
    // Fractional pixel coordinates are truncated.
    match n.as_f64() {
        Some(f) if f >= 0.0 && f <= u32::MAX as f64 => Ok(f as u32),
        Some(f) if f < 0.0 => Err(invalid("must be non-negative")),
        _ => Err(invalid("out of range")),
    }
}

fn normalize_trailing_newlines(s: &str) -> String {
    s.trim_end_matches(['\n', '\r']).to_string()
}

/// Converts serde_json's 1-based line/column into a byte offset.
fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start = bytes
        .split_inclusive(|b| *b == b'\n')
        .take(line - 1)
        .map(<[u8]>::len)
        .sum::<usize>();
    (line_start + column.saturating_sub(1)).min(bytes.len())
}
