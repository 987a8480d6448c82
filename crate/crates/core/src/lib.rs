//! Hierarchy-aware chunking for long, multi-page documents.
//!
//! The pipeline consumes annotated layouts (typed, positioned OCR segments),
//! reconstructs the section hierarchy, renders hierarchy-aware Markdown
//! chunks by depth-first grouping, and evaluates chunkings with corpus-level
//! BM25 retrieval plus structure and answer metrics.

pub mod chunker;
pub mod hierarchy;
pub mod layout;
pub mod metrics;
pub mod pipeline;
pub mod provider;
pub mod retrieval;
pub mod store;

pub use chunker::{Chunk, ChunkConfig, ChunkMethod, ChunkStats};
pub use hierarchy::{DocumentTree, HierarchyAssignment, NodeKind};
pub use layout::{AnnotatedLayout, BoundingBox, HeaderList, Segment, SegmentType};
