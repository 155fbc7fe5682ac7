//! Domain types, dataset store, JSONL interchange, prompt composition and
//! the rubric oracle for the feedback-alignment pipeline.

pub mod config;
pub mod error;
pub mod jsonl;
pub mod oracle;
pub mod promptgen;
pub mod stats;
pub mod store;
pub mod tokenizer;
pub mod types;

pub use config::ExperimentConfig;
pub use error::{CoreError, Result};
pub use oracle::{Judge, Judgement, Oracle, OracleRubric, SymbolConfig};
pub use promptgen::CategoryLists;
pub use stats::{compute_stats, DatasetStats, LabelCounts};
pub use store::{AnnotationFilter, Store, TagFilter, VideoFilter};
pub use tokenizer::CaptionTokenizer;
pub use types::*;
