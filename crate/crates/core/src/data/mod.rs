//! Corpus ingestion and preprocessing.

pub mod comments;
pub mod pipeline;
pub mod record;
pub mod synthetic;

pub use comments::{strip_comments, CommentGrammar};
pub use pipeline::{balance_with_negatives, length_filter, prepare, split, DatasetSplit, LengthWindow, PrepareConfig, Provenance};
pub use record::{load_records, save_records, RawRecord};

use crate::backend::vocab::Tokenizer;
use crate::error::{Error, Result};
use crate::task::{ClassificationExample, GenerativeExample};

/// Tokenizes a validated pair record.
pub fn to_classification(record: &RawRecord, tokenizer: &dyn Tokenizer) -> Result<ClassificationExample> {
    match (&record.x1, &record.x2, record.label) {
        (Some(x1), Some(x2), Some(label)) if record.task.is_classification() => Ok(ClassificationExample {
            id: record.id.clone(),
            task: record.task,
            language: record.lang.clone(),
            x1: tokenizer.tokenize(x1),
            x2: tokenizer.tokenize(x2),
            label,
        }),
        _ => Err(Error::Data(format!("record {} is not a labeled pair", record.id))),
    }
}

/// Tokenizes a validated generation record.
pub fn to_generative(record: &RawRecord, tokenizer: &dyn Tokenizer) -> Result<GenerativeExample> {
    match (&record.source, &record.target) {
        (Some(source), Some(target)) if !record.task.is_classification() => Ok(GenerativeExample {
            id: record.id.clone(),
            task: record.task,
            language: record.lang.clone(),
            source: tokenizer.tokenize(source),
            target: tokenizer.tokenize(target),
        }),
        _ => Err(Error::Data(format!("record {} is not a source/target pair", record.id))),
    }
}
