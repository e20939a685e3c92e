//! Casting downstream tasks into the backbone's native objectives.
//!
//! Pair tasks (clone detection, code search, method-name prediction) become
//! a masked-token prediction read through a [`Verbalizer`]; generation tasks
//! (summarization, code generation) become prefix-prompted sequence to
//! sequence problems with a freshly initialized decoder.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod cast;
pub mod decoder;
pub mod verbalizer;

pub use cast::{build_generative_input, cast_classification, CastExample, ClassificationExample, GenerativeExample};
pub use decoder::{decode, seq2seq_loss, DecoderConfig, DecoderHeader, Strategy};
pub use verbalizer::{mlm_loss, verbalize, MlmLoss, Verbalizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Clone detection.
    Cd,
    /// Code search, as query/code pair classification.
    Cs,
    /// Method-name prediction, as snippet/name suitability.
    Mnp,
    /// Code summarization.
    Cm,
    /// Code generation.
    Cg,
}

impl TaskKind {
    pub fn is_classification(self) -> bool {
        matches!(self, TaskKind::Cd | TaskKind::Cs | TaskKind::Mnp)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Cd => "cd",
            TaskKind::Cs => "cs",
            TaskKind::Mnp => "mnp",
            TaskKind::Cm => "cm",
            TaskKind::Cg => "cg",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cd" => Ok(TaskKind::Cd),
            "cs" => Ok(TaskKind::Cs),
            "mnp" => Ok(TaskKind::Mnp),
            "cm" => Ok(TaskKind::Cm),
            "cg" => Ok(TaskKind::Cg),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}
