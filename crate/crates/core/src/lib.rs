//! Set-prediction retrieval of clinical key phrases and report composition
//! for chest X-ray report generation.
//!
//! The guide in `book/` walks through the pipeline; its code blocks run as
//! doc-tests of this crate.

pub mod decoder;
pub mod embedding;
pub mod error;
pub mod index;
pub mod losses;
pub mod metrics;
pub mod matching;
pub mod phrase_graph;
pub mod rag;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/key-phrases.md")]
    mod key_phrases {}
    #[doc = include_str!("../../../book/src/embeddings.md")]
    mod embeddings {}
    #[doc = include_str!("../../../book/src/set-matching.md")]
    mod set_matching {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/index.md")]
    mod index {}
    #[doc = include_str!("../../../book/src/composing-reports.md")]
    mod composing_reports {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/command-line.md")]
    mod command_line {}
}
