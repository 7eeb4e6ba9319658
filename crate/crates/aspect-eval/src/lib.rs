//! Multi-aspect text evaluation via instructed Boolean QA.
//!
//! The pipeline: ingest human-rated corpora, forge instruction-following
//! tasks from them (scoring, comparison, ranking, Boolean QA, in two
//! stages), then at inference time select auxiliary aspects by definition
//! similarity, verbalize their verdicts into the prompt, and score the
//! target aspect from Yes/No probabilities. Correlation against human
//! judgments closes the loop.

pub mod backend;
pub mod domain;
pub mod engine;
pub mod error;
pub mod fileio;
pub mod forge;
pub mod ingest;
pub mod metaeval;
pub mod selector;
pub mod verbalizer;
