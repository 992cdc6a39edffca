//! Merge-conflict mining for pull-request corpora.
//!
//! The pipeline ingests a PR corpus, retrieves per-PR anchors from the GitHub
//! GraphQL API, re-simulates each merge locally, extracts conflict regions and
//! emits a relational dataset plus summary statistics.

pub mod analytics;
pub mod attribution;
pub mod corpus;
pub mod dataset;
pub mod git;
pub mod merge;
pub mod metadata;
pub mod parser;
pub mod pipeline;
pub mod repo;
pub mod status;

