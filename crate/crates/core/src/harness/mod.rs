//! Evaluation and orchestration: ground truth, metrics, triplet mining,
//! configuration, the end-to-end pipeline and report emission.

pub mod metrics;
pub mod overlap;
pub mod triplets;
pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod report;
