//! Loop-closure detection from precomputed visual patch embeddings and LiDAR
//! point descriptors: two-stage retrieval, fused-descriptor matching, robust
//! registration, and the evaluation harness around them.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod geometry;
pub mod kmeans;
pub mod retrieval;
pub mod assignment;
pub mod fusion;
pub mod pose;
pub mod formats;
pub mod harness;
pub mod synth;
pub mod cli;
