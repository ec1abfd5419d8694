// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diag;
pub mod geo;
pub mod model;
pub mod stats;
pub mod ingest;
pub mod tripinfer;
pub mod metrics;
pub mod config;
pub mod manifest;
pub mod synth;
pub mod pipeline;
