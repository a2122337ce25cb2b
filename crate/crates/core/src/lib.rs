//! Structured channel pruning for ONNX models.
//!
//! The pipeline reads a model ([`model`]), indexes it ([`graph`]), classifies
//! every operator ([`attrs`]), grows one association tree per prunable node
//! and merges coupled trees into groups ([`tree`]), scores and selects
//! channels ([`scoring`]), slices the weights ([`rewrite`]), checks the result
//! against a masked copy of the original with a reference interpreter
//! ([`interp`]) and summarizes parameters and FLOPs ([`report`]). [`cli`]
//! wraps the same steps as a command-line tool.

pub mod attrs;
pub mod cli;
pub mod context;
pub mod error;
pub mod graph;
pub mod interp;
pub mod model;
pub mod report;
pub mod rewrite;
pub mod scoring;
pub mod tree;

pub use context::PruneContext;
pub use error::{Diagnostic, Error, Result, Severity};
