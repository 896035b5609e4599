//! Context-limited word embeddings from a GPT-2 style transformer, and the
//! fMRI encoding-model statistics that measure how much context each brain
//! parcel integrates.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`tokenizer`]: byte-level BPE with word and sentence alignment.
//! - [`model`]: decoder forward pass under an explicit binary attention mask.
//! - [`masking`]: per-word windowed inputs and embedding generation.
//! - [`encoding`]: HRF design matrices and cross-validated ridge R scores.
//! - [`stats`]: ROI scores, slope t-tests, FDR and maximal context size.
//! - [`pipeline`]: configuration, orchestration, synthetic datasets.

// Negated float comparisons are how NaN inputs get rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod annotation;
pub mod container;
pub mod encoding;
pub mod error;
pub mod fixture;
pub mod masking;
pub mod model;
pub mod pipeline;
pub mod simulate;
pub mod stats;
pub mod tokenizer;

pub use error::{Error, Result};
