//! Dual-conditioned (MHC + peptide) Transformer generator for CDR3 receptor
//! sequences, with residue-level physicochemical embedding fusion, a
//! multi-start beam-search inference pipeline and string-metric evaluation.

pub mod baseline;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod generate;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod physchem;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
