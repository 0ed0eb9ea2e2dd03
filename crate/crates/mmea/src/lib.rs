//! Multi-modal entity alignment over knowledge-graph pairs.
//!
//! The pipeline: per-modality encoders (a two-layer GAT for graph structure,
//! linear maps for relation/attribute/visual/surface features), a cross-modal
//! attention block that produces per-entity meta modality weights, contrastive
//! alignment training with optional hard-negative replay, iterative and
//! unsupervised seeding, and ranking-based evaluation. A synthetic MMKG-pair
//! generator and a TSV dataset format make the whole thing runnable at desk
//! scale.

pub mod cli;
pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod kg;
pub mod mmh;
pub mod model;
pub mod rundir;
pub mod training;

pub use error::{MmeaError, Result};
