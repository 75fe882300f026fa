//! Hierarchical multi-label classification with incomplete annotations.
//!
//! The crate covers the whole pipeline for tree-structured label spaces where
//! annotations may stop short of a leaf, omit sibling branches, or skip whole
//! categories:
//!
//! - [`hierarchy`]: path-file parsing, pre-order indexing, descendant matrix
//! - [`annotations`]: path lists to target/mask bit-strings
//! - [`constraint`]: max-constraint over subtrees and 0.5 binarization
//! - [`loss`]: masked max-constraint loss with analytic gradients
//! - [`model`]: multi-head two-layer probe, AdamW, one-cycle cosine schedule
//! - [`metrics`]: micro AP, HML AP, Singular F1, per-node precision/recall/F1
//! - [`baseline`]: exact annotation counting and Monte Carlo random baselines
//! - [`datagen`]: synthetic datasets with controlled missing information
//! - [`experiment`]: end-to-end generate/train/evaluate runner

pub mod annotations;
pub mod baseline;
pub mod constraint;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod hierarchy;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod rng;

pub use annotations::{AnnotationSet, CategoryLabels};
pub use error::{Error, Result};
pub use hierarchy::{DescendantMatrix, Hierarchy};
pub use metrics::MetricsReport;
