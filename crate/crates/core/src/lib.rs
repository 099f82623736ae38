//! Dense anomaly detection with a jointly trained normalizing flow as the
//! source of synthetic negatives.
//!
//! A per-pixel classifier with an outlier head is trained in two phases:
//! closed-set segmentation, then fine-tuning on mixed-content crops where
//! one patch per image is replaced by negatives, either from a fixed
//! auxiliary distribution or sampled from a flow trained alongside it.
//! Which loss terms may update the flow is a property of the variant
//! ([`variants`]), enforced by stop-gradient routing ([`losses`]).

pub mod checkpoint;
mod codec;
pub mod config;
pub mod error;
pub mod eval;
pub mod flow;
pub mod losses;
pub mod scores;
pub mod seed;
pub mod segnet;
pub mod toydata;
pub mod trainer;
pub mod variants;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use scores::{AnomalyScorer, ScoreKind, ScoreMap, ScoreRegistry};
pub use trainer::{RunRecord, Trained};
pub use variants::{Method, VariantConfig, VariantRegistry};
