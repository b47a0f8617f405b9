//! Contamination auditing from layer-wise representation geometry.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`repstore`] loads hidden-state bundles (original, similar, blanked and
//!    paraphrase-variant representations per sample) and token statistics.
//! 2. [`geometry`] turns each sample into a per-layer profile of shift
//!    magnitude (RSM), directional collapse (DC) and stability index (RSI).
//! 3. [`protocol`] compresses, robustly standardizes against a clean
//!    reference, aligns and aggregates the profile into the `s_lara`
//!    membership score.
//! 4. [`evaluation`] measures membership-inference quality (ROC-AUC,
//!    TPR at a fixed FPR, Cohen's d) against the output-level [`baselines`].
//!
//! [`synth`] generates bundles with planted contamination signatures for
//! end-to-end testing, and [`report`] holds the CSV/JSON writers shared by the
//! command-line tool.

pub mod baselines;
pub mod evaluation;
pub mod geometry;
pub mod pipeline;
pub mod protocol;
pub mod report;
pub mod repstore;
pub mod stats;
pub mod synth;

pub use geometry::{Epsilon, GeometryProfile, Metric};
pub use protocol::{CleanReference, LayerSelection, MetricSet, ScoreBreakdown};
pub use repstore::{BundleManifest, Dataset, SampleGeometryInput};
