//! # ctxgeom
//!
//! Measures how added context reshapes truth representations in the residual
//! stream of a language model.
//!
//! Inputs are activation dumps (the TVD1 container, see [`actdump`]) holding
//! one final-prompt-token vector per (condition, statement, layer). From them
//! the crate computes truth vectors, the angle between the with-context and
//! without-context truth vectors, squared-norm magnitude ratios, truth probes,
//! logit-lens probability ratios and the paired nonparametric comparisons
//! between relevant and random contexts.
//!
//! Layer-parallel and statement-parallel loops run on rayon when the
//! `parallel` feature is enabled (the default). Every reduction is done in a
//! fixed order, so parallel and sequential runs produce identical bits. See
//! [`exec::Exec`].
//!
//! ## Modules
//!
//! - [`actdump`]: TVD1 reader/writer, activation model, instruction filter.
//! - [`geometry`]: truth vectors, θ, relative magnitudes, layer curves, phases.
//! - [`probes`]: mass-mean, logistic, linear SVM and MLP truth probes.
//! - [`stats`]: Wilcoxon signed-rank, Bonferroni, comparisons, Pearson.
//! - [`contextgen`]: random-context baselines and Flesch reading ease.
//! - [`promptkit`]: four-prompt protocol and instruction-following check.
//! - [`lens`]: logit-lens normalized probability difference.
//! - [`report`]: synthetic fixtures and the end-to-end pipeline.

pub mod actdump;
pub mod contextgen;
pub mod exec;
pub mod geometry;
pub mod lens;
pub mod numeric;
pub mod probes;
pub mod promptkit;
pub mod report;
pub mod stats;

pub use actdump::{ActivationSet, ConditionLabel, ContextKind, TruthSide, UnembeddingBundle};
pub use exec::Exec;
pub use geometry::{LayerCurve, Quantity};

/// Crate version embedded in every report manifest.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
