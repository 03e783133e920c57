//! Forwarding-source choice prediction for multiply-exposed users.
//!
//! A message posted on a follow network is shown to every follower of each
//! user who posts or forwards it. A user who sees the same message from two
//! different followees and then forwards it has made a choice between the
//! two exposure sources. This crate reconstructs those exposures from a
//! follow graph plus forwarding traces, extracts the two-exposure choice
//! instances, turns each into a 16-dimensional feature vector, and fits a
//! logistic-regression choice model by maximum likelihood.
//!
//! Module map:
//!
//! - [`graph`]: static directed follow network.
//! - [`cascade`]: per-message forwarding traces and their JSONL format.
//! - [`exposure`]: exposure records, the `W(k)` distribution and instance
//!   extraction.
//! - [`features`]: the 16 choice features and the interaction-history index.
//! - [`model`]: logistic choice model, fitting and persistence.
//! - [`eval`]: precision/recall/F1, temporal split and group ablation.
//! - [`synth`]: seeded synthetic graphs, cascades and planted instances.
//! - [`pipeline`]: end-to-end orchestration used by the CLI.
//!
//! With the default `parallel` feature, batch operations run on rayon.
//! Without it they fall back to plain sequential iteration; results are
//! identical either way.

pub mod cascade;
pub mod error;
pub mod eval;
pub mod exposure;
pub mod features;
pub mod graph;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod synth;

pub use cascade::{Cascade, ForwardEvent};
pub use error::{Error, Result};
pub use exposure::{ChoiceInstance, ExposureDistribution, ExposureRecord};
pub use features::{FeatureGroup, FeatureVector, Grouping, HistoryIndex, LabeledVector};
pub use graph::{FollowGraph, UserId};
pub use model::{ChoiceModel, FitConfig, TrainReport};
