//! Training and causal analysis of GRU sequence memories on the repeat task.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`graph`], [`ortho`], [`optim`], [`rng`]: dense arithmetic,
//!   reverse-mode differentiation, Cayley rotations, AdamW, seeded PRNG.
//! - [`taskgen`]: repeat-task corpora and counterfactual / edit datasets.
//! - [`gru`]: the GRU model, batched encode/decode and gate traces.
//! - [`trainer`]: training loops, metrics and checkpoints.
//! - [`interventions`]: subspace interchange (unigram / bigram) and
//!   magnitude-scaled ("onion") embedding interventions.
//! - [`probes`]: flat, recurrent and onion probes plus the onion featurizer.
//! - [`toymodel`]: the hand-designed scale-recurrence memory.
//! - [`gates`]: gate-trace statistics and heatmap export.

pub mod container;
pub mod error;
pub mod gates;
pub mod graph;
pub mod gru;
pub mod interventions;
pub mod optim;
pub mod ortho;
pub mod params;
pub mod probes;
pub mod rng;
pub mod taskgen;
pub mod tensor;
pub mod toymodel;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use gru::{DecodeMode, Feedback, GruParams};
pub use params::ParamSet;
pub use rng::Rng;
pub use taskgen::{CounterfactualExample, Granularity, OnionEditExample, RepeatExample, TaskConfig};
pub use tensor::{Real, Tensor};
