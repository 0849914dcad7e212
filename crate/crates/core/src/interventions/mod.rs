//! Trainable interventions on the final encoding state.
//!
//! - [`das`]: rotate the state, exchange the coordinates assigned to a set of
//!   causal variables between a base and a source run, rotate back.
//! - [`onion`]: add a position-scaled difference of token embeddings.
//!
//! Both are trained against a frozen GRU by decoding the intervened state
//! toward the counterfactual target.

pub mod das;
pub mod onion;

pub use das::{eval_das, subspace_replace, train_das, DasParams, TrainedDas};
pub use onion::{
    eval_onion, onion_intervene, onion_scale, train_onion, OnionConstraint, OnionParams, TrainedOnion,
};

use crate::gru::{DecodeMode, Feedback};

/// Feedback used while decoding an intervened state during training.
pub(crate) fn training_feedback(mode: DecodeMode) -> Feedback {
    match mode {
        DecodeMode::Autoregressive => Feedback::TeacherForced,
        DecodeMode::NoInput => Feedback::SelfFed,
    }
}
