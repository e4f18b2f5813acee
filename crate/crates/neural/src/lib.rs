//! Reverse-mode autodiff and the token-sequence classifiers.
//!
//! [`graph`] holds the tape, [`layers`] composes it into conv, LSTM and
//! attention blocks, [`model`] wires the CNN / RNN / RNN-with-attention
//! heads, and [`train`] fits them with Adam.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Head, Model, ModelSpec};
pub use train::{train, Example, TrainConfig, TrainOutcome};
