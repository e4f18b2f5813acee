//! Core of the ECG language processing pipeline.
//!
//! A recording is turned into a sequence of discrete wave tokens:
//! R-peaks are located ([`qrs`]), each heartbeat is split into P/QRS/T
//! waves ([`segment`]), every wave is canonicalized to a fixed-length
//! vector and assigned to the nearest centroid of a learned wave
//! vocabulary ([`vocab`]). Token sequences are then vectorized or
//! embedded ([`embed`]) for the classifiers in `elp-neural`, and scored
//! with the cross-validation and metric helpers in [`metrics`].

pub mod dsp;
pub mod embed;
pub mod error;
pub mod ingest;
pub mod matrix_io;
pub mod metrics;
pub mod qrs;
pub mod segment;
pub mod synth;
pub mod vocab;

pub use error::{Error, Result};
