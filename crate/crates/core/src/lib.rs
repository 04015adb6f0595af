//! Keystroke-dynamics verification.
//!
//! Raw keystroke logs become per-keystroke timing features, a Siamese two-layer
//! LSTM maps each sequence to a fixed-size embedding, and users are verified by
//! the mean Euclidean distance between a query embedding and their enrollment
//! gallery.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod nn;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
