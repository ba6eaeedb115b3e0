//! Audio-visual target speaker extraction with decoupled visual cues.
//!
//! The crate synthesises a small audio-visual corpus, simulates the three
//! mixture datasets (different-speaker aligned-visual, different-speaker
//! shuffled-visual, same-speaker aligned-visual), trains the four extraction
//! variants and evaluates them.

pub mod audio;
pub mod avcorpus;
pub mod cli;
pub mod container;
pub mod embedviz;
pub mod error;
pub mod evalkit;
pub mod mixsim;
pub mod nn;
pub mod par;
pub mod sepnet;
pub mod trainkit;

pub use error::{Error, Result};
