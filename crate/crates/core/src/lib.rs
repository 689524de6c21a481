//! Synthetic-data music transcription: MIDI handling, sample-based
//! rendering, log-mel features, note tokens, training and evaluation.

pub mod audio;
pub mod dataset;
pub mod features;
pub mod fixtures;
pub mod inference;
pub mod metrics;
pub mod midi;
pub mod renderer;
pub mod sample_bank;
pub mod tokens;
pub mod training;
