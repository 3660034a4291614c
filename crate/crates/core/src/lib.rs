//! Discrete speech-unit toolkit.
//!
//! Quantizes self-supervised speech features into k-means units, derives
//! run-length duration cues, trains a byte-level encoder-decoder that
//! predicts units straight from raw (mixed-script) text, and scores the
//! results with unit/character error rates and SDR.

pub mod cli;
pub mod corpus;
pub mod metrics;
pub mod nn;
pub mod predictor;
pub mod quantizer;
pub mod rng;
pub mod units;
