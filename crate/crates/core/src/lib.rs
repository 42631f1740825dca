//! Incomplete utterance rewriting as word-level edit-matrix segmentation.

pub mod data;
pub mod dialogue;
pub mod edit;
pub mod generate;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod supervision;
pub mod synth;
pub mod train;
