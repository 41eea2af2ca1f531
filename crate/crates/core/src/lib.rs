//! Evaluation and reconstruction of document image layouts.

pub mod geometry;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod reconstruct;
pub mod synth;
