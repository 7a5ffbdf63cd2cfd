//! Multimodal grounding at desk scale: a from-scratch transformer grounding
//! model with region-specific dynamic layer fusion and the competing
//! encoder-layer-fusion strategies, plus training, evaluation, and analysis
//! tooling.

pub mod analysis;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod grounding;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod persistence;
pub mod rng;
pub mod sample;
pub mod synthgen;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
