//! Causal speech enhancement laboratory.

pub mod analysis;
pub mod config;
pub mod data;
pub mod dsp;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod teacher;
pub mod tensor;
pub mod training;
