pub mod baseline_lut;
pub mod cli;
pub mod config;
pub mod cvae;
pub mod datasets;
pub mod eval;
pub mod geometry;
pub mod nn;
pub mod parallel;
pub mod pipeline;
pub mod regression;
pub mod rng;
