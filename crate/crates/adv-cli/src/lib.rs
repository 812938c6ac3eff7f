//! Library surface of the command-line tool: configuration, artifacts,
//! dataset generation, training loops, and the evaluation harness.

pub mod artifacts;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod harness;
pub mod trainer;
