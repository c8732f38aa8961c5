//! Measure how much a chess player's average score improves when a strong
//! engine is allowed to replace a limited number of its moves.

pub mod analysis;
pub mod artifact;
pub mod board;
pub mod calibration;
pub mod engine;
pub mod error;
pub mod game;
pub mod nn;
pub mod optimize;
pub mod orchestrator;
pub mod policies;
pub mod predictors;
pub mod simfree;

pub use error::{Error, Result};
