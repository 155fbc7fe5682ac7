//! Toy generator, answer-generating critic, alignment losses, the data
//! correction loop and the evaluation harness.

pub mod align;
pub mod checkpoint;
pub mod correction;
pub mod critic;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod synth;
pub mod toygen;

pub use error::{PipelineError, Result};
