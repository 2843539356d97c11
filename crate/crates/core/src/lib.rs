//! Text-embedding diagnostics: layer fusion, a context aggregator trained
//! with a contrastive objective, a multiple-choice retrieval benchmark, and
//! a toy diffusion harness for end-to-end fusion-weight learning.

pub mod aggregator;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod diffusion;
pub mod evaluator;
pub mod fusion;
pub mod io;
pub mod numerics;
pub mod pipeline;
pub mod stats;
pub mod toygen;
pub mod trainer;

pub use error::{Error, Result};
