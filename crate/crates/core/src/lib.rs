//! Expert budgeting for speculative decoding on mixture-of-experts models,
//! reproduced end to end on small synthetic transformers.

pub mod analysis;
pub mod budget;
pub mod cli;
pub mod config;
pub mod coverage;
pub mod error;
pub mod model;
pub mod moe;
pub mod numerics;
pub mod sim;
pub mod trace;
pub mod tree;

pub use error::{Error, Result};
