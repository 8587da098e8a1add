//! Runtime failure detection for visuomotor robots with a probabilistic
//! latent world model and conformal thresholds.

pub mod conformal;
pub mod error;
pub mod harness;
pub mod nnkit;
pub mod par;
pub mod pushsim;
pub mod scorers;
pub mod tokenizer;
pub mod trajkit;
pub mod worldmodel;

pub use error::{Error, Result};
