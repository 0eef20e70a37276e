//! Latent-task language worlds with exact posteriors, ambiguity measures,
//! ICL and chain-of-thought bound checks, and an explicit transformer that
//! memorizes a world's conditional distributions.

pub mod bounds;
pub mod cli;
pub mod error;
pub mod inference;
pub mod transformer;
pub mod prompts;
pub mod world;

pub use error::{Error, Result};
