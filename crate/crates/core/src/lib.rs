//! Contact-aware steering of generative action policies.

pub mod agent;
pub mod cli;
pub mod config;
pub mod cpm;
pub mod data;
pub mod episode;
mod error;
pub mod mixture;
pub mod pipeline;
pub mod policy;
pub mod pose;
pub mod schedulers;
pub mod sim;
pub mod stats;
pub mod steering;
pub mod validate;

pub use error::{Error, Result};
