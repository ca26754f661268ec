//! Multi-agent insight discovery over tabular datasets.
//!
//! The pipeline profiles a dataset, acquires domain knowledge on demand,
//! raises questions through several designed analyst roles, answers each
//! selected question with multi-strategy code generation plus a review/fix
//! loop executed in a sandbox, and consolidates the insights into a summary.
//! All model and search traffic goes through [`gateway::Gateway`], which can
//! record and replay cassettes so complete runs are reproducible offline.

pub mod agent;
pub mod artifacts;
pub mod config;
pub mod error;
pub mod eval;
pub mod evaluate;
pub mod flags;
pub mod gateway;
pub mod insight;
pub mod knowledge;
pub mod orchestrator;
pub mod profile;
pub mod prompts;
pub mod questions;
pub mod scenario;
pub mod sandbox;

pub use error::{Error, Result};
