//! Pipeline library for learning task-specific context from agent execution
//! history: collect grouped rollouts, distill contrastive guidance, assemble
//! supervised datasets, and optimize a context-augmentation policy with
//! group-relative policy gradients whose reward comes from re-executing a
//! frozen execution agent.
//!
//! Modules mirror the pipeline stages:
//!
//! - [`model`]: domain types, validation, record grouping
//! - [`records`]: newline-delimited record files (`*.ndrec`)
//! - [`env`]: the episode environment contract and the MiniShop simulator
//! - [`runtime`]: chat backends, context composition, the episode loop
//! - [`scripted`]: deterministic scripted agents for offline runs
//! - [`reflection`]: subset enumeration, trajectory inspection, reflection
//! - [`cam`]: context augmentation backends and the template policy
//! - [`grpo`]: group-relative policy optimization with exact gradients
//! - [`eval`]: metrics and method comparison
//! - [`orchestrator`]: retries, worker pool, resumable collection

pub mod cam;
pub mod env;
pub mod error;
pub mod eval;
pub mod grpo;
pub mod hashing;
pub mod model;
pub mod orchestrator;
pub mod records;
pub mod reflection;
pub mod runtime;
pub mod scripted;

pub use error::{Error, Result};
