//! Episode environment contract plus the bundled MiniShop environment.
//!
//! The contract is the adapter surface for plugging in external benchmarks
//! later: `reset`/`step`/`score` over the shared domain types. Environments
//! own their latent state; callers only see observations, the turn counter,
//! and the terminal flag.

pub mod minishop;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TaskInstance, Termination, Trajectory};

/// Static description of an environment: name, discount, turn budget, and
/// the accepted action forms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub env_name: String,
    /// Carried for completeness; rewards are assigned per trajectory, so this
    /// stays 1.0 in practice.
    pub gamma: f64,
    pub max_turns: u32,
    pub action_grammar: Vec<String>,
}

impl EnvSpec {
    pub fn new(
        env_name: &str,
        gamma: f64,
        max_turns: u32,
        action_grammar: Vec<String>,
    ) -> Result<Self> {
        if max_turns < 1 {
            return Err(Error::Env("max_turns must be at least 1".to_string()));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Env(format!("gamma must be in (0,1], got {gamma}")));
        }
        Ok(EnvSpec {
            env_name: env_name.to_string(),
            gamma,
            max_turns,
            action_grammar,
        })
    }
}

/// Public slice of episode state. The latent world stays environment-private.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnvState {
    pub rng_seed: u64,
    pub turn: u32,
    pub terminal: bool,
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: String,
    /// Set when the episode ended on this step; never `BackendError`.
    pub done: Option<Termination>,
}

/// The episode interface. One instance is confined to one episode runner;
/// distinct episodes run in parallel freely.
pub trait Environment: Send {
    fn spec(&self) -> &EnvSpec;

    /// Start an episode. Deterministic: the same (task, seed) yields a
    /// byte-identical first observation.
    fn reset(&mut self, task: &TaskInstance, seed: u64) -> Result<String>;

    /// Advance one turn. Errors if called before `reset` or after terminal.
    fn step(&mut self, action: &str) -> Result<StepOutcome>;

    /// Score a finished trajectory produced against this environment's world.
    /// Pure: re-scoring is idempotent.
    fn score(&self, trajectory: &Trajectory) -> Result<f64>;

    fn state(&self) -> EnvState;
}

/// Creates fresh episode environments for tasks. Factories are immutable and
/// shared across worker threads.
pub trait EnvFactory: Send + Sync {
    fn spec(&self) -> &EnvSpec;
    fn create(&self, task: &TaskInstance) -> Result<Box<dyn Environment>>;
}
