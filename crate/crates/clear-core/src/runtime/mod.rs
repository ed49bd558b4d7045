//! Execution-agent runtime: chat history management, context augmentation,
//! and the episode loop that turns a backend plus an environment into a
//! rewarded trajectory.

pub mod backend;

use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::model::{RewardedTrajectory, StepRecord, TaskInstance, Termination, Trajectory};
use crate::orchestrator::RetryPolicy;

pub use backend::{backend_for_profile, ChatBackend, HttpBackend, MockRulebook, RetryingBackend};

/// Marker section inserted between the task description and guidance text.
pub const GUIDANCE_DELIMITER: &str = "## Strategy Guidance";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
    pub fn tool(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Tool,
            content: content.into(),
        }
    }
}

/// Connection settings for a chat backend. `endpoint` is an HTTP base URL,
/// `mock:<rulebook-path>`, or `scripted:<agent-name>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendProfile {
    pub endpoint: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub timeout_ms: u64,
    pub retry: RetryPolicy,
}

impl Default for BackendProfile {
    fn default() -> Self {
        BackendProfile {
            endpoint: String::new(),
            model_name: "unspecified".to_string(),
            temperature: 0.7,
            max_output_tokens: 1024,
            timeout_ms: 30_000,
            retry: RetryPolicy::default(),
        }
    }
}

impl BackendProfile {
    pub fn mock(rulebook_path: &str) -> Self {
        BackendProfile {
            endpoint: format!("mock:{rulebook_path}"),
            model_name: "mock".to_string(),
            ..BackendProfile::default()
        }
    }

    pub fn scripted(name: &str) -> Self {
        BackendProfile {
            endpoint: format!("scripted:{name}"),
            model_name: name.to_string(),
            ..BackendProfile::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.endpoint.is_empty() {
            return Err(Error::Config("backend endpoint is empty".to_string()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::Config(format!(
                "temperature {} out of [0,2]",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(Error::Config(
                "max_output_tokens must be positive".to_string(),
            ));
        }
        if self.timeout_ms == 0 {
            return Err(Error::Config("timeout must be positive".to_string()));
        }
        Ok(())
    }
}

/// A task plus optional guidance, with the exact text the execution agent
/// will see.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedTask {
    pub base: TaskInstance,
    pub guidance: Option<String>,
    pub composed: String,
}

/// Concatenate guidance onto a task description under a named section.
/// The description always remains a verbatim prefix of the composed text.
pub fn compose_context(task: &TaskInstance, guidance: Option<&str>) -> Result<AugmentedTask> {
    if task.description.contains(GUIDANCE_DELIMITER) {
        return Err(Error::InvalidArgument(format!(
            "double augmentation: task {} already contains a guidance section",
            task.task_id
        )));
    }
    match guidance {
        None => Ok(AugmentedTask {
            base: task.clone(),
            guidance: None,
            composed: task.description.clone(),
        }),
        Some(text) => {
            let trimmed = text.trim();
            if trimmed.is_empty() {
                return Err(Error::InvalidArgument(
                    "guidance is all whitespace".to_string(),
                ));
            }
            let composed = format!("{}\n\n{GUIDANCE_DELIMITER}\n{trimmed}", task.description);
            Ok(AugmentedTask {
                base: task.clone(),
                guidance: Some(trimmed.to_string()),
                composed,
            })
        }
    }
}

/// Pull the action out of a model reply: the first non-empty line, taken from
/// inside the first code fence when one is present.
pub fn parse_action(reply: &str) -> Option<String> {
    let body = match reply.find("```") {
        Some(start) => {
            let after = &reply[start + 3..];
            // Skip a language tag on the fence line.
            let after = match after.split_once('\n') {
                Some((_, rest)) => rest,
                None => after,
            };
            match after.find("```") {
                Some(end) => &after[..end],
                None => after,
            }
        }
        None => reply,
    };
    body.lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .map(str::to_string)
}

/// Run one full episode: feed the growing action/observation history to the
/// backend, step the environment, and score the finished trajectory.
///
/// Episodes always finish with a trajectory. Backend failures that survive
/// the retry layer end the episode with `terminated=backend_error` and
/// reward 0.
pub fn run_episode(
    env: &mut dyn Environment,
    task: &AugmentedTask,
    backend: &dyn ChatBackend,
    system_prompt: &str,
    run_id: u32,
    seed: u64,
) -> Result<RewardedTrajectory> {
    let max_turns = env.spec().max_turns;
    let first_observation = env.reset(&task.base, seed)?;
    let mut messages = vec![
        ChatMessage::system(system_prompt),
        ChatMessage::user(format!("{}\n\n{first_observation}", task.composed)),
    ];
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut terminated = Termination::MaxTurns;

    // The environment signals termination; the loop bound backstops
    // adapters that fail to enforce their own turn budget.
    while (steps.len() as u32) < max_turns {
        let reply = match backend.complete(&messages) {
            Ok(reply) => reply,
            Err(err) => {
                log::warn!(
                    "backend failed during episode of {}: {err}",
                    task.base.task_id
                );
                terminated = Termination::BackendError;
                break;
            }
        };
        let Some(action) = parse_action(&reply) else {
            log::warn!(
                "backend returned no actionable reply for {}",
                task.base.task_id
            );
            terminated = Termination::BackendError;
            break;
        };
        let outcome = env.step(&action)?;
        messages.push(ChatMessage::assistant(action.clone()));
        messages.push(ChatMessage::tool(outcome.observation.clone()));
        steps.push(StepRecord {
            index: steps.len() as u32,
            action,
            observation: outcome.observation,
            tool_name: None,
        });
        if let Some(done) = outcome.done {
            terminated = done;
            break;
        }
    }

    let turn_count = steps.len() as u32;
    let trajectory = Trajectory {
        task_id: task.base.task_id.clone(),
        run_id,
        seed,
        steps,
        terminated,
        turn_count,
    };
    let reward = if terminated == Termination::BackendError {
        0.0
    } else {
        env.score(&trajectory)?
    };
    Ok(RewardedTrajectory { trajectory, reward })
}
