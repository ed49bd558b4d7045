//! Canonical domain types shared by every stage of the pipeline.
//!
//! All types are immutable values after construction and safe to share across
//! threads. Validation never panics and never aborts: it returns the full
//! list of violations so callers can report every problem at once.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which side of the train/test partition a task belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// A task description plus the scenario key used for scenario-level metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task_id: String,
    pub scenario_id: String,
    pub description: String,
    pub split: Split,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

/// One action/observation pair within an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: u32,
    pub action: String,
    pub observation: String,
    pub tool_name: Option<String>,
}

/// Why an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    AgentDone,
    MaxTurns,
    BackendError,
}

/// A complete episode: the ordered action/observation steps for one run of
/// one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub run_id: u32,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub terminated: Termination,
    pub turn_count: u32,
}

/// A trajectory paired with its scalar episode reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardedTrajectory {
    pub trajectory: Trajectory,
    #[serde(with = "reward_string")]
    pub reward: f64,
}

/// All rewarded runs of a single task: the unit of contrastive reflection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayGroup {
    pub task: TaskInstance,
    pub runs: Vec<RewardedTrajectory>,
}

/// Guidance distilled from a subset of one task's runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceRecord {
    pub task_id: String,
    pub subset_run_ids: Vec<u32>,
    pub guidance: String,
    pub reflector_model: String,
    pub raw_response_digest: String,
}

/// One supervised training pair: task description in, guidance out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftExample {
    pub input: String,
    pub target: String,
    pub origin: GuidanceRecord,
}

/// Rewards are serialized as decimal strings in their shortest round-trip
/// form so archives re-read bit-exactly regardless of the reader's language.
pub(crate) mod reward_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &f64, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&format!("{value}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<f64, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse::<f64>()
            .map_err(|e| serde::de::Error::custom(format!("bad reward {text:?}: {e}")))
    }
}

/// One failed invariant: the field it concerns and the rule it broke.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    fn new(field: &str, rule: impl Into<String>) -> Self {
        Violation {
            field: field.to_string(),
            rule: rule.into(),
        }
    }
}

pub fn validate_task(task: &TaskInstance) -> Vec<Violation> {
    let mut out = Vec::new();
    if task.task_id.is_empty() {
        out.push(Violation::new("task_id", "must be non-empty"));
    }
    if task.scenario_id.is_empty() {
        out.push(Violation::new("scenario_id", "must be non-empty"));
    }
    if task.description.is_empty() {
        out.push(Violation::new("description", "must be non-empty"));
    }
    out
}

/// Check every trajectory invariant: step indices dense from 0, actions
/// non-empty, turn count consistent.
pub fn validate_trajectory(t: &Trajectory) -> Vec<Violation> {
    let mut out = Vec::new();
    if t.task_id.is_empty() {
        out.push(Violation::new("task_id", "must be non-empty"));
    }
    if t.turn_count as usize != t.steps.len() {
        out.push(Violation::new(
            "turn_count",
            format!(
                "turn_count mismatch: {} vs {} steps",
                t.turn_count,
                t.steps.len()
            ),
        ));
    }
    for (expected, step) in t.steps.iter().enumerate() {
        if step.index as usize != expected {
            out.push(Violation::new(
                "steps",
                format!("index gap at {expected} (found {})", step.index),
            ));
            break;
        }
    }
    for step in &t.steps {
        if step.action.is_empty() {
            out.push(Violation::new(
                "steps",
                format!("action empty at index {}", step.index),
            ));
        }
    }
    out
}

pub fn validate_rewarded(r: &RewardedTrajectory) -> Vec<Violation> {
    let mut out = validate_trajectory(&r.trajectory);
    if !(0.0..=1.0).contains(&r.reward) || !r.reward.is_finite() {
        out.push(Violation::new(
            "reward",
            format!("must be in [0,1], got {}", r.reward),
        ));
    }
    out
}

pub fn validate_group(g: &ReplayGroup) -> Vec<Violation> {
    let mut out = validate_task(&g.task);
    if g.runs.is_empty() {
        out.push(Violation::new("runs", "must contain at least one run"));
    }
    let mut seen = std::collections::BTreeSet::new();
    for run in &g.runs {
        out.extend(validate_rewarded(run));
        if run.trajectory.task_id != g.task.task_id {
            out.push(Violation::new(
                "runs",
                format!(
                    "run {} belongs to task {}, group is {}",
                    run.trajectory.run_id, run.trajectory.task_id, g.task.task_id
                ),
            ));
        }
        if !seen.insert(run.trajectory.run_id) {
            out.push(Violation::new(
                "runs",
                format!("duplicate run_id {}", run.trajectory.run_id),
            ));
        }
    }
    out
}

pub fn validate_guidance(g: &GuidanceRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    if g.task_id.is_empty() {
        out.push(Violation::new("task_id", "must be non-empty"));
    }
    if g.guidance.trim().is_empty() {
        out.push(Violation::new("guidance", "must be non-empty"));
    }
    if g.subset_run_ids.windows(2).any(|w| w[0] >= w[1]) {
        out.push(Violation::new(
            "subset_run_ids",
            "must be strictly increasing",
        ));
    }
    out
}

pub fn validate_sft(e: &SftExample) -> Vec<Violation> {
    let mut out = validate_guidance(&e.origin);
    if e.input.is_empty() {
        out.push(Violation::new("input", "must be non-empty"));
    }
    if e.target.is_empty() {
        out.push(Violation::new("target", "must be non-empty"));
    }
    out
}

/// Group rewarded runs by task: one group per distinct task_id, runs sorted
/// by run_id, group list sorted by task_id.
pub fn group_replays(
    records: Vec<RewardedTrajectory>,
    tasks: &BTreeMap<String, TaskInstance>,
) -> Result<Vec<ReplayGroup>> {
    let mut by_task: BTreeMap<String, Vec<RewardedTrajectory>> = BTreeMap::new();
    for rec in records {
        if !tasks.contains_key(&rec.trajectory.task_id) {
            return Err(Error::Validation(format!(
                "unknown task_id {} in replay records",
                rec.trajectory.task_id
            )));
        }
        by_task
            .entry(rec.trajectory.task_id.clone())
            .or_default()
            .push(rec);
    }
    let mut groups = Vec::with_capacity(by_task.len());
    for (task_id, mut runs) in by_task {
        runs.sort_by_key(|r| r.trajectory.run_id);
        groups.push(ReplayGroup {
            task: tasks[&task_id].clone(),
            runs,
        });
    }
    Ok(groups)
}

/// Index a task list by task_id, rejecting duplicates.
pub fn task_index(tasks: &[TaskInstance]) -> Result<BTreeMap<String, TaskInstance>> {
    let mut index = BTreeMap::new();
    for task in tasks {
        if index.insert(task.task_id.clone(), task.clone()).is_some() {
            return Err(Error::Validation(format!(
                "duplicate task_id {}",
                task.task_id
            )));
        }
    }
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(index: u32, action: &str) -> StepRecord {
        StepRecord {
            index,
            action: action.to_string(),
            observation: format!("obs {index}"),
            tool_name: None,
        }
    }

    fn trajectory(task_id: &str, run_id: u32, n_steps: u32) -> Trajectory {
        Trajectory {
            task_id: task_id.to_string(),
            run_id,
            seed: 7,
            steps: (0..n_steps).map(|i| step(i, "search shirt")).collect(),
            terminated: Termination::AgentDone,
            turn_count: n_steps,
        }
    }

    #[test]
    fn well_formed_trajectory_has_empty_report() {
        assert!(validate_trajectory(&trajectory("t1", 0, 3)).is_empty());
    }

    #[test]
    fn index_gap_is_reported() {
        let mut t = trajectory("t1", 0, 3);
        t.steps[1].index = 2; // 0, 2, 2
        let report = validate_trajectory(&t);
        assert!(
            report.iter().any(|v| v.rule.contains("index gap at 1")),
            "{report:?}"
        );
    }

    #[test]
    fn turn_count_mismatch_is_reported() {
        let mut t = trajectory("t1", 0, 3);
        t.turn_count = 5;
        let report = validate_trajectory(&t);
        assert!(
            report
                .iter()
                .any(|v| v.rule.contains("turn_count mismatch")),
            "{report:?}"
        );
    }

    #[test]
    fn reward_bounds_checked() {
        let bad = RewardedTrajectory {
            trajectory: trajectory("t1", 0, 1),
            reward: 1.5,
        };
        assert!(!validate_rewarded(&bad).is_empty());
    }

    #[test]
    fn group_replays_groups_and_sorts() {
        let tasks: Vec<TaskInstance> = ["a", "b"]
            .iter()
            .map(|id| TaskInstance {
                task_id: id.to_string(),
                scenario_id: "s".to_string(),
                description: "buy things".to_string(),
                split: Split::Train,
                metadata: BTreeMap::new(),
            })
            .collect();
        let index = task_index(&tasks).unwrap();
        let mut records = Vec::new();
        for task in ["a", "b"] {
            for run in (0..6).rev() {
                records.push(RewardedTrajectory {
                    trajectory: trajectory(task, run, 1),
                    reward: 0.5,
                });
            }
        }
        let groups = group_replays(records, &index).unwrap();
        assert_eq!(groups.len(), 2);
        for group in &groups {
            assert_eq!(group.runs.len(), 6);
            let ids: Vec<u32> = group.runs.iter().map(|r| r.trajectory.run_id).collect();
            assert_eq!(ids, vec![0, 1, 2, 3, 4, 5]);
        }
    }

    #[test]
    fn group_replays_preserves_reward_multiset() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let task_ids = ["a", "b", "c"];
        let tasks: Vec<TaskInstance> = task_ids
            .iter()
            .map(|id| TaskInstance {
                task_id: id.to_string(),
                scenario_id: "s".to_string(),
                description: "d".to_string(),
                split: Split::Train,
                metadata: BTreeMap::new(),
            })
            .collect();
        let index = task_index(&tasks).unwrap();
        for _ in 0..50 {
            let mut records = Vec::new();
            for (t, id) in task_ids.iter().enumerate() {
                for run in 0..rng.gen_range(1..5u32) {
                    let mut r = RewardedTrajectory {
                        trajectory: trajectory(id, run, 1),
                        reward: f64::from(rng.gen_range(0..=100u32)) / 100.0,
                    };
                    r.trajectory.seed = t as u64;
                    records.push(r);
                }
            }
            let before: std::collections::BTreeSet<(String, u32, u64)> = records
                .iter()
                .map(|r| {
                    (
                        r.trajectory.task_id.clone(),
                        r.trajectory.run_id,
                        r.reward.to_bits(),
                    )
                })
                .collect();
            let n_before = records.len();
            let groups = group_replays(records, &index).unwrap();
            let after: Vec<(String, u32, u64)> = groups
                .iter()
                .flat_map(|g| {
                    g.runs.iter().map(|r| {
                        (
                            r.trajectory.task_id.clone(),
                            r.trajectory.run_id,
                            r.reward.to_bits(),
                        )
                    })
                })
                .collect();
            assert_eq!(after.len(), n_before);
            assert_eq!(
                after.into_iter().collect::<std::collections::BTreeSet<_>>(),
                before
            );
        }
    }

    #[test]
    fn group_replays_rejects_unknown_task() {
        let index = BTreeMap::new();
        let records = vec![RewardedTrajectory {
            trajectory: trajectory("ghost", 0, 1),
            reward: 0.0,
        }];
        let err = group_replays(records, &index).unwrap_err();
        assert!(err.to_string().contains("ghost"));
    }

    #[test]
    fn group_replays_empty_input() {
        let groups = group_replays(Vec::new(), &BTreeMap::new()).unwrap();
        assert!(groups.is_empty());
    }
}
