//! Head-to-head method evaluation: average reward, task and scenario
//! completion rates, pass@k, turn counts, and CAM latency accounting.
//!
//! Reports keep every raw per-task per-run number; all derived metrics are
//! recomputable from the stored data.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cam::{generate, CamBackend};
use crate::env::EnvFactory;
use crate::error::{Error, Result};
use crate::hashing::stable_hash;
use crate::model::{TaskInstance, Violation};
use crate::records::Record;
use crate::runtime::{compose_context, run_episode, ChatBackend};

/// Rewards at or above this count as full completion: fractional rewards
/// below full credit do not complete a task.
pub const DEFAULT_COMPLETION_THRESHOLD: f64 = 1.0 - 1e-9;

/// Raw evaluation results for one task across all runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task_id: String,
    pub scenario_id: String,
    pub rewards: Vec<f64>,
    pub turns: Vec<u32>,
    pub cam_latency_ms: Vec<Option<f64>>,
    pub cam_errors: Vec<bool>,
}

/// One method's evaluation: per-task raw data plus the run seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub tasks: Vec<TaskEval>,
}

/// Flat persisted form: one record per (task, run).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub task_id: String,
    pub scenario_id: String,
    pub run_index: u32,
    pub seed: u64,
    #[serde(with = "crate::model::reward_string")]
    pub reward: f64,
    pub turns: u32,
    pub cam_latency_ms: Option<f64>,
    pub cam_error: bool,
}

impl Record for EvalRow {
    const KIND: &'static str = "eval_row";
    fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if !(0.0..=1.0).contains(&self.reward) {
            out.push(Violation {
                field: "reward".to_string(),
                rule: format!("must be in [0,1], got {}", self.reward),
            });
        }
        out
    }
    fn dedupe_key(&self) -> Option<String> {
        Some(format!(
            "{}/{}/{}",
            self.method, self.task_id, self.run_index
        ))
    }
}

impl EvalReport {
    pub fn to_rows(&self) -> Vec<EvalRow> {
        let mut rows = Vec::new();
        for task in &self.tasks {
            for run in 0..self.runs {
                rows.push(EvalRow {
                    method: self.method.clone(),
                    task_id: task.task_id.clone(),
                    scenario_id: task.scenario_id.clone(),
                    run_index: run as u32,
                    seed: self.seeds[run],
                    reward: task.rewards[run],
                    turns: task.turns[run],
                    cam_latency_ms: task.cam_latency_ms[run],
                    cam_error: task.cam_errors[run],
                });
            }
        }
        rows
    }

    pub fn from_rows(rows: &[EvalRow]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty eval report".to_string()))?;
        let method = first.method.clone();
        let runs = rows.iter().map(|r| r.run_index).max().unwrap() as usize + 1;
        let mut seeds = vec![0u64; runs];
        let mut tasks: BTreeMap<String, TaskEval> = BTreeMap::new();
        for row in rows {
            if row.method != method {
                return Err(Error::InvalidArgument(format!(
                    "mixed methods in one report: {} vs {method}",
                    row.method
                )));
            }
            seeds[row.run_index as usize] = row.seed;
            let entry = tasks
                .entry(row.task_id.clone())
                .or_insert_with(|| TaskEval {
                    task_id: row.task_id.clone(),
                    scenario_id: row.scenario_id.clone(),
                    rewards: vec![0.0; runs],
                    turns: vec![0; runs],
                    cam_latency_ms: vec![None; runs],
                    cam_errors: vec![false; runs],
                });
            entry.rewards[row.run_index as usize] = row.reward;
            entry.turns[row.run_index as usize] = row.turns;
            entry.cam_latency_ms[row.run_index as usize] = row.cam_latency_ms;
            entry.cam_errors[row.run_index as usize] = row.cam_error;
        }
        // Every task must cover every run; a truncated file must not read
        // back as silent zero rewards.
        if rows.len() != tasks.len() * runs {
            return Err(Error::InvalidArgument(format!(
                "incomplete report: {} rows for {} tasks x {runs} runs",
                rows.len(),
                tasks.len()
            )));
        }
        Ok(EvalReport {
            method,
            runs,
            seeds,
            tasks: tasks.into_values().collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::records::write_records(path, &self.to_rows())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let rows: Vec<EvalRow> = crate::records::read_records(path)?;
        EvalReport::from_rows(&rows)
    }

    /// Mean reward over every task and run.
    pub fn avg_reward(&self) -> f64 {
        let total: f64 = self
            .tasks
            .iter()
            .map(|t| t.rewards.iter().sum::<f64>())
            .sum();
        total / (self.tasks.len() * self.runs) as f64
    }

    /// Per-run mean rewards, for across-run dispersion.
    pub fn per_run_avg_reward(&self) -> Vec<f64> {
        (0..self.runs)
            .map(|run| {
                self.tasks.iter().map(|t| t.rewards[run]).sum::<f64>() / self.tasks.len() as f64
            })
            .collect()
    }

    pub fn mean_turns(&self) -> f64 {
        let total: u64 = self
            .tasks
            .iter()
            .map(|t| t.turns.iter().map(|&x| x as u64).sum::<u64>())
            .sum();
        total as f64 / (self.tasks.len() * self.runs) as f64
    }

    /// Mean CAM latency in milliseconds over the calls that recorded one.
    pub fn mean_cam_latency_ms(&self) -> Option<f64> {
        let latencies: Vec<f64> = self
            .tasks
            .iter()
            .flat_map(|t| t.cam_latency_ms.iter().flatten().cloned())
            .collect();
        if latencies.is_empty() {
            None
        } else {
            Some(latencies.iter().sum::<f64>() / latencies.len() as f64)
        }
    }

    pub fn scenario_map(&self) -> BTreeMap<String, String> {
        self.tasks
            .iter()
            .map(|t| (t.task_id.clone(), t.scenario_id.clone()))
            .collect()
    }
}

/// Evaluate one method: per run and task, generate guidance, compose, run a
/// single episode with the run's seed, and record everything. A CAM failure
/// flags the task with reward 0 for that run without running the episode.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    cam: &CamBackend,
    label: &str,
    tasks: &[TaskInstance],
    runs: usize,
    env_factory: &dyn EnvFactory,
    exec_backend: &dyn ChatBackend,
    system_prompt: &str,
    seeds: &[u64],
) -> Result<EvalReport> {
    if runs < 1 {
        return Err(Error::InvalidArgument(
            "runs must be at least 1".to_string(),
        ));
    }
    if seeds.len() != runs {
        return Err(Error::InvalidArgument(format!(
            "need {runs} seeds, got {}",
            seeds.len()
        )));
    }
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no tasks to evaluate".to_string()));
    }
    let mut evals: Vec<TaskEval> = tasks
        .iter()
        .map(|t| TaskEval {
            task_id: t.task_id.clone(),
            scenario_id: t.scenario_id.clone(),
            rewards: Vec::with_capacity(runs),
            turns: Vec::with_capacity(runs),
            cam_latency_ms: Vec::with_capacity(runs),
            cam_errors: Vec::with_capacity(runs),
        })
        .collect();

    for (run, &seed) in seeds.iter().enumerate() {
        for (task, eval) in tasks.iter().zip(evals.iter_mut()) {
            let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&[
                "cam-draw",
                &seed.to_string(),
                &task.task_id,
            ]));
            match generate(cam, task, &mut rng) {
                Err(err) => {
                    log::warn!("CAM failed for {} run {run}: {err}", task.task_id);
                    eval.rewards.push(0.0);
                    eval.turns.push(0);
                    eval.cam_latency_ms.push(None);
                    eval.cam_errors.push(true);
                }
                Ok(outcome) => {
                    let augmented = compose_context(task, outcome.guidance.as_deref())?;
                    let mut env = env_factory.create(task)?;
                    let rewarded = run_episode(
                        env.as_mut(),
                        &augmented,
                        exec_backend,
                        system_prompt,
                        run as u32,
                        seed,
                    )?;
                    eval.rewards.push(rewarded.reward);
                    eval.turns.push(rewarded.trajectory.turn_count);
                    eval.cam_latency_ms
                        .push(outcome.latency.map(|d| d.as_secs_f64() * 1000.0));
                    eval.cam_errors.push(false);
                }
            }
        }
    }

    Ok(EvalReport {
        method: label.to_string(),
        runs,
        seeds: seeds.to_vec(),
        tasks: evals,
    })
}

fn completed(reward: f64, threshold: f64) -> bool {
    reward >= threshold
}

/// Task goal completion: per run, the fraction of tasks at or above the
/// threshold; averaged over runs.
pub fn tgc(report: &EvalReport, threshold: f64) -> Result<f64> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold {threshold} out of (0,1]"
        )));
    }
    let mut per_run = Vec::with_capacity(report.runs);
    for run in 0..report.runs {
        let done = report
            .tasks
            .iter()
            .filter(|t| completed(t.rewards[run], threshold))
            .count();
        per_run.push(done as f64 / report.tasks.len() as f64);
    }
    Ok(per_run.iter().sum::<f64>() / report.runs as f64)
}

/// Scenario goal completion: per run, the fraction of scenarios whose every
/// task completed in that run; averaged over runs. Every report task must
/// appear in the scenario map.
pub fn sgc(
    report: &EvalReport,
    scenarios: &BTreeMap<String, String>,
    threshold: f64,
) -> Result<f64> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold {threshold} out of (0,1]"
        )));
    }
    let mut scenario_tasks: BTreeMap<&str, Vec<&TaskEval>> = BTreeMap::new();
    for task in &report.tasks {
        let scenario = scenarios.get(&task.task_id).ok_or_else(|| {
            Error::InvalidArgument(format!("unknown scenario_id for task {}", task.task_id))
        })?;
        scenario_tasks
            .entry(scenario.as_str())
            .or_default()
            .push(task);
    }
    let mut per_run = Vec::with_capacity(report.runs);
    for run in 0..report.runs {
        let done = scenario_tasks
            .values()
            .filter(|tasks| tasks.iter().all(|t| completed(t.rewards[run], threshold)))
            .count();
        per_run.push(done as f64 / scenario_tasks.len() as f64);
    }
    Ok(per_run.iter().sum::<f64>() / report.runs as f64)
}

fn per_run_rate(
    report: &EvalReport,
    threshold: f64,
    scenario: Option<&BTreeMap<String, String>>,
) -> Result<Vec<f64>> {
    match scenario {
        None => Ok((0..report.runs)
            .map(|run| {
                report
                    .tasks
                    .iter()
                    .filter(|t| completed(t.rewards[run], threshold))
                    .count() as f64
                    / report.tasks.len() as f64
            })
            .collect()),
        Some(map) => {
            let mut scenario_tasks: BTreeMap<&str, Vec<&TaskEval>> = BTreeMap::new();
            for task in &report.tasks {
                let s = map.get(&task.task_id).ok_or_else(|| {
                    Error::InvalidArgument(format!("unknown scenario_id for task {}", task.task_id))
                })?;
                scenario_tasks.entry(s.as_str()).or_default().push(task);
            }
            Ok((0..report.runs)
                .map(|run| {
                    scenario_tasks
                        .values()
                        .filter(|tasks| tasks.iter().all(|t| completed(t.rewards[run], threshold)))
                        .count() as f64
                        / scenario_tasks.len() as f64
                })
                .collect())
        }
    }
}

/// Fraction of tasks completed in at least one of the first `k` runs.
pub fn pass_at_k(report: &EvalReport, k: usize, threshold: f64) -> Result<f64> {
    if k < 1 || k > report.runs {
        return Err(Error::InvalidArgument(format!(
            "k={k} out of range for {} runs",
            report.runs
        )));
    }
    let passed = report
        .tasks
        .iter()
        .filter(|t| t.rewards[..k].iter().any(|&r| completed(r, threshold)))
        .count();
    Ok(passed as f64 / report.tasks.len() as f64)
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Machine-readable row of a comparison, one per method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub avg_reward: f64,
    pub avg_reward_std: f64,
    pub tgc: f64,
    pub tgc_std: f64,
    pub sgc: f64,
    pub sgc_std: f64,
    pub pass_at_k: f64,
    pub k: usize,
    pub mean_turns: f64,
    pub mean_cam_latency_ms: Option<f64>,
}

impl Record for MethodSummary {
    const KIND: &'static str = "eval_summary";
    fn violations(&self) -> Vec<Violation> {
        Vec::new()
    }
    fn dedupe_key(&self) -> Option<String> {
        Some(self.method.clone())
    }
}

/// Compare reports over the same task set and run count: an aligned text
/// table (avg with std in parentheses) plus machine-readable summaries.
pub fn compare(
    reports: &[EvalReport],
    k: usize,
    threshold: f64,
) -> Result<(String, Vec<MethodSummary>)> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidArgument("no reports to compare".to_string()))?;
    let reference: BTreeSet<&str> = first.tasks.iter().map(|t| t.task_id.as_str()).collect();
    for report in &reports[1..] {
        let this: BTreeSet<&str> = report.tasks.iter().map(|t| t.task_id.as_str()).collect();
        if this != reference {
            let missing: Vec<&&str> = reference.difference(&this).collect();
            let extra: Vec<&&str> = this.difference(&reference).collect();
            return Err(Error::InvalidArgument(format!(
                "report {} has a different task set: missing {missing:?}, extra {extra:?}",
                report.method
            )));
        }
        if report.runs != first.runs {
            return Err(Error::InvalidArgument(format!(
                "report {} has {} runs, expected {}",
                report.method, report.runs, first.runs
            )));
        }
    }

    let mut summaries = Vec::with_capacity(reports.len());
    for report in reports {
        let scenarios = report.scenario_map();
        let run_rewards = report.per_run_avg_reward();
        let tgc_runs = per_run_rate(report, threshold, None)?;
        let sgc_runs = per_run_rate(report, threshold, Some(&scenarios))?;
        summaries.push(MethodSummary {
            method: report.method.clone(),
            avg_reward: report.avg_reward(),
            avg_reward_std: population_std(&run_rewards),
            tgc: tgc(report, threshold)?,
            tgc_std: population_std(&tgc_runs),
            sgc: sgc(report, &scenarios, threshold)?,
            sgc_std: population_std(&sgc_runs),
            pass_at_k: pass_at_k(report, k, threshold)?,
            k,
            mean_turns: report.mean_turns(),
            mean_cam_latency_ms: report.mean_cam_latency_ms(),
        });
    }

    let mut table = String::new();
    table.push_str(&format!(
        "{:<16} {:>18} {:>18} {:>18} {:>9} {:>8} {:>12}\n",
        "method",
        "avg_reward",
        "tgc",
        "sgc",
        format!("pass@{k}"),
        "turns",
        "cam_ms"
    ));
    for s in &summaries {
        let latency = match s.mean_cam_latency_ms {
            Some(ms) => format!("{ms:.3}"),
            None => "-".to_string(),
        };
        table.push_str(&format!(
            "{:<16} {:>18} {:>18} {:>18} {:>9.4} {:>8.2} {:>12}\n",
            s.method,
            format!("{:.4}({:.4})", s.avg_reward, s.avg_reward_std),
            format!("{:.4}({:.4})", s.tgc, s.tgc_std),
            format!("{:.4}({:.4})", s.sgc, s.sgc_std),
            s.pass_at_k,
            s.mean_turns,
            latency
        ));
    }
    Ok((table, summaries))
}
