//! Concurrent, resumable batch execution for rollout collection.
//!
//! Workers receive immutable inputs and return values; all file writes happen
//! on the calling thread in canonical unit order, so archives are identical
//! at any concurrency level. Per-run seeds depend only on
//! (base_seed, task_id, run_index) and never on scheduling.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::env::EnvFactory;
use crate::error::{Error, Result};
use crate::hashing::{run_seed, sha256_hex};
use crate::model::{group_replays, task_index, ReplayGroup, RewardedTrajectory, TaskInstance};
use crate::records::{read_records, write_records};
use crate::runtime::{compose_context, run_episode, ChatBackend};

/// Retry settings for transient failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub backoff_multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            backoff_base_ms: 50,
            backoff_multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    /// No waiting between attempts; used by tests and mock-only runs.
    pub fn immediate(max_attempts: u32) -> Self {
        RetryPolicy {
            max_attempts,
            backoff_base_ms: 0,
            backoff_multiplier: 1.0,
        }
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self.backoff_base_ms as f64 * self.backoff_multiplier.powi(attempt as i32 - 1);
        Duration::from_millis(ms as u64)
    }
}

/// A successful result plus how many attempts it took.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryOutcome<T> {
    pub value: T,
    pub attempts: u32,
}

/// Run `op`, retrying transient errors up to the policy's attempt budget.
/// Permanent errors surface immediately; the attempt count is attached to
/// whichever outcome is final.
pub fn with_retries<T>(
    policy: &RetryPolicy,
    mut op: impl FnMut() -> Result<T>,
) -> Result<RetryOutcome<T>> {
    let max_attempts = policy.max_attempts.max(1);
    let mut attempt = 0;
    loop {
        attempt += 1;
        match op() {
            Ok(value) => {
                return Ok(RetryOutcome {
                    value,
                    attempts: attempt,
                })
            }
            Err(err) if err.is_transient() && attempt < max_attempts => {
                log::debug!("transient failure on attempt {attempt}: {err}");
                let wait = policy.backoff(attempt);
                if !wait.is_zero() {
                    std::thread::sleep(wait);
                }
            }
            Err(err) => {
                return Err(match err {
                    Error::Backend { kind, message, .. } => Error::Backend {
                        kind,
                        attempts: attempt,
                        message,
                    },
                    other => other,
                })
            }
        }
    }
}

/// Run `worker` over `inputs` with at most `concurrency` in flight. Results
/// come back in input order regardless of completion order.
pub fn run_units<I, O, F>(inputs: &[I], concurrency: usize, worker: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(usize, &I) -> O + Sync,
{
    let slots: Vec<Mutex<Option<O>>> = inputs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = concurrency.max(1).min(inputs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::SeqCst);
                if index >= inputs.len() {
                    break;
                }
                let output = worker(index, &inputs[index]);
                *slots[index].lock().unwrap() = Some(output);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("worker filled slot"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitStatus {
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub status: UnitStatus,
    pub output: Option<String>,
    pub seconds: f64,
}

/// Tracks per-unit completion for resumable batches. Persisted alongside the
/// outputs it describes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchManifest {
    pub job_kind: String,
    pub input_digest: String,
    pub units: BTreeMap<String, ManifestEntry>,
}

impl BatchManifest {
    pub fn load(path: &Path) -> Result<Option<Self>> {
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(path)?;
        let manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad manifest {}: {e}", path.display())))?;
        Ok(Some(manifest))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(
            path,
            serde_json::to_string_pretty(self).expect("manifest serializes"),
        )?;
        Ok(())
    }
}

/// What a collection run produced.
#[derive(Debug)]
pub struct CollectOutcome {
    pub groups: Vec<ReplayGroup>,
    /// Units actually executed this invocation (resumed units are skipped).
    pub executed_units: usize,
    /// Combined archive path under the output directory.
    pub archive_path: PathBuf,
}

fn collect_digest(
    tasks: &[TaskInstance],
    m: u32,
    base_seed: u64,
    backend: &dyn ChatBackend,
) -> String {
    let mut content = format!("collect|{m}|{base_seed}|{}", backend.fingerprint());
    for task in tasks {
        content.push('\x1e');
        content.push_str(&task.task_id);
        content.push('\x1f');
        content.push_str(&task.description);
    }
    sha256_hex(content.as_bytes())
}

/// Run every task `m` times through the execution backend and group the
/// rewarded trajectories. At most `concurrency` episodes run at once; output
/// archives are byte-identical across concurrency levels. Completed units
/// recorded in the manifest are not re-executed on rerun.
#[allow(clippy::too_many_arguments)]
pub fn collect_replays(
    tasks: &[TaskInstance],
    m: u32,
    concurrency: usize,
    backend: &dyn ChatBackend,
    env_factory: &dyn EnvFactory,
    system_prompt: &str,
    base_seed: u64,
    out_dir: &Path,
) -> Result<CollectOutcome> {
    if m < 1 {
        return Err(Error::InvalidArgument("m must be at least 1".to_string()));
    }
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no tasks to collect".to_string()));
    }
    let digest = collect_digest(tasks, m, base_seed, backend);
    let manifest_path = out_dir.join("manifest.json");
    let mut manifest = match BatchManifest::load(&manifest_path)? {
        Some(existing) => {
            if existing.job_kind != "collect" || existing.input_digest != digest {
                return Err(Error::Config(format!(
                    "manifest at {} does not match inputs (digest mismatch); \
                     use a fresh output directory",
                    manifest_path.display()
                )));
            }
            existing
        }
        None => BatchManifest {
            job_kind: "collect".to_string(),
            input_digest: digest,
            units: BTreeMap::new(),
        },
    };

    struct Unit<'a> {
        task: &'a TaskInstance,
        run_index: u32,
        key: String,
        file: PathBuf,
    }
    let units_dir = out_dir.join("units");
    fs::create_dir_all(&units_dir)?;
    let units: Vec<Unit> = tasks
        .iter()
        .flat_map(|task| {
            let units_dir = &units_dir;
            (0..m).map(move |run_index| Unit {
                task,
                run_index,
                key: format!("{}:{run_index}", task.task_id),
                file: units_dir.join(format!("{}-{run_index:02}.traj.ndrec", task.task_id)),
            })
        })
        .collect();

    let pending: Vec<&Unit> = units
        .iter()
        .filter(|u| {
            !matches!(
                manifest.units.get(&u.key),
                Some(ManifestEntry {
                    status: UnitStatus::Done,
                    ..
                })
            ) || !u.file.exists()
        })
        .collect();

    let results: Vec<Result<(RewardedTrajectory, f64)>> =
        run_units(&pending, concurrency, |_, unit| {
            let started = Instant::now();
            let mut env = env_factory.create(unit.task)?;
            let augmented = compose_context(unit.task, None)?;
            let seed = run_seed(base_seed, &unit.task.task_id, unit.run_index);
            let rewarded = run_episode(
                env.as_mut(),
                &augmented,
                backend,
                system_prompt,
                unit.run_index,
                seed,
            )?;
            Ok((rewarded, started.elapsed().as_secs_f64()))
        });

    // Single canonical-order writer.
    let executed_units = pending.len();
    for (unit, result) in pending.iter().zip(results) {
        let (rewarded, seconds) = result?;
        write_records(&unit.file, std::slice::from_ref(&rewarded))?;
        log::info!("unit {} status=done seconds={seconds:.3}", unit.key);
        manifest.units.insert(
            unit.key.clone(),
            ManifestEntry {
                status: UnitStatus::Done,
                output: Some(unit.file.display().to_string()),
                seconds,
            },
        );
    }
    manifest.save(&manifest_path)?;

    let mut all: Vec<RewardedTrajectory> = Vec::with_capacity(units.len());
    for unit in &units {
        let mut records: Vec<RewardedTrajectory> = read_records(&unit.file)?;
        all.append(&mut records);
    }
    all.sort_by(|a, b| {
        (&a.trajectory.task_id, a.trajectory.run_id)
            .cmp(&(&b.trajectory.task_id, b.trajectory.run_id))
    });
    let archive_path = out_dir.join("replays.traj.ndrec");
    write_records(&archive_path, &all)?;

    let index = task_index(tasks)?;
    let groups = group_replays(all, &index)?;
    Ok(CollectOutcome {
        groups,
        executed_units,
        archive_path,
    })
}
