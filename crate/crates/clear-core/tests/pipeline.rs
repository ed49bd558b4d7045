//! Cross-module integration: resumable collection, rulebook-driven episodes,
//! and CAM failure handling in evaluation.

use std::sync::atomic::{AtomicUsize, Ordering};

use clear_core::cam::{CamBackend, Embedder, VectorStore};
use clear_core::env::minishop::{make_minishop_task, solve, Difficulty, MiniShopFactory};
use clear_core::error::Result;
use clear_core::eval::evaluate;
use clear_core::model::TaskInstance;
use clear_core::orchestrator::{collect_replays, BatchManifest};
use clear_core::runtime::{ChatBackend, ChatMessage, MockRulebook};
use clear_core::scripted;

/// Counts completions while delegating to an inner backend.
struct CountingBackend {
    inner: Box<dyn ChatBackend>,
    calls: AtomicUsize,
}

impl CountingBackend {
    fn new(inner: Box<dyn ChatBackend>) -> Self {
        CountingBackend {
            inner,
            calls: AtomicUsize::new(0),
        }
    }
}

impl ChatBackend for CountingBackend {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(messages)
    }
    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }
}

fn hard_tasks(n: u64) -> Vec<TaskInstance> {
    (0..n)
        .map(|s| make_minishop_task(s, Difficulty::Hard).0)
        .collect()
}

#[test]
fn resume_skips_completed_units() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = hard_tasks(3);
    let factory = MiniShopFactory::new(30).unwrap();
    let backend = CountingBackend::new(scripted::by_name("shopper").unwrap());

    let first = collect_replays(&tasks, 4, 2, &backend, &factory, "shop", 5, dir.path()).unwrap();
    assert_eq!(first.executed_units, 12);
    let calls_after_first = backend.calls.load(Ordering::SeqCst);
    assert!(calls_after_first > 0);

    // Rerun against the same manifest: nothing executes.
    let second = collect_replays(&tasks, 4, 2, &backend, &factory, "shop", 5, dir.path()).unwrap();
    assert_eq!(second.executed_units, 0);
    assert_eq!(backend.calls.load(Ordering::SeqCst), calls_after_first);
    assert_eq!(second.groups, first.groups);

    // Delete two manifest entries: exactly those two units re-execute.
    let manifest_path = dir.path().join("manifest.json");
    let mut manifest = BatchManifest::load(&manifest_path).unwrap().unwrap();
    let victims: Vec<String> = manifest.units.keys().take(2).cloned().collect();
    for key in &victims {
        manifest.units.remove(key);
    }
    manifest.save(&manifest_path).unwrap();

    let third = collect_replays(&tasks, 4, 2, &backend, &factory, "shop", 5, dir.path()).unwrap();
    assert_eq!(third.executed_units, 2);
    assert_eq!(third.groups, first.groups);
}

#[test]
fn resume_rejects_changed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = hard_tasks(2);
    let factory = MiniShopFactory::new(30).unwrap();
    let backend = scripted::by_name("shopper").unwrap();
    collect_replays(
        &tasks,
        2,
        1,
        backend.as_ref(),
        &factory,
        "shop",
        5,
        dir.path(),
    )
    .unwrap();

    // Different base seed -> digest mismatch.
    let err = collect_replays(
        &tasks,
        2,
        1,
        backend.as_ref(),
        &factory,
        "shop",
        6,
        dir.path(),
    )
    .unwrap_err();
    assert!(err.to_string().contains("digest mismatch"), "{err}");
}

#[test]
fn rulebook_mock_replays_solver_script() {
    // A rulebook built from the solver oracle's action script drives a
    // full-reward episode through the real loop.
    let dir = tempfile::tempdir().unwrap();
    let (task, world) = make_minishop_task(11, Difficulty::Easy);
    let script = solve(&world).unwrap();
    let rulebook = format!(
        "# solver replay\n{} => {}\nresults ( => {}\nattributes: => {}\n",
        task.description, script[0], script[1], script[2]
    );
    let path = dir.path().join("solver.mock");
    std::fs::write(&path, rulebook).unwrap();

    let backend = MockRulebook::from_file(&path).unwrap();
    let factory = MiniShopFactory::new(30).unwrap();
    let tasks = vec![task];
    let report = evaluate(
        &CamBackend::None,
        "none",
        &tasks,
        2,
        &factory,
        &backend,
        "shop",
        &[3, 3],
    )
    .unwrap();
    assert_eq!(report.avg_reward(), 1.0);
    // Identical seeds, deterministic mock: zero spread across runs.
    let per_run = report.per_run_avg_reward();
    assert_eq!(per_run[0], per_run[1]);
}

#[test]
fn cam_failure_flags_tasks_without_running_episodes() {
    let tasks = hard_tasks(3);
    let factory = MiniShopFactory::new(30).unwrap();
    let backend = CountingBackend::new(scripted::by_name("shopper").unwrap());
    let cam = CamBackend::Retrieval {
        store: VectorStore::new(),
        embedder: Embedder::deterministic(64),
    };
    let report = evaluate(
        &cam,
        "retrieval",
        &tasks,
        2,
        &factory,
        &backend,
        "shop",
        &[0, 1],
    )
    .unwrap();
    assert_eq!(report.avg_reward(), 0.0);
    assert_eq!(
        backend.calls.load(Ordering::SeqCst),
        0,
        "episodes must not run"
    );
    for task in &report.tasks {
        assert!(task.cam_errors.iter().all(|&e| e));
        assert!(task.cam_latency_ms.iter().all(|l| l.is_none()));
    }
}

#[test]
fn shared_seeds_make_method_comparison_paired() {
    let tasks = hard_tasks(4);
    let factory = MiniShopFactory::new(30).unwrap();
    let backend = scripted::by_name("shopper").unwrap();
    let seeds = [9u64, 10, 11];
    let a = evaluate(
        &CamBackend::None,
        "none",
        &tasks,
        3,
        &factory,
        backend.as_ref(),
        "shop",
        &seeds,
    )
    .unwrap();
    let b = evaluate(
        &CamBackend::None,
        "none",
        &tasks,
        3,
        &factory,
        backend.as_ref(),
        "shop",
        &seeds,
    )
    .unwrap();
    assert_eq!(a.tasks, b.tasks, "same method, same seeds, same numbers");
}
