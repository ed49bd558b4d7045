//! Subcommand implementations wiring the pipeline stages together.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use clear_core::cam::{
    fit_template_policy, generate, harvest_templates, load_checkpoint, load_template_library,
    save_checkpoint, save_template_library, store_from_examples, CamBackend, Embedder,
    TemplatePolicy, VectorStore,
};
use clear_core::env::minishop::{make_minishop_task, Difficulty, MiniShopFactory};
use clear_core::env::EnvFactory;
use clear_core::eval::{compare as eval_compare, evaluate, EvalReport};
use clear_core::grpo;
use clear_core::hashing::stable_hash;
use clear_core::model::{
    group_replays, task_index, GuidanceRecord, ReplayGroup, RewardedTrajectory, SftExample, Split,
    TaskInstance,
};
use clear_core::records::{read_records, write_records};
use clear_core::reflection::{
    enumerate_subsets, inspect as run_inspect, reflect as run_reflect, split_dataset,
    write_sft_chat, InspectionKind, InspectionQuery, PromptPair, TraceArchive,
};
use clear_core::runtime::{backend_for_profile, compose_context, ChatBackend};
use clear_core::scripted;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::PipelineConfig;

fn load_tasks(config: &PipelineConfig) -> Result<Vec<TaskInstance>> {
    let path = &config.paths.tasks;
    if !path.exists() {
        bail!(
            "tasks file {} not found (run `clear gen-tasks` first or point paths.tasks at one)",
            path.display()
        );
    }
    Ok(read_records(path)?)
}

fn env_factory(config: &PipelineConfig) -> Result<MiniShopFactory> {
    Ok(MiniShopFactory::new(config.env.max_turns)?)
}

fn exec_backend(config: &PipelineConfig) -> Result<Box<dyn ChatBackend>> {
    Ok(backend_for_profile(&config.backends.exec.to_profile())?)
}

fn exec_system_prompt(config: &PipelineConfig) -> Result<String> {
    std::fs::read_to_string(&config.prompts.exec_system).with_context(|| {
        format!(
            "cannot read exec system prompt {}",
            config.prompts.exec_system.display()
        )
    })
}

fn reflection_prompts(config: &PipelineConfig) -> Result<PromptPair> {
    Ok(PromptPair::from_files(
        &config.prompts.reflection_system,
        &config.prompts.reflection_user,
    )?)
}

fn load_groups(config: &PipelineConfig) -> Result<Vec<ReplayGroup>> {
    let archive = config.archive_path();
    if !archive.exists() {
        bail!(
            "replay archive {} not found (run `clear collect` first)",
            archive.display()
        );
    }
    let records: Vec<RewardedTrajectory> = read_records(&archive)?;
    let tasks = load_tasks(config)?;
    let index = task_index(&tasks)?;
    Ok(group_replays(records, &index)?)
}

fn embedder(config: &PipelineConfig) -> Result<Embedder> {
    match &config.backends.embeddings {
        Some(profile) => Ok(Embedder::remote(profile.to_profile())?),
        None => Ok(Embedder::deterministic(config.cam.embed_dim)),
    }
}

fn build_cam(config: &PipelineConfig, kind: &str) -> Result<CamBackend> {
    match kind {
        "none" => Ok(CamBackend::None),
        "endpoint" => {
            let profile = config.backends.cam_endpoint.as_ref().ok_or_else(|| {
                anyhow!("cam.kind = endpoint needs a [backends.cam_endpoint] profile")
            })?;
            Ok(CamBackend::Endpoint {
                backend: backend_for_profile(&profile.to_profile())?,
            })
        }
        "retrieval" => {
            let path = config.store_path();
            if !path.exists() {
                bail!(
                    "vector store {} not found (run `clear export-sft` first)",
                    path.display()
                );
            }
            Ok(CamBackend::Retrieval {
                store: VectorStore::load(&path)?,
                embedder: embedder(config)?,
            })
        }
        "template_policy" => {
            let library = config.template_library_path();
            if !library.exists() {
                bail!(
                    "template library {} not found (run `clear export-sft` first)",
                    library.display()
                );
            }
            let templates = load_template_library(&library)?;
            let checkpoint = config.checkpoint_path();
            let policy = if checkpoint.exists() {
                load_checkpoint(&checkpoint, templates)?
            } else {
                log::info!(
                    "no checkpoint at {}; using the untrained policy",
                    checkpoint.display()
                );
                TemplatePolicy::new(templates, config.cam.embed_dim)?
            };
            Ok(CamBackend::TemplatePolicy { policy })
        }
        other => bail!("unknown CAM kind {other:?}"),
    }
}

pub fn gen_tasks(
    config: &PipelineConfig,
    count: u32,
    difficulty: &str,
    split: &str,
    start_seed: u64,
) -> Result<()> {
    let difficulty = Difficulty::parse(difficulty)?;
    let split = match split {
        "train" => Split::Train,
        "test" => Split::Test,
        other => bail!("unknown split {other:?} (expected train or test)"),
    };
    let tasks: Vec<TaskInstance> = (0..count as u64)
        .map(|offset| {
            let (mut task, _) = make_minishop_task(start_seed + offset, difficulty);
            task.split = split;
            task
        })
        .collect();
    write_records(&config.paths.tasks, &tasks)?;
    println!(
        "wrote {} {} tasks to {}",
        tasks.len(),
        difficulty.as_str(),
        config.paths.tasks.display()
    );
    Ok(())
}

pub fn collect(config: &PipelineConfig) -> Result<()> {
    let tasks = load_tasks(config)?;
    let factory = env_factory(config)?;
    let backend = exec_backend(config)?;
    let system_prompt = exec_system_prompt(config)?;
    let outcome = clear_core::orchestrator::collect_replays(
        &tasks,
        config.reflection.m,
        config.concurrency,
        backend.as_ref(),
        &factory,
        &system_prompt,
        config.seed,
        &config.paths.archives,
    )?;
    let total_runs: usize = outcome.groups.iter().map(|g| g.runs.len()).sum();
    println!(
        "collected {} trajectories across {} groups ({} executed, rest resumed) -> {}",
        total_runs,
        outcome.groups.len(),
        outcome.executed_units,
        outcome.archive_path.display()
    );
    Ok(())
}

pub fn reflect(config: &PipelineConfig) -> Result<()> {
    let groups = load_groups(config)?;
    let prompts = reflection_prompts(config)?;
    let backend = backend_for_profile(&config.backends.reflector.to_profile())?;
    let workdir = config.paths.datasets.join("traces");

    let mut records: Vec<GuidanceRecord> = Vec::new();
    let mut skipped = 0usize;
    for group in &groups {
        let plan = enumerate_subsets(group.runs.len(), config.reflection.k, config.reflection.cap)?;
        for subset in &plan.subsets {
            match run_reflect(group, subset, backend.as_ref(), &prompts, &workdir) {
                Ok(record) => records.push(record),
                Err(err) => {
                    skipped += 1;
                    log::warn!("skipping {} subset {subset:?}: {err}", group.task.task_id);
                }
            }
        }
    }
    let out = config.guidance_path();
    write_records(&out, &records)?;
    println!(
        "wrote {} guidance records ({} skipped) to {}",
        records.len(),
        skipped,
        out.display()
    );
    Ok(())
}

/// Pair stored guidance records with their task descriptions, preserving the
/// deterministic task-then-subset order they were produced in.
fn examples_from_guidance(
    records: Vec<GuidanceRecord>,
    tasks: &BTreeMap<String, TaskInstance>,
) -> Result<Vec<SftExample>> {
    records
        .into_iter()
        .map(|record| {
            let task = tasks.get(&record.task_id).ok_or_else(|| {
                anyhow!("guidance record references unknown task {}", record.task_id)
            })?;
            Ok(SftExample {
                input: task.description.clone(),
                target: record.guidance.clone(),
                origin: record,
            })
        })
        .collect()
}

pub fn export_sft(config: &PipelineConfig) -> Result<()> {
    let guidance_path = config.guidance_path();
    if !guidance_path.exists() {
        bail!(
            "guidance records {} not found (run `clear reflect` first)",
            guidance_path.display()
        );
    }
    let records: Vec<GuidanceRecord> = read_records(&guidance_path)?;
    let tasks = task_index(&load_tasks(config)?)?;
    let examples = examples_from_guidance(records, &tasks)?;
    let (train, val) = split_dataset(&examples, config.split.ratio, config.split.seed)?;

    let datasets = &config.paths.datasets;
    write_records(datasets.join("sft_train.sft.ndrec"), &train)?;
    write_records(datasets.join("sft_val.sft.ndrec"), &val)?;
    write_sft_chat(&datasets.join("sft_train.chat.jsonl"), &train)?;
    write_sft_chat(&datasets.join("sft_val.chat.jsonl"), &val)?;

    // CAM-feeding artifacts come from the training side only.
    let train_records: Vec<GuidanceRecord> = train.iter().map(|e| e.origin.clone()).collect();
    let templates = harvest_templates(&train_records, config.cam.top_templates);
    save_template_library(&config.template_library_path(), &templates)?;
    let store = store_from_examples(&train, &embedder(config)?, config.cam.collapse_per_task)?;
    store.save(&config.store_path())?;

    println!(
        "dataset of {} examples ({} train / {} val) -> {}",
        examples.len(),
        train.len(),
        val.len(),
        datasets.display()
    );
    println!(
        "harvested {} templates -> {}; {} store entries -> {}",
        templates.len(),
        config.template_library_path().display(),
        store.len(),
        config.store_path().display()
    );
    Ok(())
}

pub fn train(config: &PipelineConfig) -> Result<()> {
    let tasks: Vec<TaskInstance> = load_tasks(config)?
        .into_iter()
        .filter(|t| t.split == Split::Train)
        .collect();
    if tasks.is_empty() {
        bail!("no train-split tasks in {}", config.paths.tasks.display());
    }
    let library_path = config.template_library_path();
    if !library_path.exists() {
        bail!(
            "template library {} not found (run `clear export-sft` first)",
            library_path.display()
        );
    }
    let templates = load_template_library(&library_path)?;
    let mut policy = TemplatePolicy::new(templates, config.cam.embed_dim)?;
    let factory = env_factory(config)?;
    let backend = exec_backend(config)?;
    let system_prompt = exec_system_prompt(config)?;
    let train_config = config.train.to_train_config();

    // Stage 1: supervised warm-up on the reflected pairs; the KL reference
    // freezes at the fitted weights.
    let sft_path = config.paths.datasets.join("sft_train.sft.ndrec");
    if !sft_path.exists() {
        bail!(
            "sft dataset {} not found (run `clear export-sft` first)",
            sft_path.display()
        );
    }
    let sft_examples: Vec<SftExample> = read_records(&sft_path)?;
    let fit = fit_template_policy(
        &mut policy,
        &sft_examples,
        config.train.sft_epochs,
        config.train.sft_learning_rate,
    )?;
    policy.freeze_reference();
    println!(
        "sft fit: {} pairs ({} targets outside the library), final nll {:.4}",
        fit.pairs, fit.skipped, fit.final_nll
    );

    // Stage 2: GRPO against the frozen execution agent.
    let history = grpo::train(
        &mut policy,
        &tasks,
        &factory,
        backend.as_ref(),
        &system_prompt,
        &train_config,
    )?;

    let checkpoint = config.checkpoint_path();
    save_checkpoint(&policy, &checkpoint)?;
    let history_path = config.paths.checkpoints.join("history.train.ndrec");
    write_records(&history_path, &history)?;
    let last = history.last().expect("at least one epoch");
    println!(
        "trained {} epochs on {} tasks: final mean_reward {:.4}, kl {:.6}, loss {:.6}",
        history.len(),
        tasks.len(),
        last.mean_reward,
        last.mean_kl,
        last.loss
    );
    println!(
        "checkpoint -> {}; history -> {}",
        checkpoint.display(),
        history_path.display()
    );
    Ok(())
}

pub fn infer(config: &PipelineConfig, task_id: &str) -> Result<()> {
    let tasks = load_tasks(config)?;
    let task = tasks
        .iter()
        .find(|t| t.task_id == task_id)
        .ok_or_else(|| anyhow!("no task {task_id} in {}", config.paths.tasks.display()))?;
    let cam = build_cam(config, &config.cam.kind)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&[
        "cam-draw",
        &config.seed.to_string(),
        &task.task_id,
    ]));
    let outcome = generate(&cam, task, &mut rng)?;
    let augmented = compose_context(task, outcome.guidance.as_deref())?;
    println!("{}", augmented.composed);
    Ok(())
}

pub fn eval(config: &PipelineConfig, method_override: Option<&str>, split: &str) -> Result<()> {
    let kind = method_override.unwrap_or(config.cam.kind.as_str());
    let cam = build_cam(config, kind)?;
    let tasks: Vec<TaskInstance> = match split {
        "all" => load_tasks(config)?,
        "train" => load_tasks(config)?
            .into_iter()
            .filter(|t| t.split == Split::Train)
            .collect(),
        "test" => load_tasks(config)?
            .into_iter()
            .filter(|t| t.split == Split::Test)
            .collect(),
        other => bail!("unknown split filter {other:?} (expected train, test, or all)"),
    };
    if tasks.is_empty() {
        bail!(
            "no tasks in the {split} split of {}",
            config.paths.tasks.display()
        );
    }
    let factory = env_factory(config)?;
    let backend = exec_backend(config)?;
    let system_prompt = exec_system_prompt(config)?;
    let seeds = config.eval_seeds();
    let report = evaluate(
        &cam,
        kind,
        &tasks,
        config.eval.runs,
        &factory,
        backend.as_ref(),
        &system_prompt,
        &seeds,
    )?;
    let path = config.paths.reports.join(format!("{kind}.report.ndrec"));
    report.save(&path)?;
    let (table, _) = eval_compare(
        std::slice::from_ref(&report),
        config.eval.pass_k,
        config.eval_threshold(),
    )?;
    print!("{table}");
    println!("report -> {}", path.display());
    Ok(())
}

pub fn compare(config: &PipelineConfig, report_paths: &[PathBuf]) -> Result<()> {
    if report_paths.len() < 2 {
        bail!("compare needs at least 2 report files");
    }
    let reports: Vec<EvalReport> = report_paths
        .iter()
        .map(|p| Ok(EvalReport::load(p)?))
        .collect::<Result<_>>()?;
    let (table, summaries) = eval_compare(&reports, config.eval.pass_k, config.eval_threshold())?;
    print!("{table}");
    let out = config.paths.reports.join("summary.eval.ndrec");
    write_records(&out, &summaries)?;
    println!("summary -> {}", out.display());
    Ok(())
}

pub fn inspect(
    archive_path: &Path,
    kind: &str,
    pattern: Option<String>,
    limit: usize,
    field_path: Option<String>,
) -> Result<()> {
    let kind = match kind {
        "stat" => InspectionKind::Stat,
        "search" => InspectionKind::Search,
        "head" => InspectionKind::Head,
        "tail" => InspectionKind::Tail,
        "field" => InspectionKind::Field,
        other => bail!("unknown inspection kind {other:?}"),
    };
    let archive = if archive_path.is_dir() {
        TraceArchive::open(archive_path)?
    } else {
        // Materialize an .ndrec archive into a sibling traces directory.
        let records: Vec<RewardedTrajectory> = read_records(archive_path)?;
        let refs: Vec<&RewardedTrajectory> = records.iter().collect();
        let dir = archive_path.with_extension("traces");
        TraceArchive::materialize_runs(&refs, &dir)?
    };
    let query = InspectionQuery {
        kind,
        pattern,
        limit,
        path: field_path,
    };
    println!("{}", run_inspect(&archive, &query)?);
    Ok(())
}

pub fn check(config: &PipelineConfig) -> Result<()> {
    let mut failures = 0usize;
    let mut report = |name: &str, ok: bool, detail: String| {
        if ok {
            println!(
                "PASS {name}{}",
                if detail.is_empty() {
                    String::new()
                } else {
                    format!(" ({detail})")
                }
            );
        } else {
            println!("FAIL {name}: {detail}");
            failures += 1;
        }
    };

    // Analytic gradient vs central finite differences.
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let (policy, samples) = grpo_check_instance(seed);
        let cfg = clear_core::grpo::TrainConfig {
            seed,
            ..clear_core::grpo::TrainConfig::default()
        };
        let err = grpo::finite_diff_check(&policy, &samples, &cfg, 1e-5)?;
        worst = worst.max(err);
    }
    report(
        "gradient-finite-difference",
        worst < 1e-4,
        format!("max relative error {worst:.2e}"),
    );

    // Subset enumeration vs the binomial coefficient.
    let mut subsets_ok = true;
    for m in 1..=10usize {
        for k in 1..=m {
            let plan = enumerate_subsets(m, k, None)?;
            let binomial = (1..=k).fold(1usize, |acc, i| acc * (m - k + i) / i);
            if plan.subsets.len() != binomial {
                subsets_ok = false;
            }
        }
    }
    report(
        "subset-enumeration-cardinality",
        subsets_ok,
        "1<=k<=m<=10".to_string(),
    );

    // Retrieval vs linear scan.
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut retrieval_ok = true;
    for _ in 0..200 {
        let dim = rng.gen_range(2..6usize);
        let n = rng.gen_range(1..10usize);
        let mut store = VectorStore::new();
        let mut raw: Vec<Vec<f64>> = Vec::new();
        for i in 0..n {
            let mut values: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in &mut values {
                *v /= norm;
            }
            raw.push(values.clone());
            store.insert(clear_core::cam::VectorEntry {
                entry_id: format!("e{i}"),
                task_id: format!("e{i}"),
                values,
                guidance: "g".to_string(),
            })?;
        }
        let mut query: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = query.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut query {
            *v /= norm;
        }
        let q = clear_core::cam::EmbeddingVector {
            values: query.clone(),
        };
        let (got, _, _) = store.retrieve(&q)?;
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for (i, values) in raw.iter().enumerate() {
            let sim: f64 = values.iter().zip(&query).map(|(a, b)| a * b).sum();
            if sim > best_sim {
                best_sim = sim;
                best = i;
            }
        }
        if got != best {
            retrieval_ok = false;
        }
    }
    report(
        "retrieval-brute-force-agreement",
        retrieval_ok,
        "200 instances".to_string(),
    );

    // Advantage centering.
    let mut advantage_ok = true;
    for _ in 0..200 {
        let n = rng.gen_range(2..9usize);
        let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let advantages = grpo::group_advantages(&rewards, 1e-8)?;
        let mean = advantages.iter().sum::<f64>() / n as f64;
        if mean.abs() > 1e-12 {
            advantage_ok = false;
        }
    }
    report(
        "advantage-zero-mean",
        advantage_ok,
        "200 groups".to_string(),
    );

    // Environment determinism smoke.
    let factory = env_factory(config)?;
    let shopper = scripted::by_name("shopper")?;
    let (task, _) = make_minishop_task(1, Difficulty::Hard);
    let run = |seed: u64| -> Result<RewardedTrajectory> {
        let mut env = factory.create(&task)?;
        let augmented = compose_context(&task, None)?;
        Ok(clear_core::runtime::run_episode(
            env.as_mut(),
            &augmented,
            shopper.as_ref(),
            "shop",
            0,
            seed,
        )?)
    };
    let determinism_ok = run(7)? == run(7)?;
    report("episode-determinism", determinism_ok, String::new());

    if failures > 0 {
        bail!("{failures} check(s) failed");
    }
    Ok(())
}

fn grpo_check_instance(seed: u64) -> (TemplatePolicy, Vec<clear_core::grpo::GroupSample>) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<String> = (0..6).map(|i| format!("template {i}")).collect();
    let mut policy = TemplatePolicy::new(templates, 64).expect("valid policy");
    for w in policy.theta.iter_mut() {
        *w = rng.gen_range(-1.0..1.0);
    }
    let mut samples = Vec::new();
    for t in 0..3 {
        let task = TaskInstance {
            task_id: format!("check-{t}"),
            scenario_id: "s".to_string(),
            description: format!(
                "buy item number {t} with properties alpha beta gamma delta epsilon code {}",
                rng.gen_range(0..100)
            ),
            split: Split::Train,
            metadata: BTreeMap::new(),
        };
        let mut rewards = Vec::new();
        let mut draws = Vec::new();
        for _ in 0..4 {
            let reward = rng.gen_range(0..=4) as f64 / 4.0;
            rewards.push(reward);
            draws.push(clear_core::grpo::GroupDraw {
                template_index: rng.gen_range(0..6),
                guidance: String::new(),
                logprob_old: (rng.gen_range(0.05..0.9f64)).ln(),
                reward,
                advantage: 0.0,
            });
        }
        let advantages = grpo::group_advantages(&rewards, 1e-8).expect("group");
        for (draw, advantage) in draws.iter_mut().zip(advantages) {
            draw.advantage = advantage;
        }
        samples.push(clear_core::grpo::GroupSample { task, draws });
    }
    (policy, samples)
}
