//! Pipeline configuration: one strict TOML file drives every subcommand.
//! Unknown keys are fatal so hyperparameter typos cannot pass silently.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use clear_core::grpo::TrainConfig;
use clear_core::orchestrator::RetryPolicy;
use clear_core::runtime::BackendProfile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Base seed for collection and eval seed derivation.
    pub seed: u64,
    /// Worker-pool width for collection.
    pub concurrency: usize,
    pub paths: Paths,
    pub backends: Backends,
    pub env: EnvSettings,
    pub prompts: Prompts,
    pub reflection: ReflectionSettings,
    pub train: TrainSettings,
    pub eval: EvalSettings,
    pub split: SplitSettings,
    pub cam: CamSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            concurrency: 8,
            paths: Paths::default(),
            backends: Backends::default(),
            env: EnvSettings::default(),
            prompts: Prompts::default(),
            reflection: ReflectionSettings::default(),
            train: TrainSettings::default(),
            eval: EvalSettings::default(),
            split: SplitSettings::default(),
            cam: CamSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub tasks: PathBuf,
    pub archives: PathBuf,
    pub datasets: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            tasks: "tasks.task.ndrec".into(),
            archives: "archives".into(),
            datasets: "datasets".into(),
            checkpoints: "checkpoints".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileSettings {
    pub endpoint: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub timeout_ms: u64,
    pub retry: RetryPolicy,
}

impl ProfileSettings {
    fn named(endpoint: &str, model_name: &str) -> Self {
        ProfileSettings {
            endpoint: endpoint.to_string(),
            model_name: model_name.to_string(),
            temperature: 0.7,
            max_output_tokens: 1024,
            timeout_ms: 30_000,
            retry: RetryPolicy::default(),
        }
    }

    pub fn to_profile(&self) -> BackendProfile {
        BackendProfile {
            endpoint: self.endpoint.clone(),
            model_name: self.model_name.clone(),
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
            timeout_ms: self.timeout_ms,
            retry: self.retry.clone(),
        }
    }
}

impl Default for ProfileSettings {
    fn default() -> Self {
        ProfileSettings::named("scripted:shopper-explorer", "scripted")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Backends {
    pub exec: ProfileSettings,
    pub reflector: ProfileSettings,
    pub cam_endpoint: Option<ProfileSettings>,
    pub embeddings: Option<ProfileSettings>,
}

impl Default for Backends {
    fn default() -> Self {
        Backends {
            exec: ProfileSettings::named("scripted:shopper-explorer", "scripted-shopper"),
            reflector: ProfileSettings::named("scripted:reflector", "scripted-reflector"),
            cam_endpoint: None,
            embeddings: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSettings {
    pub name: String,
    pub max_turns: u32,
}

impl Default for EnvSettings {
    fn default() -> Self {
        EnvSettings {
            name: "minishop".to_string(),
            max_turns: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Prompts {
    pub exec_system: PathBuf,
    pub reflection_system: PathBuf,
    pub reflection_user: PathBuf,
}

impl Default for Prompts {
    fn default() -> Self {
        Prompts {
            exec_system: "prompts/exec_minishop.txt".into(),
            reflection_system: "prompts/reflection_system.txt".into(),
            reflection_user: "prompts/reflection_user.txt".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReflectionSettings {
    /// Runs collected per task.
    pub m: u32,
    /// Runs analyzed per reflection.
    pub k: usize,
    /// Optional cap on subsets per task.
    pub cap: Option<usize>,
}

impl Default for ReflectionSettings {
    fn default() -> Self {
        ReflectionSettings {
            m: 6,
            k: 3,
            cap: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub group_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub kl_coef: f64,
    pub clip_ratio: f64,
    pub advantage_epsilon: f64,
    pub seed: u64,
    /// Supervised warm-up epochs before the RL stage.
    pub sft_epochs: usize,
    pub sft_learning_rate: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSettings {
            group_size: d.group_size,
            epochs: d.epochs,
            learning_rate: d.learning_rate,
            kl_coef: d.kl_coef,
            clip_ratio: d.clip_ratio,
            advantage_epsilon: d.advantage_epsilon,
            seed: d.seed,
            sft_epochs: 100,
            sft_learning_rate: 0.5,
        }
    }
}

impl TrainSettings {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            group_size: self.group_size,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            kl_coef: self.kl_coef,
            clip_ratio: self.clip_ratio,
            advantage_epsilon: self.advantage_epsilon,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub runs: usize,
    /// Explicit per-run seeds; derived from the top-level seed when absent.
    pub seeds: Option<Vec<u64>>,
    pub pass_k: usize,
    pub threshold: Option<f64>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            runs: 3,
            seeds: None,
            pass_k: 3,
            threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSettings {
    pub ratio: f64,
    pub seed: u64,
}

impl Default for SplitSettings {
    fn default() -> Self {
        SplitSettings {
            ratio: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CamSettings {
    /// none | endpoint | retrieval | template_policy
    pub kind: String,
    pub embed_dim: usize,
    /// Library size harvested from guidance records.
    pub top_templates: usize,
    /// Collapse the retrieval store to one entry per task.
    pub collapse_per_task: bool,
    pub template_library: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for CamSettings {
    fn default() -> Self {
        CamSettings {
            kind: "none".to_string(),
            embed_dim: 256,
            top_templates: 8,
            collapse_per_task: false,
            template_library: None,
            store: None,
            checkpoint: None,
        }
    }
}

/// Parse a config file; relative paths inside it resolve against its parent
/// directory. Unknown keys and type mismatches are errors with the key path.
pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let mut config = parse_config(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    config.rebase(base);
    Ok(config)
}

pub fn parse_config(text: &str) -> Result<PipelineConfig> {
    let config: PipelineConfig = toml::from_str(text).map_err(|e| anyhow::anyhow!("{e}"))?;
    config.validate()?;
    Ok(config)
}

pub fn print_config(config: &PipelineConfig) -> String {
    toml::to_string_pretty(config).expect("config serializes")
}

impl PipelineConfig {
    fn rebase(&mut self, base: &Path) {
        for path in [
            &mut self.paths.tasks,
            &mut self.paths.archives,
            &mut self.paths.datasets,
            &mut self.paths.checkpoints,
            &mut self.paths.reports,
            &mut self.prompts.exec_system,
            &mut self.prompts.reflection_system,
            &mut self.prompts.reflection_user,
        ] {
            if path.is_relative() {
                *path = base.join(&path);
            }
        }
        for path in [
            self.cam.template_library.as_mut(),
            self.cam.store.as_mut(),
            self.cam.checkpoint.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            if path.is_relative() {
                *path = base.join(&path);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.env.name != "minishop" {
            bail!(
                "env.name: only the bundled \"minishop\" environment is available (got {:?}); \
                 external benchmarks plug in through the environment adapter contract",
                self.env.name
            );
        }
        if self.env.max_turns == 0 {
            bail!("env.max_turns: must be at least 1");
        }
        if self.reflection.m == 0 {
            bail!("reflection.m: must be at least 1");
        }
        if self.reflection.k == 0 || self.reflection.k > self.reflection.m as usize {
            bail!(
                "reflection.k: must satisfy 1 <= k <= m (k={}, m={})",
                self.reflection.k,
                self.reflection.m
            );
        }
        if !(self.split.ratio > 0.0 && self.split.ratio < 1.0) {
            bail!("split.ratio: must be in (0,1), got {}", self.split.ratio);
        }
        if self.eval.runs == 0 {
            bail!("eval.runs: must be at least 1");
        }
        if self.eval.pass_k == 0 || self.eval.pass_k > self.eval.runs {
            bail!(
                "eval.pass_k: must satisfy 1 <= pass_k <= runs (pass_k={}, runs={})",
                self.eval.pass_k,
                self.eval.runs
            );
        }
        if let Some(seeds) = &self.eval.seeds {
            if seeds.len() != self.eval.runs {
                bail!(
                    "eval.seeds: need exactly {} seeds, got {}",
                    self.eval.runs,
                    seeds.len()
                );
            }
        }
        if let Some(threshold) = self.eval.threshold {
            if !(threshold > 0.0 && threshold <= 1.0) {
                bail!("eval.threshold: must be in (0,1], got {threshold}");
            }
        }
        match self.cam.kind.as_str() {
            "none" | "endpoint" | "retrieval" | "template_policy" => {}
            other => bail!(
                "cam.kind: unknown kind {other:?} (expected none, endpoint, retrieval, or template_policy)"
            ),
        }
        self.to_train_config_checked()?;
        Ok(())
    }

    fn to_train_config_checked(&self) -> Result<TrainConfig> {
        let config = self.train.to_train_config();
        config
            .validate()
            .map_err(|e| anyhow::anyhow!("train: {e}"))?;
        Ok(config)
    }

    pub fn eval_seeds(&self) -> Vec<u64> {
        match &self.eval.seeds {
            Some(seeds) => seeds.clone(),
            None => (0..self.eval.runs as u64)
                .map(|r| self.seed.wrapping_add(r))
                .collect(),
        }
    }

    pub fn eval_threshold(&self) -> f64 {
        self.eval
            .threshold
            .unwrap_or(clear_core::eval::DEFAULT_COMPLETION_THRESHOLD)
    }

    pub fn template_library_path(&self) -> PathBuf {
        self.cam
            .template_library
            .clone()
            .unwrap_or_else(|| self.paths.datasets.join("templates.txt"))
    }

    pub fn store_path(&self) -> PathBuf {
        self.cam
            .store
            .clone()
            .unwrap_or_else(|| self.paths.datasets.join("store.vec.ndrec"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.cam
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.paths.checkpoints.join("policy.ckpt.ndrec"))
    }

    pub fn guidance_path(&self) -> PathBuf {
        self.paths.datasets.join("guidance.guid.ndrec")
    }

    pub fn archive_path(&self) -> PathBuf {
        self.paths.archives.join("replays.traj.ndrec")
    }
}
