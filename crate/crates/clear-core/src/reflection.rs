//! Contrastive reflection: subset enumeration, the sandboxed trajectory
//! inspection tool, the reflection agent loop, and SFT dataset assembly.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::sha256_hex;
use crate::model::{GuidanceRecord, ReplayGroup, SftExample, Termination};
use crate::runtime::{ChatBackend, ChatMessage};

/// Hard cap on lines any single inspection may return.
pub const MAX_INSPECT_LINES: usize = 200;
/// Hard cap on bytes any single inspection may return.
pub const INSPECT_BYTE_BUDGET: usize = 16 * 1024;
/// Tool calls allowed within one reflection.
pub const TOOL_CALL_BUDGET: usize = 20;

/// The lexicographically ordered k-subsets of `0..m`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsetPlan {
    pub m: usize,
    pub k: usize,
    pub cap: Option<usize>,
    pub subsets: Vec<Vec<usize>>,
}

/// Enumerate all C(m,k) index subsets in lexicographic order, truncated to
/// the first `cap` when set.
pub fn enumerate_subsets(m: usize, k: usize, cap: Option<usize>) -> Result<SubsetPlan> {
    if k < 1 || k > m {
        return Err(Error::InvalidArgument(format!(
            "subset size k={k} must satisfy 1 <= k <= m={m}"
        )));
    }
    let mut subsets = Vec::new();
    let mut current: Vec<usize> = (0..k).collect();
    loop {
        subsets.push(current.clone());
        if cap.is_some_and(|c| subsets.len() >= c) {
            break;
        }
        // Advance to the next combination in lexicographic order.
        let mut i = k;
        loop {
            if i == 0 {
                return Ok(SubsetPlan { m, k, cap, subsets });
            }
            i -= 1;
            if current[i] != i + m - k {
                break;
            }
        }
        current[i] += 1;
        for j in i + 1..k {
            current[j] = current[j - 1] + 1;
        }
    }
    Ok(SubsetPlan { m, k, cap, subsets })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InspectionKind {
    Stat,
    Search,
    Head,
    Tail,
    Field,
}

/// A read-only query against a materialized trajectory archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectionQuery {
    pub kind: InspectionKind,
    #[serde(default)]
    pub pattern: Option<String>,
    #[serde(default = "default_limit")]
    pub limit: usize,
    #[serde(default)]
    pub path: Option<String>,
}

fn default_limit() -> usize {
    50
}

/// One run of a trajectory archive, written as pretty-printed JSON so line
/// tools (search/head/tail) have something meaningful to bite on. Rewards
/// appear as plain numbers here for greppability.
#[derive(Debug, Serialize, Deserialize)]
struct TraceFile {
    task_id: String,
    run_id: u32,
    seed: u64,
    reward: f64,
    terminated: Termination,
    steps: Vec<TraceStep>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceStep {
    index: u32,
    action: String,
    observation: String,
}

/// A directory of `run_*.json` trace files plus their sorted names.
#[derive(Debug, Clone)]
pub struct TraceArchive {
    dir: PathBuf,
    files: Vec<String>,
}

impl TraceArchive {
    /// Write the chosen runs of a group into `dir`, one pretty JSON file per
    /// run.
    pub fn materialize(group: &ReplayGroup, subset: &[usize], dir: &Path) -> Result<Self> {
        let mut runs = Vec::with_capacity(subset.len());
        for &index in subset {
            runs.push(group.runs.get(index).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "subset index {index} out of range for group {} with {} runs",
                    group.task.task_id,
                    group.runs.len()
                ))
            })?);
        }
        Self::materialize_runs(&runs, dir)
    }

    /// Write rewarded trajectories into `dir` as trace files. File names
    /// carry task_id only when runs span several tasks.
    pub fn materialize_runs(
        runs: &[&crate::model::RewardedTrajectory],
        dir: &Path,
    ) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let multi_task = runs
            .iter()
            .any(|r| r.trajectory.task_id != runs[0].trajectory.task_id);
        let mut files = Vec::with_capacity(runs.len());
        for run in runs {
            let trace = TraceFile {
                task_id: run.trajectory.task_id.clone(),
                run_id: run.trajectory.run_id,
                seed: run.trajectory.seed,
                reward: run.reward,
                terminated: run.trajectory.terminated,
                steps: run
                    .trajectory
                    .steps
                    .iter()
                    .map(|s| TraceStep {
                        index: s.index,
                        action: s.action.clone(),
                        observation: s.observation.clone(),
                    })
                    .collect(),
            };
            let name = if multi_task {
                format!(
                    "{}_run_{:03}.json",
                    run.trajectory.task_id, run.trajectory.run_id
                )
            } else {
                format!("run_{:03}.json", run.trajectory.run_id)
            };
            fs::write(
                dir.join(&name),
                serde_json::to_string_pretty(&trace).expect("trace serializes"),
            )?;
            files.push(name);
        }
        files.sort();
        Ok(TraceArchive {
            dir: dir.to_path_buf(),
            files,
        })
    }

    /// Open an existing archive directory.
    pub fn open(dir: &Path) -> Result<Self> {
        let mut files = Vec::new();
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().to_string();
            if name.ends_with(".json") {
                files.push(name);
            }
        }
        if files.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no .json trace files under {}",
                dir.display()
            )));
        }
        files.sort();
        Ok(TraceArchive {
            dir: dir.to_path_buf(),
            files,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    fn read(&self, name: &str) -> Result<String> {
        if !self.files.iter().any(|f| f == name) {
            return Err(Error::InvalidArgument(format!("no file {name} in archive")));
        }
        Ok(fs::read_to_string(self.dir.join(name))?)
    }
}

fn clip_to_budget(mut text: String) -> String {
    if text.len() <= INSPECT_BYTE_BUDGET {
        return text;
    }
    let mut cut = INSPECT_BYTE_BUDGET.saturating_sub(16);
    while cut > 0 && !text.is_char_boundary(cut) {
        cut -= 1;
    }
    text.truncate(cut);
    text.push_str("\n[truncated]");
    text
}

/// Answer a read-only query over the archive. Output never exceeds
/// [`INSPECT_BYTE_BUDGET`] bytes. Invalid regexes and bad paths come back as
/// errors for the reflection loop to echo into the conversation.
pub fn inspect(archive: &TraceArchive, query: &InspectionQuery) -> Result<String> {
    if query.limit == 0 || query.limit > MAX_INSPECT_LINES {
        return Err(Error::InvalidArgument(format!(
            "limit exceeds {MAX_INSPECT_LINES} (got {})",
            query.limit
        )));
    }
    let output = match query.kind {
        InspectionKind::Stat => {
            let mut lines = Vec::new();
            for name in &archive.files {
                let content = archive.read(name)?;
                lines.push(format!(
                    "{name}: {} bytes, {} lines",
                    content.len(),
                    content.lines().count()
                ));
            }
            lines.join("\n")
        }
        InspectionKind::Search => {
            let pattern = query
                .pattern
                .as_deref()
                .ok_or_else(|| Error::InvalidArgument("search requires a pattern".to_string()))?;
            let re = Regex::new(pattern)
                .map_err(|e| Error::InvalidArgument(format!("invalid regex: {e}")))?;
            let mut lines = Vec::new();
            'outer: for name in &archive.files {
                let content = archive.read(name)?;
                for (no, line) in content.lines().enumerate() {
                    if re.is_match(line) {
                        lines.push(format!("{name}:{}: {}", no + 1, line.trim_end()));
                        if lines.len() >= query.limit {
                            break 'outer;
                        }
                    }
                }
            }
            if lines.is_empty() {
                "(no matches)".to_string()
            } else {
                lines.join("\n")
            }
        }
        InspectionKind::Head | InspectionKind::Tail => {
            let mut all: Vec<String> = Vec::new();
            let selected: Vec<&String> = match &query.path {
                Some(path) => {
                    vec![archive.files.iter().find(|f| *f == path).ok_or_else(|| {
                        Error::InvalidArgument(format!("no file {path} in archive"))
                    })?]
                }
                None => archive.files.iter().collect(),
            };
            for name in selected {
                let content = archive.read(name)?;
                for (no, line) in content.lines().enumerate() {
                    all.push(format!("{name}:{}: {}", no + 1, line.trim_end()));
                }
            }
            let picked: Vec<String> = if query.kind == InspectionKind::Head {
                all.into_iter().take(query.limit).collect()
            } else {
                let skip = all.len().saturating_sub(query.limit);
                all.into_iter().skip(skip).collect()
            };
            picked.join("\n")
        }
        InspectionKind::Field => {
            let path = query.path.as_deref().ok_or_else(|| {
                Error::InvalidArgument("field requires path of form file.json#/pointer".to_string())
            })?;
            let (file, pointer) = path.split_once('#').ok_or_else(|| {
                Error::InvalidArgument("field path must look like run_000.json#/reward".to_string())
            })?;
            let content = archive.read(file)?;
            let value: serde_json::Value = serde_json::from_str(&content)
                .map_err(|e| Error::InvalidArgument(format!("{file} is not valid JSON: {e}")))?;
            value
                .pointer(pointer)
                .map(|v| v.to_string())
                .ok_or_else(|| Error::InvalidArgument(format!("no field {pointer} in {file}")))?
        }
    };
    Ok(clip_to_budget(output))
}

/// System and user prompt templates for the reflection agent. The user
/// template carries a `{{ traces_folder }}` placeholder.
#[derive(Debug, Clone)]
pub struct PromptPair {
    pub system: String,
    pub user: String,
}

impl PromptPair {
    pub fn from_files(system_path: &Path, user_path: &Path) -> Result<Self> {
        Ok(PromptPair {
            system: fs::read_to_string(system_path)?,
            user: fs::read_to_string(user_path)?,
        })
    }

    pub fn render_user(&self, traces_folder: &str) -> String {
        self.user
            .replace("{{ traces_folder }}", traces_folder)
            .replace("{{traces_folder}}", traces_folder)
    }
}

/// Addendum appended to the system prompt: maps the prompt's shell-command
/// examples onto the sandboxed inspection tool.
pub const TOOL_PROTOCOL: &str = r#"## Sandboxed Tool Protocol

Shell access is sandboxed in this runtime. Issue read-only inspection calls
instead of bash commands by replying with a single block:

<tool>{"kind": "stat"}</tool>
<tool>{"kind": "search", "pattern": "\"reward\"", "limit": 50}</tool>
<tool>{"kind": "head", "limit": 20, "path": "run_000.json"}</tool>
<tool>{"kind": "tail", "limit": 20, "path": "run_000.json"}</tool>
<tool>{"kind": "field", "path": "run_000.json#/reward"}</tool>

stat replaces ls/wc (sizes and line counts), search replaces grep (regex over
all trace lines), head/tail replace head/tail, field replaces targeted jq
queries (JSON pointer into one file). The result arrives as the next tool
message; at most 20 calls, output capped per call. When your analysis is
done, emit the final <guidance> block as specified above."#;

fn guidance_blocks(reply: &str) -> Vec<String> {
    let re = Regex::new(r"(?s)<guidance>(.*?)</guidance>").expect("static regex");
    re.captures_iter(reply)
        .map(|c| c.get(1).expect("group").as_str().to_string())
        .collect()
}

/// Pull the guidance text out of a reflection reply: the content of the last
/// well-formed `<guidance>...</guidance>` block, trimmed.
pub fn extract_guidance(reply: &str) -> Result<String> {
    let blocks = guidance_blocks(reply);
    let last = blocks
        .last()
        .ok_or_else(|| Error::InvalidArgument("reply has no <guidance> block".to_string()))?;
    let trimmed = last.trim();
    if trimmed.is_empty() {
        return Err(Error::InvalidArgument("empty guidance".to_string()));
    }
    Ok(trimmed.to_string())
}

fn parse_tool_call(reply: &str) -> Option<std::result::Result<InspectionQuery, String>> {
    let re = Regex::new(r"(?s)<tool>(.*?)</tool>").expect("static regex");
    let capture = re.captures(reply)?;
    let body = capture.get(1).expect("group").as_str();
    Some(serde_json::from_str(body).map_err(|e| format!("bad tool call: {e}")))
}

/// Drive one reflection over the chosen subset of a group's runs. The agent
/// may issue up to [`TOOL_CALL_BUDGET`] inspection calls before its final
/// guidance block.
pub fn reflect(
    group: &ReplayGroup,
    subset: &[usize],
    backend: &dyn ChatBackend,
    prompts: &PromptPair,
    workdir: &Path,
) -> Result<GuidanceRecord> {
    if subset.is_empty() {
        return Err(Error::InvalidArgument("subset is empty".to_string()));
    }
    let subset_label: Vec<String> = subset.iter().map(|i| i.to_string()).collect();
    let archive_dir = workdir
        .join(&group.task.task_id)
        .join(subset_label.join("-"));
    let archive = TraceArchive::materialize(group, subset, &archive_dir)?;

    let mut messages = vec![
        ChatMessage::system(format!("{}\n\n{TOOL_PROTOCOL}", prompts.system)),
        ChatMessage::user(prompts.render_user(&archive.dir().display().to_string())),
    ];
    let mut tool_calls = 0;
    let mut stray_replies = 0;
    loop {
        let reply = backend.complete(&messages)?;
        if let Ok(guidance) = extract_guidance(&reply) {
            let subset_run_ids: Vec<u32> = subset
                .iter()
                .map(|&i| group.runs[i].trajectory.run_id)
                .collect();
            return Ok(GuidanceRecord {
                task_id: group.task.task_id.clone(),
                subset_run_ids,
                guidance,
                reflector_model: backend.fingerprint(),
                raw_response_digest: sha256_hex(reply.as_bytes()),
            });
        }
        match parse_tool_call(&reply) {
            Some(parsed) => {
                if tool_calls >= TOOL_CALL_BUDGET {
                    return Err(Error::ReflectionNoGuidance {
                        task_id: group.task.task_id.clone(),
                    });
                }
                tool_calls += 1;
                let tool_result = match parsed {
                    Ok(query) => match inspect(&archive, &query) {
                        Ok(text) => text,
                        Err(e) => format!("tool error: {e}"),
                    },
                    Err(e) => format!("tool error: {e}"),
                };
                messages.push(ChatMessage::assistant(reply));
                messages.push(ChatMessage::tool(tool_result));
            }
            None => {
                stray_replies += 1;
                if stray_replies > 2 {
                    return Err(Error::ReflectionNoGuidance {
                        task_id: group.task.task_id.clone(),
                    });
                }
                messages.push(ChatMessage::assistant(reply));
                messages.push(ChatMessage::user(
                    "Reply with a single <tool> call or the final <guidance> block.".to_string(),
                ));
            }
        }
    }
}

/// How many reflections were attempted and how many had to be skipped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SkipReport {
    pub attempted: usize,
    pub skipped: usize,
}

/// Reflect over every k-subset of every group and assemble the supervised
/// dataset. Failed reflections are skipped and counted, not fatal. Output
/// order is deterministic: group order times lexicographic subset order.
pub fn build_sft_dataset(
    groups: &[ReplayGroup],
    k: usize,
    backend: &dyn ChatBackend,
    prompts: &PromptPair,
    cap: Option<usize>,
    workdir: &Path,
) -> Result<(Vec<SftExample>, SkipReport)> {
    for group in groups {
        if group.runs.len() < k {
            return Err(Error::InvalidArgument(format!(
                "group {} has {} runs, fewer than k={k}",
                group.task.task_id,
                group.runs.len()
            )));
        }
    }
    let mut examples = Vec::new();
    let mut report = SkipReport::default();
    for group in groups {
        let plan = enumerate_subsets(group.runs.len(), k, cap)?;
        for subset in &plan.subsets {
            report.attempted += 1;
            match reflect(group, subset, backend, prompts, workdir) {
                Ok(record) => examples.push(SftExample {
                    input: group.task.description.clone(),
                    target: record.guidance.clone(),
                    origin: record,
                }),
                Err(err) => {
                    report.skipped += 1;
                    log::warn!(
                        "skipping reflection for {} subset {subset:?}: {err}",
                        group.task.task_id
                    );
                }
            }
        }
    }
    Ok((examples, report))
}

/// Split examples by task_id so every subset of one task lands on the same
/// side. Deterministic under `seed`.
pub fn split_dataset(
    examples: &[SftExample],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<SftExample>, Vec<SftExample>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "ratio must be in (0,1), got {ratio}"
        )));
    }
    let mut task_ids: Vec<String> = examples
        .iter()
        .map(|e| e.origin.task_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if task_ids.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 distinct task_ids to split, got {}",
            task_ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    task_ids.shuffle(&mut rng);
    let n_train = ((ratio * task_ids.len() as f64).round() as usize).clamp(1, task_ids.len() - 1);
    let train_ids: BTreeSet<&String> = task_ids.iter().take(n_train).collect();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for example in examples {
        if train_ids.contains(&example.origin.task_id) {
            train.push(example.clone());
        } else {
            val.push(example.clone());
        }
    }
    Ok((train, val))
}

/// One line of the chat-format export consumed by external trainers.
#[derive(Debug, Serialize, Deserialize)]
pub struct ChatExample {
    pub messages: Vec<ChatTurn>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: String,
    pub content: String,
}

/// Write the `{messages:[{role,content}...]}` JSONL variant (no header line;
/// this format is for external consumers).
pub fn write_sft_chat(path: &Path, examples: &[SftExample]) -> Result<()> {
    let mut out = String::new();
    for example in examples {
        let chat = ChatExample {
            messages: vec![
                ChatTurn {
                    role: "user".to_string(),
                    content: example.input.clone(),
                },
                ChatTurn {
                    role: "assistant".to_string(),
                    content: example.target.clone(),
                },
            ],
        };
        out.push_str(&serde_json::to_string(&chat).expect("chat serializes"));
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, out)?;
    Ok(())
}
