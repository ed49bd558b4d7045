//! Context augmentation backends: a remote endpoint, cosine retrieval over
//! stored guidance, and the trainable feature-conditioned template policy.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::hashing::{fnv1a64, sha256_hex};
use crate::model::{GuidanceRecord, SftExample, TaskInstance, Violation};
use crate::records::Record;
use crate::runtime::{BackendProfile, ChatBackend, ChatMessage};

/// Bucket count of the deterministic hashed bag-of-tokens embedding.
pub const DEFAULT_EMBED_DIM: usize = 256;

/// Instruction wrapper used by the endpoint CAM.
pub const CAM_INSTRUCTION: &str = "You write strategy guidance for an LLM task execution agent. \
Given the task below, reply with one short paragraph of concrete, task-specific strategy advice. \
Reply with the advice only.";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Lowercase split on non-alphanumerics.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// The bucket a token hashes into.
pub fn token_bucket(token: &str, dim: usize) -> usize {
    (fnv1a64(token.as_bytes()) % dim as u64) as usize
}

fn token_counts(text: &str, dim: usize) -> (Vec<f64>, usize) {
    let mut counts = vec![0.0; dim];
    let tokens = tokenize(text);
    let n = tokens.len();
    for token in tokens {
        counts[token_bucket(&token, dim)] += 1.0;
    }
    (counts, n)
}

/// Deterministic sentence embedding: hashed token counts, L2-normalized.
/// Token-free text is an error (the zero vector has no direction).
pub fn embed_deterministic(text: &str, dim: usize) -> Result<EmbeddingVector> {
    let (mut counts, n_tokens) = token_counts(text, dim);
    if n_tokens == 0 {
        return Err(Error::InvalidArgument("no tokens to embed".to_string()));
    }
    let norm = counts.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut counts {
        *v /= norm;
    }
    Ok(EmbeddingVector { values: counts })
}

/// Sentence embedding source: deterministic hashing (offline default) or a
/// remote embeddings endpoint.
pub enum Embedder {
    Deterministic {
        dim: usize,
    },
    Remote {
        profile: BackendProfile,
        agent: ureq::Agent,
    },
}

impl Embedder {
    pub fn deterministic(dim: usize) -> Self {
        Embedder::Deterministic { dim }
    }

    pub fn remote(profile: BackendProfile) -> Result<Self> {
        profile.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(profile.timeout_ms)))
            .build()
            .new_agent();
        Ok(Embedder::Remote { profile, agent })
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        if tokenize(text).is_empty() {
            return Err(Error::InvalidArgument("no tokens to embed".to_string()));
        }
        match self {
            Embedder::Deterministic { dim } => embed_deterministic(text, *dim),
            Embedder::Remote { profile, agent } => {
                let base = profile.endpoint.trim_end_matches('/');
                let url = if base.ends_with("/embeddings") {
                    base.to_string()
                } else {
                    format!("{base}/v1/embeddings")
                };
                let mut request = agent.post(&url);
                if let Ok(key) = std::env::var(crate::runtime::backend::API_KEY_ENV) {
                    request = request.header("authorization", &format!("Bearer {key}"));
                }
                let mut response = request
                    .send_json(json!({"model": profile.model_name, "input": [text]}))
                    .map_err(|e| Error::transient(format!("POST {url}: {e}")))?;
                let parsed: serde_json::Value = response
                    .body_mut()
                    .read_json()
                    .map_err(|e| Error::permanent(format!("malformed embeddings body: {e}")))?;
                let raw = parsed
                    .pointer("/data/0/embedding")
                    .and_then(|v| v.as_array())
                    .ok_or_else(|| {
                        Error::permanent("no data[0].embedding in response".to_string())
                    })?;
                let mut values: Vec<f64> = raw.iter().filter_map(|v| v.as_f64()).collect();
                if values.len() != raw.len() || values.is_empty() {
                    return Err(Error::permanent("non-numeric embedding values".to_string()));
                }
                let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::permanent("zero-norm embedding".to_string()));
                }
                for v in &mut values {
                    *v /= norm;
                }
                Ok(EmbeddingVector { values })
            }
        }
    }
}

/// One stored (query embedding, guidance) pair. `entry_id` is the source
/// task_id, suffixed with the subset when a task contributes several entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorEntry {
    pub entry_id: String,
    pub task_id: String,
    pub values: Vec<f64>,
    pub guidance: String,
}

impl Record for VectorEntry {
    const KIND: &'static str = "vector_entry";
    fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.entry_id.is_empty() {
            out.push(Violation {
                field: "entry_id".to_string(),
                rule: "must be non-empty".to_string(),
            });
        }
        if self.guidance.is_empty() {
            out.push(Violation {
                field: "guidance".to_string(),
                rule: "must be non-empty".to_string(),
            });
        }
        out
    }
    fn dedupe_key(&self) -> Option<String> {
        Some(self.entry_id.clone())
    }
}

/// An exact-scan store of unit-normalized vectors.
#[derive(Debug, Clone, Default)]
pub struct VectorStore {
    entries: Vec<VectorEntry>,
}

impl VectorStore {
    pub fn new() -> Self {
        VectorStore::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[VectorEntry] {
        &self.entries
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.first().map(|e| e.values.len())
    }

    pub fn insert(&mut self, entry: VectorEntry) -> Result<()> {
        if let Some(dim) = self.dim() {
            if entry.values.len() != dim {
                return Err(Error::InvalidArgument(format!(
                    "vector dim {} does not match store dim {dim}",
                    entry.values.len()
                )));
            }
        }
        if entry.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "vector has non-finite values".to_string(),
            ));
        }
        let norm = entry.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "vector norm {norm} is not 1 within 1e-9"
            )));
        }
        if self.entries.iter().any(|e| e.entry_id == entry.entry_id) {
            return Err(Error::InvalidArgument(format!(
                "duplicate entry_id {}",
                entry.entry_id
            )));
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Exact argmax-cosine retrieval. Ties go to the earliest-inserted entry.
    pub fn retrieve(&self, query: &EmbeddingVector) -> Result<(usize, &VectorEntry, f64)> {
        if self.entries.is_empty() {
            return Err(Error::InvalidArgument(
                "retrieval on empty store".to_string(),
            ));
        }
        let dim = self.dim().expect("non-empty store has dim");
        if query.dim() != dim {
            return Err(Error::InvalidArgument(format!(
                "query dim {} does not match store dim {dim}",
                query.dim()
            )));
        }
        let mut best_index = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for (index, entry) in self.entries.iter().enumerate() {
            let sim: f64 = entry
                .values
                .iter()
                .zip(&query.values)
                .map(|(a, b)| a * b)
                .sum();
            if sim > best_sim {
                best_sim = sim;
                best_index = index;
            }
        }
        Ok((
            best_index,
            &self.entries[best_index],
            best_sim.clamp(-1.0, 1.0),
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::records::write_records(path, &self.entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries: Vec<VectorEntry> = crate::records::read_records(path)?;
        let mut store = VectorStore::new();
        for entry in entries {
            store.insert(entry)?;
        }
        Ok(store)
    }
}

/// Index a supervised dataset for retrieval. With `collapse_per_task` set,
/// only the first example of each task is kept.
pub fn store_from_examples(
    examples: &[SftExample],
    embedder: &Embedder,
    collapse_per_task: bool,
) -> Result<VectorStore> {
    let mut store = VectorStore::new();
    let mut seen_tasks = std::collections::BTreeSet::new();
    for example in examples {
        let task_id = &example.origin.task_id;
        if collapse_per_task && !seen_tasks.insert(task_id.clone()) {
            continue;
        }
        let entry_id = if collapse_per_task {
            task_id.clone()
        } else {
            let subset: Vec<String> = example
                .origin
                .subset_run_ids
                .iter()
                .map(|i| i.to_string())
                .collect();
            format!("{task_id}#{}", subset.join("-"))
        };
        let vector = embedder.embed(&example.input)?;
        store.insert(VectorEntry {
            entry_id,
            task_id: task_id.clone(),
            values: vector.values,
            guidance: example.target.clone(),
        })?;
    }
    Ok(store)
}

/// Feature map for the template policy: hashed token counts (unnormalized)
/// plus a trailing constant bias component. Token-free text yields the
/// bias-only vector.
pub fn features(text: &str, embed_dim: usize) -> Vec<f64> {
    let (mut counts, _) = token_counts(text, embed_dim);
    counts.push(1.0);
    counts
}

fn softmax_from_logits(logits: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|l| l - max).collect();
    let sum: f64 = shifted.iter().map(|l| l.exp()).sum();
    let log_sum = sum.ln();
    let log_probs: Vec<f64> = shifted.iter().map(|l| l - log_sum).collect();
    let probs: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
    (probs, log_probs)
}

/// A feature-conditioned categorical distribution over a library of guidance
/// snippets, with a frozen reference copy for KL regularization.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplatePolicy {
    pub templates: Vec<String>,
    /// Feature dimension including the bias component.
    pub feature_dim: usize,
    /// feature_dim x num_templates weight matrix.
    pub theta: Array2<f64>,
    theta_ref: Array2<f64>,
}

impl TemplatePolicy {
    /// Zero-initialized policy (uniform over templates) with a matching
    /// frozen reference.
    pub fn new(templates: Vec<String>, embed_dim: usize) -> Result<Self> {
        if templates.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "template library needs at least 2 snippets, got {}",
                templates.len()
            )));
        }
        let feature_dim = embed_dim + 1;
        let shape = (feature_dim, templates.len());
        Ok(TemplatePolicy {
            templates,
            feature_dim,
            theta: Array2::zeros(shape),
            theta_ref: Array2::zeros(shape),
        })
    }

    pub fn num_templates(&self) -> usize {
        self.templates.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.feature_dim - 1
    }

    pub fn theta_ref(&self) -> &Array2<f64> {
        &self.theta_ref
    }

    pub fn task_features(&self, task: &TaskInstance) -> Vec<f64> {
        features(&task.description, self.embed_dim())
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "policy weights are not finite".to_string(),
            ));
        }
        Ok(())
    }

    pub fn logits(&self, f: &[f64]) -> Vec<f64> {
        assert_eq!(f.len(), self.feature_dim, "feature dim mismatch");
        (0..self.num_templates())
            .map(|v| f.iter().zip(self.theta.column(v)).map(|(x, w)| x * w).sum())
            .collect()
    }

    pub fn probs(&self, f: &[f64]) -> Vec<f64> {
        softmax_from_logits(&self.logits(f)).0
    }

    pub fn log_probs(&self, f: &[f64]) -> Vec<f64> {
        softmax_from_logits(&self.logits(f)).1
    }

    /// Draw a template index; returns (index, snippet, log-probability).
    pub fn sample(&self, f: &[f64], rng: &mut ChaCha8Rng) -> (usize, &str, f64) {
        let (probs, log_probs) = softmax_from_logits(&self.logits(f));
        let draw: f64 = rng.gen();
        let mut cumulative = 0.0;
        let mut chosen = probs.len() - 1;
        for (v, p) in probs.iter().enumerate() {
            cumulative += p;
            if draw < cumulative {
                chosen = v;
                break;
            }
        }
        (chosen, &self.templates[chosen], log_probs[chosen])
    }

    pub fn logprob(&self, f: &[f64], v: usize) -> f64 {
        assert!(v < self.num_templates(), "template index out of range");
        self.log_probs(f)[v]
    }

    /// Exact categorical KL(current || reference) at the given features.
    pub fn kl_to_ref(&self, f: &[f64]) -> f64 {
        let (probs, log_probs) = softmax_from_logits(&self.logits(f));
        let ref_logits: Vec<f64> = (0..self.num_templates())
            .map(|v| {
                f.iter()
                    .zip(self.theta_ref.column(v))
                    .map(|(x, w)| x * w)
                    .sum()
            })
            .collect();
        let (_, ref_log_probs) = softmax_from_logits(&ref_logits);
        probs
            .iter()
            .zip(log_probs.iter().zip(&ref_log_probs))
            .map(|(p, (lp, lq))| p * (lp - lq))
            .sum()
    }

    pub fn ref_log_probs(&self, f: &[f64]) -> Vec<f64> {
        let ref_logits: Vec<f64> = (0..self.num_templates())
            .map(|v| {
                f.iter()
                    .zip(self.theta_ref.column(v))
                    .map(|(x, w)| x * w)
                    .sum()
            })
            .collect();
        softmax_from_logits(&ref_logits).1
    }

    pub fn library_digest(&self) -> String {
        sha256_hex(self.templates.join("\x1e").as_bytes())
    }

    /// Freeze the current weights as the reference distribution the KL term
    /// pulls toward. Called once, after supervised fitting and before
    /// reinforcement learning starts.
    pub fn freeze_reference(&mut self) {
        self.theta_ref = self.theta.clone();
    }
}

/// Outcome of the supervised warm-up fit.
#[derive(Debug, Clone, PartialEq)]
pub struct SftFitReport {
    /// Examples whose target matched a library snippet.
    pub pairs: usize,
    /// Examples whose target is not in the library (harvested top-N drops
    /// rare strings).
    pub skipped: usize,
    pub final_nll: f64,
}

/// Supervised stage of the two-stage training design: fit the policy to the
/// (task, guidance) pairs by gradient descent on the categorical
/// cross-entropy, so reinforcement learning starts from a policy that
/// already maps tasks toward their reflected guidance. Deterministic.
pub fn fit_template_policy(
    policy: &mut TemplatePolicy,
    examples: &[SftExample],
    epochs: usize,
    learning_rate: f64,
) -> Result<SftFitReport> {
    if epochs == 0 || learning_rate <= 0.0 {
        return Err(Error::InvalidArgument(
            "sft fit needs positive epochs and learning rate".to_string(),
        ));
    }
    let mut pairs: Vec<(Vec<f64>, usize)> = Vec::new();
    let mut skipped = 0usize;
    for example in examples {
        match policy.templates.iter().position(|t| *t == example.target) {
            Some(v) => pairs.push((features(&example.input, policy.embed_dim()), v)),
            None => skipped += 1,
        }
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "no sft example targets match the template library".to_string(),
        ));
    }

    let v_count = policy.num_templates();
    let n = pairs.len() as f64;
    let mut final_nll = f64::INFINITY;
    for _ in 0..epochs {
        let mut grad = Array2::<f64>::zeros((policy.feature_dim, v_count));
        let mut nll = 0.0;
        for (f, v) in &pairs {
            let log_probs = policy.log_probs(f);
            nll -= log_probs[*v];
            let probs: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
            for j in 0..v_count {
                let indicator = if j == *v { 1.0 } else { 0.0 };
                let coef = (probs[j] - indicator) / n;
                if coef != 0.0 {
                    for (fi, &fv) in f.iter().enumerate() {
                        if fv != 0.0 {
                            grad[(fi, j)] += fv * coef;
                        }
                    }
                }
            }
        }
        final_nll = nll / n;
        policy.theta.scaled_add(-learning_rate, &grad);
    }
    policy.check_finite()?;
    Ok(SftFitReport {
        pairs: pairs.len(),
        skipped,
        final_nll,
    })
}

/// Load a template library: one snippet per line, `#` comments and blank
/// lines ignored, `\n`/`\t`/`\\` escapes expanded.
pub fn load_template_library(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::Config(format!(
            "cannot read template library {}: {e}",
            path.display()
        ))
    })?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(unescape_line)
        .collect())
}

pub fn save_template_library(path: &Path, templates: &[String]) -> Result<()> {
    let mut out = String::new();
    for t in templates {
        out.push_str(&escape_line(t));
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, out)?;
    Ok(())
}

fn escape_line(s: &str) -> String {
    s.replace('\\', "\\\\")
        .replace('\n', "\\n")
        .replace('\t', "\\t")
}

fn unescape_line(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some('t') => out.push('\t'),
                Some('\\') => out.push('\\'),
                Some(other) => {
                    out.push('\\');
                    out.push(other);
                }
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// Keep the `top_n` distinct guidance strings, most frequent first, ties by
/// first appearance.
pub fn harvest_templates(records: &[GuidanceRecord], top_n: usize) -> Vec<String> {
    let mut order: Vec<String> = Vec::new();
    let mut counts: std::collections::BTreeMap<String, usize> = std::collections::BTreeMap::new();
    for record in records {
        if !counts.contains_key(&record.guidance) {
            order.push(record.guidance.clone());
        }
        *counts.entry(record.guidance.clone()).or_insert(0) += 1;
    }
    let mut ranked: Vec<(usize, String)> = order.into_iter().enumerate().collect();
    ranked.sort_by(|a, b| counts[&b.1].cmp(&counts[&a.1]).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(top_n).map(|(_, g)| g).collect()
}

/// Serialized policy weights, bound to the template library they were
/// trained against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub templates_digest: String,
    pub feature_dim: usize,
    pub num_templates: usize,
    pub theta: Vec<f64>,
    pub theta_ref: Vec<f64>,
}

impl Record for PolicyCheckpoint {
    const KIND: &'static str = "policy_checkpoint";
    fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.theta.len() != self.feature_dim * self.num_templates {
            out.push(Violation {
                field: "theta".to_string(),
                rule: format!(
                    "length {} does not match {}x{}",
                    self.theta.len(),
                    self.feature_dim,
                    self.num_templates
                ),
            });
        }
        if self.theta_ref.len() != self.theta.len() {
            out.push(Violation {
                field: "theta_ref".to_string(),
                rule: "length differs from theta".to_string(),
            });
        }
        out
    }
}

pub fn save_checkpoint(policy: &TemplatePolicy, path: &Path) -> Result<()> {
    let checkpoint = PolicyCheckpoint {
        templates_digest: policy.library_digest(),
        feature_dim: policy.feature_dim,
        num_templates: policy.num_templates(),
        theta: policy.theta.iter().cloned().collect(),
        theta_ref: policy.theta_ref.iter().cloned().collect(),
    };
    crate::records::write_records(path, std::slice::from_ref(&checkpoint))
}

/// Restore a policy against the same template library it was saved with.
/// Loading against a different library is an error.
pub fn load_checkpoint(path: &Path, templates: Vec<String>) -> Result<TemplatePolicy> {
    let checkpoints: Vec<PolicyCheckpoint> = crate::records::read_records(path)?;
    let checkpoint = checkpoints
        .into_iter()
        .next()
        .ok_or_else(|| Error::Config(format!("no checkpoint record in {}", path.display())))?;
    let mut policy = TemplatePolicy::new(templates, checkpoint.feature_dim - 1)?;
    if policy.library_digest() != checkpoint.templates_digest {
        return Err(Error::Config(
            "checkpoint was trained against a different template library".to_string(),
        ));
    }
    if policy.num_templates() != checkpoint.num_templates {
        return Err(Error::Config("template count mismatch".to_string()));
    }
    let shape = (checkpoint.feature_dim, checkpoint.num_templates);
    policy.theta = Array2::from_shape_vec(shape, checkpoint.theta)
        .map_err(|e| Error::Config(format!("bad theta shape: {e}")))?;
    policy.theta_ref = Array2::from_shape_vec(shape, checkpoint.theta_ref)
        .map_err(|e| Error::Config(format!("bad theta_ref shape: {e}")))?;
    Ok(policy)
}

/// The configured context augmentation source.
pub enum CamBackend {
    /// Baseline: no guidance at all.
    None,
    Endpoint {
        backend: Box<dyn ChatBackend>,
    },
    Retrieval {
        store: VectorStore,
        embedder: Embedder,
    },
    TemplatePolicy {
        policy: TemplatePolicy,
    },
}

impl CamBackend {
    pub fn label(&self) -> &'static str {
        match self {
            CamBackend::None => "none",
            CamBackend::Endpoint { .. } => "endpoint",
            CamBackend::Retrieval { .. } => "retrieval",
            CamBackend::TemplatePolicy { .. } => "template_policy",
        }
    }
}

/// Guidance plus the wall-clock cost of producing it. The baseline produces
/// neither.
#[derive(Debug, Clone, PartialEq)]
pub struct CamOutcome {
    pub guidance: Option<String>,
    pub latency: Option<Duration>,
}

/// Produce guidance for a task. Latency is recorded per call for every
/// non-baseline backend.
pub fn generate(cam: &CamBackend, task: &TaskInstance, rng: &mut ChaCha8Rng) -> Result<CamOutcome> {
    match cam {
        CamBackend::None => Ok(CamOutcome {
            guidance: None,
            latency: None,
        }),
        CamBackend::Endpoint { backend } => {
            let started = Instant::now();
            let reply = backend.complete(&[
                ChatMessage::system(CAM_INSTRUCTION),
                ChatMessage::user(task.description.clone()),
            ])?;
            Ok(CamOutcome {
                guidance: Some(reply),
                latency: Some(started.elapsed()),
            })
        }
        CamBackend::Retrieval { store, embedder } => {
            let started = Instant::now();
            let query = embedder.embed(&task.description)?;
            let (_, entry, _) = store.retrieve(&query)?;
            Ok(CamOutcome {
                guidance: Some(entry.guidance.clone()),
                latency: Some(started.elapsed()),
            })
        }
        CamBackend::TemplatePolicy { policy } => {
            let started = Instant::now();
            policy.check_finite()?;
            let f = policy.task_features(task);
            let (_, snippet, _) = policy.sample(&f, rng);
            let guidance = snippet.to_string();
            Ok(CamOutcome {
                guidance: Some(guidance),
                latency: Some(started.elapsed()),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::collections::BTreeMap;

    fn task(description: &str) -> TaskInstance {
        TaskInstance {
            task_id: "t".to_string(),
            scenario_id: "s".to_string(),
            description: description.to_string(),
            split: crate::model::Split::Train,
            metadata: BTreeMap::new(),
        }
    }

    #[test]
    fn embed_counts_match_token_oracle() {
        let dim = DEFAULT_EMBED_DIM;
        let text = "red red shirt";
        // Independent token-count oracle.
        let mut oracle = vec![0.0f64; dim];
        for token in ["red", "red", "shirt"] {
            oracle[(fnv1a64(token.as_bytes()) % dim as u64) as usize] += 1.0;
        }
        let (counts, n) = token_counts(text, dim);
        assert_eq!(n, 3);
        assert_eq!(counts, oracle);
        assert_eq!(oracle[token_bucket("red", dim)], 2.0);
        assert_eq!(oracle[token_bucket("shirt", dim)], 1.0);

        let embedded = embed_deterministic(text, dim).unwrap();
        let norm: f64 = embedded.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn embed_is_pure() {
        let a = embed_deterministic("Buy a red shirt", 64).unwrap();
        let b = embed_deterministic("Buy a red shirt", 64).unwrap();
        assert_eq!(a, b);
        let bits_a: Vec<u64> = a.values.iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = b.values.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn embed_rejects_token_free_text() {
        assert!(embed_deterministic("!!!", 64).is_err());
        assert!(embed_deterministic("", 64).is_err());
    }

    #[test]
    fn features_differ_only_in_changed_buckets() {
        let dim = DEFAULT_EMBED_DIM;
        let a = features("red shirt", dim);
        let b = features("blue shirt", dim);
        assert_eq!(a.len(), dim + 1);
        let differing: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
        let expected: std::collections::BTreeSet<usize> =
            [token_bucket("red", dim), token_bucket("blue", dim)]
                .into_iter()
                .collect();
        assert_eq!(
            differing
                .iter()
                .cloned()
                .collect::<std::collections::BTreeSet<_>>(),
            expected
        );
        // Bias feature always present.
        assert_eq!(a[dim], 1.0);
        assert_eq!(features("!!!", dim), {
            let mut v = vec![0.0; dim];
            v.push(1.0);
            v
        });
    }

    fn unit(values: Vec<f64>) -> Vec<f64> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        values.into_iter().map(|v| v / norm).collect()
    }

    fn entry(id: &str, values: Vec<f64>) -> VectorEntry {
        VectorEntry {
            entry_id: id.to_string(),
            task_id: id.to_string(),
            values: unit(values),
            guidance: format!("guidance for {id}"),
        }
    }

    #[test]
    fn retrieve_exact_match_is_similarity_one() {
        let mut store = VectorStore::new();
        store.insert(entry("a", vec![1.0, 0.0, 0.0])).unwrap();
        store.insert(entry("b", vec![0.0, 1.0, 0.0])).unwrap();
        let (_, hit, sim) = store
            .retrieve(&EmbeddingVector {
                values: unit(vec![0.0, 1.0, 0.0]),
            })
            .unwrap();
        assert_eq!(hit.entry_id, "b");
        assert!((sim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn retrieve_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for case in 0..1000 {
            let dim = rng.gen_range(2..8usize);
            let n = rng.gen_range(1..12usize);
            let mut store = VectorStore::new();
            let mut raw = Vec::new();
            for i in 0..n {
                // Occasionally duplicate an earlier vector to force ties.
                let values = if i > 0 && rng.gen_bool(0.2) {
                    store.entries()[rng.gen_range(0..i)].values.clone()
                } else {
                    unit((0..dim).map(|_| rng.gen_range(-1.0..1.0f64)).collect())
                };
                raw.push(values.clone());
                store
                    .insert(VectorEntry {
                        entry_id: format!("e{i}"),
                        task_id: format!("e{i}"),
                        values,
                        guidance: "g".to_string(),
                    })
                    .unwrap();
            }
            let query = EmbeddingVector {
                values: unit((0..dim).map(|_| rng.gen_range(-1.0..1.0f64)).collect()),
            };
            // Linear-scan oracle with first-wins tie rule.
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for (i, values) in raw.iter().enumerate() {
                let sim: f64 = values.iter().zip(&query.values).map(|(a, b)| a * b).sum();
                if sim > best_sim {
                    best_sim = sim;
                    best = i;
                }
            }
            let (got, _, _) = store.retrieve(&query).unwrap();
            assert_eq!(got, best, "case {case}");
        }
    }

    #[test]
    fn retrieve_tie_prefers_earlier_insertion() {
        let mut store = VectorStore::new();
        store.insert(entry("later-first", vec![1.0, 1.0])).unwrap();
        store
            .insert(VectorEntry {
                entry_id: "duplicate".to_string(),
                task_id: "duplicate".to_string(),
                values: unit(vec![1.0, 1.0]),
                guidance: "g".to_string(),
            })
            .unwrap();
        let (index, hit, _) = store
            .retrieve(&EmbeddingVector {
                values: unit(vec![1.0, 1.0]),
            })
            .unwrap();
        assert_eq!(index, 0);
        assert_eq!(hit.entry_id, "later-first");
    }

    #[test]
    fn retrieve_rejects_dim_mismatch_and_empty_store() {
        let store = VectorStore::new();
        assert!(store
            .retrieve(&EmbeddingVector { values: vec![1.0] })
            .is_err());
        let mut store = VectorStore::new();
        store.insert(entry("a", vec![1.0, 0.0])).unwrap();
        assert!(store
            .retrieve(&EmbeddingVector {
                values: vec![1.0, 0.0, 0.0]
            })
            .is_err());
    }

    #[test]
    fn store_rejects_unnormalized_vectors() {
        let mut store = VectorStore::new();
        let bad = VectorEntry {
            entry_id: "x".to_string(),
            task_id: "x".to_string(),
            values: vec![1.0, 1.0],
            guidance: "g".to_string(),
        };
        assert!(store.insert(bad).is_err());
    }

    #[test]
    fn store_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.vec.ndrec");
        let mut store = VectorStore::new();
        store.insert(entry("a", vec![0.3, 0.4, 0.5])).unwrap();
        store.insert(entry("b", vec![-0.2, 0.9, 0.1])).unwrap();
        store.save(&path).unwrap();
        let loaded = VectorStore::load(&path).unwrap();
        assert_eq!(loaded.entries(), store.entries());
    }

    #[test]
    fn softmax_probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let logits: Vec<f64> = (0..rng.gen_range(2..10usize))
                .map(|_| rng.gen_range(-50.0..50.0))
                .collect();
            let (probs, log_probs) = softmax_from_logits(&logits);
            let sum: f64 = probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "sum {sum}");
            for (p, lp) in probs.iter().zip(&log_probs) {
                assert!((p.ln() - lp).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let logits = vec![0.3, -1.2, 4.0];
        let shifted: Vec<f64> = logits.iter().map(|l| l + 123.456).collect();
        let (p1, lp1) = softmax_from_logits(&logits);
        let (p2, lp2) = softmax_from_logits(&shifted);
        for i in 0..3 {
            assert!((p1[i] - p2[i]).abs() < 1e-12);
            assert!((lp1[i] - lp2[i]).abs() < 1e-9);
        }
    }

    fn test_policy(v: usize) -> TemplatePolicy {
        let templates = (0..v).map(|i| format!("template {i}")).collect();
        TemplatePolicy::new(templates, 8).unwrap()
    }

    #[test]
    fn zero_weights_sample_uniformly() {
        let policy = test_policy(4);
        let f = features("some task", 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let (v, _, _) = policy.sample(&f, &mut rng);
            counts[v] += 1;
        }
        // Multinomial check: each count within 3 sigma of n/4.
        let expected = n as f64 / 4.0;
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for (v, &count) in counts.iter().enumerate() {
            assert!(
                (count as f64 - expected).abs() < 3.0 * sigma,
                "template {v}: {count} vs {expected}"
            );
        }
    }

    #[test]
    fn saturated_column_dominates() {
        let mut policy = test_policy(3);
        let f = features("anything at all", 8);
        // Push template 1's bias weight sky high.
        policy.theta[(policy.feature_dim - 1, 1)] = 1000.0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let (v, _, lp) = policy.sample(&f, &mut rng);
            assert_eq!(v, 1);
            assert!(lp.abs() < 1e-9, "logprob {lp}");
        }
    }

    #[test]
    fn logprob_matches_analytic_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut policy = test_policy(5);
        for w in policy.theta.iter_mut() {
            *w = rng.gen_range(-2.0..2.0);
        }
        let f = features("buy a blue kettle", 8);
        let logits = policy.logits(&f);
        for v in 0..5 {
            // Direct recomputation: log(exp(l_v) / sum exp(l_j)).
            let denominator: f64 = logits.iter().map(|l| l.exp()).sum();
            let direct = (logits[v].exp() / denominator).ln();
            assert!((policy.logprob(&f, v) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_zero_at_reference_and_nonnegative_everywhere() {
        let f = features("task text", 8);
        let policy = test_policy(4);
        assert_eq!(policy.kl_to_ref(&f), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let mut p = test_policy(4);
            for w in p.theta.iter_mut() {
                *w = rng.gen_range(-3.0..3.0);
            }
            let kl = p.kl_to_ref(&f);
            assert!(kl >= 0.0, "KL {kl} negative");
            // Analytic cross-check.
            let probs = p.probs(&f);
            let lp = p.log_probs(&f);
            let lq = p.ref_log_probs(&f);
            let direct: f64 = probs
                .iter()
                .zip(lp.iter().zip(&lq))
                .map(|(p, (a, b))| p * (a - b))
                .sum();
            assert!((kl - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_grows_with_logit_scale() {
        let f = features("task text", 8);
        let mut previous = 0.0;
        for scale in [0.5, 1.0, 2.0, 4.0, 8.0] {
            let mut p = test_policy(3);
            // Deterministic direction, growing magnitude.
            p.theta[(p.feature_dim - 1, 0)] = scale;
            let kl = p.kl_to_ref(&f);
            assert!(kl > previous, "scale {scale}: KL {kl} <= {previous}");
            previous = kl;
        }
    }

    #[test]
    fn harvest_ranks_by_frequency_then_first_seen() {
        let record = |g: &str| GuidanceRecord {
            task_id: "t".to_string(),
            subset_run_ids: vec![0],
            guidance: g.to_string(),
            reflector_model: "m".to_string(),
            raw_response_digest: "d".to_string(),
        };
        let records = vec![
            record("b"),
            record("a"),
            record("a"),
            record("c"),
            record("b"),
            record("a"),
        ];
        assert_eq!(
            harvest_templates(&records, 2),
            vec!["a".to_string(), "b".to_string()]
        );
        assert_eq!(
            harvest_templates(&records, 10),
            vec!["a".to_string(), "b".to_string(), "c".to_string()]
        );
    }

    #[test]
    fn template_library_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lib.txt");
        let templates = vec![
            "check the price".to_string(),
            "multi\nline guidance".to_string(),
        ];
        save_template_library(&path, &templates).unwrap();
        let loaded = load_template_library(&path).unwrap();
        assert_eq!(loaded, templates);
    }

    #[test]
    fn checkpoint_round_trip_and_library_binding() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.ckpt.ndrec");
        let mut policy = test_policy(3);
        policy.theta[(0, 1)] = 0.25;
        save_checkpoint(&policy, &path).unwrap();
        let loaded = load_checkpoint(&path, policy.templates.clone()).unwrap();
        assert_eq!(loaded, policy);

        let other_templates: Vec<String> = (0..3).map(|i| format!("different {i}")).collect();
        let err = load_checkpoint(&path, other_templates).unwrap_err();
        assert!(
            err.to_string().contains("different template library"),
            "{err}"
        );
    }

    #[test]
    fn sft_fit_learns_the_mapping_and_freezes_reference() {
        let templates: Vec<String> = (0..3).map(|i| format!("guidance flavor {i}")).collect();
        let mut policy = TemplatePolicy::new(templates.clone(), 64).unwrap();
        let example = |input: &str, v: usize| SftExample {
            input: input.to_string(),
            target: templates[v].clone(),
            origin: GuidanceRecord {
                task_id: input.to_string(),
                subset_run_ids: vec![0],
                guidance: templates[v].clone(),
                reflector_model: "m".to_string(),
                raw_response_digest: "d".to_string(),
            },
        };
        let mut examples = vec![
            example("buy a red kettle for winter", 0),
            example("buy a blue scarf for autumn", 1),
            example("buy a green lamp for reading", 2),
        ];
        let mut dropped = example("target is gone from the library", 0);
        dropped.target = "snippet the harvest dropped".to_string();
        examples.push(dropped);
        let report = fit_template_policy(&mut policy, &examples, 200, 0.5).unwrap();
        assert_eq!(report.pairs, 3);
        assert_eq!(report.skipped, 1);
        assert!(report.final_nll < 0.1, "nll {}", report.final_nll);
        for (input, expected) in [
            ("buy a red kettle for winter", 0usize),
            ("buy a blue scarf for autumn", 1),
            ("buy a green lamp for reading", 2),
        ] {
            let probs = policy.probs(&features(input, 64));
            let argmax = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, expected, "{input}: {probs:?}");
            assert!(probs[expected] > 0.8, "{input}: {probs:?}");
        }

        // KL to the reference is zero right after freezing.
        policy.freeze_reference();
        assert_eq!(
            policy.kl_to_ref(&features("buy a red kettle for winter", 64)),
            0.0
        );
    }

    #[test]
    fn generate_none_is_absent_without_latency() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let outcome = generate(&CamBackend::None, &task("do a thing"), &mut rng).unwrap();
        assert_eq!(outcome.guidance, None);
        assert_eq!(outcome.latency, None);
    }

    #[test]
    fn generate_retrieval_single_entry() {
        let embedder = Embedder::deterministic(64);
        let mut store = VectorStore::new();
        let vector = embedder.embed("buy a red shirt").unwrap();
        store
            .insert(VectorEntry {
                entry_id: "only".to_string(),
                task_id: "only".to_string(),
                values: vector.values,
                guidance: "the single stored guidance".to_string(),
            })
            .unwrap();
        let cam = CamBackend::Retrieval { store, embedder };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let outcome = generate(&cam, &task("buy a blue shirt"), &mut rng).unwrap();
        assert_eq!(
            outcome.guidance.as_deref(),
            Some("the single stored guidance")
        );
        assert!(outcome.latency.is_some());
    }

    #[test]
    fn generate_endpoint_wraps_task_and_uses_reply_verbatim() {
        use std::sync::{Arc, Mutex};
        struct Recorder(Arc<Mutex<Vec<ChatMessage>>>);
        impl ChatBackend for Recorder {
            fn complete(&self, messages: &[ChatMessage]) -> crate::error::Result<String> {
                *self.0.lock().unwrap() = messages.to_vec();
                Ok("  advice with surrounding spaces  ".to_string())
            }
            fn fingerprint(&self) -> String {
                "test:recorder".to_string()
            }
        }
        let seen = Arc::new(Mutex::new(Vec::new()));
        let cam = CamBackend::Endpoint {
            backend: Box::new(Recorder(seen.clone())),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = task("buy a green kettle");
        let outcome = generate(&cam, &q, &mut rng).unwrap();
        // Reply used verbatim, latency recorded.
        assert_eq!(
            outcome.guidance.as_deref(),
            Some("  advice with surrounding spaces  ")
        );
        assert!(outcome.latency.is_some());
        // Fixed instruction wrapper around the task description.
        let messages = seen.lock().unwrap();
        assert_eq!(messages.len(), 2);
        assert_eq!(messages[0].content, CAM_INSTRUCTION);
        assert_eq!(messages[1].content, q.description);
    }

    #[test]
    fn generate_retrieval_empty_store_errors() {
        let cam = CamBackend::Retrieval {
            store: VectorStore::new(),
            embedder: Embedder::deterministic(64),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(generate(&cam, &task("x y z"), &mut rng).is_err());
    }

    #[test]
    fn store_from_examples_subset_keys_and_collapse() {
        let embedder = Embedder::deterministic(64);
        let example = |task_id: &str, subset: Vec<u32>| SftExample {
            input: format!("description of {task_id}"),
            target: "g".to_string(),
            origin: GuidanceRecord {
                task_id: task_id.to_string(),
                subset_run_ids: subset,
                guidance: "g".to_string(),
                reflector_model: "m".to_string(),
                raw_response_digest: "d".to_string(),
            },
        };
        let examples = vec![
            example("t1", vec![0, 1]),
            example("t1", vec![0, 2]),
            example("t2", vec![1, 2]),
        ];
        let full = store_from_examples(&examples, &embedder, false).unwrap();
        assert_eq!(full.len(), 3);
        assert_eq!(full.entries()[0].entry_id, "t1#0-1");
        let collapsed = store_from_examples(&examples, &embedder, true).unwrap();
        assert_eq!(collapsed.len(), 2);
        assert_eq!(collapsed.entries()[0].entry_id, "t1");
    }
}
