//! Group-relative policy optimization of the template policy against rewards
//! from re-executing the frozen execution agent on augmented tasks.
//!
//! The policy emits one categorical choice per task, so the token-level
//! objective collapses to a single term per draw: clipped importance ratios
//! on group-standardized advantages plus a KL pull toward the frozen
//! reference, with the gradient computed exactly from the softmax.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cam::TemplatePolicy;
use crate::env::EnvFactory;
use crate::error::{Error, Result};
use crate::hashing::stable_hash;
use crate::model::{TaskInstance, Violation};
use crate::records::Record;
use crate::runtime::{compose_context, run_episode, ChatBackend};

/// One sampled context and its episode outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupDraw {
    pub template_index: usize,
    pub guidance: String,
    pub logprob_old: f64,
    pub reward: f64,
    pub advantage: f64,
}

/// The n draws of one task, the unit of advantage normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSample {
    pub task: TaskInstance,
    pub draws: Vec<GroupDraw>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub group_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub kl_coef: f64,
    pub clip_ratio: f64,
    pub advantage_epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            group_size: 4,
            epochs: 15,
            learning_rate: 0.05,
            kl_coef: 0.001,
            clip_ratio: 0.2,
            advantage_epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be at least 2".to_string()));
        }
        if self.kl_coef < 0.0 {
            return Err(Error::Config("kl_coef must be non-negative".to_string()));
        }
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return Err(Error::Config(format!(
                "clip_ratio {} out of (0,1)",
                self.clip_ratio
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".to_string()));
        }
        if self.advantage_epsilon <= 0.0 {
            return Err(Error::Config(
                "advantage_epsilon must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Standardize rewards within a group: `(r - mean) / (std + eps)` with the
/// population std. Identical rewards yield exactly zero advantages.
pub fn group_advantages(rewards: &[f64], eps: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "advantage group needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let variance = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = variance.sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + eps)).collect())
}

/// The clipped surrogate loss with KL regularization, and its exact gradient
/// with respect to the policy weights.
///
/// loss = -mean over draws of min(rho*A, clip(rho)*A)
///        + kl_coef * mean over tasks of KL(policy || reference)
pub fn grpo_objective(
    policy: &TemplatePolicy,
    samples: &[GroupSample],
    cfg: &TrainConfig,
) -> Result<(f64, Array2<f64>)> {
    policy.check_finite()?;
    let n_draws: usize = samples.iter().map(|s| s.draws.len()).sum();
    if n_draws == 0 {
        return Err(Error::InvalidArgument("no draws in objective".to_string()));
    }
    let f_dim = policy.feature_dim;
    let v_count = policy.num_templates();
    let mut surrogate_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut grad_surrogate = Array2::<f64>::zeros((f_dim, v_count));
    let mut grad_kl = Array2::<f64>::zeros((f_dim, v_count));

    for sample in samples {
        let f = policy.task_features(&sample.task);
        let log_probs = policy.log_probs(&f);
        let probs: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
        let ref_log_probs = policy.ref_log_probs(&f);

        let kl: f64 = probs
            .iter()
            .zip(log_probs.iter().zip(&ref_log_probs))
            .map(|(p, (lp, lq))| p * (lp - lq))
            .sum();
        kl_sum += kl;
        // dKL/dlogit_j = p_j * ((lp_j - lq_j) - KL)
        for j in 0..v_count {
            let coef = probs[j] * ((log_probs[j] - ref_log_probs[j]) - kl);
            if coef != 0.0 {
                for (fi, &fv) in f.iter().enumerate() {
                    if fv != 0.0 {
                        grad_kl[(fi, j)] += fv * coef;
                    }
                }
            }
        }

        for draw in &sample.draws {
            let v = draw.template_index;
            if v >= v_count {
                return Err(Error::InvalidArgument(format!(
                    "template index {v} out of range"
                )));
            }
            let ratio = (log_probs[v] - draw.logprob_old).exp();
            let clipped = ratio.clamp(1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio);
            let unclipped_term = ratio * draw.advantage;
            let clipped_term = clipped * draw.advantage;
            if unclipped_term <= clipped_term {
                surrogate_sum += unclipped_term;
                // d(rho*A)/dlogit_j = A * rho * (delta_jv - p_j)
                let scale = draw.advantage * ratio;
                if scale != 0.0 {
                    for j in 0..v_count {
                        let indicator = if j == v { 1.0 } else { 0.0 };
                        let coef = scale * (indicator - probs[j]);
                        for (fi, &fv) in f.iter().enumerate() {
                            if fv != 0.0 {
                                grad_surrogate[(fi, j)] += fv * coef;
                            }
                        }
                    }
                }
            } else {
                // Clip binding: constant in theta.
                surrogate_sum += clipped_term;
            }
        }
    }

    let n = n_draws as f64;
    let t = samples.len() as f64;
    let loss = -surrogate_sum / n + cfg.kl_coef * kl_sum / t;
    let mut grad = grad_surrogate;
    grad.mapv_inplace(|g| -g / n);
    grad.scaled_add(cfg.kl_coef / t, &grad_kl);
    Ok((loss, grad))
}

/// Per-epoch training metrics; persisted as a `train_epoch` record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub loss: f64,
}

impl Record for EpochStats {
    const KIND: &'static str = "train_epoch";
    fn violations(&self) -> Vec<Violation> {
        Vec::new()
    }
}

/// Optimize the policy: each epoch draws `group_size` contexts per task,
/// re-executes the frozen agent on every augmented task, standardizes the
/// rewards within each group, and applies one exact gradient step.
///
/// Fully deterministic under (config seed, deterministic backend). The
/// reference weights and the execution backend are never modified; the
/// backend's configuration digest is checked before and after.
pub fn train(
    policy: &mut TemplatePolicy,
    tasks: &[TaskInstance],
    env_factory: &dyn EnvFactory,
    exec_backend: &dyn ChatBackend,
    system_prompt: &str,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    policy.check_finite()?;
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no training tasks".to_string()));
    }
    let executor_digest = exec_backend.fingerprint();
    let seed_text = cfg.seed.to_string();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let epoch_text = epoch.to_string();
        let mut samples = Vec::with_capacity(tasks.len());
        let mut reward_sum = 0.0;
        for task in tasks {
            let f = policy.task_features(task);
            let mut draws = Vec::with_capacity(cfg.group_size);
            let mut rewards = Vec::with_capacity(cfg.group_size);
            for i in 0..cfg.group_size {
                let draw_text = i.to_string();
                let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&[
                    "train-draw",
                    &seed_text,
                    &epoch_text,
                    &task.task_id,
                    &draw_text,
                ]));
                let (v, snippet, logprob) = policy.sample(&f, &mut rng);
                let guidance = snippet.to_string();
                let augmented = compose_context(task, Some(&guidance))?;
                let mut env = env_factory.create(task)?;
                let episode_seed = stable_hash(&[
                    "train-episode",
                    &seed_text,
                    &epoch_text,
                    &task.task_id,
                    &draw_text,
                ]);
                let rewarded = run_episode(
                    env.as_mut(),
                    &augmented,
                    exec_backend,
                    system_prompt,
                    i as u32,
                    episode_seed,
                )?;
                rewards.push(rewarded.reward);
                draws.push(GroupDraw {
                    template_index: v,
                    guidance,
                    logprob_old: logprob,
                    reward: rewarded.reward,
                    advantage: 0.0,
                });
            }
            let advantages = group_advantages(&rewards, cfg.advantage_epsilon)?;
            for (draw, advantage) in draws.iter_mut().zip(advantages) {
                draw.advantage = advantage;
            }
            reward_sum += rewards.iter().sum::<f64>();
            samples.push(GroupSample {
                task: task.clone(),
                draws,
            });
        }

        let (loss, grad) = grpo_objective(policy, &samples, cfg)?;
        let mean_kl = samples
            .iter()
            .map(|s| policy.kl_to_ref(&policy.task_features(&s.task)))
            .sum::<f64>()
            / samples.len() as f64;
        policy.theta.scaled_add(-cfg.learning_rate, &grad);
        policy.check_finite()?;
        let mean_reward = reward_sum / (tasks.len() * cfg.group_size) as f64;
        log::debug!("epoch {epoch}: reward {mean_reward:.4} kl {mean_kl:.6} loss {loss:.6}");
        history.push(EpochStats {
            epoch,
            mean_reward,
            mean_kl,
            loss,
        });
    }

    if exec_backend.fingerprint() != executor_digest {
        return Err(Error::Validation(
            "execution backend configuration changed during training".to_string(),
        ));
    }
    Ok(history)
}

/// Compare the analytic gradient against central finite differences on a
/// random subset of at least 50 active coordinates (all of them when fewer
/// exist); returns the maximum relative error.
pub fn finite_diff_check(
    policy: &TemplatePolicy,
    samples: &[GroupSample],
    cfg: &TrainConfig,
    step: f64,
) -> Result<f64> {
    if step <= 0.0 {
        return Err(Error::InvalidArgument("step must be positive".to_string()));
    }
    let (_, grad) = grpo_objective(policy, samples, cfg)?;

    // Coordinates in inactive feature rows have both gradients identically
    // zero; sample from rows that actually fire.
    let mut active_rows: Vec<usize> = Vec::new();
    for sample in samples {
        for (fi, fv) in policy.task_features(&sample.task).iter().enumerate() {
            if *fv != 0.0 && !active_rows.contains(&fi) {
                active_rows.push(fi);
            }
        }
    }
    active_rows.sort_unstable();
    let v_count = policy.num_templates();
    let mut coords: Vec<(usize, usize)> = active_rows
        .iter()
        .flat_map(|&fi| (0..v_count).map(move |j| (fi, j)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x51ab);
    use rand::seq::SliceRandom;
    coords.shuffle(&mut rng);
    let n_coords = coords.len().min(64);

    let mut max_rel: f64 = 0.0;
    for &(fi, j) in coords.iter().take(n_coords) {
        let mut plus = policy.clone();
        plus.theta[(fi, j)] += step;
        let mut minus = policy.clone();
        minus.theta[(fi, j)] -= step;
        let (loss_plus, _) = grpo_objective(&plus, samples, cfg)?;
        let (loss_minus, _) = grpo_objective(&minus, samples, cfg)?;
        let fd = (loss_plus - loss_minus) / (2.0 * step);
        let analytic = grad[(fi, j)];
        let denominator = fd.abs().max(analytic.abs());
        let rel = if denominator < 1e-12 {
            0.0
        } else {
            (fd - analytic).abs() / denominator
        };
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::minishop::{make_minishop_task, Difficulty, MiniShopFactory};
    use crate::scripted;
    use rand::Rng;
    use test_support::random_instance;

    #[test]
    fn identical_rewards_yield_exactly_zero() {
        let advantages = group_advantages(&[1.0, 1.0, 1.0, 1.0], 1e-8).unwrap();
        assert_eq!(advantages, vec![0.0, 0.0, 0.0, 0.0]);
        let advantages = group_advantages(&[0.3, 0.3], 1e-8).unwrap();
        assert_eq!(advantages, vec![0.0, 0.0]);
    }

    #[test]
    fn two_point_group_hand_computed() {
        // mean 0.5, population std 0.5, eps-damped just below 1.
        let advantages = group_advantages(&[1.0, 0.0], 1e-8).unwrap();
        assert!((advantages[0] - 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
        assert!((advantages[1] + 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
        assert!(advantages[0] < 1.0 && advantages[0] > 0.9999);
    }

    #[test]
    fn advantages_have_zero_mean_and_unit_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let n = rng.gen_range(2..9usize);
            let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let advantages = group_advantages(&rewards, 1e-8).unwrap();
            let mean = advantages.iter().sum::<f64>() / n as f64;
            assert!(mean.abs() <= 1e-12, "mean {mean}");
            let std = (advantages.iter().map(|a| a * a).sum::<f64>() / n as f64).sqrt();
            let raw_std = {
                let m = rewards.iter().sum::<f64>() / n as f64;
                (rewards.iter().map(|r| (r - m).powi(2)).sum::<f64>() / n as f64).sqrt()
            };
            if raw_std > 1e-6 {
                // Unit scale up to the eps damping factor.
                let expected = raw_std / (raw_std + 1e-8);
                assert!((std - expected).abs() < 1e-9, "std {std} vs {expected}");
            }
        }
    }

    #[test]
    fn singleton_group_rejected() {
        assert!(group_advantages(&[1.0], 1e-8).is_err());
    }

    #[test]
    fn advantages_invariant_to_reward_shift() {
        // Dyadic rewards and a power-of-two group size keep the arithmetic
        // exact, so the invariance is bit-for-bit.
        let rewards = [0.25, 0.5, 0.75, 1.0];
        let shifted: Vec<f64> = rewards.iter().map(|r| r + 0.5).collect();
        let a = group_advantages(&rewards, 1e-8).unwrap();
        let b = group_advantages(&shifted, 1e-8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stationary_degenerate_case_is_exactly_zero() {
        let templates: Vec<String> = (0..3).map(|i| format!("t{i}")).collect();
        let policy = TemplatePolicy::new(templates, 8).unwrap();
        let task = TaskInstance {
            task_id: "t".to_string(),
            scenario_id: "s".to_string(),
            description: "buy a mug".to_string(),
            split: crate::model::Split::Train,
            metadata: Default::default(),
        };
        let f = policy.task_features(&task);
        let draws = (0..4)
            .map(|i| GroupDraw {
                template_index: i % 3,
                guidance: String::new(),
                logprob_old: policy.logprob(&f, i % 3),
                reward: 0.5,
                advantage: 0.0,
            })
            .collect();
        let samples = vec![GroupSample { task, draws }];
        let (loss, grad) = grpo_objective(&policy, &samples, &TrainConfig::default()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5u64 {
            let (policy, samples) = random_instance(seed, 3, 4);
            let cfg = TrainConfig {
                seed,
                ..TrainConfig::default()
            };
            let err = finite_diff_check(&policy, &samples, &cfg, 1e-5).unwrap();
            assert!(err < 1e-4, "seed {seed}: max relative error {err}");
        }
    }

    #[test]
    fn coarse_step_degrades_gracefully() {
        let (policy, samples) = random_instance(11, 2, 4);
        let cfg = TrainConfig::default();
        let fine = finite_diff_check(&policy, &samples, &cfg, 1e-5).unwrap();
        let coarse = finite_diff_check(&policy, &samples, &cfg, 1e-1).unwrap();
        // Documents truncation behavior; no assertion on the coarse value
        // beyond it being finite.
        assert!(coarse.is_finite());
        assert!(fine < 1e-4);
    }

    #[test]
    fn all_zero_gradient_reports_zero_error() {
        let templates: Vec<String> = (0..3).map(|i| format!("t{i}")).collect();
        let policy = TemplatePolicy::new(templates, 8).unwrap();
        let task = TaskInstance {
            task_id: "t".to_string(),
            scenario_id: "s".to_string(),
            description: "buy a mug".to_string(),
            split: crate::model::Split::Train,
            metadata: Default::default(),
        };
        let f = policy.task_features(&task);
        let draws = vec![
            GroupDraw {
                template_index: 0,
                guidance: String::new(),
                logprob_old: policy.logprob(&f, 0),
                reward: 0.5,
                advantage: 0.0,
            },
            GroupDraw {
                template_index: 1,
                guidance: String::new(),
                logprob_old: policy.logprob(&f, 1),
                reward: 0.5,
                advantage: 0.0,
            },
        ];
        let samples = vec![GroupSample { task, draws }];
        let err = finite_diff_check(&policy, &samples, &TrainConfig::default(), 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn reduces_to_reinforce_with_baseline() {
        // theta == theta_old makes every ratio 1, so with kl_coef = 0 the
        // gradient must equal -mean(A * grad log pi).
        let (policy, mut samples) = random_instance(21, 3, 4);
        for sample in &mut samples {
            let f = policy.task_features(&sample.task);
            let log_probs = policy.log_probs(&f);
            for draw in &mut sample.draws {
                draw.logprob_old = log_probs[draw.template_index];
            }
        }
        policy.check_finite().unwrap();
        let cfg = TrainConfig {
            kl_coef: 0.0,
            ..TrainConfig::default()
        };
        let (_, grad) = grpo_objective(&policy, &samples, &cfg).unwrap();

        let mut oracle = Array2::<f64>::zeros((policy.feature_dim, policy.num_templates()));
        let n: usize = samples.iter().map(|s| s.draws.len()).sum();
        for sample in &samples {
            let f = policy.task_features(&sample.task);
            let probs = policy.probs(&f);
            for draw in &sample.draws {
                for j in 0..policy.num_templates() {
                    let indicator = if j == draw.template_index { 1.0 } else { 0.0 };
                    for (fi, &fv) in f.iter().enumerate() {
                        oracle[(fi, j)] -= draw.advantage * (indicator - probs[j]) * fv / n as f64;
                    }
                }
            }
        }
        for (a, b) in grad.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn positive_advantage_ascends_chosen_logit() {
        let templates: Vec<String> = (0..3).map(|i| format!("t{i}")).collect();
        let policy = TemplatePolicy::new(templates, 8).unwrap();
        let task = TaskInstance {
            task_id: "t".to_string(),
            scenario_id: "s".to_string(),
            description: "buy a mug".to_string(),
            split: crate::model::Split::Train,
            metadata: Default::default(),
        };
        let f = policy.task_features(&task);
        let chosen = 1usize;
        let draws = vec![
            GroupDraw {
                template_index: chosen,
                guidance: String::new(),
                logprob_old: policy.logprob(&f, chosen),
                reward: 1.0,
                advantage: 1.0,
            },
            GroupDraw {
                template_index: 0,
                guidance: String::new(),
                logprob_old: policy.logprob(&f, 0),
                reward: 0.0,
                advantage: -1.0,
            },
        ];
        let samples = vec![GroupSample { task, draws }];
        let cfg = TrainConfig {
            kl_coef: 0.0,
            ..TrainConfig::default()
        };
        let (_, grad) = grpo_objective(&policy, &samples, &cfg).unwrap();
        let bias = policy.feature_dim - 1;
        // Descending the loss raises the chosen template's logit and lowers
        // the negative-advantage one.
        assert!(grad[(bias, chosen)] < 0.0);
        assert!(grad[(bias, 0)] > 0.0);
    }

    #[test]
    fn clip_activates_on_large_ratio() {
        let (mut policy, mut samples) = random_instance(31, 1, 2);
        // Make old log-probs tiny so ratios blow past 1 + clip.
        for sample in &mut samples {
            for draw in &mut sample.draws {
                draw.logprob_old = (1e-6f64).ln();
                draw.advantage = 1.0;
            }
        }
        for w in policy.theta.iter_mut() {
            *w = 0.0;
        }
        let cfg = TrainConfig {
            kl_coef: 0.0,
            ..TrainConfig::default()
        };
        let (loss, grad) = grpo_objective(&policy, &samples, &cfg).unwrap();
        // Both draws clipped at 1.2 with advantage 1 -> loss = -1.2.
        assert!((loss + 1.2).abs() < 1e-12, "loss {loss}");
        assert!(
            grad.iter().all(|g| *g == 0.0),
            "clipped gradient must vanish"
        );
    }

    #[test]
    fn train_is_deterministic_and_keeps_executor_frozen() {
        let tasks: Vec<TaskInstance> = (0..2)
            .map(|i| make_minishop_task(i, Difficulty::Hard).0)
            .collect();
        let factory = MiniShopFactory::new(30).unwrap();
        let backend = scripted::by_name("shopper").unwrap();
        let templates = vec![
            "The strategy for completing this task is to stay within budget.".to_string(),
            "The strategy for completing this task is to buy an item whose attributes include 'organic'.".to_string(),
        ];
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let mut thetas = Vec::new();
        for _ in 0..2 {
            let mut policy = TemplatePolicy::new(templates.clone(), 32).unwrap();
            let before = backend.fingerprint();
            let history = train(
                &mut policy,
                &tasks,
                &factory,
                backend.as_ref(),
                "shop",
                &cfg,
            )
            .unwrap();
            assert_eq!(history.len(), 3);
            assert_eq!(backend.fingerprint(), before);
            thetas.push(policy.theta.clone());
        }
        let bits = |m: &Array2<f64>| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&thetas[0]), bits(&thetas[1]));
    }

    #[test]
    fn zero_reward_environment_only_feels_kl_pull() {
        struct Noop;
        impl ChatBackend for Noop {
            fn complete(&self, _: &[crate::runtime::ChatMessage]) -> crate::error::Result<String> {
                Ok("noop".to_string())
            }
            fn fingerprint(&self) -> String {
                "test:noop".to_string()
            }
        }
        let tasks = vec![make_minishop_task(5, Difficulty::Hard).0];
        let factory = MiniShopFactory::new(3).unwrap();
        let templates: Vec<String> = (0..3).map(|i| format!("useless advice {i}")).collect();
        let mut policy = TemplatePolicy::new(templates, 16).unwrap();
        // Start away from the reference so the KL pull has work to do.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for w in policy.theta.iter_mut() {
            *w = rng.gen_range(-0.5..0.5);
        }
        let f = policy.task_features(&tasks[0]);
        let initial_kl = policy.kl_to_ref(&f);
        assert!(initial_kl > 0.0);
        let cfg = TrainConfig {
            epochs: 10,
            kl_coef: 0.1,
            ..TrainConfig::default()
        };
        let history = train(&mut policy, &tasks, &factory, &Noop, "shop", &cfg).unwrap();
        assert!(history.iter().all(|e| e.mean_reward == 0.0));
        let final_kl = policy.kl_to_ref(&f);
        assert!(
            final_kl <= initial_kl,
            "KL grew: {initial_kl} -> {final_kl}"
        );
    }
}
