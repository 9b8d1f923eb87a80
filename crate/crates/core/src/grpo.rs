//! Group-relative policy optimization: sample a group of rollouts per prompt
//! from a frozen old-policy snapshot, score them with the composite reward,
//! standardize rewards into group-relative advantages, and ascend
//!
//! ```text
//! J = (1/G) sum_k (1/|o_k|) sum_t [ ratio_{k,t} * A_k
//!         - beta * (exp(lref - ltheta) - (lref - ltheta) - 1) ]
//! ```
//!
//! with `ratio_{k,t} = exp(ltheta_{k,t} - lold_{k,t})`. The reference policy
//! stays frozen at the supervised checkpoint for the whole run. One ascent
//! step per rollout batch keeps training on-policy: at update time every
//! ratio equals 1 to floating-point exactness because old-policy log-probs
//! were recorded from bitwise-identical parameters on the same code path.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::policy::{
    adamw_step, backward_weighted, logprobs, logprobs_values, prefill, sample_from, AdamWConfig,
    OptState, PolicyParams, SampleOutput, Tensors,
};
use crate::promptgen::TrainingSample;
use crate::reward::{parse_rollout, reward_breakdown, RewardBreakdown, RewardConfig};
use crate::rng::{derive_rng, derive_seed, fnv1a64};
use crate::tokenizer::{encode, Vocab, BOS};

/// Exponent clamp inside the KL penalty term.
pub const KL_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    /// Rollouts sampled per prompt (G).
    pub group_size: usize,
    /// KL penalty coefficient.
    pub beta: f64,
    pub lr: f64,
    pub iterations: usize,
    pub prompts_per_batch: usize,
    pub max_new: usize,
    /// Reward-std floor under which a group yields zero advantages.
    pub std_floor: f64,
    pub temperature: f64,
    /// Tempered rollouts make the recorded log-probs off-policy; forbidden
    /// unless explicitly enabled.
    pub allow_off_policy_sampling: bool,
    /// Optional stability guard clamping the importance ratio to 1 +/- c.
    /// Off by default: the objective as written has no clipping.
    pub ratio_clip: Option<f64>,
    pub dump_rollouts: bool,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 12,
            beta: 0.04,
            lr: 1e-4,
            iterations: 60,
            prompts_per_batch: 4,
            max_new: 32,
            std_floor: 1e-6,
            temperature: 1.0,
            allow_off_policy_sampling: false,
            ratio_clip: None,
            dump_rollouts: false,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("grpo group_size must be >= 2".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config("grpo beta must be >= 0".into()));
        }
        if !(self.lr > 0.0) || !(self.std_floor > 0.0) {
            return Err(Error::Config("grpo lr and std_floor must be > 0".into()));
        }
        if self.prompts_per_batch == 0 || self.max_new == 0 {
            return Err(Error::Config(
                "grpo prompts_per_batch and max_new must be >= 1".into(),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("grpo temperature must be > 0".into()));
        }
        if self.temperature != 1.0 && !self.allow_off_policy_sampling {
            return Err(Error::Config(
                "tempered rollouts are off-policy; set allow_off_policy_sampling to override"
                    .into(),
            ));
        }
        if let Some(c) = self.ratio_clip {
            if !(c > 0.0) {
                return Err(Error::Config("ratio_clip must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// G rollouts for one prompt with their rewards and broadcast advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub sample_id: String,
    pub prompt_ids: Vec<u32>,
    pub rollouts: Vec<SampleOutput>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// Sample `group_size` rollouts from the old policy. Rewards and advantages
/// are left unfilled. Rollout k draws from a stream derived from
/// (seed, sample_id, k), so groups are identical for any worker count.
pub fn collect_group(
    params_old: &PolicyParams,
    sample: &TrainingSample,
    vocab: &Vocab,
    cfg: &GrpoConfig,
    seed: u64,
) -> Result<RolloutGroup> {
    let mut prompt_ids = vec![BOS];
    prompt_ids.extend(encode(&sample.prompt_text, vocab));
    let pf = prefill(params_old, &prompt_ids)?;
    let mut rollouts = Vec::with_capacity(cfg.group_size);
    for k in 0..cfg.group_size {
        let mut rng = derive_rng(
            seed,
            "rollout",
            &[fnv1a64(sample.sample_id.as_bytes()), k as u64],
        );
        rollouts.push(sample_from(&pf, cfg.temperature, cfg.max_new, &mut rng)?);
    }
    Ok(RolloutGroup {
        sample_id: sample.sample_id.clone(),
        prompt_ids,
        rollouts,
        rewards: Vec::new(),
        advantages: Vec::new(),
    })
}

/// Standardized group-relative advantages with population std. Groups whose
/// reward std is at or below the floor yield all-zero advantages.
pub fn compute_advantages(rewards: &[f64], std_floor: f64) -> Vec<f64> {
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g;
    let std = var.sqrt();
    if std <= std_floor {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// Per-token KL penalty `exp(x) - x - 1` with `x = logp_ref - logp_theta`,
/// clamped at x = 30 before exponentiation. Nonnegative everywhere, zero
/// exactly when the log-probs coincide.
pub fn kl_penalty_term(logp_ref: f64, logp_theta: f64) -> f64 {
    let x = (logp_ref - logp_theta).min(KL_CLAMP);
    x.exp() - x - 1.0
}

/// Objective value, exact gradient, and diagnostics for one group.
#[derive(Debug)]
pub struct GrpoStep {
    pub objective: f64,
    pub grads: Tensors,
    pub kl_sum: f64,
    pub kl_tokens: usize,
    pub clamp_count: usize,
}

/// J and its gradient for one filled rollout group.
pub fn grpo_objective(
    params_theta: &PolicyParams,
    params_ref: &PolicyParams,
    group: &RolloutGroup,
    beta: f64,
    ratio_clip: Option<f64>,
) -> Result<GrpoStep> {
    let g_count = group.rollouts.len();
    if group.rewards.len() != g_count || group.advantages.len() != g_count {
        return Err(Error::Data(
            "rollout group rewards/advantages not filled".into(),
        ));
    }
    let g = g_count as f64;
    let mut objective = 0.0;
    let mut grads = params_theta.grads_zero();
    let mut kl_sum = 0.0;
    let mut kl_tokens = 0usize;
    let mut clamp_count = 0usize;

    for (k, rollout) in group.rollouts.iter().enumerate() {
        let cont = &rollout.tokens;
        if cont.is_empty() {
            continue;
        }
        let adv = group.advantages[k];
        let n = cont.len() as f64;
        let (lp_theta, trace) = logprobs(params_theta, &group.prompt_ids, cont)?;
        let lp_ref = logprobs_values(params_ref, &group.prompt_ids, cont)?;
        let lp_old = &rollout.logprobs;

        let mut weights = vec![0.0; cont.len()];
        for t in 0..cont.len() {
            let ratio = (lp_theta[t] - lp_old[t]).exp();
            let x = lp_ref[t] - lp_theta[t];
            let clamped = x > KL_CLAMP;
            if clamped {
                clamp_count += 1;
            }
            let xc = x.min(KL_CLAMP);
            let kl = xc.exp() - xc - 1.0;
            kl_sum += kl;
            kl_tokens += 1;

            let (ratio_term, ratio_grad) = match ratio_clip {
                Some(c) => {
                    let clipped = ratio.clamp(1.0 - c, 1.0 + c);
                    let passthrough = (1.0 - c..=1.0 + c).contains(&ratio);
                    (clipped * adv, if passthrough { ratio * adv } else { 0.0 })
                }
                None => (ratio * adv, ratio * adv),
            };
            objective += (ratio_term - beta * kl) / (g * n);
            // d/d ltheta of the kl term is beta*(exp(x) - 1); zero when clamped
            let kl_grad = if clamped { 0.0 } else { beta * (xc.exp() - 1.0) };
            weights[t] = (ratio_grad + kl_grad) / (g * n);
        }
        if !objective.is_finite() {
            return Err(Error::Numeric(format!(
                "grpo objective diverged on sample {} rollout {k}",
                group.sample_id
            )));
        }
        let rollout_grads = backward_weighted(params_theta, &trace, &weights);
        grads.accumulate(&rollout_grads, 1.0);
    }
    Ok(GrpoStep {
        objective,
        grads,
        kl_sum,
        kl_tokens,
        clamp_count,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub format_rate: f64,
    pub lcs: f64,
    pub diversity: f64,
    pub novelty: f64,
}

impl IterationMetrics {
    pub const CSV_HEADER: &'static str =
        "iteration,mean_reward,mean_kl,format_rate,lcs,diversity,novelty";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.8},{:.4},{:.6},{:.6},{:.6}",
            self.iteration,
            self.mean_reward,
            self.mean_kl,
            self.format_rate,
            self.lcs,
            self.diversity,
            self.novelty
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutDump {
    pub iteration: usize,
    pub sample_id: String,
    pub k: usize,
    pub tokens: Vec<u32>,
    pub reward: f64,
    pub advantage: f64,
}

#[derive(Debug)]
pub struct GrpoOutcome {
    pub params: PolicyParams,
    pub metrics: Vec<IterationMetrics>,
    pub rollout_dump: Vec<RolloutDump>,
    /// Set when training aborted; `params` then holds the last good state.
    pub divergence: Option<String>,
}

struct ScoredGroup {
    group: RolloutGroup,
    breakdowns: Vec<RewardBreakdown>,
    well_formed: Vec<bool>,
}

fn score_group(
    group: RolloutGroup,
    sample: &TrainingSample,
    corpus: &Corpus,
    vocab: &Vocab,
    reward_cfg: &RewardConfig,
    std_floor: f64,
) -> ScoredGroup {
    let mut group = group;
    let mut breakdowns = Vec::with_capacity(group.rollouts.len());
    let mut well_formed = Vec::with_capacity(group.rollouts.len());
    for rollout in &group.rollouts {
        let parsed = parse_rollout(
            &rollout.tokens,
            vocab,
            &sample.candidate_pool,
            reward_cfg.think_limit,
        );
        let bd = reward_breakdown(&parsed, &sample.label_items, corpus, reward_cfg);
        group.rewards.push(bd.total);
        well_formed.push(parsed.well_formed);
        breakdowns.push(bd);
    }
    group.advantages = compute_advantages(&group.rewards, std_floor);
    ScoredGroup {
        group,
        breakdowns,
        well_formed,
    }
}

/// Full GRPO run: per iteration, snapshot the old policy, collect and score
/// a batch of groups, take one AdamW ascent step on the batch-mean gradient.
/// The reference policy is the supervised checkpoint, frozen throughout.
pub fn train_grpo(
    sft_params: &PolicyParams,
    samples: &[TrainingSample],
    corpus: &Corpus,
    vocab: &Vocab,
    reward_cfg: &RewardConfig,
    cfg: &GrpoConfig,
    master_seed: u64,
) -> Result<GrpoOutcome> {
    cfg.validate()?;
    reward_cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("grpo needs at least one prompt".into()));
    }
    let params_ref = sft_params.clone();
    let mut params = sft_params.clone();
    let mut opt = OptState::new(&params.cfg);
    let adamw = AdamWConfig {
        lr: cfg.lr,
        ..AdamWConfig::default()
    };

    let mut order: Vec<usize> = (0..samples.len()).collect();
    {
        use rand::seq::SliceRandom;
        let mut rng = derive_rng(master_seed, "grpo-order", &[]);
        order.shuffle(&mut rng);
    }

    let mut metrics = Vec::with_capacity(cfg.iterations);
    let mut rollout_dump = Vec::new();
    let mut cursor = 0usize;

    for iteration in 0..cfg.iterations {
        let params_old = params.clone();
        let mut batch = Vec::with_capacity(cfg.prompts_per_batch);
        for _ in 0..cfg.prompts_per_batch {
            batch.push(&samples[order[cursor]]);
            cursor = (cursor + 1) % order.len();
        }
        let group_seed = derive_seed(master_seed, "grpo-iter", &[iteration as u64]);

        let scored: Result<Vec<ScoredGroup>> = batch
            .par_iter()
            .map(|sample| {
                let group = collect_group(&params_old, sample, vocab, cfg, group_seed)?;
                Ok(score_group(
                    group, sample, corpus, vocab, reward_cfg, cfg.std_floor,
                ))
            })
            .collect();
        let scored = match scored {
            Ok(s) => s,
            Err(e) => {
                return Ok(GrpoOutcome {
                    params: params_old,
                    metrics,
                    rollout_dump,
                    divergence: Some(e.to_string()),
                })
            }
        };

        let steps: Result<Vec<GrpoStep>> = scored
            .par_iter()
            .map(|sg| grpo_objective(&params, &params_ref, &sg.group, cfg.beta, cfg.ratio_clip))
            .collect();
        let steps = match steps {
            Ok(s) => s,
            Err(e) => {
                return Ok(GrpoOutcome {
                    params: params_old,
                    metrics,
                    rollout_dump,
                    divergence: Some(e.to_string()),
                })
            }
        };

        // ascend: batch-mean gradient, negated for the minimizer
        let batch_scale = 1.0 / steps.len() as f64;
        let mut neg_grads = params.grads_zero();
        for step in &steps {
            neg_grads.accumulate(&step.grads, -batch_scale);
        }
        if let Err(e) = adamw_step(&mut params, &neg_grads, &mut opt, &adamw) {
            return Ok(GrpoOutcome {
                params: params_old,
                metrics,
                rollout_dump,
                divergence: Some(e.to_string()),
            });
        }

        let mut mean_reward = 0.0;
        let mut format_rate = 0.0;
        let mut lcs = 0.0;
        let mut diversity = 0.0;
        let mut novelty = 0.0;
        let mut rollout_count = 0usize;
        for sg in &scored {
            for (i, bd) in sg.breakdowns.iter().enumerate() {
                mean_reward += bd.total;
                lcs += bd.lcs;
                diversity += bd.diversity;
                novelty += bd.novelty;
                if sg.well_formed[i] {
                    format_rate += 1.0;
                }
                rollout_count += 1;
            }
        }
        let rc = rollout_count as f64;
        let kl_tokens: usize = steps.iter().map(|s| s.kl_tokens).sum();
        let kl_sum: f64 = steps.iter().map(|s| s.kl_sum).sum();
        metrics.push(IterationMetrics {
            iteration,
            mean_reward: mean_reward / rc,
            mean_kl: if kl_tokens > 0 {
                kl_sum / kl_tokens as f64
            } else {
                0.0
            },
            format_rate: format_rate / rc,
            lcs: lcs / rc,
            diversity: diversity / rc,
            novelty: novelty / rc,
        });

        if cfg.dump_rollouts {
            for sg in &scored {
                for (k, rollout) in sg.group.rollouts.iter().enumerate() {
                    rollout_dump.push(RolloutDump {
                        iteration,
                        sample_id: sg.group.sample_id.clone(),
                        k,
                        tokens: rollout.tokens.clone(),
                        reward: sg.group.rewards[k],
                        advantage: sg.group.advantages[k],
                    });
                }
            }
        }
    }
    Ok(GrpoOutcome {
        params,
        metrics,
        rollout_dump,
        divergence: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyConfig;

    #[test]
    fn advantages_hand_example() {
        let adv = compute_advantages(&[1.0, 2.0, 3.0], 1e-6);
        let expected = 1.224744871391589;
        assert!((adv[0] + expected).abs() < 1e-12, "{adv:?}");
        assert!(adv[1].abs() < 1e-12);
        assert!((adv[2] - expected).abs() < 1e-12);
    }

    #[test]
    fn advantages_degenerate_group_is_zero() {
        let adv = compute_advantages(&[0.7; 12], 1e-6);
        assert!(adv.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn advantages_shift_invariant() {
        let rewards = [0.3, 1.7, 0.9, 2.4];
        let a = compute_advantages(&rewards, 1e-6);
        let shifted: Vec<f64> = rewards.iter().map(|r| r + 5.5).collect();
        let b = compute_advantages(&shifted, 1e-6);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_penalty_examples() {
        assert_eq!(kl_penalty_term(-1.5, -1.5), 0.0);
        // ratio pi_ref/pi_theta = 2
        let got = kl_penalty_term(2f64.ln(), 0.0);
        assert!((got - (2.0 - 2f64.ln() - 1.0)).abs() < 1e-12);
        assert!((got - 0.3068528194400547).abs() < 1e-12);
        // ratio 0.5
        let got = kl_penalty_term(0.5f64.ln(), 0.0);
        assert!((got - (0.5 + 2f64.ln() - 1.0)).abs() < 1e-12);
        assert!((got - 0.1931471805599453).abs() < 1e-12);
        // clamp guards the exponential
        let clamped = kl_penalty_term(40.0, 0.0);
        assert_eq!(clamped, KL_CLAMP.exp() - KL_CLAMP - 1.0);
        assert!(clamped.is_finite());
    }

    fn tiny_params() -> PolicyParams {
        PolicyParams::init(
            PolicyConfig {
                vocab_size: 10,
                dim: 6,
                max_len: 24,
            },
            17,
        )
    }

    fn manual_group(params: &PolicyParams, g: usize) -> RolloutGroup {
        let prompt_ids = vec![1u32, 8, 9];
        let mut rollouts = Vec::new();
        for k in 0..g {
            let mut rng = derive_rng(3, "test-rollout", &[k as u64]);
            rollouts.push(
                crate::policy::sample(params, &prompt_ids, 1.0, 6, &mut rng).unwrap(),
            );
        }
        let rewards: Vec<f64> = (0..g).map(|k| 0.1 * k as f64).collect();
        let advantages = compute_advantages(&rewards, 1e-6);
        RolloutGroup {
            sample_id: "s".into(),
            prompt_ids,
            rollouts,
            rewards,
            advantages,
        }
    }

    #[test]
    fn objective_at_identity_policies_is_mean_advantage() {
        let params = tiny_params();
        let group = manual_group(&params, 4);
        let step = grpo_objective(&params, &params, &group, 0.04, None).unwrap();
        let mean_adv = group.advantages.iter().sum::<f64>() / 4.0;
        assert!(
            (step.objective - mean_adv).abs() < 1e-10,
            "{} vs {mean_adv}",
            step.objective
        );
        // standardized advantages sum to ~0
        assert!(mean_adv.abs() < 1e-10);
        // and the kl term is exactly zero at theta == ref
        assert_eq!(step.kl_sum, 0.0);
    }

    #[test]
    fn objective_gradient_reduces_to_weighted_logprob_gradient() {
        let params = tiny_params();
        let group = manual_group(&params, 3);
        let step = grpo_objective(&params, &params, &group, 0.0, None).unwrap();

        let mut expected = params.grads_zero();
        for (k, rollout) in group.rollouts.iter().enumerate() {
            if rollout.tokens.is_empty() {
                continue;
            }
            let w = group.advantages[k] / rollout.tokens.len() as f64;
            let weights = vec![w; rollout.tokens.len()];
            let (_, g) = crate::policy::grad_weighted_logprob(
                &params,
                &group.prompt_ids,
                &rollout.tokens,
                &weights,
            )
            .unwrap();
            expected.accumulate(&g, 1.0 / group.rollouts.len() as f64);
        }
        for ((_, a), (_, b)) in step.grads.fields().into_iter().zip(expected.fields()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-10, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn equal_rewards_and_zero_beta_give_zero_gradient() {
        let params = tiny_params();
        let mut group = manual_group(&params, 4);
        group.rewards = vec![0.5; 4];
        group.advantages = compute_advantages(&group.rewards, 1e-6);
        let step = grpo_objective(&params, &params, &group, 0.0, None).unwrap();
        for (_, v) in step.grads.fields() {
            assert!(v.iter().all(|&x| x == 0.0));
        }
    }
}
