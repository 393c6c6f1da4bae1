//! Training objectives and the parameter update rule.
//!
//! All three objectives share one assembly path over a batch of scored
//! rollout groups:
//!
//! ```text
//! total = mean_g [ reg_g − surr_g ]
//! surr_g (token mode)    = (1/Σ_i|O_i|) Σ_i Σ_t min(r·Â, clamp(r, 1−ε_lo, 1+ε_hi)·Â)
//! surr_g (sequence mode) = (1/G) Σ_i (1/|O_i|) Σ_t min(…)
//! reg_g                  = normalized Σ_i l_seq(O_i)        (adaptive-entropy objective only)
//! ```
//!
//! with r = exp(logπ_θ − logπ_θold) per token and Â the group-standardized
//! sequence reward broadcast to the sequence's tokens. Minimizing `total`
//! maximizes the clipped surrogate while minimizing the per-sequence
//! regularizer; the regularizer's entropy terms are rebuilt on the tape so
//! their gradient flows, while contribution and correctness enter as
//! constants.
//!
//! The update rule is adaptive moment estimation with bias correction
//! (moments 0.9/0.999, epsilon 1e-8) and no weight decay.

use serde::{Deserialize, Serialize};

use crate::policy::{model::record_sequence, ParamNodes, PolicyError, PolicyParams};
use crate::reward::{IbSign, RewardConfig};
use crate::rollout::Rollout;
use crate::tape::{NodeId, Tape};
use crate::tasks::{render_prompt, TaskInstance};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            eps_low: 0.2,
            eps_high: 0.28,
        }
    }
}

impl ClipConfig {
    pub fn symmetric(eps: f64) -> Self {
        Self {
            eps_low: eps,
            eps_high: eps,
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.eps_low > 0.0 && self.eps_low < 1.0) {
            return Err(OptimError::Invalid(format!(
                "eps_low {} outside (0, 1)",
                self.eps_low
            )));
        }
        if self.eps_high < self.eps_low {
            return Err(OptimError::Invalid(format!(
                "eps_high {} below eps_low {}",
                self.eps_high, self.eps_low
            )));
        }
        Ok(())
    }
}

/// Group-standardized sequence advantages, one value per rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupAdvantages {
    pub values: Vec<f64>,
    /// All rewards equal within 1e-12; advantages forced to zero.
    pub degenerate: bool,
}

/// Scalar components of one assembled batch loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub surrogate: f64,
    pub regularizer: f64,
    /// Mean thinking-stage entropy over well-formed rollouts, for logging.
    pub h_t_mean: f64,
    /// Mean reflection-stage entropy over well-formed rollouts, for logging.
    pub h_r_mean: f64,
}

/// Loss value plus the exact gradient with respect to the parameters.
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    pub gradient: Vec<f64>,
}

/// One prompt's sampled group, scored and ready for loss assembly.
#[derive(Debug, Clone)]
pub struct ScoredGroup {
    pub instance: TaskInstance,
    pub rollouts: Vec<Rollout>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// One normalizer per group: the summed response length.
    Token,
    /// Per-sequence length normalization, averaged over the group.
    Sequence,
}

/// Everything the shared assembly path needs to realize one objective.
#[derive(Debug, Clone)]
pub struct ObjectiveConfig {
    pub clip: ClipConfig,
    pub reward: RewardConfig,
    pub norm_mode: NormMode,
    /// Keep the regularizer inside the token normalizer; the alternative
    /// averages it per sequence.
    pub reg_in_norm: bool,
    /// Regularizer component toggles: the entropy-with-contribution term,
    /// the adaptive entropy bonus, and its correctness gate.
    pub rif_on: bool,
    pub ae_on: bool,
    pub gae_on: bool,
}

impl ObjectiveConfig {
    /// Full objective: asymmetric clip, token normalization, all
    /// regularizer components active.
    pub fn adaptive(clip: ClipConfig, reward: RewardConfig) -> Self {
        Self {
            clip,
            reward,
            norm_mode: NormMode::Token,
            reg_in_norm: true,
            rif_on: true,
            ae_on: true,
            gae_on: true,
        }
    }

    /// Group-relative baseline: symmetric clip, sequence normalization, no
    /// regularizer.
    pub fn group_relative(eps: f64) -> Self {
        Self {
            clip: ClipConfig::symmetric(eps),
            reward: RewardConfig::default(),
            norm_mode: NormMode::Sequence,
            reg_in_norm: true,
            rif_on: false,
            ae_on: false,
            gae_on: false,
        }
    }

    /// Asymmetric-clip baseline: token normalization, no regularizer.
    pub fn token_clipped(clip: ClipConfig) -> Self {
        Self {
            clip,
            reward: RewardConfig::default(),
            norm_mode: NormMode::Token,
            reg_in_norm: true,
            rif_on: false,
            ae_on: false,
            gae_on: false,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OptimError {
    #[error("invalid optimizer config: {0}")]
    Invalid(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("group of {got} rollouts; need at least 2")]
    GroupTooSmall { got: usize },
    #[error("rollout not scored before loss assembly")]
    MissingScore,
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Standardizes rewards within one group: `(R − mean) / popstd`, with the
/// standard deviation floored at 1e-8. Groups whose rewards span less than
/// 1e-12 are degenerate and get all-zero advantages.
pub fn group_advantages(rewards: &[f64]) -> Result<GroupAdvantages, OptimError> {
    if rewards.len() < 2 {
        return Err(OptimError::GroupTooSmall { got: rewards.len() });
    }
    let g = rewards.len() as f64;
    let max = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = rewards.iter().cloned().fold(f64::INFINITY, f64::min);
    if max - min < 1e-12 {
        return Ok(GroupAdvantages {
            values: vec![0.0; rewards.len()],
            degenerate: true,
        });
    }
    let mean = rewards.iter().sum::<f64>() / g;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g;
    let std = var.sqrt().max(1e-8);
    Ok(GroupAdvantages {
        values: rewards.iter().map(|r| (r - mean) / std).collect(),
        degenerate: false,
    })
}

/// Probability ratio of one token under current vs snapshot policy.
pub fn importance_ratio(logprob_new: f64, logprob_old: f64) -> f64 {
    (logprob_new - logprob_old).exp()
}

/// Pessimistic clipped objective term for one token.
pub fn clipped_token_term(r: f64, adv: f64, clip: &ClipConfig) -> f64 {
    let clamped = r.clamp(1.0 - clip.eps_low, 1.0 + clip.eps_high);
    (r * adv).min(clamped * adv)
}

/// Full adaptive-entropy objective over a scored batch.
pub fn aepo_loss(
    groups: &[ScoredGroup],
    params: &PolicyParams,
    clip: &ClipConfig,
    reward_cfg: &RewardConfig,
) -> Result<LossOutput, OptimError> {
    assemble(groups, params, &ObjectiveConfig::adaptive(clip.clone(), reward_cfg.clone()))
}

/// The objective under an explicit configuration; ablation entry point.
pub fn aepo_loss_with(
    groups: &[ScoredGroup],
    params: &PolicyParams,
    config: &ObjectiveConfig,
) -> Result<LossOutput, OptimError> {
    assemble(groups, params, config)
}

/// Group-relative baseline objective.
pub fn grpo_loss(
    groups: &[ScoredGroup],
    params: &PolicyParams,
    eps: f64,
) -> Result<LossOutput, OptimError> {
    assemble(groups, params, &ObjectiveConfig::group_relative(eps))
}

/// Asymmetric-clip token-normalized baseline objective.
pub fn dapo_loss(
    groups: &[ScoredGroup],
    params: &PolicyParams,
    clip: &ClipConfig,
) -> Result<LossOutput, OptimError> {
    assemble(groups, params, &ObjectiveConfig::token_clipped(clip.clone()))
}

fn assemble(
    groups: &[ScoredGroup],
    params: &PolicyParams,
    config: &ObjectiveConfig,
) -> Result<LossOutput, OptimError> {
    config.clip.validate()?;
    if groups.is_empty() {
        return Err(OptimError::EmptyBatch);
    }
    let advantages: Vec<Vec<f64>> = groups
        .iter()
        .map(|group| {
            let rewards: Vec<f64> = group
                .rollouts
                .iter()
                .map(|r| {
                    r.breakdown
                        .as_ref()
                        .map(|b| b.shaped_reward)
                        .ok_or(OptimError::MissingScore)
                })
                .collect::<Result<_, _>>()?;
            Ok(group_advantages(&rewards)?.values)
        })
        .collect::<Result<_, OptimError>>()?;
    assemble_with_advantages(groups, &advantages, params, config)
}

/// Assembly with externally supplied advantages; the seam unit tests use to
/// pin single-token loss values.
fn assemble_with_advantages(
    groups: &[ScoredGroup],
    advantages: &[Vec<f64>],
    params: &PolicyParams,
    config: &ObjectiveConfig,
) -> Result<LossOutput, OptimError> {
    let mut tape = Tape::new();
    let nodes = ParamNodes::record(&mut tape, params)?;

    let mut surr_groups = Vec::with_capacity(groups.len());
    let mut reg_groups = Vec::with_capacity(groups.len());
    for (group, advs) in groups.iter().zip(advantages) {
        let (surr_g, reg_g) = assemble_group(&mut tape, &nodes, params, group, advs, config)?;
        surr_groups.push(surr_g);
        reg_groups.push(reg_g);
    }

    let inv_batch = 1.0 / groups.len() as f64;
    let surr_sum = sum_nodes(&mut tape, &surr_groups);
    let reg_sum = sum_nodes(&mut tape, &reg_groups);
    let surrogate = tape.scale(surr_sum, inv_batch);
    let regularizer = tape.scale(reg_sum, inv_batch);
    let total = tape.sub(regularizer, surrogate);

    let grads = tape.backward(total);
    let gradient = nodes.collect_gradient(&grads);

    let mut h_t_sum = 0.0;
    let mut h_r_sum = 0.0;
    let mut formed = 0usize;
    for rollout in groups.iter().flat_map(|g| &g.rollouts) {
        if rollout.spans.is_ok() {
            let b = rollout.breakdown.as_ref().ok_or(OptimError::MissingScore)?;
            h_t_sum += b.h_t;
            h_r_sum += b.h_r;
            formed += 1;
        }
    }
    let denom = formed.max(1) as f64;

    Ok(LossOutput {
        breakdown: LossBreakdown {
            total: tape.scalar_value(total),
            surrogate: tape.scalar_value(surrogate),
            regularizer: tape.scalar_value(regularizer),
            h_t_mean: h_t_sum / denom,
            h_r_mean: h_r_sum / denom,
        },
        gradient,
    })
}

fn assemble_group(
    tape: &mut Tape,
    nodes: &ParamNodes,
    params: &PolicyParams,
    group: &ScoredGroup,
    advantages: &[f64],
    config: &ObjectiveConfig,
) -> Result<(NodeId, NodeId), OptimError> {
    assert_eq!(group.rollouts.len(), advantages.len());
    let prompt = render_prompt(&group.instance);
    let total_tokens: usize = group.rollouts.iter().map(|r| r.response_tokens.len()).sum();

    let mut surr_per_seq = Vec::with_capacity(group.rollouts.len());
    let mut reg_per_seq: Vec<Option<NodeId>> = Vec::with_capacity(group.rollouts.len());
    let mut lens = Vec::with_capacity(group.rollouts.len());
    for (rollout, &adv) in group.rollouts.iter().zip(advantages) {
        let mut seq = prompt.clone();
        seq.extend_from_slice(&rollout.response_tokens);
        let fwd = record_sequence(tape, nodes, &params.config, &seq, prompt.len());
        let r_len = rollout.response_tokens.len();
        lens.push(r_len);

        let old = tape.leaf(r_len, 1, rollout.old_logprobs.clone());
        let delta = tape.sub(fwd.picked_logp, old);
        let ratio = tape.exp(delta);
        let unclipped = tape.scale(ratio, adv);
        let clamped = tape.clamp(
            ratio,
            1.0 - config.clip.eps_low,
            1.0 + config.clip.eps_high,
        );
        let clipped = tape.scale(clamped, adv);
        let term = tape.min_elem(unclipped, clipped);
        surr_per_seq.push(tape.sum_all(term));

        reg_per_seq.push(build_sequence_regularizer(tape, &fwd, rollout, config)?);
    }

    let surr_g = match config.norm_mode {
        NormMode::Token => {
            let s = sum_nodes(tape, &surr_per_seq);
            tape.scale(s, 1.0 / total_tokens as f64)
        }
        NormMode::Sequence => {
            let normalized: Vec<NodeId> = surr_per_seq
                .iter()
                .zip(&lens)
                .map(|(&n, &len)| tape.scale(n, 1.0 / len as f64))
                .collect();
            let s = sum_nodes(tape, &normalized);
            tape.scale(s, 1.0 / group.rollouts.len() as f64)
        }
    };

    let present: Vec<NodeId> = reg_per_seq.iter().flatten().copied().collect();
    let reg_g = if present.is_empty() {
        tape.scalar(0.0)
    } else {
        let s = sum_nodes(tape, &present);
        match (config.norm_mode, config.reg_in_norm) {
            (NormMode::Token, true) => tape.scale(s, 1.0 / total_tokens as f64),
            _ => tape.scale(s, 1.0 / group.rollouts.len() as f64),
        }
    };
    Ok((surr_g, reg_g))
}

/// Differentiable per-sequence regularizer `l_seq = l_ib − f_gae`, honoring
/// the component toggles. Malformed rollouts contribute nothing.
fn build_sequence_regularizer(
    tape: &mut Tape,
    fwd: &crate::policy::model::SeqForward,
    rollout: &Rollout,
    config: &ObjectiveConfig,
) -> Result<Option<NodeId>, OptimError> {
    let spans = match &rollout.spans {
        Ok(spans) => spans,
        Err(_) => return Ok(None),
    };
    if !config.rif_on && !config.ae_on {
        return Ok(None);
    }
    let b = rollout.breakdown.as_ref().ok_or(OptimError::MissingScore)?;
    let mut parts = Vec::new();
    if config.rif_on {
        let slice = tape.slice_rows(
            fwd.entropies,
            spans.reflection.start,
            spans.reflection.len(),
        );
        let h_r = tape.mean_all(slice);
        let signed = match config.reward.ib_sign {
            IbSign::Prose => tape.scale(h_r, -1.0),
            IbSign::Figure => h_r,
        };
        parts.push(tape.add_const(signed, -config.reward.beta * b.c_value));
    }
    if config.ae_on && (!config.gae_on || b.correct) {
        // l_seq subtracts the bonus −|h̄ − H*| per stage, so each stage
        // contributes +|h̄ − H*|.
        for span in [&spans.thinking, &spans.reflection] {
            let slice = tape.slice_rows(fwd.entropies, span.start, span.len());
            let h = tape.mean_all(slice);
            let shifted = tape.add_const(h, -config.reward.h_star);
            parts.push(tape.abs(shifted));
        }
    }
    Ok(Some(sum_nodes(tape, &parts)))
}

fn sum_nodes(tape: &mut Tape, nodes: &[NodeId]) -> NodeId {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = tape.add(acc, n);
    }
    acc
}

/// Adaptive moment estimation with bias correction and no weight decay.
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, values: &mut [f64], gradient: &[f64], lr: f64) {
        assert_eq!(values.len(), gradient.len());
        assert_eq!(values.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..values.len() {
            let g = gradient[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + Self::EPS);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{forward_distribution, init_params, ModelConfig};
    use crate::reward::score_rollout;
    use crate::rollout::sample_group;
    use crate::rollout::SamplingConfig;
    use crate::tasks::{generate_dataset, render_prompt, TaskSpec};

    #[test]
    fn advantage_standardization_examples() {
        let a = group_advantages(&[1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let expect = [2.0, -0.5, -0.5, -0.5, -0.5];
        for (got, want) in a.values.iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!(!a.degenerate);

        let b = group_advantages(&[1.0, 0.0]).unwrap();
        assert!((b.values[0] - 1.0).abs() < 1e-12);
        assert!((b.values[1] + 1.0).abs() < 1e-12);

        let c = group_advantages(&[0.3; 5]).unwrap();
        assert!(c.degenerate);
        assert!(c.values.iter().all(|&v| v == 0.0));

        assert!(matches!(
            group_advantages(&[1.0]),
            Err(OptimError::GroupTooSmall { got: 1 })
        ));
    }

    #[test]
    fn advantages_are_affine_invariant() {
        let base = [1.0, 0.2, -0.4, 0.9, 0.0];
        let a = group_advantages(&base).unwrap();
        let shifted: Vec<f64> = base.iter().map(|r| r + 5.0).collect();
        let scaled: Vec<f64> = base.iter().map(|r| r * 3.0).collect();
        for other in [shifted, scaled] {
            let b = group_advantages(&other).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ratio_and_clip_examples() {
        assert_eq!(importance_ratio(-1.0, -1.0), 1.0);
        assert!((importance_ratio(-1.0, -1.0 - (2.0f64).ln()) - 2.0).abs() < 1e-12);
        assert!((importance_ratio(-1.0 - (4.0f64).ln(), -1.0) - 0.25).abs() < 1e-12);

        let clip = ClipConfig::default();
        assert!((clipped_token_term(1.5, 1.0, &clip) - 1.28).abs() < 1e-12);
        assert!((clipped_token_term(0.5, -1.0, &clip) - (-0.8)).abs() < 1e-12);
        assert_eq!(clipped_token_term(1.0, 0.37, &clip), 0.37);
    }

    #[test]
    fn clipped_term_never_exceeds_unclipped_product() {
        let clip = ClipConfig::default();
        for i in 0..200 {
            let r = 0.05 + i as f64 * 0.017;
            for adv in [-1.7, -0.3, 0.0, 0.4, 2.1] {
                let term = clipped_token_term(r, adv, &clip);
                assert!(term <= r * adv + 1e-15);
                if (1.0 - clip.eps_low..=1.0 + clip.eps_high).contains(&r) {
                    assert!((term - r * adv).abs() < 1e-15);
                }
            }
        }
    }

    fn scored_batch(seed: u64) -> (Vec<ScoredGroup>, PolicyParams) {
        let spec = TaskSpec::default();
        let vocab = spec.vocab();
        let (train, _) = generate_dataset(&spec).unwrap();
        let config = ModelConfig {
            vocab_size: vocab.size(),
            context_len: 128,
            hidden_dim: 8,
            n_layers: 1,
            ..ModelConfig::default()
        };
        let params = init_params(&config, seed).unwrap();
        let sampling = SamplingConfig::default();
        let reward_cfg = RewardConfig::default();
        let groups: Vec<ScoredGroup> = train[..2]
            .iter()
            .map(|instance| {
                let mut rollouts =
                    sample_group(&params, instance, &sampling, &vocab, seed, 0).unwrap();
                for r in rollouts.iter_mut() {
                    r.breakdown = Some(score_rollout(r, instance, &reward_cfg));
                }
                ScoredGroup {
                    instance: instance.clone(),
                    rollouts,
                }
            })
            .collect();
        (groups, params)
    }

    #[test]
    fn breakdown_identity_and_baseline_relations() {
        let (groups, params) = scored_batch(5);
        let clip = ClipConfig::default();
        let reward_cfg = RewardConfig::default();

        let aepo = aepo_loss(&groups, &params, &clip, &reward_cfg).unwrap();
        let b = aepo.breakdown;
        assert!((b.total - (b.regularizer - b.surrogate)).abs() < 1e-12);

        let dapo = dapo_loss(&groups, &params, &clip).unwrap();
        assert!((dapo.breakdown.surrogate - b.surrogate).abs() < 1e-12);
        assert!((dapo.breakdown.total - (b.total - b.regularizer)).abs() < 1e-12);

        let grpo = grpo_loss(&groups, &params, 0.2).unwrap();
        let mut as_grpo = ObjectiveConfig::group_relative(0.2);
        as_grpo.reward = reward_cfg;
        let equiv = aepo_loss_with(&groups, &params, &as_grpo).unwrap();
        assert!((grpo.breakdown.total - equiv.breakdown.total).abs() < 1e-12);
        for (x, y) in grpo.gradient.iter().zip(&equiv.gradient) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn on_policy_degenerate_batch_has_zero_loss() {
        let (mut groups, params) = scored_batch(9);
        // Force identical rewards so every group is degenerate.
        for group in groups.iter_mut() {
            for r in group.rollouts.iter_mut() {
                if let Some(b) = r.breakdown.as_mut() {
                    b.shaped_reward = 0.5;
                }
            }
        }
        let out = grpo_loss(&groups, &params, 0.2).unwrap();
        assert_eq!(out.breakdown.total, 0.0);
        assert!(out.gradient.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn single_token_unit_advantage_costs_minus_one() {
        let spec = TaskSpec::default();
        let vocab = spec.vocab();
        let (train, _) = generate_dataset(&spec).unwrap();
        let instance = &train[0];
        let config = ModelConfig {
            vocab_size: vocab.size(),
            context_len: 64,
            hidden_dim: 8,
            n_layers: 1,
            ..ModelConfig::default()
        };
        let params = init_params(&config, 2).unwrap();
        let prompt = render_prompt(instance);
        let tok = vocab.option(0);
        let dist = forward_distribution(&params, &prompt).unwrap();
        let old_logprob = dist.probs()[tok as usize].ln();
        let rollout = Rollout {
            prompt_id: instance.id,
            response_tokens: vec![tok],
            old_logprobs: vec![old_logprob],
            entropies: vec![dist.entropy()],
            spans: Err(crate::stages::FormatError::MissingControl("end")),
            breakdown: None,
        };
        let group = ScoredGroup {
            instance: instance.clone(),
            rollouts: vec![rollout],
        };
        let out = assemble_with_advantages(
            &[group],
            &[vec![1.0]],
            &params,
            &ObjectiveConfig::group_relative(0.2),
        )
        .unwrap();
        assert!(
            (out.breakdown.total - (-1.0)).abs() < 1e-9,
            "got {}",
            out.breakdown.total
        );
    }
}
