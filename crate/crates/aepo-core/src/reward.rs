//! Sequence-level scoring: correctness, contribution shaping, the
//! information-style regularizer, and the gated adaptive entropy bonus.
//!
//! For one staged rollout with draft option D, answer option A, label L and
//! stage-mean entropies h̄_T, h̄_R:
//!
//! - contribution C rates what the reflection changed:
//!   (D=L, A=L) → 0.4, (D≠L, A=L) → 0.6, (D≠L, A≠L) → 0, (D=L, A≠L) → −0.3;
//! - the regularizer couples reflection entropy and C:
//!   `l_ib = ∓h̄_R − β·C` (sign selected by [`IbSign`]);
//! - the adaptive entropy bonus pulls stage entropies toward the target H*:
//!   `f_ae(h̄) = −|h̄ − H*|`, summed over thinking and reflection and gated
//!   to zero unless the answer is correct;
//! - the per-sequence objective is `l_seq = l_ib − f_gae`, minimized;
//! - the scalar training reward is `correct_reward·1_correct + C` (the C
//!   term is the `c_as_reward` fold, on by default), or `format_penalty`
//!   when the rollout does not parse.
//!
//! Malformed rollouts keep all-zero regularizers so group statistics stay
//! over a constant group size.

use serde::{Deserialize, Serialize};

use crate::rollout::Rollout;
use crate::stages::{stage_entropies, StageSpans};
use crate::tasks::TaskInstance;

/// Direction of the reflection-entropy term inside `l_ib`. The two readings
/// disagree about whether compressing input information should raise or
/// lower reflection entropy, so both are selectable; `Prose` (minimizing
/// `l_ib` raises entropy) is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IbSign {
    Prose,
    Figure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub beta: f64,
    /// Target stage-mean entropy in nats.
    pub h_star: f64,
    /// Fold the contribution value into the scalar reward so it reaches the
    /// gradient through the advantages.
    pub c_as_reward: bool,
    pub ib_sign: IbSign,
    pub correct_reward: f64,
    pub format_penalty: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            h_star: 0.67,
            c_as_reward: true,
            ib_sign: IbSign::Prose,
            correct_reward: 1.0,
            format_penalty: 0.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<(), String> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(format!("beta {} must be nonnegative", self.beta));
        }
        let limit = (vocab_size as f64).ln();
        if !(self.h_star > 0.0 && self.h_star < limit) {
            return Err(format!(
                "h_star {} outside (0, ln {vocab_size} = {limit:.4})",
                self.h_star
            ));
        }
        Ok(())
    }
}

/// Every scored quantity of one rollout. `l_seq` is the per-sequence
/// minimization target; `shaped_reward` is the scalar fed to the advantage
/// statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub correct: bool,
    pub c_value: f64,
    pub h_t: f64,
    pub h_r: f64,
    pub f_ae_t: f64,
    pub f_ae_r: f64,
    pub f_gae: f64,
    pub l_ib: f64,
    pub l_seq: f64,
    pub shaped_reward: f64,
}

impl RewardBreakdown {
    /// All-zero regularizers; what a malformed rollout receives.
    fn malformed(config: &RewardConfig) -> Self {
        Self {
            correct: false,
            c_value: 0.0,
            h_t: 0.0,
            h_r: 0.0,
            f_ae_t: 0.0,
            f_ae_r: 0.0,
            f_gae: 0.0,
            l_ib: 0.0,
            l_seq: 0.0,
            shaped_reward: config.format_penalty,
        }
    }
}

/// True iff the answer-stage option token names the label.
pub fn correctness(spans: &StageSpans, response: &[u32], instance: &TaskInstance) -> bool {
    option_index(spans.answer_token(response), instance) == Some(instance.label)
}

/// True iff the draft-stage option token names the label.
pub fn draft_correctness(spans: &StageSpans, response: &[u32], instance: &TaskInstance) -> bool {
    option_index(spans.draft_token(response), instance) == Some(instance.label)
}

fn option_index(token: u32, instance: &TaskInstance) -> Option<usize> {
    instance.option_tokens.iter().position(|&t| t == token)
}

/// Contribution of the reflection stage, judged by the draft-to-answer
/// transition.
pub fn contribution_indicator(draft_correct: bool, answer_correct: bool) -> f64 {
    match (draft_correct, answer_correct) {
        (true, true) => 0.4,
        (false, true) => 0.6,
        (false, false) => 0.0,
        (true, false) => -0.3,
    }
}

/// Compression-vs-retention regularizer over reflection entropy and
/// contribution.
pub fn ib_loss(h_r: f64, c_value: f64, config: &RewardConfig) -> f64 {
    match config.ib_sign {
        IbSign::Prose => -h_r - config.beta * c_value,
        IbSign::Figure => h_r - config.beta * c_value,
    }
}

/// Negative absolute distance of a stage-mean entropy from the target;
/// maximal (zero) exactly at `h_star`.
pub fn adaptive_entropy(h_bar: f64, h_star: f64) -> f64 {
    -(h_bar - h_star).abs()
}

/// Sum of the two stage bonuses, gated to zero on incorrect answers.
pub fn gated_adaptive_entropy(f_ae_t: f64, f_ae_r: f64, correct: bool) -> f64 {
    if correct {
        f_ae_t + f_ae_r
    } else {
        0.0
    }
}

/// Per-sequence minimization target.
pub fn sequence_objective(l_ib: f64, f_gae: f64) -> f64 {
    l_ib - f_gae
}

/// Scalar reward entering the group advantage statistics.
pub fn shaped_reward(
    correct: bool,
    c_value: f64,
    parse_ok: bool,
    config: &RewardConfig,
) -> f64 {
    if !parse_ok {
        return config.format_penalty;
    }
    let base = if correct { config.correct_reward } else { 0.0 };
    base + if config.c_as_reward { c_value } else { 0.0 }
}

/// Fills a complete [`RewardBreakdown`] for one rollout; malformed rollouts
/// are absorbed into the all-zero-regularizer case rather than erroring.
pub fn score_rollout(
    rollout: &Rollout,
    instance: &TaskInstance,
    config: &RewardConfig,
) -> RewardBreakdown {
    let spans = match &rollout.spans {
        Ok(spans) => spans,
        Err(_) => return RewardBreakdown::malformed(config),
    };
    let answer_ok = correctness(spans, &rollout.response_tokens, instance);
    let draft_ok = draft_correctness(spans, &rollout.response_tokens, instance);
    let c_value = contribution_indicator(draft_ok, answer_ok);
    let stage = stage_entropies(&rollout.entropies, spans)
        .expect("valid spans lie within the entropy sequence");
    let f_ae_t = adaptive_entropy(stage.h_thinking, config.h_star);
    let f_ae_r = adaptive_entropy(stage.h_reflection, config.h_star);
    let f_gae = gated_adaptive_entropy(f_ae_t, f_ae_r, answer_ok);
    let l_ib = ib_loss(stage.h_reflection, c_value, config);
    let l_seq = sequence_objective(l_ib, f_gae);
    RewardBreakdown {
        correct: answer_ok,
        c_value,
        h_t: stage.h_thinking,
        h_r: stage.h_reflection,
        f_ae_t,
        f_ae_r,
        f_gae,
        l_ib,
        l_seq,
        shaped_reward: shaped_reward(answer_ok, c_value, true, config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contribution_table_is_exact() {
        assert_eq!(contribution_indicator(true, true), 0.4);
        assert_eq!(contribution_indicator(false, true), 0.6);
        assert_eq!(contribution_indicator(true, false), -0.3);
        assert_eq!(contribution_indicator(false, false), 0.0);
    }

    #[test]
    fn ib_loss_directions() {
        let mut config = RewardConfig::default();
        assert!((ib_loss(0.5, 0.6, &config) - (-1.1)).abs() < 1e-15);
        config.ib_sign = IbSign::Figure;
        assert!((ib_loss(0.5, 0.6, &config) - (-0.1)).abs() < 1e-15);
        config.ib_sign = IbSign::Prose;
        assert_eq!(ib_loss(0.0, 0.0, &config), 0.0);
        config.ib_sign = IbSign::Figure;
        assert_eq!(ib_loss(0.0, 0.0, &config), 0.0);
    }

    #[test]
    fn adaptive_entropy_fixed_point_and_symmetry() {
        assert_eq!(adaptive_entropy(0.67, 0.67), 0.0);
        assert!((adaptive_entropy(0.0, 0.67) - (-0.67)).abs() < 1e-15);
        assert!((adaptive_entropy(1.34, 0.67) - (-0.67)).abs() < 1e-15);
        for i in 0..100 {
            let d = (i as f64) * 0.013;
            let lo = adaptive_entropy(0.67 - d, 0.67);
            let hi = adaptive_entropy(0.67 + d, 0.67);
            assert!((lo - hi).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_and_objective() {
        assert!((gated_adaptive_entropy(-0.1, -0.2, true) - (-0.3)).abs() < 1e-15);
        assert_eq!(gated_adaptive_entropy(-0.1, -0.2, false), 0.0);
        assert_eq!(gated_adaptive_entropy(0.0, 0.0, true), 0.0);
        assert!((sequence_objective(-1.1, -0.3) - (-0.8)).abs() < 1e-15);
        assert_eq!(sequence_objective(0.0, 0.0), 0.0);
        assert_eq!(sequence_objective(0.5, 0.0), 0.5);
    }

    #[test]
    fn shaped_reward_rules() {
        let config = RewardConfig::default();
        assert!((shaped_reward(true, 0.6, true, &config) - 1.6).abs() < 1e-15);
        assert_eq!(shaped_reward(false, 0.0, true, &config), 0.0);
        assert_eq!(shaped_reward(true, 0.6, false, &config), 0.0);
        let no_fold = RewardConfig {
            c_as_reward: false,
            ..config
        };
        assert_eq!(shaped_reward(true, 0.6, true, &no_fold), 1.0);
    }
}
