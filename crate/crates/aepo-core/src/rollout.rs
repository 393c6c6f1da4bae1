//! Group sampling from the frozen snapshot policy.
//!
//! For each prompt, G responses are drawn independently with temperature and
//! nucleus truncation. Alongside the tokens, each rollout records the
//! snapshot log-probability of every sampled token under the untruncated
//! distribution (the probability-ratio objective is defined on model
//! distributions, not on the truncated sampler) and the per-position policy
//! entropy, which the scorer turns into stage means.
//!
//! Generation stops at ⟨END⟩ or at the response-length cap; responses that
//! hit the cap without ⟨END⟩ simply fail segmentation and are scored as
//! malformed.

use serde::Serialize;
use std::io::Write;
use std::path::Path;

use crate::policy::{sample_token, Decoder, PolicyError, PolicyParams};
use crate::reward::RewardBreakdown;
use crate::seeds;
use crate::stages::{segment_response, FormatError, StageSpans};
use crate::tasks::{render_prompt, TaskInstance};
use crate::vocab::{Vocab, TOK_END};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub group_size: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub max_response_len: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            group_size: 5,
            temperature: 1.0,
            top_p: 0.99,
            max_response_len: 24,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), RolloutError> {
        if self.group_size < 2 {
            return Err(RolloutError::Invalid(format!(
                "group_size {} needs at least 2 for group statistics",
                self.group_size
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(RolloutError::Invalid(format!(
                "training-time temperature {} must be positive",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(RolloutError::Invalid(format!(
                "top_p {} outside (0, 1]",
                self.top_p
            )));
        }
        if self.max_response_len == 0 {
            return Err(RolloutError::Invalid("max_response_len must be positive".into()));
        }
        Ok(())
    }
}

/// One sampled response with everything later phases need. `spans` keeps the
/// segmentation outcome, including failure; `breakdown` is filled by the
/// scorer.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub prompt_id: u64,
    /// Sampled tokens only; the thinking cue at the end of the prompt is not
    /// part of the response.
    pub response_tokens: Vec<u32>,
    /// Snapshot log-probabilities of the sampled tokens, untruncated.
    pub old_logprobs: Vec<f64>,
    /// Policy entropy of each sampling distribution, in nats.
    pub entropies: Vec<f64>,
    pub spans: Result<StageSpans, FormatError>,
    pub breakdown: Option<RewardBreakdown>,
}

#[derive(Debug, thiserror::Error)]
pub enum RolloutError {
    #[error("invalid sampling config: {0}")]
    Invalid(String),
    #[error("prompt {prompt_len} + response cap {max_response_len} exceeds context {context_len}")]
    ContextOverflow {
        prompt_len: usize,
        max_response_len: usize,
        context_len: usize,
    },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Samples G rollouts for one prompt from the snapshot parameters.
/// Deterministic in (seed, step, instance id, sample index); the prompt is
/// encoded once and the decoder forked per sample.
pub fn sample_group(
    params_old: &PolicyParams,
    instance: &TaskInstance,
    config: &SamplingConfig,
    vocab: &Vocab,
    seed: u64,
    step: u64,
) -> Result<Vec<Rollout>, RolloutError> {
    config.validate()?;
    let prompt = render_prompt(instance);
    let context_len = params_old.config.context_len;
    if prompt.len() + config.max_response_len > context_len {
        return Err(RolloutError::ContextOverflow {
            prompt_len: prompt.len(),
            max_response_len: config.max_response_len,
            context_len,
        });
    }

    let mut base = Decoder::new(params_old)?;
    let mut prompt_dist = None;
    for &tok in &prompt {
        prompt_dist = Some(base.feed(tok)?);
    }
    let prompt_dist = prompt_dist.expect("prompts are never empty");

    let mut group = Vec::with_capacity(config.group_size);
    for sample in 0..config.group_size {
        let mut rng = seeds::rollout_stream(seed, step, instance.id, sample as u64);
        let mut decoder = base.clone();
        let mut dist = prompt_dist.clone();
        let mut tokens = Vec::new();
        let mut old_logprobs = Vec::new();
        let mut entropies = Vec::new();
        loop {
            let tok = sample_token(&dist, config.temperature, config.top_p, &mut rng)?;
            tokens.push(tok);
            old_logprobs.push(dist.probs()[tok as usize].ln());
            entropies.push(dist.entropy());
            if tok == TOK_END || tokens.len() == config.max_response_len {
                break;
            }
            dist = decoder.feed(tok)?;
        }
        let spans = segment_response(&tokens, vocab);
        group.push(Rollout {
            prompt_id: instance.id,
            response_tokens: tokens,
            old_logprobs,
            entropies,
            spans,
            breakdown: None,
        });
    }
    Ok(group)
}

#[derive(Serialize)]
struct DumpRecord<'a> {
    prompt_id: u64,
    tokens: &'a [u32],
    old_logprobs: &'a [f64],
    spans: Option<[[usize; 2]; 4]>,
    format_error: Option<String>,
    breakdown: Option<&'a RewardBreakdown>,
}

/// Writes rollouts as JSONL for offline analysis.
pub fn write_rollout_dump(path: &Path, rollouts: &[Rollout]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rollouts {
        let (spans, format_error) = match &r.spans {
            Ok(s) => (
                Some([
                    [s.thinking.start, s.thinking.end],
                    [s.draft.start, s.draft.end],
                    [s.reflection.start, s.reflection.end],
                    [s.answer.start, s.answer.end],
                ]),
                None,
            ),
            Err(e) => (None, Some(e.to_string())),
        };
        let record = DumpRecord {
            prompt_id: r.prompt_id,
            tokens: &r.response_tokens,
            old_logprobs: &r.old_logprobs,
            spans,
            format_error,
            breakdown: r.breakdown.as_ref(),
        };
        serde_json::to_writer(&mut w, &record).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{forward_distribution, init_params, layout::ParamLayout, ModelConfig};
    use crate::tasks::{generate_dataset, TaskSpec};

    fn setup() -> (PolicyParams, TaskInstance, Vocab) {
        let spec = TaskSpec::default();
        let vocab = spec.vocab();
        let (train, _) = generate_dataset(&spec).unwrap();
        let config = ModelConfig {
            vocab_size: vocab.size(),
            context_len: 128,
            hidden_dim: 16,
            n_layers: 1,
            ..ModelConfig::default()
        };
        let params = init_params(&config, 11).unwrap();
        (params, train[0].clone(), vocab)
    }

    #[test]
    fn returns_group_size_rollouts_deterministically() {
        let (params, instance, vocab) = setup();
        let config = SamplingConfig::default();
        let a = sample_group(&params, &instance, &config, &vocab, 7, 0).unwrap();
        assert_eq!(a.len(), 5);
        let b = sample_group(&params, &instance, &config, &vocab, 7, 0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.response_tokens, y.response_tokens);
            assert_eq!(x.old_logprobs, y.old_logprobs);
        }
        let c = sample_group(&params, &instance, &config, &vocab, 7, 1).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.response_tokens != y.response_tokens));
    }

    #[test]
    fn logprobs_match_a_fresh_forward_pass() {
        let (params, instance, vocab) = setup();
        let config = SamplingConfig::default();
        let group = sample_group(&params, &instance, &config, &vocab, 3, 5).unwrap();
        let prompt = render_prompt(&instance);
        for rollout in &group {
            let mut prefix = prompt.clone();
            for (t, &tok) in rollout.response_tokens.iter().enumerate() {
                let dist = forward_distribution(&params, &prefix).unwrap();
                let reference = dist.probs()[tok as usize].ln();
                assert!(
                    (reference - rollout.old_logprobs[t]).abs() < 1e-12,
                    "token {t}: {} vs {}",
                    reference,
                    rollout.old_logprobs[t]
                );
                assert!(rollout.old_logprobs[t] <= 0.0);
                prefix.push(tok);
            }
        }
    }

    #[test]
    fn end_forcing_head_yields_malformed_length_one_rollouts() {
        let (mut params, instance, vocab) = setup();
        let layout = ParamLayout::of(&params.config);
        params.values[layout.head_b.clone()][TOK_END as usize] = 50.0;
        let config = SamplingConfig::default();
        let group = sample_group(&params, &instance, &config, &vocab, 1, 0).unwrap();
        for rollout in &group {
            assert_eq!(rollout.response_tokens, vec![TOK_END]);
            assert!(rollout.spans.is_err());
        }
    }

    #[test]
    fn context_overflow_is_rejected() {
        let (params, instance, vocab) = setup();
        let config = SamplingConfig {
            max_response_len: 1000,
            ..SamplingConfig::default()
        };
        assert!(matches!(
            sample_group(&params, &instance, &config, &vocab, 0, 0),
            Err(RolloutError::ContextOverflow { .. })
        ));
    }
}
