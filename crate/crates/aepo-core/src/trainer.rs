//! Training orchestration: supervised format warm-up, the RL loop, greedy
//! evaluation, checkpointing, and run logging.
//!
//! One RL step is: snapshot the policy, sample a group per scheduled
//! prompt from the snapshot, score every rollout, assemble the selected
//! objective, take one optimizer update at the warm-up-scheduled learning
//! rate. The snapshot is refreshed exactly once per step, so every ratio
//! inside a step compares against the same frozen parameters and a single
//! gradient step keeps the ratios near one.
//!
//! The run log is one JSON record per step with a fixed field set
//! (`step, mean_reward, h_t, h_r, loss_total, loss_surrogate, loss_reg,
//! eval_acc`). Wall time is deliberately not recorded there: identical
//! config and seed must produce byte-identical log files.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::optimizer::{
    aepo_loss_with, Adam, ClipConfig, ObjectiveConfig, OptimError, ScoredGroup,
};
use crate::policy::checkpoint::save_params;
use crate::policy::model::record_sequence;
use crate::policy::{sample_token, Decoder, ParamNodes, PolicyError, PolicyParams};
use crate::reward::{score_rollout, RewardConfig};
use crate::rollout::{sample_group, RolloutError, SamplingConfig};
use crate::seeds;
use crate::stages::{segment_response, FormatError, StageSpans};
use crate::tape::Tape;
use crate::tasks::{format_trace, render_prompt, verify, TaskError, TaskInstance};
use crate::vocab::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Aepo,
    Grpo,
    Dapo,
}

impl Algorithm {
    pub const NAMES: [&'static str; 3] = ["aepo", "grpo", "dapo"];
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Algorithm::Aepo => "aepo",
            Algorithm::Grpo => "grpo",
            Algorithm::Dapo => "dapo",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "aepo" => Ok(Algorithm::Aepo),
            "grpo" => Ok(Algorithm::Grpo),
            "dapo" => Ok(Algorithm::Dapo),
            other => Err(format!(
                "unknown algorithm {other:?}; expected one of {}",
                Self::NAMES.join(", ")
            )),
        }
    }
}

/// RL loop configuration. The defaults are tuned for the desk-scale model;
/// the reference full-scale run used 64 prompts per step at learning rate
/// 1e-6, which would not move a model this small in any reasonable budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::algorithm")]
    pub algorithm: Algorithm,
    #[serde(default = "defaults::prompts_per_step")]
    pub prompts_per_step: usize,
    #[serde(default = "defaults::group_size")]
    pub group_size: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    /// Linear learning-rate ramp length in steps.
    #[serde(default = "defaults::warmup_steps")]
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub seed: u64,
    #[serde(default = "defaults::eval_every")]
    pub eval_every: usize,
    /// Regularizer component toggles; only read when `algorithm` is `aepo`.
    #[serde(default = "defaults::on")]
    pub rif_on: bool,
    #[serde(default = "defaults::on")]
    pub ae_on: bool,
    #[serde(default = "defaults::on")]
    pub gae_on: bool,
}

mod defaults {
    use super::Algorithm;

    pub fn algorithm() -> Algorithm {
        Algorithm::Aepo
    }
    pub fn prompts_per_step() -> usize {
        16
    }
    pub fn group_size() -> usize {
        5
    }
    pub fn lr() -> f64 {
        3e-4
    }
    pub fn warmup_steps() -> usize {
        10
    }
    pub fn eval_every() -> usize {
        50
    }
    pub fn on() -> bool {
        true
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.total_steps == 0 {
            return Err(TrainError::Invalid("total_steps must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(TrainError::Invalid(format!("lr {} must be positive", self.lr)));
        }
        if self.prompts_per_step == 0 {
            return Err(TrainError::Invalid("prompts_per_step must be at least 1".into()));
        }
        if self.group_size < 2 {
            return Err(TrainError::Invalid(
                "group_size must be at least 2 for group statistics".into(),
            ));
        }
        if self.eval_every == 0 {
            return Err(TrainError::Invalid("eval_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything one run needs besides the datasets. `train.group_size` is
/// authoritative; the sampling section's group size is overridden by it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSettings {
    pub train: TrainConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub clip: ClipConfig,
}

impl TrainSettings {
    pub fn effective_sampling(&self) -> SamplingConfig {
        let mut sampling = self.sampling.clone();
        sampling.group_size = self.train.group_size;
        sampling
    }

    /// Reward config actually used for scoring. The contribution bonus is
    /// part of the entropy-with-contribution component, so it only shapes
    /// rewards when that component is active.
    pub fn effective_reward(&self) -> RewardConfig {
        let mut reward = self.reward.clone();
        let rif_active = self.train.algorithm == Algorithm::Aepo && self.train.rif_on;
        reward.c_as_reward = reward.c_as_reward && rif_active;
        reward
    }

    pub fn objective(&self) -> ObjectiveConfig {
        match self.train.algorithm {
            Algorithm::Aepo => {
                let mut cfg =
                    ObjectiveConfig::adaptive(self.clip.clone(), self.effective_reward());
                cfg.rif_on = self.train.rif_on;
                cfg.ae_on = self.train.ae_on;
                cfg.gae_on = self.train.gae_on;
                cfg
            }
            Algorithm::Grpo => ObjectiveConfig::group_relative(self.clip.eps_low),
            Algorithm::Dapo => ObjectiveConfig::token_clipped(self.clip.clone()),
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<(), TrainError> {
        self.train.validate()?;
        self.effective_sampling()
            .validate()
            .map_err(|e| TrainError::Invalid(e.to_string()))?;
        self.reward
            .validate(vocab_size)
            .map_err(|e| TrainError::Invalid(e.to_string()))?;
        self.clip.validate().map_err(|e| TrainError::Invalid(e.to_string()))?;
        Ok(())
    }
}

/// One run-log line. Field order and names are the on-disk contract.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub step: u64,
    pub mean_reward: f64,
    pub h_t: f64,
    pub h_r: f64,
    pub loss_total: f64,
    pub loss_surrogate: f64,
    pub loss_reg: f64,
    pub eval_acc: Option<f64>,
}

pub struct TrainOutcome {
    pub params: PolicyParams,
    pub log: Vec<RunRecord>,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Invalid(String),
    #[error("warm-up insufficient: parse rate {parse_rate:.3} below {threshold:.2}")]
    WarmupInsufficient { parse_rate: f64, threshold: f64 },
    #[error("non-finite loss at step {step}: surrogate {surrogate}, regularizer {regularizer}")]
    NonFiniteLoss {
        step: u64,
        surrogate: f64,
        regularizer: f64,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Constant learning rate after a linear ramp over the first
/// `warmup_steps` steps.
pub fn learning_rate(step: usize, config: &TrainConfig) -> f64 {
    if config.warmup_steps == 0 {
        return config.lr;
    }
    let ramp = (step + 1) as f64 / config.warmup_steps as f64;
    config.lr * ramp.min(1.0)
}

const SFT_BATCH: usize = 8;
const SFT_LR: f64 = 3e-3;
const PARSE_THRESHOLD: f64 = 0.99;

/// Behavior-cloning warm-up on synthetic format traces.
///
/// The policy starts from random parameters and cannot follow the
/// four-stage format, so it is first trained to imitate traces whose
/// draft and answer options are drawn uniformly at random: the format
/// becomes near-deterministic while the answer distribution stays
/// uninformed. The last quarter of `dataset` is held out from updates
/// and used as the parse probe; with zero steps the parameters are
/// returned unchanged and the probe is skipped.
pub fn sft_warmup(
    params: &PolicyParams,
    dataset: &[TaskInstance],
    vocab: &Vocab,
    n_steps: usize,
    seed: u64,
) -> Result<PolicyParams, TrainError> {
    if n_steps == 0 {
        return Ok(params.clone());
    }
    if dataset.is_empty() {
        return Err(TrainError::Invalid("empty warm-up dataset".into()));
    }
    let probe_len = (dataset.len() / 4).max(1).min(dataset.len().saturating_sub(1));
    let split = dataset.len() - probe_len;
    let (update_set, probe_set) = if split == 0 {
        (dataset, dataset)
    } else {
        (&dataset[..split], &dataset[split..])
    };

    let current = sft_updates(params, update_set, n_steps, seed)?;
    let parse_rate = format_parse_rate(&current, probe_set, vocab)?;
    if parse_rate < PARSE_THRESHOLD {
        return Err(TrainError::WarmupInsufficient {
            parse_rate,
            threshold: PARSE_THRESHOLD,
        });
    }
    Ok(current)
}

/// The gradient phase of warm-up, without the probe gate.
fn sft_updates(
    params: &PolicyParams,
    update_set: &[TaskInstance],
    n_steps: usize,
    seed: u64,
) -> Result<PolicyParams, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "sft-warmup"));
    let mut current = params.clone();
    let mut adam = Adam::new(current.values.len());
    for step in 0..n_steps {
        // Linear decay to a tenth of the base rate keeps long warm-ups from
        // oscillating once imitation is nearly perfect.
        let lr = SFT_LR * (1.0 - 0.9 * step as f64 / n_steps as f64);
        let mut tape = Tape::new();
        let nodes = ParamNodes::record(&mut tape, &current)?;
        let mut nll_terms = Vec::with_capacity(SFT_BATCH);
        let mut token_count = 0usize;
        for _ in 0..SFT_BATCH {
            let instance = &update_set[rng.gen_range(0..update_set.len())];
            let trace = format_trace(instance, &mut rng);
            let mut seq = render_prompt(instance);
            let response_start = seq.len();
            seq.extend_from_slice(&trace);
            token_count += trace.len();
            let fwd = record_sequence(&mut tape, &nodes, &current.config, &seq, response_start);
            let total_logp = tape.sum_all(fwd.picked_logp);
            nll_terms.push(tape.scale(total_logp, -1.0));
        }
        let mut acc = nll_terms[0];
        for &term in &nll_terms[1..] {
            acc = tape.add(acc, term);
        }
        let loss = tape.scale(acc, 1.0 / token_count as f64);
        let grads = tape.backward(loss);
        let gradient = nodes.collect_gradient(&grads);
        adam.step(&mut current.values, &gradient, lr);
    }
    Ok(current)
}

/// Fraction of probe prompts whose greedy decode segments cleanly.
pub fn format_parse_rate(
    params: &PolicyParams,
    probes: &[TaskInstance],
    vocab: &Vocab,
) -> Result<f64, TrainError> {
    let mut parsed = 0usize;
    for instance in probes {
        let response = greedy_decode(params, instance)?;
        if segment_response(&response, vocab).is_ok() {
            parsed += 1;
        }
    }
    Ok(parsed as f64 / probes.len().max(1) as f64)
}

/// Zero-temperature decode of one prompt, stopping at the end marker or
/// when the context would overflow.
pub fn greedy_decode(
    params: &PolicyParams,
    instance: &TaskInstance,
) -> Result<Vec<u32>, TrainError> {
    let prompt = render_prompt(instance);
    let mut decoder = Decoder::new(params)?;
    let mut dist = None;
    for &tok in &prompt {
        dist = Some(decoder.feed(tok)?);
    }
    let mut dist = dist.expect("prompts are never empty");
    // Greedy decoding draws nothing from the stream; the rng is inert.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let budget = params.config.context_len - prompt.len();
    let mut response = Vec::new();
    for _ in 0..budget {
        let tok = sample_token(&dist, 0.0, 1.0, &mut rng)?;
        response.push(tok);
        if tok == crate::vocab::TOK_END || response.len() == budget {
            break;
        }
        dist = decoder.feed(tok)?;
    }
    Ok(response)
}

/// One graded greedy decode.
#[derive(Debug, Clone)]
pub struct EvalDecode {
    pub instance_id: u64,
    pub response: Vec<u32>,
    pub spans: Result<StageSpans, FormatError>,
    pub correct: bool,
}

/// Grades a decoded response: well-formed and answering with the label's
/// option. Malformed decodes are wrong by definition.
pub fn grade(response: &[u32], instance: &TaskInstance, vocab: &Vocab) -> EvalDecode {
    let spans = segment_response(response, vocab);
    let correct = match &spans {
        Ok(spans) => match vocab.option_index(response[spans.answer.start]) {
            Some(option) => verify(option, instance),
            None => false,
        },
        Err(_) => false,
    };
    EvalDecode {
        instance_id: instance.id,
        response: response.to_vec(),
        spans,
        correct,
    }
}

pub fn decode_eval_set(
    params: &PolicyParams,
    eval_set: &[TaskInstance],
    vocab: &Vocab,
) -> Result<Vec<EvalDecode>, TrainError> {
    eval_set
        .iter()
        .map(|instance| Ok(grade(&greedy_decode(params, instance)?, instance, vocab)))
        .collect()
}

/// Held-out accuracy under greedy decoding.
pub fn evaluate(
    params: &PolicyParams,
    eval_set: &[TaskInstance],
    vocab: &Vocab,
) -> Result<f64, TrainError> {
    if eval_set.is_empty() {
        return Ok(0.0);
    }
    let decodes = decode_eval_set(params, eval_set, vocab)?;
    let correct = decodes.iter().filter(|d| d.correct).count();
    Ok(correct as f64 / eval_set.len() as f64)
}

/// Sink for run artifacts: the append-only log, periodic checkpoints, and
/// the manifest tying them to config and data.
struct RunDir {
    root: PathBuf,
    log: fs::File,
}

impl RunDir {
    fn create(root: &Path, manifest: &serde_json::Value) -> Result<Self, TrainError> {
        fs::create_dir_all(root.join("checkpoints"))?;
        let manifest_text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
        fs::write(root.join("manifest.json"), manifest_text + "\n")?;
        let log = fs::File::create(root.join("runlog.jsonl"))?;
        Ok(Self {
            root: root.to_path_buf(),
            log,
        })
    }

    fn append(&mut self, record: &RunRecord) -> Result<(), TrainError> {
        let line = serde_json::to_string(record).expect("record serializes");
        self.log.write_all(line.as_bytes())?;
        self.log.write_all(b"\n")?;
        Ok(())
    }

    fn checkpoint(&self, step: u64, params: &PolicyParams) -> Result<(), TrainError> {
        let path = self.root.join("checkpoints").join(format!("step_{step:05}.bin"));
        save_params(&path, params)?;
        Ok(())
    }
}

/// Runs the RL loop from warmed-up parameters. When `out_dir` is given,
/// writes `runlog.jsonl`, `checkpoints/step_*.bin` on the eval cadence,
/// and `manifest.json`; the same log is returned in memory either way.
pub fn train(
    params: PolicyParams,
    train_set: &[TaskInstance],
    eval_set: &[TaskInstance],
    vocab: &Vocab,
    settings: &TrainSettings,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    settings.validate(vocab.size())?;
    if train_set.is_empty() {
        return Err(TrainError::Invalid("empty training set".into()));
    }
    let config = &settings.train;
    let sampling = settings.effective_sampling();
    let reward_cfg = settings.effective_reward();
    let objective = settings.objective();

    let mut run_dir = match out_dir {
        Some(root) => {
            let manifest = serde_json::json!({
                "config": settings,
                "seed": config.seed,
                "dataset_hash": crate::tasks::dataset_hash(train_set, eval_set),
            });
            Some(RunDir::create(root, &manifest)?)
        }
        None => None,
    };

    let mut current = params;
    let mut adam = Adam::new(current.values.len());
    let mut log = Vec::with_capacity(config.total_steps);
    for step in 0..config.total_steps {
        let snapshot = current.clone();
        let prompts = schedule_prompts(train_set, config, step);

        let groups: Vec<ScoredGroup> = prompts
            .par_iter()
            .map(|&idx| {
                let instance = &train_set[idx];
                let mut rollouts = sample_group(
                    &snapshot,
                    instance,
                    &sampling,
                    vocab,
                    config.seed,
                    step as u64,
                )?;
                for rollout in rollouts.iter_mut() {
                    rollout.breakdown = Some(score_rollout(rollout, instance, &reward_cfg));
                }
                Ok(ScoredGroup {
                    instance: instance.clone(),
                    rollouts,
                })
            })
            .collect::<Result<_, TrainError>>()?;

        let loss = aepo_loss_with(&groups, &current, &objective)?;
        let b = loss.breakdown;
        if !b.total.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step: step as u64,
                surrogate: b.surrogate,
                regularizer: b.regularizer,
            });
        }
        adam.step(&mut current.values, &loss.gradient, learning_rate(step, config));

        let n_rollouts: usize = groups.iter().map(|g| g.rollouts.len()).sum();
        let reward_sum: f64 = groups
            .iter()
            .flat_map(|g| &g.rollouts)
            .map(|r| r.breakdown.as_ref().expect("scored above").shaped_reward)
            .sum();
        let at_cadence = (step + 1) % config.eval_every == 0 || step + 1 == config.total_steps;
        let eval_acc = if at_cadence {
            Some(evaluate(&current, eval_set, vocab)?)
        } else {
            None
        };

        let record = RunRecord {
            step: step as u64,
            mean_reward: reward_sum / n_rollouts as f64,
            h_t: b.h_t_mean,
            h_r: b.h_r_mean,
            loss_total: b.total,
            loss_surrogate: b.surrogate,
            loss_reg: b.regularizer,
            eval_acc,
        };
        if let Some(dir) = run_dir.as_mut() {
            dir.append(&record)?;
            if at_cadence {
                dir.checkpoint(step as u64, &current)?;
            }
        }
        log.push(record);
    }

    Ok(TrainOutcome {
        params: current,
        log,
    })
}

/// Deterministic per-step prompt schedule: a seeded shuffle of the train
/// indices, cycled if the batch is larger than the dataset.
fn schedule_prompts(train_set: &[TaskInstance], config: &TrainConfig, step: usize) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..train_set.len()).collect();
    let tag = format!("prompt-schedule-{step}");
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(config.seed, &tag));
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
    (0..config.prompts_per_step)
        .map(|i| indices[i % indices.len()])
        .collect()
}

pub fn write_runlog(path: &Path, log: &[RunRecord]) -> Result<(), TrainError> {
    let mut out = String::new();
    for record in log {
        out.push_str(&serde_json::to_string(record).expect("record serializes"));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_runlog(path: &Path) -> Result<Vec<RunRecord>, TrainError> {
    let text = fs::read_to_string(path)?;
    let mut log = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let record: RunRecord = serde_json::from_str(line).map_err(|e| {
            TrainError::Invalid(format!("runlog line {}: {e}", i + 1))
        })?;
        log.push(record);
    }
    Ok(log)
}
