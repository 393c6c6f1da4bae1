//! Shared fixtures for the benchmark targets: a warm policy, a scored
//! rollout batch, and the toy dataset they run against, all built from
//! fixed seeds so timings are comparable across runs.

use aepo_core::optimizer::ScoredGroup;
use aepo_core::policy::{init_params, ModelConfig, PolicyParams};
use aepo_core::reward::{score_rollout, RewardConfig};
use aepo_core::rollout::{sample_group, SamplingConfig};
use aepo_core::tasks::{generate_dataset, TaskInstance, TaskSpec};
use aepo_core::vocab::Vocab;

pub const SEED: u64 = 9;

pub struct Bench {
    pub params: PolicyParams,
    pub vocab: Vocab,
    pub instances: Vec<TaskInstance>,
    pub sampling: SamplingConfig,
    pub reward: RewardConfig,
}

impl Bench {
    /// Policy and data at the shipped toy defaults.
    pub fn at_defaults() -> Self {
        let spec = TaskSpec::default();
        let vocab = spec.vocab();
        let (instances, _) = generate_dataset(&spec).expect("default spec is valid");
        let model = ModelConfig {
            vocab_size: vocab.size().max(ModelConfig::default().vocab_size),
            ..ModelConfig::default()
        };
        let params = init_params(&model, SEED).expect("default model is valid");
        Self {
            params,
            vocab,
            instances,
            sampling: SamplingConfig::default(),
            reward: RewardConfig::default(),
        }
    }

    /// One scored group per requested prompt, sampled from the fixture
    /// policy.
    pub fn scored_groups(&self, prompts: usize) -> Vec<ScoredGroup> {
        self.instances[..prompts]
            .iter()
            .map(|instance| {
                let mut rollouts =
                    sample_group(&self.params, instance, &self.sampling, &self.vocab, SEED, 0)
                        .expect("fixture sampling succeeds");
                for r in &mut rollouts {
                    r.breakdown = Some(score_rollout(r, instance, &self.reward));
                }
                ScoredGroup {
                    instance: instance.clone(),
                    rollouts,
                }
            })
            .collect()
    }
}
