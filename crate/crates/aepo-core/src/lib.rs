//! Desk-scale reinforcement learning laboratory for entropy-shaped policy
//! optimization over synthetic, verifiable lookup tasks.
//!
//! The crate is organized bottom-up:
//!
//! - [`vocab`] fixes the token-id layout shared by tasks and the policy;
//! - [`tape`] is the reverse-mode autodiff engine;
//! - [`policy`] holds the tiny autoregressive network, sampling and
//!   checkpoint io;
//! - [`tasks`] generates key-value lookup datasets with verifiable labels;
//! - [`stages`] segments responses into think / draft / reflect / answer
//!   spans and measures per-stage entropy;
//! - [`reward`] scores rollouts (correctness, contribution shaping,
//!   information-style regularizer, adaptive-entropy bonus);
//! - [`rollout`] samples response groups from the current policy;
//! - [`optimizer`] builds the clipped surrogate objectives and runs Adam;
//! - [`trainer`] wires everything into warmup / train / eval loops;
//! - [`metrics`] computes echo scores, exports curves and comparison
//!   reports.

pub mod metrics;
pub mod optimizer;
pub mod policy;
pub mod reward;
pub mod rollout;
pub mod seeds;
pub mod stages;
pub mod tape;
pub mod tasks;
pub mod trainer;
pub mod vocab;

pub use metrics::{AlgoRun, EchoScore, MetricsError};
pub use optimizer::{ClipConfig, GroupAdvantages, LossBreakdown, NormMode, ScoredGroup};
pub use policy::{Distribution, ModelConfig, PolicyError, PolicyParams};
pub use reward::{IbSign, RewardBreakdown, RewardConfig};
pub use rollout::{Rollout, RolloutError, SamplingConfig};
pub use stages::{FormatError, StageSpans};
pub use tasks::{TaskError, TaskInstance, TaskSpec};
pub use trainer::{Algorithm, RunRecord, TrainConfig, TrainError, TrainSettings};
pub use vocab::Vocab;
