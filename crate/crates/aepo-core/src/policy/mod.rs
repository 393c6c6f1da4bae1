//! Tiny differentiable autoregressive token policy.
//!
//! Two interchangeable architectures sit behind one contract: a pre-norm
//! attention model (default) and a gated recurrent model. Both run in 64-bit
//! precision with two forward paths that agree bit-for-bit on shared inner
//! loops:
//!
//! - an incremental, gradient-free [`Decoder`] with cached state, used for
//!   sampling and greedy evaluation;
//! - a tape-recorded full-sequence pass (see [`loss_gradient`] and
//!   [`model::SeqForward`]) that yields exact reverse-mode gradients of any
//!   scalar built on top of it.
//!
//! A freshly initialized policy has a zero output head and therefore emits
//! the uniform distribution for every prefix.

pub mod checkpoint;
pub mod layout;
pub mod model;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as RandDistribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tape::{NodeId, Tape};
use layout::ParamLayout;

pub use model::Decoder;

/// Checkpoint format revision written by [`checkpoint::save_params`].
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    GruLike,
    TinyAttention,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Token count including the five control tokens.
    pub vocab_size: usize,
    pub context_len: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub arch: Arch,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 40,
            context_len: 96,
            hidden_dim: 64,
            n_layers: 2,
            arch: Arch::TinyAttention,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.vocab_size < 10 {
            return Err(PolicyError::InvalidConfig(format!(
                "vocab_size {} below minimum 10",
                self.vocab_size
            )));
        }
        if self.context_len == 0 || self.hidden_dim == 0 || self.n_layers == 0 {
            return Err(PolicyError::InvalidConfig(
                "all dimensions must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        ParamLayout::of(self).total
    }
}

/// Full trainable state of a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub config: ModelConfig,
    pub version: u32,
    pub values: Vec<f64>,
}

/// Next-token probability distribution over the whole vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Wraps raw probabilities, enforcing normalization within 1e-9.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self, PolicyError> {
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(PolicyError::InvalidDistribution { sum });
        }
        Ok(Self { probs })
    }

    /// Softmax of raw logits; always normalized by construction.
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
        let denom: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= denom;
        }
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Shannon entropy in nats, with 0·log 0 = 0.
    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| -p * p.ln())
            .sum()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("prefix length {len} does not fit context {context_len}")]
    PrefixTooLong { len: usize, context_len: usize },
    #[error("empty prefix has no next-token distribution")]
    EmptyPrefix,
    #[error("token {token} out of range for vocab {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },
    #[error("probabilities sum to {sum}, not 1")]
    InvalidDistribution { sum: f64 },
    #[error("temperature {0} must be nonnegative and finite")]
    InvalidTemperature(f64),
    #[error("top_p {0} must lie in (0, 1]")]
    InvalidTopP(f64),
    #[error("parameter vector length {got}, layout requires {want}")]
    ParamLengthMismatch { got: usize, want: usize },
    #[error("loss is not connected to the policy parameters")]
    LossNotConnected,
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    BadCheckpoint(String),
}

/// Deterministic initialization: matrix weights ~ N(0, 1/fan_in) in layout
/// order, gains and output head zero.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<PolicyParams, PolicyError> {
    config.validate()?;
    let layout = ParamLayout::of(config);
    let mut values = vec![0.0; layout.total];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for tensor in &layout.tensors {
        if let Some(fan_in) = tensor.fan_in {
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt())
                .expect("finite standard deviation");
            for v in &mut values[tensor.range.clone()] {
                *v = normal.sample(&mut rng);
            }
        }
    }
    Ok(PolicyParams {
        config: config.clone(),
        version: CHECKPOINT_VERSION,
        values,
    })
}

/// Next-token distribution after consuming `prefix`, via the incremental
/// decoder. Deterministic in (params, prefix).
pub fn forward_distribution(
    params: &PolicyParams,
    prefix: &[u32],
) -> Result<Distribution, PolicyError> {
    if prefix.is_empty() {
        return Err(PolicyError::EmptyPrefix);
    }
    let mut decoder = Decoder::new(params)?;
    let mut dist = None;
    for &tok in prefix {
        dist = Some(decoder.feed(tok)?);
    }
    Ok(dist.expect("non-empty prefix"))
}

/// Draws one token. Temperature 0 is greedy argmax with ties broken by the
/// lowest token id and ignores `top_p`; otherwise the distribution is
/// temperature-scaled, nucleus-truncated at `top_p`, renormalized and
/// sampled.
pub fn sample_token(
    dist: &Distribution,
    temperature: f64,
    top_p: f64,
    rng: &mut ChaCha8Rng,
) -> Result<u32, PolicyError> {
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(PolicyError::InvalidTemperature(temperature));
    }
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(PolicyError::InvalidTopP(top_p));
    }
    let probs = dist.probs();
    if temperature == 0.0 {
        let mut best = 0;
        for (i, p) in probs.iter().enumerate() {
            if *p > probs[best] {
                best = i;
            }
        }
        return Ok(best as u32);
    }

    // Temperature scaling in log space: q_i ∝ p_i^(1/T). Zero-mass tokens
    // stay at zero.
    let mut scaled: Vec<f64> = if (temperature - 1.0).abs() < 1e-15 {
        probs.to_vec()
    } else {
        let logs: Vec<f64> = probs
            .iter()
            .map(|p| if *p > 0.0 { p.ln() / temperature } else { f64::NEG_INFINITY })
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut q: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let denom: f64 = q.iter().sum();
        for v in q.iter_mut() {
            *v /= denom;
        }
        q
    };

    // Nucleus: keep the smallest prefix of the probability-sorted vocabulary
    // whose mass reaches top_p. Ties and the threshold comparison are id- and
    // epsilon-stable so the kept set is reproducible.
    let mut order: Vec<usize> = (0..scaled.len()).collect();
    order.sort_by(|&a, &b| {
        scaled[b]
            .partial_cmp(&scaled[a])
            .expect("finite probabilities")
            .then(a.cmp(&b))
    });
    let mut kept = 0;
    let mut mass = 0.0;
    for &idx in &order {
        kept += 1;
        mass += scaled[idx];
        if mass >= top_p - 1e-12 {
            break;
        }
    }
    for &idx in &order[kept..] {
        scaled[idx] = 0.0;
    }

    let target = rand::Rng::gen::<f64>(rng) * mass;
    let mut cum = 0.0;
    for &idx in &order[..kept] {
        cum += scaled[idx];
        if cum > target {
            return Ok(idx as u32);
        }
    }
    Ok(order[kept - 1] as u32)
}

/// Handles to the per-tensor leaves of one recorded forward pass, in layout
/// order.
pub struct ParamNodes {
    pub leaves: Vec<NodeId>,
    layout: ParamLayout,
}

impl ParamNodes {
    /// Registers every parameter tensor of `params` as a leaf on `tape`.
    pub fn record(tape: &mut Tape, params: &PolicyParams) -> Result<Self, PolicyError> {
        let layout = ParamLayout::of(&params.config);
        if params.values.len() != layout.total {
            return Err(PolicyError::ParamLengthMismatch {
                got: params.values.len(),
                want: layout.total,
            });
        }
        let leaves = layout
            .tensors
            .iter()
            .map(|t| tape.leaf(t.rows, t.cols, params.values[t.range.clone()].to_vec()))
            .collect();
        Ok(Self { leaves, layout })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// Leaf registered for the tensor occupying `range`.
    pub fn leaf(&self, range: &std::ops::Range<usize>) -> NodeId {
        let idx = self
            .layout
            .tensors
            .iter()
            .position(|t| t.range == *range)
            .expect("range is part of the layout");
        self.leaves[idx]
    }

    /// Flattens per-leaf gradients back into parameter order; absent leaves
    /// contribute zeros.
    pub fn collect_gradient(&self, grads: &crate::tape::Gradients) -> Vec<f64> {
        let mut flat = vec![0.0; self.layout.total];
        for (leaf, tensor) in self.leaves.iter().zip(&self.layout.tensors) {
            if let Some(g) = grads.get(*leaf) {
                flat[tensor.range.clone()].copy_from_slice(g);
            }
        }
        flat
    }
}

/// Exact reverse-mode gradient of a scalar loss defined over recorded
/// forward passes of `params`. The builder receives a fresh tape plus the
/// registered parameter leaves and returns the loss node.
pub fn loss_gradient<F>(params: &PolicyParams, build: F) -> Result<Vec<f64>, PolicyError>
where
    F: FnOnce(&mut Tape, &ParamNodes) -> NodeId,
{
    let mut tape = Tape::new();
    let nodes = ParamNodes::record(&mut tape, params)?;
    let loss = build(&mut tape, &nodes);
    if !tape.contains(loss) {
        return Err(PolicyError::LossNotConnected);
    }
    let grads = tape.backward(loss);
    Ok(nodes.collect_gradient(&grads))
}
