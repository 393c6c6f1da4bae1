//! Synthetic verifiable lookup tasks.
//!
//! Each instance embeds a small fact table of `(prefix, suffix) -> value`
//! triples that all share one key prefix, asks for the value of one full key,
//! and lists the candidate values as lettered options. The correct option is
//! the one bound to the queried fact's value, and because options are bound
//! to facts in listing order, the label equals the position of the queried
//! fact. Solving therefore takes a suffix match among same-prefix distractors
//! followed by a positional read: lookup plus one elimination step, with a
//! closed-form verifier.
//!
//! Rendered prompt, for four options:
//!
//! ```text
//! p s1 v1  p s2 v2  p s3 v3  p s4 v4  ? p sq  A v1 B v2 C v3 D v4  ⟨T⟩
//! ```
//!
//! Fact order is shuffled per instance, so no fixed suffix-to-letter map
//! exists; the policy has to read the table. Instances sample their query
//! key with replacement and reshuffle the listing every time: the same key
//! recurs under different labels, so memorizing key-to-label pairs scores at
//! chance and only the positional read generalizes. Train and eval share the
//! key pool but never an instance; held-out accuracy measures the read on
//! fresh listing orders.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::vocab::{Vocab, TOK_ANSWER, TOK_DRAFT, TOK_END, TOK_REFLECT, TOK_THINK};

/// Response-token budget reserved next to the prompt inside the context
/// window; prompts longer than `context − budget` are rejected.
pub const RESPONSE_BUDGET: usize = 64;

const DEFAULT_CONTEXT: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    /// Size of the global fact table; must fill whole prefix groups.
    pub n_facts: usize,
    pub n_options: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            n_facts: 48,
            n_options: 4,
            n_train: 256,
            n_eval: 64,
            seed: 0,
        }
    }
}

impl TaskSpec {
    /// Suffixes per prefix group; at least the option count so every query
    /// has enough same-prefix distractors.
    pub fn group_size(&self) -> usize {
        self.n_options.max(4)
    }

    pub fn vocab(&self) -> Vocab {
        let group = self.group_size();
        Vocab::new(
            self.n_options,
            self.n_facts / group,
            group,
            group.max(8),
        )
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if !(2..=8).contains(&self.n_options) {
            return Err(TaskError::InvalidSpec(format!(
                "n_options {} outside [2, 8]",
                self.n_options
            )));
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(TaskError::InvalidSpec(
                "n_train and n_eval must be at least 1".into(),
            ));
        }
        let group = self.group_size();
        if self.n_facts == 0 || self.n_facts % group != 0 {
            return Err(TaskError::InvalidSpec(format!(
                "n_facts {} must be a positive multiple of the group size {group}",
                self.n_facts
            )));
        }
        if prompt_len(self.n_options) > DEFAULT_CONTEXT - RESPONSE_BUDGET {
            return Err(TaskError::PromptTooLong {
                len: prompt_len(self.n_options),
                budget: DEFAULT_CONTEXT - RESPONSE_BUDGET,
            });
        }
        Ok(())
    }
}

/// Rendered prompt length including the trailing thinking cue.
pub fn prompt_len(n_options: usize) -> usize {
    3 * n_options + 3 + 2 * n_options + 1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: u64,
    /// Fact table, query and option block; everything before the cue.
    pub question_tokens: Vec<u32>,
    /// The option letter tokens in label order.
    pub option_tokens: Vec<u32>,
    pub label: usize,
}

impl TaskInstance {
    pub fn n_options(&self) -> usize {
        self.option_tokens.len()
    }

    /// `(prefix, suffix)` tokens of the queried key.
    pub fn query_key(&self) -> (u32, u32) {
        let q = 3 * self.n_options();
        (self.question_tokens[q + 1], self.question_tokens[q + 2])
    }

    /// Value token bound to option `k`.
    pub fn option_value(&self, k: usize) -> u32 {
        let base = 3 * self.n_options() + 3;
        self.question_tokens[base + 2 * k + 1]
    }

    /// `(prefix, suffix, value)` of the i-th listed fact.
    pub fn fact(&self, i: usize) -> (u32, u32, u32) {
        (
            self.question_tokens[3 * i],
            self.question_tokens[3 * i + 1],
            self.question_tokens[3 * i + 2],
        )
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("prompt length {len} exceeds the context budget {budget}")]
    PromptTooLong { len: usize, budget: usize },
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset line {line}: {message}")]
    Format { line: usize, message: String },
}

/// Deterministically generates train and eval instance lists from the
/// spec. Each instance draws a query key with replacement and gets a
/// freshly shuffled listing, and every instance is solvable from its own
/// prompt.
pub fn generate_dataset(
    spec: &TaskSpec,
) -> Result<(Vec<TaskInstance>, Vec<TaskInstance>), TaskError> {
    spec.validate()?;
    let vocab = spec.vocab();
    let group = spec.group_size();
    let n_groups = spec.n_facts / group;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Per group, assign distinct values to its suffixes so options never
    // collide inside one prompt.
    let values: Vec<Vec<usize>> = (0..n_groups)
        .map(|_| {
            let mut pool: Vec<usize> = (0..vocab.n_values).collect();
            pool.shuffle(&mut rng);
            pool.truncate(group);
            pool
        })
        .collect();

    let keys: Vec<(usize, usize)> = (0..n_groups)
        .flat_map(|g| (0..group).map(move |j| (g, j)))
        .collect();

    let build = |rng: &mut ChaCha8Rng, id: u64, (g, j_query): (usize, usize)| {
        // Listing = the query fact plus n_options−1 same-prefix distractors,
        // in shuffled order.
        let mut others: Vec<usize> = (0..group).filter(|&j| j != j_query).collect();
        others.shuffle(rng);
        let mut listing: Vec<usize> = others[..spec.n_options - 1].to_vec();
        listing.push(j_query);
        listing.shuffle(rng);
        let label = listing
            .iter()
            .position(|&j| j == j_query)
            .expect("query key is in its own listing");

        let mut question = Vec::with_capacity(prompt_len(spec.n_options) - 1);
        for &j in &listing {
            question.push(vocab.key_prefix(g));
            question.push(vocab.key_suffix(j));
            question.push(vocab.value(values[g][j]));
        }
        question.push(vocab.query_marker());
        question.push(vocab.key_prefix(g));
        question.push(vocab.key_suffix(j_query));
        for (k, &j) in listing.iter().enumerate() {
            question.push(vocab.option(k));
            question.push(vocab.value(values[g][j]));
        }

        TaskInstance {
            id,
            question_tokens: question,
            option_tokens: (0..spec.n_options).map(|k| vocab.option(k)).collect(),
            label,
        }
    };

    let mut train = Vec::with_capacity(spec.n_train);
    for id in 0..spec.n_train {
        let key = keys[rng.gen_range(0..keys.len())];
        train.push(build(&mut rng, id as u64, key));
    }
    let seen: std::collections::HashSet<&[u32]> =
        train.iter().map(|t| t.question_tokens.as_slice()).collect();
    let mut eval = Vec::with_capacity(spec.n_eval);
    for id in 0..spec.n_eval {
        // Best effort: resample so eval prompts differ from every train
        // prompt, not just by id. Gives up after a bounded number of tries
        // when the key space is too small to avoid collisions.
        let mut key = keys[rng.gen_range(0..keys.len())];
        let mut candidate = build(&mut rng, (spec.n_train + id) as u64, key);
        for _ in 0..100 {
            if !seen.contains(candidate.question_tokens.as_slice()) {
                break;
            }
            key = keys[rng.gen_range(0..keys.len())];
            candidate = build(&mut rng, (spec.n_train + id) as u64, key);
        }
        eval.push(candidate);
    }
    Ok((train, eval))
}

/// True iff the option index is the label; out-of-range indices are wrong
/// answers, not errors.
pub fn verify(answer_option: usize, instance: &TaskInstance) -> bool {
    answer_option == instance.label
}

/// Question plus the thinking-stage cue; what the policy conditions on.
pub fn render_prompt(instance: &TaskInstance) -> Vec<u32> {
    let mut prompt = instance.question_tokens.clone();
    prompt.push(TOK_THINK);
    prompt
}

/// Staged response with the given draft, reflection probe and answer option
/// indices. The thinking stage restates the query key and the value listed
/// beside it; the reflection stage spot-checks one listed binding (the
/// probed option's value, then its letter) and re-derives the query's value.
/// Every token is a function of the prompt and the three indices, and for
/// random indices none of them names the correct option, so imitation
/// teaches the prompt-lookup attention patterns, value-to-letter included,
/// without leaking the answer. The leading cue is part of the prompt, not of
/// this sequence.
pub fn staged_trace(instance: &TaskInstance, draft: usize, probe: usize, answer: usize) -> Vec<u32> {
    let (p, s) = instance.query_key();
    let v_query = instance.option_value(instance.label);
    vec![
        p,
        s,
        v_query,
        TOK_DRAFT,
        instance.option_tokens[draft],
        TOK_REFLECT,
        instance.option_value(probe),
        instance.option_tokens[probe],
        p,
        s,
        v_query,
        TOK_ANSWER,
        instance.option_tokens[answer],
        TOK_END,
    ]
}

/// How often a format trace's reflection re-checks the queried binding
/// rather than a random one. Below 1.0 the probe stays an unreliable hint,
/// so imitation caps accuracy at this rate and choosing the right binding to
/// probe is the behavior left for reinforcement to discover and sharpen.
const PROBE_QUERY_RATE: f64 = 0.5;

/// Format-only trace: well-formed stages around a random draft, with the
/// reflection probing the queried binding at [`PROBE_QUERY_RATE`] and any
/// other binding otherwise, and the answer committing to whichever letter
/// the probe named. Imitation therefore teaches the answer-follows-
/// reflection copy while the probe choice itself stays noisy; this mirrors
/// starting from an instruction-tuned policy whose reflections are sensible
/// but not yet trustworthy.
pub fn format_trace(instance: &TaskInstance, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let n = instance.n_options();
    let draft = rng.gen_range(0..n);
    let probe = if rng.gen_bool(PROBE_QUERY_RATE) {
        instance.label
    } else {
        let k = rng.gen_range(0..n - 1);
        if k >= instance.label {
            k + 1
        } else {
            k
        }
    };
    staged_trace(instance, draft, probe, probe)
}

/// Fully correct trace: the reflection probes the labelled binding and the
/// draft and answer both name the label.
pub fn oracle_trace(instance: &TaskInstance) -> Vec<u32> {
    staged_trace(instance, instance.label, instance.label, instance.label)
}

pub fn write_dataset(path: &Path, instances: &[TaskInstance]) -> Result<(), TaskError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for instance in instances {
        let line = serde_json::to_string(instance)
            .map_err(|e| TaskError::Format {
                line: 0,
                message: e.to_string(),
            })?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<TaskInstance>, TaskError> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut instances = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let instance = serde_json::from_str(&line).map_err(|e| TaskError::Format {
            line: i + 1,
            message: e.to_string(),
        })?;
        instances.push(instance);
    }
    Ok(instances)
}

/// Content hash of both splits in their serialized form, framed like a
/// version-control blob (`blob <len>\0<bytes>`, SHA-256, hex).
pub fn dataset_hash(train: &[TaskInstance], eval: &[TaskInstance]) -> String {
    let mut bytes = Vec::new();
    for instance in train.iter().chain(eval) {
        bytes.extend_from_slice(serde_json::to_string(instance).expect("serializable").as_bytes());
        bytes.push(b'\n');
    }
    let mut hasher = Sha256::new();
    hasher.update(format!("blob {}\0", bytes.len()).as_bytes());
    hasher.update(&bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reads the embedded fact table the way a careful human would: find the
    /// fact matching the queried key, return its listing position.
    fn brute_force_solve(instance: &TaskInstance) -> Option<usize> {
        let n = instance.n_options();
        let (qp, qs) = instance.query_key();
        (0..n).find(|&i| {
            let (p, s, _) = instance.fact(i);
            p == qp && s == qs
        })
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = TaskSpec::default();
        let a = generate_dataset(&spec).unwrap();
        let b = generate_dataset(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&TaskSpec {
            seed: 1,
            ..spec
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn every_instance_is_solvable_by_table_lookup() {
        let spec = TaskSpec::default();
        let (train, eval) = generate_dataset(&spec).unwrap();
        for instance in train.iter().chain(&eval) {
            assert_eq!(brute_force_solve(instance), Some(instance.label));
            // The winning option is bound to the queried fact's value.
            let (_, _, v) = instance.fact(instance.label);
            assert_eq!(instance.option_value(instance.label), v);
        }
    }

    #[test]
    fn train_and_eval_are_disjoint() {
        let (train, eval) = generate_dataset(&TaskSpec::default()).unwrap();
        for t in &train {
            for e in &eval {
                assert_ne!(t.id, e.id);
                assert_ne!(t.question_tokens, e.question_tokens);
            }
        }
    }

    #[test]
    fn repeated_keys_are_relabelled() {
        use std::collections::{HashMap, HashSet};
        let (train, _) = generate_dataset(&TaskSpec::default()).unwrap();
        let mut labels: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
        for t in &train {
            labels.entry(t.query_key()).or_default().insert(t.label);
        }
        assert!(labels.len() < train.len(), "keys must be reused");
        let moved = labels.values().filter(|set| set.len() > 1).count();
        assert!(
            moved * 2 > labels.len(),
            "most reused keys must appear under more than one label"
        );
    }

    #[test]
    fn prompt_structure() {
        let (train, _) = generate_dataset(&TaskSpec::default()).unwrap();
        let vocab = TaskSpec::default().vocab();
        for instance in &train {
            let prompt = render_prompt(instance);
            assert_eq!(*prompt.last().unwrap(), TOK_THINK);
            assert_eq!(prompt.len(), prompt_len(4));
            for k in 0..instance.n_options() {
                let letter = vocab.option(k);
                let count = prompt.iter().filter(|&&t| t == letter).count();
                assert_eq!(count, 1, "option letter {k} must appear exactly once");
            }
        }
    }

    #[test]
    fn verify_matches_label_only() {
        let (train, _) = generate_dataset(&TaskSpec::default()).unwrap();
        let instance = &train[0];
        assert!(verify(instance.label, instance));
        assert!(!verify((instance.label + 1) % instance.n_options(), instance));
        assert!(!verify(255, instance));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad_options = TaskSpec {
            n_options: 9,
            ..TaskSpec::default()
        };
        assert!(matches!(
            generate_dataset(&bad_options),
            Err(TaskError::InvalidSpec(_))
        ));
        let ragged = TaskSpec {
            n_facts: 50,
            ..TaskSpec::default()
        };
        assert!(matches!(
            generate_dataset(&ragged),
            Err(TaskError::InvalidSpec(_))
        ));
    }

    #[test]
    fn jsonl_round_trip() {
        let (train, _) = generate_dataset(&TaskSpec::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        write_dataset(&path, &train).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(train, back);
    }

    #[test]
    fn traces_are_well_formed_token_sequences() {
        let (train, _) = generate_dataset(&TaskSpec::default()).unwrap();
        let instance = &train[0];
        let trace = oracle_trace(instance);
        assert_eq!(*trace.last().unwrap(), TOK_END);
        let v_query = instance.option_value(instance.label);
        assert_eq!(trace[2], v_query);
        assert_eq!(trace[4], instance.option_tokens[instance.label]);
        // The oracle reflection probes the labelled binding, then re-derives
        // the query's value.
        assert_eq!(trace[6], v_query);
        assert_eq!(trace[7], instance.option_tokens[instance.label]);
        assert_eq!(trace[10], v_query);
        assert_eq!(trace[12], instance.option_tokens[instance.label]);
        let vocab = TaskSpec::default().vocab();
        assert!(trace.iter().all(|&t| (t as usize) < vocab.size()));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let formatted = format_trace(instance, &mut rng);
        assert_eq!(formatted.len(), trace.len());
        let probe_letter = formatted[7];
        let k = (0..instance.n_options())
            .find(|&k| instance.option_tokens[k] == probe_letter)
            .expect("probe letter names an option");
        assert_eq!(formatted[6], instance.option_value(k));
        // The formatted answer commits to the probed letter.
        assert_eq!(formatted[12], probe_letter);
    }
}
