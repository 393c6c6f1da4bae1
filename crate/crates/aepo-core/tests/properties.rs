//! Randomized invariant checks for the contracts that hold for every input,
//! not just the worked examples: dataset well-formedness, stage segmentation
//! of arbitrary staged traces, reward algebra, advantage statistics, clip
//! geometry, and decode determinism.

use proptest::prelude::*;

use aepo_core::optimizer::{clipped_token_term, group_advantages, importance_ratio, ClipConfig};
use aepo_core::policy::{init_params, Arch, Distribution, ModelConfig};
use aepo_core::reward::{
    adaptive_entropy, contribution_indicator, gated_adaptive_entropy, sequence_objective,
    shaped_reward, RewardConfig,
};
use aepo_core::rollout::{sample_group, SamplingConfig};
use aepo_core::stages::segment_response;
use aepo_core::tasks::{generate_dataset, render_prompt, staged_trace, TaskSpec};
use aepo_core::trainer::{learning_rate, Algorithm, TrainConfig};
use aepo_core::vocab::Vocab;

fn arb_spec() -> impl Strategy<Value = TaskSpec> {
    (2usize..=8, 1usize..=6, 1usize..=12, 1usize..=6, 0u64..1000).prop_map(
        |(n_options, groups, n_train, n_eval, seed)| {
            let group = n_options.max(4);
            TaskSpec {
                n_facts: group * groups,
                n_options,
                n_train,
                n_eval,
                seed,
            }
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn datasets_are_well_formed(spec in arb_spec()) {
        let vocab = spec.vocab();
        let (train, eval) = generate_dataset(&spec).unwrap();
        prop_assert_eq!(train.len(), spec.n_train);
        prop_assert_eq!(eval.len(), spec.n_eval);
        for instance in train.iter().chain(&eval) {
            prop_assert!(instance.label < spec.n_options);
            prop_assert!(instance.question_tokens.iter().all(|&t| (t as usize) < vocab.size()));
            // Exactly one option verifies.
            let hits = (0..spec.n_options)
                .filter(|&k| aepo_core::tasks::verify(k, instance))
                .count();
            prop_assert_eq!(hits, 1);
            // Option values are distinct, so the answer is never ambiguous.
            let mut values: Vec<u32> =
                (0..spec.n_options).map(|k| instance.option_value(k)).collect();
            values.sort_unstable();
            values.dedup();
            prop_assert_eq!(values.len(), spec.n_options);
        }
        for (t, e) in train.iter().zip(train.iter().skip(1)) {
            prop_assert!(t.id < e.id);
        }
    }

    #[test]
    fn staged_traces_always_segment(
        spec in arb_spec(),
        draft in 0usize..8,
        probe in 0usize..8,
        answer in 0usize..8,
    ) {
        let vocab = spec.vocab();
        let (train, _) = generate_dataset(&spec).unwrap();
        let instance = &train[0];
        let n = instance.n_options();
        let (draft, probe, answer) = (draft % n, probe % n, answer % n);
        let trace = staged_trace(instance, draft, probe, answer);
        let spans = segment_response(&trace, &vocab).unwrap();

        prop_assert!(!spans.thinking.is_empty());
        prop_assert!(!spans.reflection.is_empty());
        prop_assert_eq!(spans.draft.len(), 1);
        prop_assert_eq!(spans.answer.len(), 1);
        prop_assert!(spans.thinking.end <= spans.draft.start);
        prop_assert!(spans.draft.end <= spans.reflection.start);
        prop_assert!(spans.reflection.end <= spans.answer.start);
        prop_assert_eq!(spans.draft_token(&trace), instance.option_tokens[draft]);
        prop_assert_eq!(spans.answer_token(&trace), instance.option_tokens[answer]);
        prop_assert_eq!(
            aepo_core::reward::correctness(&spans, &trace, instance),
            answer == instance.label
        );
    }

    #[test]
    fn entropy_stays_in_range(logits in proptest::collection::vec(-12.0f64..12.0, 2..64)) {
        let dist = Distribution::from_logits(&logits);
        let h = dist.entropy();
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (logits.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn adaptive_entropy_is_nonpositive_fixed_point(h in 0.0f64..5.0, h_star in 0.01f64..3.0) {
        let f = adaptive_entropy(h, h_star);
        prop_assert!(f <= 0.0);
        prop_assert_eq!(f == 0.0, h == h_star);
        prop_assert_eq!(adaptive_entropy(h_star, h_star), 0.0);
    }

    #[test]
    fn gate_zeroes_incorrect(f_t in -3.0f64..0.0, f_r in -3.0f64..0.0) {
        prop_assert_eq!(gated_adaptive_entropy(f_t, f_r, false), 0.0);
        prop_assert_eq!(gated_adaptive_entropy(f_t, f_r, true), f_t + f_r);
    }

    #[test]
    fn sequence_objective_is_exact_difference(l_ib in -5.0f64..5.0, f_gae in -5.0f64..0.0) {
        prop_assert_eq!(sequence_objective(l_ib, f_gae), l_ib - f_gae);
    }

    #[test]
    fn contribution_hits_the_table(draft_ok in any::<bool>(), answer_ok in any::<bool>()) {
        let c = contribution_indicator(draft_ok, answer_ok);
        prop_assert!([0.4, 0.6, 0.0, -0.3].contains(&c));
    }

    #[test]
    fn shaped_reward_orders_outcomes(c in -0.3f64..0.6) {
        let config = RewardConfig::default();
        let correct = shaped_reward(true, c, true, &config);
        let wrong = shaped_reward(false, c, true, &config);
        prop_assert!(correct > wrong);
        prop_assert_eq!(shaped_reward(true, c, false, &config), config.format_penalty);
    }

    #[test]
    fn advantages_are_standardized_and_affine_invariant(
        rewards in proptest::collection::vec(-3.0f64..3.0, 2..9),
        scale in 0.1f64..4.0,
        shift in -10.0f64..10.0,
    ) {
        let adv = group_advantages(&rewards).unwrap();
        let max = rewards.iter().cloned().fold(f64::MIN, f64::max);
        let min = rewards.iter().cloned().fold(f64::MAX, f64::min);
        if max - min < 1e-12 {
            prop_assert!(adv.degenerate);
            prop_assert!(adv.values.iter().all(|&a| a == 0.0));
        } else {
            let n = adv.values.len() as f64;
            let mean = adv.values.iter().sum::<f64>() / n;
            let var = adv.values.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var.sqrt() - 1.0).abs() < 1e-6);
        }
        let moved: Vec<f64> = rewards.iter().map(|r| scale * r + shift).collect();
        let adv_moved = group_advantages(&moved).unwrap();
        for (a, b) in adv.values.iter().zip(&adv_moved.values) {
            prop_assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn clip_term_never_exceeds_either_branch(
        r in 0.01f64..5.0,
        adv in -3.0f64..3.0,
        eps_low in 0.05f64..0.95,
        eps_high in 0.05f64..2.0,
    ) {
        let clip = ClipConfig { eps_low, eps_high };
        let term = clipped_token_term(r, adv, &clip);
        let unclipped = r * adv;
        let clamped = r.clamp(1.0 - eps_low, 1.0 + eps_high) * adv;
        prop_assert!(term <= unclipped + 1e-15);
        prop_assert!(term <= clamped + 1e-15);
        prop_assert!(term == unclipped || term == clamped);
    }

    #[test]
    fn importance_ratio_is_positive_and_centered(lp_new in -20.0f64..0.0, lp_old in -20.0f64..0.0) {
        let r = importance_ratio(lp_new, lp_old);
        prop_assert!(r > 0.0);
        prop_assert_eq!(importance_ratio(lp_old, lp_old), 1.0);
    }

    #[test]
    fn learning_rate_ramps_monotonically(
        lr in 1e-5f64..1e-2,
        warmup in 1usize..40,
        step in 0usize..200,
    ) {
        let config = TrainConfig {
            algorithm: Algorithm::Aepo,
            prompts_per_step: 1,
            group_size: 2,
            lr,
            warmup_steps: warmup,
            total_steps: 1,
            seed: 0,
            eval_every: 1,
            rif_on: true,
            ae_on: true,
            gae_on: true,
        };
        let now = learning_rate(step, &config);
        let next = learning_rate(step + 1, &config);
        prop_assert!(now <= next + 1e-18);
        prop_assert!(now <= lr);
        if step + 1 >= warmup {
            prop_assert_eq!(now, lr);
        }
    }

    #[test]
    fn vocab_layout_is_a_partition(
        n_options in 2usize..=8,
        n_prefix in 1usize..16,
        n_suffix in 1usize..16,
        n_values in 1usize..16,
    ) {
        let vocab = Vocab::new(n_options, n_prefix, n_suffix, n_values);
        let mut seen = vec![0usize; vocab.size()];
        let mut mark = |t: u32| seen[t as usize] += 1;
        for i in 0..n_options {
            mark(vocab.option(i));
        }
        mark(vocab.query_marker());
        for i in 0..n_prefix {
            mark(vocab.key_prefix(i));
        }
        for i in 0..n_suffix {
            mark(vocab.key_suffix(i));
        }
        for i in 0..n_values {
            mark(vocab.value(i));
        }
        // Control tokens occupy the first five slots; everything else is
        // covered exactly once.
        prop_assert!(seen[..5].iter().all(|&c| c == 0));
        prop_assert!(seen[5..].iter().all(|&c| c == 1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn sampling_is_seed_deterministic(seed in 0u64..500, step in 0u64..50) {
        let spec = TaskSpec {
            n_facts: 4,
            n_options: 2,
            n_train: 1,
            n_eval: 1,
            seed,
        };
        let vocab = spec.vocab();
        let (train, _) = generate_dataset(&spec).unwrap();
        let config = ModelConfig {
            vocab_size: vocab.size(),
            context_len: 48,
            hidden_dim: 4,
            n_layers: 1,
            arch: Arch::TinyAttention,
        };
        let params = init_params(&config, seed).unwrap();
        let sampling = SamplingConfig {
            group_size: 2,
            ..SamplingConfig::default()
        };
        let a = sample_group(&params, &train[0], &sampling, &vocab, seed, step).unwrap();
        let b = sample_group(&params, &train[0], &sampling, &vocab, seed, step).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(&x.response_tokens, &y.response_tokens);
            prop_assert_eq!(&x.old_logprobs, &y.old_logprobs);
        }
        // Rollouts within a group draw from distinct streams.
        prop_assert!(a.len() == 2);
        let prompt = render_prompt(&train[0]);
        prop_assert!(prompt.len() + sampling.max_response_len <= config.context_len);
    }
}
