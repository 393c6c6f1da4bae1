//! Timings for the three costs that dominate a training step: sampling a
//! rollout group, assembling the loss with its gradient, and the greedy
//! decode used by evaluation.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use aepo_bench::{Bench, SEED};
use aepo_core::optimizer::{aepo_loss, grpo_loss, ClipConfig};
use aepo_core::rollout::sample_group;
use aepo_core::trainer::greedy_decode;

fn bench_sampling(c: &mut Criterion) {
    let fx = Bench::at_defaults();
    c.bench_function("sample_group_of_5", |b| {
        b.iter(|| {
            sample_group(
                &fx.params,
                &fx.instances[0],
                &fx.sampling,
                &fx.vocab,
                SEED,
                0,
            )
            .unwrap()
        })
    });
}

fn bench_loss_gradient(c: &mut Criterion) {
    let fx = Bench::at_defaults();
    let clip = ClipConfig::default();
    let batch = fx.scored_groups(4);
    c.bench_function("aepo_loss_grad_4_groups", |b| {
        b.iter_batched(
            || batch.clone(),
            |groups| aepo_loss(&groups, &fx.params, &clip, &fx.reward).unwrap(),
            BatchSize::SmallInput,
        )
    });
    c.bench_function("grpo_loss_grad_4_groups", |b| {
        b.iter_batched(
            || batch.clone(),
            |groups| grpo_loss(&groups, &fx.params, clip.eps_low).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn bench_greedy_decode(c: &mut Criterion) {
    let fx = Bench::at_defaults();
    c.bench_function("greedy_decode_one_prompt", |b| {
        b.iter(|| greedy_decode(&fx.params, &fx.instances[0]).unwrap())
    });
}

criterion_group!(
    hot_paths,
    bench_sampling,
    bench_loss_gradient,
    bench_greedy_decode
);
criterion_main!(hot_paths);
