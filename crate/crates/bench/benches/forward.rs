use criterion::{criterion_group, criterion_main, Criterion};
use css_bench::{cifar_spec, random_images};
use css_core::build_network;
use css_core::nn::Mode;
use std::hint::black_box;

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("network");
    group.sample_size(10);
    let x = random_images(16, [3, 32, 32], 3);
    for depth in [8, 20] {
        let mut net = build_network(&cifar_spec(depth, 2), 0).unwrap();
        group.bench_function(format!("eval_forward_depth{depth}_b16"), |b| {
            b.iter(|| net.forward(black_box(&x), Mode::Eval).unwrap())
        });
        group.bench_function(format!("train_step_depth{depth}_b16"), |b| {
            b.iter(|| {
                let out = net.forward(black_box(&x), Mode::Train).unwrap();
                let grads: Vec<_> = out
                    .branch_logits
                    .iter()
                    .map(|l| l.values().to_owned() * 1e-3)
                    .collect();
                net.backward(&grads).unwrap();
                net.zero_grad();
            })
        });
    }
    group.finish();
}

criterion_group!(benches, forward);
criterion_main!(benches);
