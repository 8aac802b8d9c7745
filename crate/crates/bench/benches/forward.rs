use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sgmoe_bench::observations;
use sgmoe_core::{ActorSpec, DensePreset, MoeLayer, PolicyNetwork, Rng};
use std::hint::black_box;

const BATCH: usize = 256;

fn actors(c: &mut Criterion) {
    let mut group = c.benchmark_group("actor_forward");
    let xl = DensePreset::ExtraLarge.spec().param_report().total_params;
    let mut specs: Vec<ActorSpec> = DensePreset::ALL.iter().map(|p| p.spec()).collect();
    specs.push(ActorSpec::moe_default());
    specs.push(ActorSpec::moe_param_matched(xl));
    for spec in specs {
        let net = PolicyNetwork::<f32>::build(&spec, &mut Rng::new(1)).unwrap();
        let obs = observations(BATCH, spec.input_dim, 2);
        group.bench_with_input(BenchmarkId::from_parameter(&spec.name), &obs, |b, obs| {
            b.iter(|| net.forward_policy(black_box(obs)).unwrap().actions.mean())
        });
    }
    group.finish();
}

fn gating(c: &mut Criterion) {
    let mut group = c.benchmark_group("moe_gate");
    for (n, k) in [(16, 4), (16, 1), (64, 4)] {
        let layer = MoeLayer::<f32>::new(512, 256, n, k, &mut Rng::new(3)).unwrap();
        let x = observations(BATCH, 512, 4);
        group.bench_function(format!("n{n}_k{k}"), |b| b.iter(|| layer.gate(black_box(&x), None).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, actors, gating);
criterion_main!(benches);
