use criterion::{black_box, criterion_group, criterion_main, Criterion};

use fedpriv_core::protocol::{haar_rotation, run_replication, ProtocolTag, RunContext};
use fedpriv_core::rates::separation_rate_shared;
use fedpriv_core::seq::{gen_signal_single_level, sample_data, Spread};
use fedpriv_core::ModelConfig;

fn cfg() -> ModelConfig {
    ModelConfig {
        m: 10,
        n: 50,
        sigma: 1.0,
        s: 1.0,
        r: 1.0,
        p: f64::INFINITY,
        q: f64::INFINITY,
        epsilon: 1.0,
        delta: 0.001,
        alpha: 0.05,
        kappa_tilde: 1.0,
    }
}

fn bench_sample_data(c: &mut Criterion) {
    let cfg = cfg();
    let f = gen_signal_single_level(4, 0.5, Spread::Uniform, 0);
    c.bench_function("sample_data_l4", |b| {
        b.iter(|| sample_data(black_box(&f), &cfg, 4, black_box(7)))
    });
}

fn bench_replications(c: &mut Criterion) {
    let cfg = cfg();
    let f = gen_signal_single_level(4, 0.5, Spread::Uniform, 0);
    let mut group = c.benchmark_group("replication_l4");
    for tag_ in [
        ProtocolTag::Classical,
        ProtocolTag::I,
        ProtocolTag::II,
        ProtocolTag::III,
    ] {
        let ctx = RunContext::build(tag_, &cfg, 4);
        group.bench_function(tag_.name(), |b| {
            let mut rep = 0u64;
            b.iter(|| {
                rep += 1;
                run_replication(tag_, &cfg, 4, &ctx, black_box(&f), 7, rep)
            })
        });
    }
    group.finish();
}

fn bench_haar(c: &mut Criterion) {
    c.bench_function("haar_rotation_d62", |b| {
        let mut seed = 0u64;
        b.iter(|| {
            seed += 1;
            haar_rotation(62, black_box(seed))
        })
    });
}

fn bench_rate_oracle(c: &mut Criterion) {
    let base = cfg();
    c.bench_function("separation_rate_shared", |b| {
        b.iter(|| separation_rate_shared(black_box(&base)))
    });
}

criterion_group!(
    benches,
    bench_sample_data,
    bench_replications,
    bench_haar,
    bench_rate_oracle
);
criterion_main!(benches);
