//! Sequential vs parallel federation rounds. The two execution modes
//! produce bitwise-identical results (see the federation tests); this
//! suite measures what the `parallel` feature actually buys per round
//! at several client counts.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fedsparse::federation::Execution;
use fedsparse::synthdata::{generate, squared_objectives, SynthSpec};
use fedsparse::{
    run_federation_with, Dictionary, FederationConfig, LocalConfig, Objective, SparseEstimate,
};
use std::hint::black_box;
use std::sync::Arc;

fn workload(num_clients: usize) -> (Vec<Objective>, SparseEstimate, FederationConfig) {
    let spec = SynthSpec {
        num_clients,
        per_client: 60,
        dim: 400,
        alpha: 0.5,
        variance_decay_exponent: 1.1,
        sparsity: 8,
        noise_std: 0.0,
        batch_size: 30,
        seed: 9,
    };
    let dict = Arc::new(Dictionary::standard_basis(spec.dim));
    let (datasets, truth) = generate(&spec, &dict).expect("generation");
    let objectives = squared_objectives(datasets, &dict).expect("objectives");
    let config = FederationConfig {
        rounds: 1,
        local: LocalConfig {
            tau: spec.sparsity,
            k_iters: 3,
            ..LocalConfig::default()
        },
        seed: spec.seed,
        ..FederationConfig::default()
    };
    (objectives, truth, config)
}

fn bench_round(c: &mut Criterion) {
    let mut group = c.benchmark_group("federated_round");
    for &num_clients in &[8usize, 32] {
        let (objectives, truth, config) = workload(num_clients);

        group.bench_with_input(
            BenchmarkId::new("sequential", num_clients),
            &num_clients,
            |b, _| {
                b.iter(|| {
                    let result = run_federation_with(
                        Execution::Sequential,
                        black_box(&objectives),
                        &config,
                        Some(&truth),
                    )
                    .expect("run");
                    black_box(result.final_signal)
                })
            },
        );

        #[cfg(feature = "parallel")]
        group.bench_with_input(
            BenchmarkId::new("parallel", num_clients),
            &num_clients,
            |b, _| {
                b.iter(|| {
                    let result = run_federation_with(
                        Execution::Parallel,
                        black_box(&objectives),
                        &config,
                        Some(&truth),
                    )
                    .expect("run");
                    black_box(result.final_signal)
                })
            },
        );
    }
    group.finish();
}

criterion_group!(benches, bench_round);
criterion_main!(benches);
