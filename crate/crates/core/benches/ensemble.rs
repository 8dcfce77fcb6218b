use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use zapsa::bench::{run_trials, ExecutionMode, QAlgorithm, TrialSpec};
use zapsa::mdp::{build_six_state, SixStateConfig};

fn ensembles(c: &mut Criterion) {
    let mdp = build_six_state(&SixStateConfig::default()).unwrap();
    let steps = 2_000;
    let mut group = c.benchmark_group("zap_ensemble");
    group.sample_size(10);
    let mut modes = vec![("sequential", ExecutionMode::Sequential)];
    if cfg!(feature = "parallel") {
        modes.push(("parallel", ExecutionMode::Parallel));
    }
    for trials in [16, 64] {
        for (name, mode) in &modes {
            let spec = TrialSpec::new(QAlgorithm::Zap { rho: 0.85 }, mdp.beta());
            group.bench_with_input(BenchmarkId::new(*name, trials), &trials, |b, &n| {
                b.iter(|| run_trials(&mdp, &spec, n, steps, &[steps], black_box(7), *mode).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, ensembles);
criterion_main!(benches);
