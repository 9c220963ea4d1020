use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use active_vision::harness::{run_suite, AgentKind, Execution, RunConfig};
use active_vision::world::bundled;

fn suite(c: &mut Criterion) {
    let cfg = RunConfig {
        max_steps: 60,
        ..RunConfig::default()
    };
    let scenario = bundled("clutter_multi_actor").unwrap();
    let agents = [AgentKind::Ours, AgentKind::Template, AgentKind::Random];
    let seeds: Vec<u64> = (0..4).collect();

    let mut group = c.benchmark_group("suite_clutter_60_steps");
    group.sample_size(10);
    for (label, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
        group.bench_function(label, |b| {
            b.iter(|| black_box(run_suite(&cfg, &scenario, &agents, &seeds, exec, None)))
        });
    }
    group.finish();
}

criterion_group!(benches, suite);
criterion_main!(benches);
