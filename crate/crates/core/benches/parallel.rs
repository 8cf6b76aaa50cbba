use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use funlasso::covariance::{gram_matrix, KernelSpec};
use funlasso::exec::Execution;
use funlasso::experiments::{run_scenario, ExperimentConfig};
use funlasso::grid::{build_uniform_grid, MeasureKind};
use funlasso::sampler::{sample_design, Driver};

const MODES: [(&str, Execution); 2] = [("serial", Execution::Serial), ("parallel", Execution::Parallel)];

fn design(c: &mut Criterion) {
    let grid = build_uniform_grid(256, [0.0, 1.0], MeasureKind::Lebesgue).unwrap();
    let model = gram_matrix(&KernelSpec::BrownianReleased, &grid).unwrap();
    let mut g = c.benchmark_group("sample_design_n2048_N256");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(sample_design(&model, 2048, Driver::Gaussian, 7, exec).unwrap()))
        });
    }
    g.finish();
}

fn harness(c: &mut Criterion) {
    let cfg: ExperimentConfig = serde_json::from_value(serde_json::json!({
        "scenario": "rate_sweep",
        "kernel": {"kind": "brownian_released"},
        "grid": {"n": 64},
        "oracle": {"kind": "spikes", "s": 3, "separation": 0.2},
        "noise_sd": 0.5,
        "n_list": [128, 256, 512],
        "epsilon_rule": "sparse",
        "replicates": 4,
        "seed": 1
    }))
    .unwrap();
    let mut g = c.benchmark_group("rate_sweep_cells");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(run_scenario(&cfg, exec).unwrap().rows.len()))
        });
    }
    g.finish();
}

criterion_group!(benches, design, harness);
criterion_main!(benches);
