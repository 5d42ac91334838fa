//! Sequential against parallel execution for the two batch workloads:
//! multistart instance search and an MPC basin sweep.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use inmult::basins::{sweep, SliceSpec};
use inmult::mpc::{MpcConfig, MpcSimOptions};
use inmult::steady::{find_input_instances, InstanceSearch};
use inmult::{Execution, OutputPair, PlantParams};

const R: OutputPair = OutputPair::new(0.49, 0.37);
const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn instance_search(c: &mut Criterion) {
    let p = PlantParams::default();
    let mut group = c.benchmark_group("instance_search");
    for n in [20, 60] {
        let search = InstanceSearch { grid: (n, n), ..InstanceSearch::default() };
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, n * n), &search, |b, s| {
                b.iter(|| black_box(find_input_instances(&p, R, s, exec).unwrap()))
            });
        }
    }
    group.finish();
}

fn basin_sweep(c: &mut Criterion) {
    let p = PlantParams::default();
    let cfg = MpcConfig::default();
    let opts = MpcSimOptions { max_steps: 300, record: false, ..MpcSimOptions::default() };
    let targets = find_input_instances(&p, R, &InstanceSearch::default(), Execution::Sequential).unwrap().inputs();
    let mut group = c.benchmark_group("basin_sweep");
    group.sample_size(10);
    let n = 12;
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::new(name, n * n), |b| {
            b.iter(|| black_box(sweep(&p, &cfg, &opts, &targets, SliceSpec::input_default(), n, n, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, instance_search, basin_sweep);
criterion_main!(benches);
