//! Pipelined engine versus the row-parallel baseline.
//!
//! The baseline runs on rayon with the default `parallel` feature and
//! sequentially with `--no-default-features`, so running this suite under
//! both feature sets compares the two.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use hdpipe::bench::NaiveBaseline;
use hdpipe::hdc::{random_features, reference_forward, synthetic_model};
use hdpipe::tiling::{block_multiply_accumulate, KernelShape};
use hdpipe::{Engine, PipelineConfig, TileSizes, Variant};

const BASELINE_BACKEND: &str = if cfg!(feature = "parallel") { "rayon" } else { "sequential" };

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()).div_ceil(2)
}

fn end_to_end(c: &mut Criterion) {
    let (f, d, k) = (784, 4096, 10);
    let model = synthetic_model(f, d, k, 1).unwrap();
    let t = workers();
    let mut group = c.benchmark_group("inference");
    group.sample_size(10);
    for n in [64usize, 1024] {
        let x = random_features(n, f, 2);
        group.throughput(Throughput::Elements(n as u64));
        for variant in [Variant::Small, Variant::Large] {
            for tiling in [true, false] {
                let engine = Engine::new(&model, PipelineConfig::new(t, variant).with_tiling(tiling)).unwrap();
                let id = format!("pipeline-{variant}-{}", if tiling { "tiled" } else { "untiled" });
                group.bench_with_input(BenchmarkId::new(id, n), &x, |b, x| {
                    b.iter(|| black_box(engine.infer(x).unwrap()))
                });
            }
        }
        let baseline = NaiveBaseline::new(2 * t).unwrap();
        group.bench_with_input(BenchmarkId::new(format!("baseline-{BASELINE_BACKEND}"), n), &x, |b, x| {
            b.iter(|| black_box(baseline.infer(x, &model).unwrap()))
        });
        if n <= 64 {
            group.bench_with_input(BenchmarkId::new("reference", n), &x, |b, x| {
                b.iter(|| black_box(reference_forward(x, &model).unwrap()))
            });
        }
    }
    group.finish();
}

fn tile_sizes(c: &mut Criterion) {
    let model = synthetic_model(256, 4096, 10, 3).unwrap();
    let x = random_features(512, 256, 4);
    let mut group = c.benchmark_group("tile-size");
    group.sample_size(10);
    group.throughput(Throughput::Elements(512));
    for tile in [16usize, 32] {
        for r in [8usize, 16] {
            let cfg = PipelineConfig::new(workers(), Variant::Large)
                .with_tiles(TileSizes::uniform(tile))
                .with_chunk_r(r);
            let engine = Engine::new(&model, cfg).unwrap();
            group.bench_function(BenchmarkId::new(format!("n{tile}"), format!("R{r}")), |b| {
                b.iter(|| black_box(engine.infer(&x).unwrap()))
            });
        }
    }
    group.finish();
}

fn block_kernel(c: &mut Criterion) {
    let mut group = c.benchmark_group("block-kernel");
    for size in [16usize, 32] {
        let a = random_features(size, size, 5);
        let b = random_features(size, size, 6);
        let mut acc = vec![0.0f32; size * size];
        group.throughput(Throughput::Elements((2 * size * size * size) as u64));
        group.bench_function(BenchmarkId::from_parameter(size), |bench| {
            bench.iter(|| {
                block_multiply_accumulate(
                    black_box(a.as_slice()),
                    black_box(b.as_slice()),
                    &mut acc,
                    KernelShape::packed(size, size, size),
                )
            })
        });
    }
    group.finish();
}

criterion_group!(benches, end_to_end, tile_sizes, block_kernel);
criterion_main!(benches);
