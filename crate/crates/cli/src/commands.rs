use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;

use hdpipe::affinity::{discover_topology, Topology};
use hdpipe::bench::{
    compute_speedups, measure_engine, measure_naive, read_records, verify_grid, workers_per_stage,
    write_records, BenchRecord, LatencyStats, NaiveBaseline, VerifyGrid,
};
use hdpipe::hdc::{random_features, random_gaussian_base, synthetic_model};
use hdpipe::model_io::{
    load_dataset, load_model, save_dataset, save_model, single_pass_train, synthetic_clusters,
    ClassNormalization, TrainOptions,
};
use hdpipe::pipeline::AffinityPolicy;
use hdpipe::{Batch, Engine, HdError, Matrix, PipelineConfig, Result, TileSizes, Variant};

use crate::{BenchArgs, BenchVariant, SpeedupArgs, SynthArgs, TrainArgs, VariantArg, VerifyArgs};

pub enum Outcome {
    Ok,
    VerificationFailed,
}

pub fn exit_code(err: &HdError) -> u8 {
    match err {
        HdError::WorkerFailed(_) => 1,
        e if e.is_io() => 3,
        _ => 2,
    }
}

const TILE_CHOICES: [usize; 2] = [16, 32];
const CHUNK_CHOICES: [usize; 2] = [8, 16];

fn check_choices(flag: &str, values: &[usize], allowed: &[usize]) -> Result<()> {
    match values.iter().find(|v| !allowed.contains(v)) {
        Some(v) => Err(HdError::InvalidConfig(format!(
            "--{flag} {v} not supported; choose from {allowed:?}"
        ))),
        None => Ok(()),
    }
}

fn select_rows(batch: Batch, rows: Option<&std::ops::Range<usize>>) -> Result<Batch> {
    match rows {
        Some(r) => batch.slice(r.start, r.end),
        None => Ok(batch),
    }
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|source| HdError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| HdError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn train(args: TrainArgs) -> Result<Outcome> {
    let batch = select_rows(load_dataset(&args.dataset)?, args.rows.as_ref())?;
    let features = batch.features().cols();
    if let Some(f) = args.features {
        if f != features {
            return Err(HdError::DimensionMismatch {
                context: "--features vs dataset columns",
                expected: f,
                actual: features,
            });
        }
    }
    if args.dim == 0 {
        return Err(HdError::InvalidConfig("--dim must be positive".into()));
    }
    let base = random_gaussian_base(features, args.dim, args.seed);
    let normalization = if args.unnormalized {
        ClassNormalization::Unnormalized
    } else {
        ClassNormalization::Bipolar
    };
    let options = TrainOptions {
        classes: args.classes,
        normalization,
    };
    let model = single_pass_train(&batch, &base, options)?;
    save_model(&args.out, &model)?;

    let sidecar = args.out.with_extension(match args.out.extension() {
        Some(ext) => format!("{}.json", ext.to_string_lossy()),
        None => "json".to_string(),
    });
    let meta = serde_json::json!({
        "seed": args.seed,
        "features": features,
        "dim": args.dim,
        "classes": model.classes(),
        "samples": batch.len(),
        "rows": args.rows.as_ref().map(|r| [r.start, r.end]),
        "dataset": args.dataset.display().to_string(),
        "normalization": if args.unnormalized { "unnormalized" } else { "bipolar" },
    });
    let mut f = create(&sidecar)?;
    serde_json::to_writer_pretty(&mut f, &meta)?;
    writeln!(f).map_err(|e| HdError::Io {
        path: sidecar.clone(),
        source: e,
    })?;

    println!(
        "trained {} classes from {} samples (F={features}, D={}) -> {}",
        model.classes(),
        batch.len(),
        args.dim,
        args.out.display()
    );
    Ok(Outcome::Ok)
}

pub fn synth(args: SynthArgs) -> Result<Outcome> {
    let batch = synthetic_clusters(args.samples, args.features, args.classes, args.separation, args.seed)?;
    save_dataset(&args.out, &batch)?;
    println!(
        "wrote {} samples, {} features, {} classes -> {}",
        args.samples,
        args.features,
        args.classes,
        args.out.display()
    );
    Ok(Outcome::Ok)
}

pub fn verify(args: VerifyArgs) -> Result<Outcome> {
    check_choices("tile-size", &args.tile_sizes, &TILE_CHOICES)?;
    check_choices("chunk-r", &args.chunk_r, &CHUNK_CHOICES)?;
    let model = load_model(&args.model)?;
    let batch = select_rows(load_dataset(&args.dataset)?, args.rows.as_ref())?;
    batch.check_against(&model)?;

    let grid = VerifyGrid {
        batch_sizes: if args.batch_sizes.is_empty() {
            vec![batch.len()]
        } else {
            args.batch_sizes.clone()
        },
        workers: args.workers.clone(),
        tile_sizes: args.tile_sizes.clone(),
        chunk_r: args.chunk_r.clone(),
        variants: args
            .variant
            .iter()
            .map(|v| match v {
                VariantArg::S => Variant::Small,
                VariantArg::L => Variant::Large,
            })
            .collect(),
        tiling: !args.no_tiling,
        include_naive: args.naive,
    };
    // Reject a bad grid before printing anything.
    grid.configs()?;

    let report = verify_grid(&model, batch.features(), batch.labels(), &grid, |case| {
        let a = &case.agreement;
        let status = if a.ok() { "ok  " } else { "FAIL" };
        print!(
            "{status} {}: matched {}/{}, low-margin {} ({} differ)",
            case.label,
            a.matched,
            a.compared,
            a.low_margin_rows.len(),
            a.low_margin_disagreements
        );
        if !a.ok() {
            let shown: Vec<_> = a.mismatched_rows.iter().take(10).collect();
            print!(", mismatched rows {shown:?}");
        }
        println!();
    })?;

    let mut failed = !report.ok();
    for &(n, acc) in &report.accuracy {
        println!("accuracy N={n}: {acc:.4}");
        if let Some(min) = args.min_accuracy {
            if acc < min {
                println!("FAIL accuracy {acc:.4} below {min}");
                failed = true;
            }
        }
    }
    if args.min_accuracy.is_some() && report.accuracy.is_empty() {
        return Err(HdError::MissingLabels("--min-accuracy needs a labeled dataset"));
    }
    println!(
        "{} configurations, {} high-margin mismatches",
        report.cases.len(),
        report.mismatches()
    );
    Ok(if failed {
        Outcome::VerificationFailed
    } else {
        Outcome::Ok
    })
}

/// Repeats dataset rows until there are `n` of them.
fn cycle_rows(x: &Matrix, n: usize) -> Matrix {
    Matrix::from_fn(n, x.cols(), |r, c| x.get(r % x.rows(), c))
}

pub fn bench(args: BenchArgs) -> Result<Outcome> {
    check_choices("tile-size", &args.tile_sizes, &TILE_CHOICES)?;
    check_choices("chunk-r", &args.chunk_r, &CHUNK_CHOICES)?;
    if args.repeats == 0 {
        return Err(HdError::InvalidConfig("--repeats must be at least 1".into()));
    }
    for &w in &args.workers {
        workers_per_stage(w)?;
    }
    let topology = match &args.topology_override {
        Some(spec) => Topology::parse_override(spec)?,
        None => discover_topology(),
    };
    let (model, model_id) = match &args.model {
        Some(p) => (load_model(p)?, p.file_stem().map(|s| s.to_string_lossy().into_owned())),
        None => (synthetic_model(args.features, args.dim, args.classes, args.seed)?, None),
    };
    let (source, dataset_id) = match &args.dataset {
        Some(p) => {
            let b = load_dataset(p)?;
            b.check_against(&model)?;
            (Some(b), p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        }
        None => (None, None),
    };
    let dataset_id = dataset_id.or(model_id).unwrap_or_else(|| {
        format!("synthetic-f{}-d{}-k{}", model.features(), model.dim(), model.classes())
    });

    let mut records = Vec::new();
    for &n in &args.batch_sizes {
        if n == 0 {
            return Err(HdError::InvalidConfig("--batch-size must be positive".into()));
        }
        let x = match &source {
            Some(b) => cycle_rows(b.features(), n),
            None => random_features(n, model.features(), args.seed.wrapping_add(1)),
        };
        for &w in &args.workers {
            for &variant in &args.variant {
                let mut runs = Vec::new();
                match variant {
                    BenchVariant::Naive => {
                        let baseline = NaiveBaseline::new(w)?;
                        let lat = measure_naive(&baseline, &x, &model, args.warmup, args.repeats)?;
                        runs.push((0, 0, false, false, lat));
                    }
                    BenchVariant::S | BenchVariant::L => {
                        let v = if variant == BenchVariant::S {
                            Variant::Small
                        } else {
                            Variant::Large
                        };
                        for &tile in &args.tile_sizes {
                            for &r in &args.chunk_r {
                                let affinity = if args.no_numa_bind {
                                    AffinityPolicy::Disabled
                                } else {
                                    AffinityPolicy::NumaAware(topology.clone())
                                };
                                let cfg = PipelineConfig::new(workers_per_stage(w)?, v)
                                    .with_tiles(TileSizes::uniform(tile))
                                    .with_chunk_r(r)
                                    .with_tiling(!args.no_tiling)
                                    .with_affinity(affinity);
                                let engine = Engine::new(&model, cfg)?;
                                let lat = measure_engine(&engine, &x, args.warmup, args.repeats)?;
                                runs.push((tile, r, !args.no_numa_bind, !args.no_tiling, lat));
                            }
                        }
                    }
                }
                for (tile, r, affinity, tiling, lat) in runs {
                    let stats = LatencyStats::from_samples(&lat)?;
                    let record = BenchRecord {
                        dataset: dataset_id.clone(),
                        variant: match variant {
                            BenchVariant::S => "s",
                            BenchVariant::L => "l",
                            BenchVariant::Naive => "naive",
                        }
                        .to_string(),
                        n_samples: n,
                        workers: w,
                        tile_n: tile,
                        chunk_r: r,
                        repeats: args.repeats,
                        mean_ms: stats.mean_ms,
                        median_ms: stats.median_ms,
                        stddev_ms: stats.stddev_ms,
                        throughput: hdpipe::bench::throughput(n, stats.mean_ms),
                        seed: args.seed,
                        affinity,
                        tiling,
                        topology: topology.summary(),
                    };
                    eprintln!(
                        "{} N={n} 2T={w} n={tile} R={r}: mean {:.3} ms, median {:.3} ms, {:.1} samples/s",
                        record.variant, record.mean_ms, record.median_ms, record.throughput
                    );
                    records.push(record);
                }
            }
        }
    }

    match &args.out {
        Some(path) => {
            let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|source| HdError::Io {
                    path: path.clone(),
                    source,
                })?;
            write_records(file, &records, fresh)?;
        }
        None => write_records(io::stdout().lock(), &records, true)?,
    }
    Ok(Outcome::Ok)
}

pub fn speedup(args: SpeedupArgs) -> Result<Outcome> {
    let engine = read_records(open(&args.engine)?)?;
    let baseline = read_records(open(&args.baseline)?)?;
    let table = compute_speedups(&engine, &baseline, args.best_of)?;

    let mut text = String::from("n_samples,workers,engine_throughput,baseline_throughput,speedup\n");
    for r in &table.rows {
        let speedup = match r.speedup {
            Some(s) => format!("{s:.4}"),
            None => "baseline-zero".to_string(),
        };
        text.push_str(&format!(
            "{},{},{:.3},{:.3},{speedup}\n",
            r.n_samples, r.workers, r.engine_throughput, r.baseline_throughput
        ));
    }
    match &args.out {
        Some(path) => {
            let mut f = create(path)?;
            f.write_all(text.as_bytes()).map_err(|source| HdError::Io {
                path: path.clone(),
                source,
            })?;
        }
        None => print!("{text}"),
    }
    for (n, w, side) in &table.unmatched {
        eprintln!("unmatched: N={n} 2T={w} only in {side} input");
    }
    if table.rows.iter().any(|r| r.speedup.is_none()) {
        eprintln!("warning: rows with zero baseline throughput are flagged, not divided");
    }
    Ok(Outcome::Ok)
}
