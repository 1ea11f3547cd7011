//! Measurement and verification helpers behind the command-line tool.

use std::collections::BTreeMap;
use std::io;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::compare::{compare_predictions, Agreement};
use crate::error::{HdError, Result};
use crate::hdc::{encode_into, reference_forward, scores_into, Model};
use crate::matrix::Matrix;
use crate::pipeline::{Engine, PipelineConfig, TileSizes, Variant};

/// Samples per second for a batch of `n` samples processed in `latency_ms`.
pub fn throughput(n: usize, latency_ms: f64) -> f64 {
    if latency_ms > 0.0 {
        n as f64 * 1000.0 / latency_ms
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub median_ms: f64,
    /// Sample standard deviation (zero for a single run).
    pub stddev_ms: f64,
}

impl LatencyStats {
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(HdError::Empty("no latency samples"));
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len().is_multiple_of(2) {
            (sorted[mid - 1] + sorted[mid]) / 2.0
        } else {
            sorted[mid]
        };
        let stddev = if samples.len() > 1 {
            (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Ok(LatencyStats {
            mean_ms: mean,
            median_ms: median,
            stddev_ms: stddev,
        })
    }
}

/// One benchmark result row. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub dataset: String,
    /// `s`, `l`, or `naive` for the row-parallel baseline.
    pub variant: String,
    pub n_samples: usize,
    /// Total worker threads (`2T`).
    pub workers: usize,
    pub tile_n: usize,
    pub chunk_r: usize,
    pub repeats: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub stddev_ms: f64,
    /// `n_samples · 1000 / mean_ms`.
    pub throughput: f64,
    pub seed: u64,
    pub affinity: bool,
    pub tiling: bool,
    pub topology: String,
}

/// Column names of [`BenchRecord`] CSV output, in order.
pub const BENCH_COLUMNS: [&str; 15] = [
    "dataset", "variant", "n_samples", "workers", "tile_n", "chunk_r", "repeats", "mean_ms",
    "median_ms", "stddev_ms", "throughput", "seed", "affinity", "tiling", "topology",
];

impl BenchRecord {
    pub fn stats(&self) -> LatencyStats {
        LatencyStats {
            mean_ms: self.mean_ms,
            median_ms: self.median_ms,
            stddev_ms: self.stddev_ms,
        }
    }
}

pub fn write_records<W: io::Write>(out: W, records: &[BenchRecord], header: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(header).from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| HdError::io("<csv output>", e))?;
    Ok(())
}

pub fn read_records<R: io::Read>(input: R) -> Result<Vec<BenchRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// Row-partitioned data-parallel inference on plain row-major matrices:
/// no tiling, no pipelining, no pinning.
pub struct NaiveBaseline {
    threads: usize,
    #[cfg(feature = "parallel")]
    pool: rayon::ThreadPool,
}

impl NaiveBaseline {
    pub fn new(threads: usize) -> Result<Self> {
        if threads == 0 {
            return Err(HdError::config("baseline needs at least one thread"));
        }
        Ok(NaiveBaseline {
            threads,
            #[cfg(feature = "parallel")]
            pool: rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| HdError::config(format!("cannot build thread pool: {e}")))?,
        })
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    pub fn infer(&self, x: &Matrix, model: &Model) -> Result<Vec<usize>> {
        if x.cols() != model.features() {
            return Err(HdError::DimensionMismatch {
                context: "batch feature count vs model",
                expected: model.features(),
                actual: x.cols(),
            });
        }
        let mut predictions = vec![0usize; x.rows()];
        let chunk = x.rows().div_ceil(self.threads).max(1);
        let run = |(c, preds): (usize, &mut [usize])| {
            let mut h = vec![0.0f32; model.dim()];
            let mut s = vec![0.0f32; model.classes()];
            for (r, p) in preds.iter_mut().enumerate() {
                h.fill(0.0);
                s.fill(0.0);
                encode_into(x.row(c * chunk + r), model.base(), &mut h);
                scores_into(&h, model.class_t(), &mut s);
                *p = crate::hdc::argmax(&s);
            }
        };
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            self.pool
                .install(|| predictions.par_chunks_mut(chunk).enumerate().for_each(run));
        }
        #[cfg(not(feature = "parallel"))]
        predictions.chunks_mut(chunk).enumerate().for_each(run);
        Ok(predictions)
    }
}

/// Runs `warmup` untimed and `repeats` timed pipelined inferences; returns
/// per-run latencies in milliseconds.
pub fn measure_engine(engine: &Engine, x: &Matrix, warmup: usize, repeats: usize) -> Result<Vec<f64>> {
    for _ in 0..warmup {
        engine.infer(x)?;
    }
    (0..repeats)
        .map(|_| engine.infer(x).map(|o| o.latency_ms()))
        .collect()
}

pub fn measure_naive(
    baseline: &NaiveBaseline,
    x: &Matrix,
    model: &Model,
    warmup: usize,
    repeats: usize,
) -> Result<Vec<f64>> {
    for _ in 0..warmup {
        baseline.infer(x, model)?;
    }
    (0..repeats)
        .map(|_| {
            let start = Instant::now();
            baseline.infer(x, model)?;
            Ok(start.elapsed().as_secs_f64() * 1e3)
        })
        .collect()
}

/// Engine/baseline throughput ratio for one `(N, 2T)` point.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedupRow {
    pub n_samples: usize,
    pub workers: usize,
    pub engine_throughput: f64,
    pub baseline_throughput: f64,
    /// `None` when the baseline throughput is zero.
    pub speedup: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpeedupTable {
    pub rows: Vec<SpeedupRow>,
    /// `(N, 2T)` keys present in only one input, with the side they came from.
    pub unmatched: Vec<(usize, usize, &'static str)>,
}

/// Pairs records on `(N, 2T)`. With `best_of`, the highest throughput per key
/// is used on each side (e.g. best over tile size and `R`); otherwise each
/// side must have at most one record per key.
pub fn compute_speedups(engine: &[BenchRecord], baseline: &[BenchRecord], best_of: bool) -> Result<SpeedupTable> {
    fn index(records: &[BenchRecord], best_of: bool, side: &str) -> Result<BTreeMap<(usize, usize), f64>> {
        let mut map = BTreeMap::new();
        for r in records {
            let key = (r.n_samples, r.workers);
            match map.get_mut(&key) {
                None => {
                    map.insert(key, r.throughput);
                }
                Some(t) if best_of => *t = f64::max(*t, r.throughput),
                Some(_) => {
                    return Err(HdError::config(format!(
                        "{side} has several rows for N={} 2T={}; pass --best-of to keep the fastest",
                        key.0, key.1
                    )))
                }
            }
        }
        Ok(map)
    }
    let e = index(engine, best_of, "engine input")?;
    let b = index(baseline, best_of, "baseline input")?;
    let mut table = SpeedupTable::default();
    for (&(n, w), &te) in &e {
        match b.get(&(n, w)) {
            Some(&tb) => table.rows.push(SpeedupRow {
                n_samples: n,
                workers: w,
                engine_throughput: te,
                baseline_throughput: tb,
                speedup: (tb != 0.0).then(|| te / tb),
            }),
            None => table.unmatched.push((n, w, "engine")),
        }
    }
    for &(n, w) in b.keys() {
        if !e.contains_key(&(n, w)) {
            table.unmatched.push((n, w, "baseline"));
        }
    }
    Ok(table)
}

/// Configurations swept by [`verify_grid`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyGrid {
    pub batch_sizes: Vec<usize>,
    /// Total worker counts (`2T`); each must be even.
    pub workers: Vec<usize>,
    pub tile_sizes: Vec<usize>,
    pub chunk_r: Vec<usize>,
    pub variants: Vec<Variant>,
    pub tiling: bool,
    pub include_naive: bool,
}

impl VerifyGrid {
    pub fn configs(&self) -> Result<Vec<PipelineConfig>> {
        let mut out = Vec::new();
        for &w in &self.workers {
            let t = workers_per_stage(w)?;
            for &n in &self.tile_sizes {
                for &r in &self.chunk_r {
                    for &v in &self.variants {
                        out.push(
                            PipelineConfig::new(t, v)
                                .with_tiles(TileSizes::uniform(n))
                                .with_chunk_r(r)
                                .with_tiling(self.tiling),
                        );
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Converts a total thread count `2T` into `T`.
pub fn workers_per_stage(total: usize) -> Result<usize> {
    if total < 2 || !total.is_multiple_of(2) {
        return Err(HdError::config(format!(
            "worker count must be an even number >= 2 (one pair per stage), got {total}"
        )));
    }
    Ok(total / 2)
}

#[derive(Debug, Clone)]
pub struct VerifyCase {
    pub label: String,
    pub agreement: Agreement,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub cases: Vec<VerifyCase>,
    /// Reference accuracy per batch size, when labels are available.
    pub accuracy: Vec<(usize, f64)>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.cases.iter().all(|c| c.agreement.ok())
    }

    pub fn mismatches(&self) -> usize {
        self.cases.iter().map(|c| c.agreement.mismatched_rows.len()).sum()
    }
}

/// Compares the pipeline (and optionally the naive baseline) against the
/// reference path for every grid point, using the first `N` rows of `x`.
pub fn verify_grid(
    model: &Model,
    x: &Matrix,
    labels: Option<&[usize]>,
    grid: &VerifyGrid,
    mut progress: impl FnMut(&VerifyCase),
) -> Result<VerifyReport> {
    let configs = grid.configs()?;
    let mut report = VerifyReport::default();
    for &n in &grid.batch_sizes {
        if n == 0 || n > x.rows() {
            return Err(HdError::config(format!(
                "batch size {n} outside 1..={} available rows",
                x.rows()
            )));
        }
        let xs = x.slice_rows(0, n);
        let reference = reference_forward(&xs, model)?;
        if let Some(labels) = labels {
            let correct = reference
                .predictions
                .iter()
                .zip(&labels[..n])
                .filter(|(a, b)| a == b)
                .count();
            report.accuracy.push((n, correct as f64 / n as f64));
        }
        for cfg in &configs {
            if cfg.variant == Variant::Large && n < cfg.workers {
                continue;
            }
            let out = Engine::new(model, cfg.clone())?.infer(&xs)?;
            let case = VerifyCase {
                label: format!(
                    "N={n} 2T={} n={} R={} variant={} tiling={}",
                    2 * cfg.workers,
                    cfg.tiles.n,
                    cfg.chunk_r,
                    cfg.variant,
                    cfg.tiling
                ),
                agreement: compare_predictions(&reference.scores, &reference.predictions, &out.predictions, model.dim()),
            };
            progress(&case);
            report.cases.push(case);
        }
        if grid.include_naive {
            for &w in &grid.workers {
                let pred = NaiveBaseline::new(w)?.infer(&xs, model)?;
                let case = VerifyCase {
                    label: format!("N={n} 2T={w} naive"),
                    agreement: compare_predictions(&reference.scores, &reference.predictions, &pred, model.dim()),
                };
                progress(&case);
                report.cases.push(case);
            }
        }
    }
    Ok(report)
}

/// Fraction of `predictions` equal to `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let correct = predictions.iter().zip(labels).filter(|(a, b)| a == b).count();
    correct as f64 / predictions.len() as f64
}
