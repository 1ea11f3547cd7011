//! Two-stage pipelined inference.
//!
//! Stage I workers encode column blocks of `H = hardsign(X·B)` and stream
//! them through bounded lock-free queues to stage II workers, which multiply
//! them against the matching row block of `J` as they arrive.
//!
//! * [`Variant::Small`]: stage I worker `t` sends whole column blocks to its
//!   sibling stage II worker `t`. Each stage II worker accumulates a private
//!   `N×K` partial of `S`, adds it into the shared `S` once, and the final
//!   arg-max runs after all workers have joined.
//! * [`Variant::Large`]: every stage I worker splits each column block into
//!   `T` row chunks and sends chunk `t'` to stage II worker `t'`. Stage II
//!   worker `t'` owns rows `[t'·N/T, (t'+1)·N/T)` of `S` and of the
//!   predictions; the last worker also takes the remainder rows.
//!
//! A stage II worker stops when its queue is empty, the producers it listens
//! to have raised their done flags, and one more poll of the queue after
//! observing the flags comes back empty.

use std::fmt;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::affinity::{apply_binding_or_warn, compute_binding, BindingPlan, Topology};
use crate::error::{HdError, Result};
use crate::hdc::{argmax, hardsign_in_place, Batch, Model};
use crate::matrix::Matrix;
use crate::queue::{IdleWait, TileQueue, DEFAULT_QUEUE_CAPACITY};
use crate::tiling::{block_multiply_accumulate, tile_matrix, BlockSpec, KernelShape, TiledMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Variant {
    /// Small batches: parallel over the hypervector dimension.
    #[serde(rename = "s")]
    Small,
    /// Large batches: parallel over samples.
    #[serde(rename = "l")]
    Large,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Small => "s",
            Variant::Large => "l",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = HdError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s" | "small" => Ok(Variant::Small),
            "l" | "large" => Ok(Variant::Large),
            _ => Err(HdError::Parse {
                what: "variant",
                detail: format!("{s:?}; expected s or l"),
            }),
        }
    }
}

/// Block sizes for `X` (`n×f`), `B` (`f×d`), `H` (`n×d`) and `J` (`d×k`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TileSizes {
    pub n: usize,
    pub f: usize,
    pub d: usize,
    pub k: usize,
}

impl TileSizes {
    pub fn uniform(size: usize) -> Self {
        TileSizes {
            n: size,
            f: size,
            d: size,
            k: size,
        }
    }
}

impl Default for TileSizes {
    fn default() -> Self {
        TileSizes::uniform(32)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AffinityPolicy {
    /// Let the OS place workers.
    Disabled,
    /// Pin workers following the NUMA-aware plan for this topology.
    NumaAware(Topology),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineConfig {
    /// Workers per stage (`T`); `2T` threads run in total.
    pub workers: usize,
    pub variant: Variant,
    pub tiles: TileSizes,
    /// Blocks of `B` reused across all row blocks of `X` per round (`R`).
    pub chunk_r: usize,
    pub queue_capacity: usize,
    pub affinity: AffinityPolicy,
    /// When false, `X`, `B` and `J` stay in plain row-major layout.
    pub tiling: bool,
    /// Seed for random delays around queue operations (stress testing).
    pub schedule_jitter: Option<u64>,
    #[cfg(test)]
    pub(crate) fail_stage1_worker: Option<usize>,
}

impl PipelineConfig {
    pub fn new(workers: usize, variant: Variant) -> Self {
        PipelineConfig {
            workers,
            variant,
            tiles: TileSizes::default(),
            chunk_r: 8,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            affinity: AffinityPolicy::Disabled,
            tiling: true,
            schedule_jitter: None,
            #[cfg(test)]
            fail_stage1_worker: None,
        }
    }

    pub fn with_tiles(mut self, tiles: TileSizes) -> Self {
        self.tiles = tiles;
        self
    }

    pub fn with_chunk_r(mut self, r: usize) -> Self {
        self.chunk_r = r;
        self
    }

    pub fn with_affinity(mut self, affinity: AffinityPolicy) -> Self {
        self.affinity = affinity;
        self
    }

    pub fn with_tiling(mut self, tiling: bool) -> Self {
        self.tiling = tiling;
        self
    }

    pub fn with_queue_capacity(mut self, capacity: usize) -> Self {
        self.queue_capacity = capacity;
        self
    }

    pub fn with_schedule_jitter(mut self, seed: u64) -> Self {
        self.schedule_jitter = Some(seed);
        self
    }

    /// Checks everything that does not depend on the batch.
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(HdError::config("need at least one worker per stage"));
        }
        let TileSizes { n, f, d, k } = self.tiles;
        if n == 0 || f == 0 || d == 0 || k == 0 {
            return Err(HdError::config(format!("tile sizes must be positive, got {:?}", self.tiles)));
        }
        if self.chunk_r == 0 {
            return Err(HdError::config("chunk_r must be at least 1"));
        }
        if self.queue_capacity == 0 {
            return Err(HdError::config("queue capacity must be at least 1"));
        }
        if let AffinityPolicy::NumaAware(topo) = &self.affinity {
            if 2 * self.workers > topo.logical_cpu_count() {
                return Err(HdError::config(format!(
                    "{} workers exceed {} logical CPUs; disable binding or use fewer workers",
                    2 * self.workers,
                    topo.logical_cpu_count()
                )));
            }
        }
        Ok(())
    }
}

/// One streamed piece of a column block of `H`.
#[derive(Debug, Clone)]
pub struct TileMessage {
    /// Column-block index `j`.
    pub block: usize,
    /// First batch row covered by the payload.
    pub row_start: usize,
    pub rows: usize,
    /// Logical width; the final block is narrower when `d` does not divide `D`.
    pub width: usize,
    /// Row stride of `payload` (the tile width `d`); padding columns are zero.
    pub stride: usize,
    pub payload: Vec<f32>,
}

impl TileMessage {
    pub fn logical_len(&self) -> usize {
        self.rows * self.width
    }
}

/// Per-worker stage I completion flags.
///
/// A flag is set with release ordering after the worker's last enqueue and
/// read with acquire ordering, so observing it implies every message from
/// that worker is visible in the queues.
#[derive(Debug)]
pub struct StageStatus {
    done: Vec<AtomicBool>,
}

impl StageStatus {
    pub fn new(workers: usize) -> Self {
        StageStatus {
            done: (0..workers).map(|_| AtomicBool::new(false)).collect(),
        }
    }

    pub fn mark_done(&self, worker: usize) {
        self.done[worker].store(true, Ordering::Release);
    }

    pub fn is_done(&self, worker: usize) -> bool {
        self.done[worker].load(Ordering::Acquire)
    }

    pub fn all_done(&self) -> bool {
        (0..self.done.len()).all(|t| self.is_done(t))
    }
}

/// Row range of stage II worker `t` in variant L.
pub fn row_range(t: usize, workers: usize, rows: usize) -> std::ops::Range<usize> {
    let base = rows / workers;
    let start = t * base;
    let end = if t + 1 == workers { rows } else { start + base };
    start..end
}

/// Column blocks computed by stage I worker `t`: `t, t+T, t+2T, …`.
pub fn assigned_column_blocks(t: usize, workers: usize, blocks: usize) -> impl Iterator<Item = usize> {
    (t..blocks).step_by(workers)
}

/// A weight matrix in the layout the kernels read.
#[derive(Debug, Clone)]
pub enum Operand {
    Tiled(TiledMatrix),
    Dense(Matrix),
}

/// State shared by all workers of one run.
pub struct RunContext {
    workers: usize,
    variant: Variant,
    tiles: TileSizes,
    chunk_r: usize,
    rows: usize,
    dim: usize,
    classes: usize,
    queues: Vec<TileQueue<TileMessage>>,
    status: StageStatus,
    abort: AtomicBool,
    failure: Mutex<Option<String>>,
    messages: AtomicUsize,
    elements: AtomicUsize,
    jitter: Option<u64>,
    #[cfg(test)]
    fail_stage1_worker: Option<usize>,
}

impl RunContext {
    pub fn new(config: &PipelineConfig, rows: usize, dim: usize, classes: usize) -> Self {
        RunContext {
            workers: config.workers,
            variant: config.variant,
            tiles: config.tiles,
            chunk_r: config.chunk_r,
            rows,
            dim,
            classes,
            queues: (0..config.workers)
                .map(|_| TileQueue::new(config.queue_capacity))
                .collect(),
            status: StageStatus::new(config.workers),
            abort: AtomicBool::new(false),
            failure: Mutex::new(None),
            messages: AtomicUsize::new(0),
            elements: AtomicUsize::new(0),
            jitter: config.schedule_jitter,
            #[cfg(test)]
            fail_stage1_worker: config.fail_stage1_worker,
        }
    }

    pub fn status(&self) -> &StageStatus {
        &self.status
    }

    pub fn aborted(&self) -> bool {
        self.abort.load(Ordering::Relaxed)
    }

    fn fail(&self, role: &str, worker: usize, detail: String) {
        self.abort.store(true, Ordering::Relaxed);
        let mut slot = self.failure.lock().unwrap_or_else(|e| e.into_inner());
        slot.get_or_insert_with(|| format!("{role} worker {worker}: {detail}"));
    }

    fn jitter_rng(&self, role: u64, worker: usize) -> Option<ChaCha8Rng> {
        self.jitter
            .map(|seed| ChaCha8Rng::seed_from_u64(seed ^ (role << 32) ^ worker as u64))
    }

    fn column_blocks(&self) -> usize {
        self.dim.div_ceil(self.tiles.d)
    }

    /// Runs `body`, turning a panic into an abort of the whole run.
    fn guarded(&self, role: &str, worker: usize, body: impl FnOnce()) {
        if let Err(payload) = panic::catch_unwind(AssertUnwindSafe(body)) {
            let detail = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panicked".to_string());
            self.fail(role, worker, detail);
        }
    }
}

fn maybe_delay(rng: &mut Option<ChaCha8Rng>) {
    if let Some(rng) = rng {
        match rng.random_range(0..8u32) {
            0 => std::thread::yield_now(),
            1 => {
                for _ in 0..rng.random_range(0..2000u32) {
                    std::hint::spin_loop();
                }
            }
            2 => std::thread::sleep(Duration::from_micros(rng.random_range(0..50))),
            _ => {}
        }
    }
}

/// Stage I: encodes the column blocks assigned to worker `t` and streams them.
pub fn stage1_worker(t: usize, x: &Operand, base: &Operand, ctx: &RunContext) {
    let mut rng = ctx.jitter_rng(1, t);
    let d = ctx.tiles.d;
    let padded_rows = match x {
        Operand::Tiled(xt) => xt.grid_rows() * ctx.tiles.n,
        Operand::Dense(_) => ctx.rows,
    };
    let mut h_local = vec![0.0f32; ctx.tiles.n * d];

    for j in assigned_column_blocks(t, ctx.workers, ctx.column_blocks()) {
        #[cfg(test)]
        if ctx.fail_stage1_worker == Some(t) {
            panic!("injected failure");
        }
        if ctx.aborted() {
            return;
        }
        let width = d.min(ctx.dim - j * d);
        let mut column = vec![0.0f32; padded_rows * d];
        match (x, base) {
            (Operand::Tiled(xt), Operand::Tiled(bt)) => {
                encode_column_tiled(xt, bt, j, ctx, &mut column, &mut h_local)
            }
            (Operand::Dense(xd), Operand::Dense(bd)) => encode_column_dense(xd, bd, j, d, &mut column),
            _ => unreachable!("operands share one layout"),
        }
        for row in column.chunks_exact_mut(d).take(ctx.rows) {
            hardsign_in_place(&mut row[..width]);
        }

        let sent = match ctx.variant {
            Variant::Small => {
                column.truncate(ctx.rows * d);
                let msg = TileMessage {
                    block: j,
                    row_start: 0,
                    rows: ctx.rows,
                    width,
                    stride: d,
                    payload: column,
                };
                maybe_delay(&mut rng);
                ctx.queues[t].push(msg, &ctx.abort).is_ok()
            }
            Variant::Large => (0..ctx.workers).all(|dest| {
                let range = row_range(dest, ctx.workers, ctx.rows);
                let msg = TileMessage {
                    block: j,
                    row_start: range.start,
                    rows: range.len(),
                    width,
                    stride: d,
                    payload: column[range.start * d..range.end * d].to_vec(),
                };
                maybe_delay(&mut rng);
                ctx.queues[dest].push(msg, &ctx.abort).is_ok()
            }),
        };
        if !sent {
            return;
        }
    }
    ctx.status.mark_done(t);
}

fn encode_column_tiled(
    xt: &TiledMatrix,
    bt: &TiledMatrix,
    j: usize,
    ctx: &RunContext,
    column: &mut [f32],
    h_local: &mut [f32],
) {
    let TileSizes { n, f, d, .. } = ctx.tiles;
    let feature_blocks = xt.grid_cols();
    let width = bt.block_dims(0, j).1;
    let mut r = 0;
    while r < feature_blocks {
        let r_end = (r + ctx.chunk_r).min(feature_blocks);
        for i in 0..xt.grid_rows() {
            let rows = xt.block_dims(i, 0).0;
            h_local.fill(0.0);
            for k in r..r_end {
                let xb = xt.block_unchecked(i, k);
                let bb = bt.block_unchecked(k, j);
                block_multiply_accumulate(
                    xb.data,
                    bb.data,
                    h_local,
                    KernelShape {
                        m: rows,
                        inner: f,
                        n: width,
                        lda: f,
                        ldb: f,
                        ldc: d,
                    },
                );
            }
            let dst = &mut column[i * n * d..(i * n + rows) * d];
            for (o, h) in dst.iter_mut().zip(h_local.iter()) {
                *o += h;
            }
        }
        r = r_end;
    }
}

fn encode_column_dense(x: &Matrix, b: &Matrix, j: usize, d: usize, column: &mut [f32]) {
    let c0 = j * d;
    let width = d.min(b.cols() - c0);
    for i in 0..x.rows() {
        let out = &mut column[i * d..i * d + width];
        for (k, &xk) in x.row(i).iter().enumerate() {
            let brow = &b.row(k)[c0..c0 + width];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o += xk * bv;
            }
        }
    }
}

/// `scores += payload · J[j][:]` for one received message. `scores` holds
/// `msg.rows` rows of `K` values.
fn accumulate_scores(msg: &TileMessage, class_t: &Operand, ctx: &RunContext, scores: &mut [f32]) {
    let k_total = ctx.classes;
    match class_t {
        Operand::Tiled(jt) => {
            let TileSizes { n, d, k, .. } = ctx.tiles;
            let mut i = 0;
            while i < msg.rows {
                let rows = n.min(msg.rows - i);
                let a = &msg.payload[i * msg.stride..];
                for kb in 0..jt.grid_cols() {
                    let jb = jt.block_unchecked(msg.block, kb);
                    block_multiply_accumulate(
                        a,
                        jb.data,
                        &mut scores[i * k_total + kb * k..],
                        KernelShape {
                            m: rows,
                            inner: d,
                            n: jb.cols,
                            lda: msg.stride,
                            ldb: d,
                            ldc: k_total,
                        },
                    );
                }
                i += rows;
            }
        }
        Operand::Dense(jd) => {
            let c0 = msg.block * msg.stride;
            for r in 0..msg.rows {
                let h = &msg.payload[r * msg.stride..r * msg.stride + msg.width];
                let s = &mut scores[r * k_total..(r + 1) * k_total];
                for (jj, &hv) in h.iter().enumerate() {
                    for (sv, &jv) in s.iter_mut().zip(jd.row(c0 + jj)) {
                        *sv += hv * jv;
                    }
                }
            }
        }
    }
}

/// Pops messages until `finished()` holds and a re-poll finds the queue
/// empty, or the run is aborted.
fn drain_queue(
    queue: &TileQueue<TileMessage>,
    ctx: &RunContext,
    rng: &mut Option<ChaCha8Rng>,
    finished: impl Fn() -> bool,
    mut handle: impl FnMut(TileMessage),
) {
    let mut idle = IdleWait::new();
    loop {
        if ctx.aborted() {
            return;
        }
        maybe_delay(rng);
        if let Some(msg) = queue.try_pop() {
            ctx.messages.fetch_add(1, Ordering::Relaxed);
            ctx.elements.fetch_add(msg.logical_len(), Ordering::Relaxed);
            handle(msg);
            idle.reset();
            continue;
        }
        if finished() {
            match queue.try_pop() {
                Some(msg) => {
                    ctx.messages.fetch_add(1, Ordering::Relaxed);
                    ctx.elements.fetch_add(msg.logical_len(), Ordering::Relaxed);
                    handle(msg);
                    continue;
                }
                None => return,
            }
        }
        idle.wait();
    }
}

/// Stage II, variant S: accumulates a private `N×K` partial of `S` from the
/// sibling's column blocks, then adds it into `global` under the lock.
pub fn stage2_worker_s(t: usize, class_t: &Operand, ctx: &RunContext, global: &Mutex<Vec<f32>>) {
    let mut rng = ctx.jitter_rng(2, t);
    let mut local = vec![0.0f32; ctx.rows * ctx.classes];
    drain_queue(
        &ctx.queues[t],
        ctx,
        &mut rng,
        || ctx.status.is_done(t),
        |msg| accumulate_scores(&msg, class_t, ctx, &mut local),
    );
    if ctx.aborted() {
        return;
    }
    let mut s = global.lock().unwrap_or_else(|e| e.into_inner());
    for (g, l) in s.iter_mut().zip(&local) {
        *g += l;
    }
}

/// Stage II, variant L: computes rows `row_range(t)` of `S` from chunks sent
/// by every stage I worker and writes their arg-max into `predictions`.
pub fn stage2_worker_l(
    t: usize,
    class_t: &Operand,
    ctx: &RunContext,
    scores: &mut [f32],
    predictions: &mut [usize],
) {
    let mut rng = ctx.jitter_rng(2, t);
    drain_queue(
        &ctx.queues[t],
        ctx,
        &mut rng,
        || ctx.status.all_done(),
        |msg| {
            debug_assert_eq!(msg.rows, predictions.len());
            accumulate_scores(&msg, class_t, ctx, scores)
        },
    );
    if ctx.aborted() {
        return;
    }
    for (p, row) in predictions.iter_mut().zip(scores.chunks_exact(ctx.classes)) {
        *p = argmax(row);
    }
}

/// Counters describing what went through the queues in one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StreamStats {
    pub messages: usize,
    /// Logical (unpadded) elements of `H` received by stage II.
    pub elements: usize,
}

#[derive(Debug, Clone)]
pub struct InferenceOutput {
    pub predictions: Vec<usize>,
    /// Similarity matrix `S` (N×K).
    pub scores: Matrix,
    /// From receiving `X` (before tiling it) to the last prediction written.
    pub latency: Duration,
    pub stats: StreamStats,
}

impl InferenceOutput {
    pub fn latency_ms(&self) -> f64 {
        self.latency.as_secs_f64() * 1e3
    }
}

/// Encoded matrix reassembled from the stage I stream.
#[derive(Debug, Clone)]
pub struct EncodedStream {
    pub encoded: Matrix,
    /// Column blocks received from each stage I worker, in arrival order.
    pub blocks_by_worker: Vec<Vec<usize>>,
    pub stats: StreamStats,
}

/// A model prepared for repeated pipelined inference: weights laid out once,
/// binding plan resolved once.
#[derive(Debug, Clone)]
pub struct Engine {
    config: PipelineConfig,
    features: usize,
    dim: usize,
    classes: usize,
    base: Operand,
    class_t: Operand,
    plan: Option<(Vec<usize>, Vec<usize>)>,
}

impl Engine {
    pub fn new(model: &Model, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let TileSizes { f, d, k, .. } = config.tiles;
        let (base, class_t) = if config.tiling {
            (
                Operand::Tiled(tile_matrix(model.base(), BlockSpec::base(f, d)?)),
                Operand::Tiled(tile_matrix(model.class_t(), BlockSpec::class_t(d, k)?)),
            )
        } else {
            (
                Operand::Dense(model.base().clone()),
                Operand::Dense(model.class_t().clone()),
            )
        };
        let plan = match &config.affinity {
            AffinityPolicy::Disabled => None,
            AffinityPolicy::NumaAware(topo) => {
                let plan: BindingPlan = compute_binding(topo, config.workers)?;
                Some((plan.stage1_os(topo), plan.stage2_os(topo)))
            }
        };
        Ok(Engine {
            config,
            features: model.features(),
            dim: model.dim(),
            classes: model.classes(),
            base,
            class_t,
            plan,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// OS CPU ids the stage I and stage II workers are pinned to, if any.
    pub fn binding(&self) -> Option<(&[usize], &[usize])> {
        self.plan.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice()))
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.features {
            return Err(HdError::DimensionMismatch {
                context: "batch feature count vs model",
                expected: self.features,
                actual: x.cols(),
            });
        }
        if x.rows() == 0 {
            return Err(HdError::Empty("batch has no samples"));
        }
        if self.config.variant == Variant::Large && x.rows() < self.config.workers {
            return Err(HdError::config(format!(
                "variant L needs at least as many samples ({}) as workers ({})",
                x.rows(),
                self.config.workers
            )));
        }
        Ok(())
    }

    fn prepare_input(&self, x: &Matrix) -> Result<Operand> {
        Ok(if self.config.tiling {
            let TileSizes { n, f, .. } = self.config.tiles;
            Operand::Tiled(tile_matrix(x, BlockSpec::input(n, f)?))
        } else {
            Operand::Dense(x.clone())
        })
    }

    fn pin(&self, stage: usize, t: usize) {
        if let Some((s1, s2)) = &self.plan {
            let cpu = if stage == 1 { s1[t] } else { s2[t] };
            apply_binding_or_warn(cpu, if stage == 1 { "stage I" } else { "stage II" });
        }
    }

    /// Runs both stages on `x` and returns predictions and latency.
    pub fn infer(&self, x: &Matrix) -> Result<InferenceOutput> {
        self.check_input(x)?;
        let start = Instant::now();
        let xin = self.prepare_input(x)?;
        let rows = x.rows();
        let workers = self.config.workers;
        let ctx = RunContext::new(&self.config, rows, self.dim, self.classes);
        let mut predictions = vec![0usize; rows];

        let scores = match self.config.variant {
            Variant::Small => {
                let global = Mutex::new(vec![0.0f32; rows * self.classes]);
                std::thread::scope(|s| {
                    for t in 0..workers {
                        let (ctx, xin, global) = (&ctx, &xin, &global);
                        s.spawn(move || {
                            self.pin(1, t);
                            ctx.guarded("stage I", t, || stage1_worker(t, xin, &self.base, ctx));
                        });
                        s.spawn(move || {
                            self.pin(2, t);
                            ctx.guarded("stage II", t, || stage2_worker_s(t, &self.class_t, ctx, global));
                        });
                    }
                });
                self.check_failure(&ctx)?;
                let scores = global.into_inner().unwrap_or_else(|e| e.into_inner());
                parallel_argmax(&scores, self.classes, &mut predictions, 2 * workers);
                scores
            }
            Variant::Large => {
                let mut scores = vec![0.0f32; rows * self.classes];
                std::thread::scope(|s| {
                    let mut score_rest = scores.as_mut_slice();
                    let mut pred_rest = predictions.as_mut_slice();
                    for t in 0..workers {
                        let len = row_range(t, workers, rows).len();
                        let (score_mine, sr) = score_rest.split_at_mut(len * self.classes);
                        let (pred_mine, pr) = pred_rest.split_at_mut(len);
                        score_rest = sr;
                        pred_rest = pr;
                        let (ctx, xin) = (&ctx, &xin);
                        s.spawn(move || {
                            self.pin(1, t);
                            ctx.guarded("stage I", t, || stage1_worker(t, xin, &self.base, ctx));
                        });
                        s.spawn(move || {
                            self.pin(2, t);
                            ctx.guarded("stage II", t, || {
                                stage2_worker_l(t, &self.class_t, ctx, score_mine, pred_mine)
                            });
                        });
                    }
                });
                self.check_failure(&ctx)?;
                scores
            }
        };
        let latency = start.elapsed();
        Ok(InferenceOutput {
            predictions,
            scores: Matrix::from_vec(rows, self.classes, scores)?,
            latency,
            stats: StreamStats {
                messages: ctx.messages.load(Ordering::Relaxed),
                elements: ctx.elements.load(Ordering::Relaxed),
            },
        })
    }

    /// Runs stage I only, with collectors in place of stage II, and
    /// reassembles `H` from the streamed messages.
    pub fn encode_streamed(&self, x: &Matrix) -> Result<EncodedStream> {
        self.check_input(x)?;
        let xin = self.prepare_input(x)?;
        let rows = x.rows();
        let workers = self.config.workers;
        let ctx = RunContext::new(&self.config, rows, self.dim, self.classes);
        let collected: Vec<Mutex<Vec<TileMessage>>> = (0..workers).map(|_| Mutex::new(Vec::new())).collect();
        std::thread::scope(|s| {
            for (t, sink) in collected.iter().enumerate() {
                let (ctx, xin) = (&ctx, &xin);
                s.spawn(move || ctx.guarded("stage I", t, || stage1_worker(t, xin, &self.base, ctx)));
                s.spawn(move || {
                    ctx.guarded("collector", t, || {
                        let mut rng = ctx.jitter_rng(3, t);
                        let finished = || match ctx.variant {
                            Variant::Small => ctx.status.is_done(t),
                            Variant::Large => ctx.status.all_done(),
                        };
                        let mut out = sink.lock().unwrap();
                        drain_queue(&ctx.queues[t], ctx, &mut rng, finished, |m| out.push(m));
                    })
                });
            }
        });
        self.check_failure(&ctx)?;

        let d = self.config.tiles.d;
        let mut encoded = Matrix::zeros(rows, self.dim);
        let mut blocks_by_worker = vec![Vec::new(); workers];
        for sink in collected {
            for msg in sink.into_inner().unwrap() {
                let producer = msg.block % workers;
                if msg.row_start == 0 {
                    blocks_by_worker[producer].push(msg.block);
                }
                for r in 0..msg.rows {
                    let src = &msg.payload[r * msg.stride..r * msg.stride + msg.width];
                    let row = encoded.row_mut(msg.row_start + r);
                    row[msg.block * d..msg.block * d + msg.width].copy_from_slice(src);
                }
            }
        }
        Ok(EncodedStream {
            encoded,
            blocks_by_worker,
            stats: StreamStats {
                messages: ctx.messages.load(Ordering::Relaxed),
                elements: ctx.elements.load(Ordering::Relaxed),
            },
        })
    }

    fn check_failure(&self, ctx: &RunContext) -> Result<()> {
        if let Some(msg) = ctx.failure.lock().unwrap_or_else(|e| e.into_inner()).take() {
            return Err(HdError::WorkerFailed(msg));
        }
        if ctx.aborted() {
            return Err(HdError::WorkerFailed("run aborted".into()));
        }
        Ok(())
    }
}

fn parallel_argmax(scores: &[f32], classes: usize, predictions: &mut [usize], threads: usize) {
    let rows = predictions.len();
    let threads = threads.clamp(1, rows);
    if threads == 1 {
        for (p, row) in predictions.iter_mut().zip(scores.chunks_exact(classes)) {
            *p = argmax(row);
        }
        return;
    }
    let per = rows.div_ceil(threads);
    std::thread::scope(|s| {
        for (preds, rows) in predictions
            .chunks_mut(per)
            .zip(scores.chunks(per * classes))
        {
            s.spawn(move || {
                for (p, row) in preds.iter_mut().zip(rows.chunks_exact(classes)) {
                    *p = argmax(row);
                }
            });
        }
    });
}

/// One-shot convenience: prepares an [`Engine`] and runs it on `batch`.
/// Returns the predictions and the end-to-end latency in milliseconds.
pub fn run_inference(batch: &Batch, model: &Model, config: PipelineConfig) -> Result<(Vec<usize>, f64)> {
    batch.check_against(model)?;
    let engine = Engine::new(model, config)?;
    let out = engine.infer(batch.features())?;
    let ms = out.latency_ms();
    Ok((out.predictions, ms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compare::{compare_predictions, scores_close, SCORE_RTOL};
    use crate::hdc::{random_features, reference_forward, synthetic_model};

    fn check(model: &Model, x: &Matrix, config: PipelineConfig) -> InferenceOutput {
        let reference = reference_forward(x, model).unwrap();
        let out = Engine::new(model, config.clone()).unwrap().infer(x).unwrap();
        let agreement = compare_predictions(&reference.scores, &reference.predictions, &out.predictions, model.dim());
        assert!(agreement.ok(), "{config:?}: {agreement:?}");
        out
    }

    #[test]
    fn stage1_assignment_round_robin() {
        let blocks: Vec<_> = assigned_column_blocks(2, 4, 8).collect();
        assert_eq!(blocks, vec![2, 6]);
        let blocks: Vec<_> = assigned_column_blocks(0, 1, 3).collect();
        assert_eq!(blocks, vec![0, 1, 2]);
    }

    #[test]
    fn row_ranges_partition_with_remainder_on_last() {
        let ranges: Vec<_> = (0..4).map(|t| row_range(t, 4, 10)).collect();
        assert_eq!(ranges, vec![0..2, 2..4, 4..6, 6..10]);
        for (n, t) in [(7, 7), (100, 3), (33, 8)] {
            let mut next = 0;
            for w in 0..t {
                let r = row_range(w, t, n);
                assert_eq!(r.start, next);
                next = r.end;
            }
            assert_eq!(next, n);
        }
    }

    #[test]
    fn single_worker_matches_reference() {
        let model = synthetic_model(27, 1000, 5, 1).unwrap();
        let x = random_features(40, 27, 2);
        for variant in [Variant::Small, Variant::Large] {
            for tiling in [true, false] {
                check(&model, &x, PipelineConfig::new(1, variant).with_tiling(tiling));
            }
        }
    }

    #[test]
    fn worker_grid_matches_reference_and_scores() {
        // D not a multiple of d, N not a multiple of n or T.
        let model = synthetic_model(37, 530, 26, 3).unwrap();
        let x = random_features(45, 37, 4);
        let reference = reference_forward(&x, &model).unwrap();
        for workers in [2, 3, 4] {
            for variant in [Variant::Small, Variant::Large] {
                for tiles in [16, 32] {
                    for r in [1, 8] {
                        let cfg = PipelineConfig::new(workers, variant)
                            .with_tiles(TileSizes::uniform(tiles))
                            .with_chunk_r(r);
                        let out = check(&model, &x, cfg);
                        // Bipolar H and bipolar J give integer scores; exact
                        // wherever H agrees, so compare with the tolerance.
                        let close = (0..x.rows())
                            .filter(|&i| scores_close(out.scores.row(i), reference.scores.row(i), SCORE_RTOL))
                            .count();
                        assert!(close + 2 >= x.rows(), "only {close} score rows close");
                    }
                }
            }
        }
    }

    #[test]
    fn zero_class_matrix_gives_zero_scores() {
        let base = crate::hdc::random_gaussian_base(8, 100, 1);
        let model = Model::new(base, Matrix::zeros(100, 4)).unwrap();
        let x = random_features(10, 8, 1);
        for variant in [Variant::Small, Variant::Large] {
            let out = Engine::new(&model, PipelineConfig::new(3, variant)).unwrap().infer(&x).unwrap();
            assert!(out.scores.as_slice().iter().all(|&v| v == 0.0));
            assert!(out.predictions.iter().all(|&p| p == 0));
        }
    }

    #[test]
    fn message_conservation() {
        let model = synthetic_model(20, 300, 3, 5).unwrap();
        let x = random_features(30, 20, 6);
        let blocks = 300usize.div_ceil(32);
        let out = Engine::new(&model, PipelineConfig::new(4, Variant::Small)).unwrap().infer(&x).unwrap();
        assert_eq!(out.stats.messages, blocks);
        assert_eq!(out.stats.elements, 30 * 300);
        let out = Engine::new(&model, PipelineConfig::new(4, Variant::Large)).unwrap().infer(&x).unwrap();
        assert_eq!(out.stats.messages, 4 * blocks);
        assert_eq!(out.stats.elements, 30 * 300);
    }

    #[test]
    fn streamed_blocks_reassemble_reference_encoding() {
        let model = synthetic_model(33, 256, 4, 7).unwrap();
        let x = random_features(21, 33, 8);
        let reference = reference_forward(&x, &model).unwrap();
        for variant in [Variant::Small, Variant::Large] {
            for tiling in [true, false] {
                let cfg = PipelineConfig::new(4, variant)
                    .with_tiles(TileSizes::uniform(16))
                    .with_tiling(tiling);
                let enc = Engine::new(&model, cfg).unwrap().encode_streamed(&x).unwrap();
                let mut w2 = enc.blocks_by_worker[2].clone();
                w2.sort_unstable();
                assert_eq!(w2, vec![2, 6, 10, 14]);
                assert_eq!(enc.stats.elements, 21 * 256);
                // Elements can only differ where X·B sits at rounding
                // distance from zero.
                let flips = enc
                    .encoded
                    .as_slice()
                    .iter()
                    .zip(reference.encoded.as_slice())
                    .filter(|(a, b)| a != b)
                    .count();
                assert!(flips <= 2, "{flips} sign flips");
            }
        }
    }

    #[test]
    fn tiny_queues_still_terminate() {
        let model = synthetic_model(16, 512, 5, 9).unwrap();
        let x = random_features(64, 16, 10);
        for variant in [Variant::Small, Variant::Large] {
            check(&model, &x, PipelineConfig::new(4, variant).with_queue_capacity(1).with_tiles(TileSizes::uniform(16)));
        }
    }

    #[test]
    fn jittered_schedules_are_deterministic() {
        let model = synthetic_model(12, 400, 6, 11).unwrap();
        let x = random_features(24, 12, 12);
        let first = Engine::new(&model, PipelineConfig::new(3, Variant::Large)).unwrap().infer(&x).unwrap();
        for seed in 0..10 {
            for variant in [Variant::Small, Variant::Large] {
                let cfg = PipelineConfig::new(3, variant)
                    .with_schedule_jitter(seed)
                    .with_queue_capacity(2);
                let out = Engine::new(&model, cfg).unwrap().infer(&x).unwrap();
                assert_eq!(out.predictions, first.predictions);
            }
        }
    }

    #[test]
    fn worker_failure_aborts_instead_of_hanging() {
        let model = synthetic_model(8, 256, 3, 1).unwrap();
        let x = random_features(16, 8, 1);
        for variant in [Variant::Small, Variant::Large] {
            let mut cfg = PipelineConfig::new(2, variant).with_queue_capacity(1);
            cfg.fail_stage1_worker = Some(1);
            let err = Engine::new(&model, cfg).unwrap().infer(&x).unwrap_err();
            assert!(matches!(err, HdError::WorkerFailed(ref m) if m.contains("injected")), "{err}");
        }
    }

    #[test]
    fn config_validation() {
        let model = synthetic_model(8, 64, 3, 1).unwrap();
        assert!(Engine::new(&model, PipelineConfig::new(0, Variant::Small)).is_err());
        assert!(Engine::new(&model, PipelineConfig::new(1, Variant::Small).with_chunk_r(0)).is_err());
        assert!(Engine::new(&model, PipelineConfig::new(1, Variant::Small).with_tiles(TileSizes::uniform(0))).is_err());
        let topo = Topology::synthetic(2, 1, 2).unwrap();
        let cfg = PipelineConfig::new(3, Variant::Small).with_affinity(AffinityPolicy::NumaAware(topo));
        assert!(matches!(Engine::new(&model, cfg), Err(HdError::InvalidConfig(_))));

        let engine = Engine::new(&model, PipelineConfig::new(4, Variant::Large)).unwrap();
        assert!(engine.infer(&random_features(3, 8, 0)).is_err());
        assert!(engine.infer(&random_features(4, 7, 0)).is_err());
    }

    #[test]
    fn variant_l_with_one_row_per_worker() {
        let model = synthetic_model(10, 700, 4, 2).unwrap();
        let x = random_features(4, 10, 3);
        check(&model, &x, PipelineConfig::new(4, Variant::Large));
    }

    #[test]
    fn binding_failure_degrades_to_unpinned() {
        // A synthetic 64-core topology pins to CPUs that do not exist here.
        let model = synthetic_model(8, 128, 3, 1).unwrap();
        let x = random_features(8, 8, 1);
        let topo = Topology::synthetic(64, 4, 2).unwrap();
        let cfg = PipelineConfig::new(2, Variant::Small).with_affinity(AffinityPolicy::NumaAware(topo));
        let engine = Engine::new(&model, cfg).unwrap();
        assert_eq!(engine.binding().unwrap().0, &[0, 2]);
        check(&model, &x, engine.config().clone());
    }

    #[test]
    fn run_inference_reports_latency() {
        let model = synthetic_model(8, 128, 3, 1).unwrap();
        let batch = Batch::unlabeled(random_features(8, 8, 1)).unwrap();
        let (pred, ms) = run_inference(&batch, &model, PipelineConfig::new(1, Variant::Small)).unwrap();
        assert_eq!(pred.len(), 8);
        assert!(ms > 0.0);
    }
}
