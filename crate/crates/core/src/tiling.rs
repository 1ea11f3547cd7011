//! Block-tiled matrix layouts and the block multiply-accumulate kernel.
//!
//! A [`TiledMatrix`] stores a dense matrix as a grid of fixed-size blocks.
//! Blocks are ordered row- or column-major across the grid (inter-block
//! order) and their elements row- or column-major inside a block
//! (intra-block order). Storage is zero-padded to whole blocks so every
//! block occupies the same contiguous span; logical block dimensions shrink
//! at the right and bottom boundaries.
//!
//! The layouts used by the pipeline:
//!
//! | matrix | block   | inter-block  | intra-block  |
//! |--------|---------|--------------|--------------|
//! | `X`    | `n × f` | row-major    | row-major    |
//! | `B`    | `f × d` | column-major | column-major |
//! | `J`    | `d × k` | row-major    | column-major |

use crate::error::{HdError, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Order {
    RowMajor,
    ColMajor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockSpec {
    pub rows_per_block: usize,
    pub cols_per_block: usize,
    pub inter_block_order: Order,
    pub intra_block_order: Order,
}

impl BlockSpec {
    pub fn new(
        rows_per_block: usize,
        cols_per_block: usize,
        inter_block_order: Order,
        intra_block_order: Order,
    ) -> Result<Self> {
        if rows_per_block == 0 || cols_per_block == 0 {
            return Err(HdError::config(format!(
                "block dimensions must be positive, got {rows_per_block}x{cols_per_block}"
            )));
        }
        Ok(BlockSpec {
            rows_per_block,
            cols_per_block,
            inter_block_order,
            intra_block_order,
        })
    }

    /// Layout of the input batch `X` with `n × f` blocks.
    pub fn input(n: usize, f: usize) -> Result<Self> {
        BlockSpec::new(n, f, Order::RowMajor, Order::RowMajor)
    }

    /// Layout of the base matrix `B` with `f × d` blocks.
    pub fn base(f: usize, d: usize) -> Result<Self> {
        BlockSpec::new(f, d, Order::ColMajor, Order::ColMajor)
    }

    /// Layout of the transposed class matrix `J` with `d × k` blocks.
    pub fn class_t(d: usize, k: usize) -> Result<Self> {
        BlockSpec::new(d, k, Order::RowMajor, Order::ColMajor)
    }

    #[inline]
    pub fn block_len(&self) -> usize {
        self.rows_per_block * self.cols_per_block
    }
}

/// A read-only view of one block.
#[derive(Debug, Clone, Copy)]
pub struct BlockView<'a> {
    /// Full padded block, `rows_per_block * cols_per_block` values.
    pub data: &'a [f32],
    /// Logical rows (smaller than the block height at the bottom boundary).
    pub rows: usize,
    /// Logical columns (smaller than the block width at the right boundary).
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiledMatrix {
    spec: BlockSpec,
    rows: usize,
    cols: usize,
    grid_rows: usize,
    grid_cols: usize,
    storage: Vec<f32>,
}

impl TiledMatrix {
    pub fn spec(&self) -> &BlockSpec {
        &self.spec
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Number of block rows, `ceil(rows / rows_per_block)`.
    pub fn grid_rows(&self) -> usize {
        self.grid_rows
    }

    /// Number of block columns, `ceil(cols / cols_per_block)`.
    pub fn grid_cols(&self) -> usize {
        self.grid_cols
    }

    pub fn storage(&self) -> &[f32] {
        &self.storage
    }

    /// Offset of block `(i, j)` in storage. No bounds check.
    #[inline]
    pub fn block_offset(&self, i: usize, j: usize) -> usize {
        let position = match self.spec.inter_block_order {
            Order::RowMajor => i * self.grid_cols + j,
            Order::ColMajor => j * self.grid_rows + i,
        };
        position * self.spec.block_len()
    }

    /// Offset of element `(r, c)` inside a block.
    #[inline]
    fn intra_offset(&self, r: usize, c: usize) -> usize {
        match self.spec.intra_block_order {
            Order::RowMajor => r * self.spec.cols_per_block + c,
            Order::ColMajor => c * self.spec.rows_per_block + r,
        }
    }

    /// Storage index of logical element `(row, col)`.
    #[inline]
    pub fn index_of(&self, row: usize, col: usize) -> usize {
        let (rb, cb) = (self.spec.rows_per_block, self.spec.cols_per_block);
        self.block_offset(row / rb, col / cb) + self.intra_offset(row % rb, col % cb)
    }

    /// Logical dimensions of block `(i, j)`.
    #[inline]
    pub fn block_dims(&self, i: usize, j: usize) -> (usize, usize) {
        let (rb, cb) = (self.spec.rows_per_block, self.spec.cols_per_block);
        (
            rb.min(self.rows - i * rb),
            cb.min(self.cols - j * cb),
        )
    }

    pub fn block_view(&self, i: usize, j: usize) -> Result<BlockView<'_>> {
        if i >= self.grid_rows || j >= self.grid_cols {
            return Err(HdError::BlockOutOfRange {
                row: i,
                col: j,
                block_rows: self.grid_rows,
                block_cols: self.grid_cols,
            });
        }
        Ok(self.block_unchecked(i, j))
    }

    #[inline]
    pub(crate) fn block_unchecked(&self, i: usize, j: usize) -> BlockView<'_> {
        let start = self.block_offset(i, j);
        let (rows, cols) = self.block_dims(i, j);
        BlockView {
            data: &self.storage[start..start + self.spec.block_len()],
            rows,
            cols,
        }
    }
}

/// Re-lays a dense matrix out into blocks; padding cells are zero.
pub fn tile_matrix(dense: &Matrix, spec: BlockSpec) -> TiledMatrix {
    let grid_rows = dense.rows().div_ceil(spec.rows_per_block);
    let grid_cols = dense.cols().div_ceil(spec.cols_per_block);
    let mut t = TiledMatrix {
        spec,
        rows: dense.rows(),
        cols: dense.cols(),
        grid_rows,
        grid_cols,
        storage: vec![0.0; grid_rows * grid_cols * spec.block_len()],
    };
    for r in 0..dense.rows() {
        for (c, &v) in dense.row(r).iter().enumerate() {
            let idx = t.index_of(r, c);
            t.storage[idx] = v;
        }
    }
    t
}

/// Inverse of [`tile_matrix`], dropping padding.
pub fn untile(t: &TiledMatrix) -> Matrix {
    Matrix::from_fn(t.rows, t.cols, |r, c| t.storage[t.index_of(r, c)])
}

/// Operand geometry for [`block_multiply_accumulate`].
///
/// `a` holds `m` rows of `inner` values with row stride `lda`; `b` holds
/// `n` columns of `inner` values with column stride `ldb`; `acc` is
/// row-major with row stride `ldc`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelShape {
    pub m: usize,
    pub inner: usize,
    pub n: usize,
    pub lda: usize,
    pub ldb: usize,
    pub ldc: usize,
}

impl KernelShape {
    /// Tightly packed operands: `a` is `m × inner`, `b` is `inner × n`,
    /// `acc` is `m × n`.
    pub fn packed(m: usize, inner: usize, n: usize) -> Self {
        KernelShape {
            m,
            inner,
            n,
            lda: inner,
            ldb: inner,
            ldc: n,
        }
    }
}

const MR: usize = 6;
const NR: usize = 16;

thread_local! {
    /// Scratch for the row-major copy of the right operand.
    static PANEL: std::cell::RefCell<Vec<f32>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// `acc += a · b` with `a` row-major and `b` column-major.
///
/// `b` is first copied into a row-major panel padded to a multiple of 16
/// columns; the product then broadcasts one element of `a` against 16
/// contiguous panel values at a time, keeping a 6×32 output tile in
/// registers across the whole inner dimension.
pub fn block_multiply_accumulate(a: &[f32], b: &[f32], acc: &mut [f32], shape: KernelShape) {
    let KernelShape {
        m,
        inner,
        n,
        lda,
        ldb,
        ldc,
    } = shape;
    if m == 0 || n == 0 || inner == 0 {
        return;
    }
    assert!(a.len() >= (m - 1) * lda + inner, "left operand too short");
    assert!(b.len() >= (n - 1) * ldb + inner, "right operand too short");
    assert!(acc.len() >= (m - 1) * ldc + n, "accumulator too short");

    let stride = n.next_multiple_of(NR);
    PANEL.with_borrow_mut(|panel| {
        if panel.len() < inner * stride {
            panel.resize(inner * stride, 0.0);
        }
        let panel = &mut panel[..inner * stride];
        for c in 0..n {
            let col = &b[c * ldb..c * ldb + inner];
            for (p, &v) in col.iter().enumerate() {
                panel[p * stride + c] = v;
            }
        }
        if stride > n {
            for row in panel.chunks_exact_mut(stride) {
                row[n..].fill(0.0);
            }
        }
        multiply_panel(a, panel, acc, m, inner, n, stride, lda, ldc);
    });
}

#[allow(clippy::too_many_arguments)]
fn multiply_panel(
    a: &[f32],
    panel: &[f32],
    acc: &mut [f32],
    m: usize,
    inner: usize,
    n: usize,
    stride: usize,
    lda: usize,
    ldc: usize,
) {
    let mut r = 0;
    while r + MR <= m {
        rows_times_panel::<MR>(a, panel, acc, r, inner, n, stride, lda, ldc);
        r += MR;
    }
    while r < m {
        rows_times_panel::<1>(a, panel, acc, r, inner, n, stride, lda, ldc);
        r += 1;
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn rows_times_panel<const R: usize>(
    a: &[f32],
    panel: &[f32],
    acc: &mut [f32],
    r0: usize,
    inner: usize,
    n: usize,
    stride: usize,
    lda: usize,
    ldc: usize,
) {
    let mut c = 0;
    while c + 2 * NR <= stride {
        let tile = micro::<R, 2>(a, panel, r0, c, inner, stride, lda);
        store::<R, 2>(&tile, acc, r0, c, n, ldc);
        c += 2 * NR;
    }
    if c < stride {
        let tile = micro::<R, 1>(a, panel, r0, c, inner, stride, lda);
        store::<R, 1>(&tile, acc, r0, c, n, ldc);
    }
}

#[inline(always)]
fn micro<const R: usize, const V: usize>(
    a: &[f32],
    panel: &[f32],
    r0: usize,
    c0: usize,
    inner: usize,
    stride: usize,
    lda: usize,
) -> [[[f32; NR]; V]; R] {
    let mut tile = [[[0.0f32; NR]; V]; R];
    for p in 0..inner {
        let row = &panel[p * stride + c0..p * stride + c0 + V * NR];
        for (i, out) in tile.iter_mut().enumerate() {
            let x = a[(r0 + i) * lda + p];
            for (v, lanes) in out.iter_mut().enumerate() {
                let bv: &[f32; NR] = row[v * NR..(v + 1) * NR].try_into().unwrap();
                for l in 0..NR {
                    lanes[l] += x * bv[l];
                }
            }
        }
    }
    tile
}

#[inline(always)]
fn store<const R: usize, const V: usize>(
    tile: &[[[f32; NR]; V]; R],
    acc: &mut [f32],
    r0: usize,
    c0: usize,
    n: usize,
    ldc: usize,
) {
    let width = (V * NR).min(n - c0);
    for (i, rows) in tile.iter().enumerate() {
        let dst = &mut acc[(r0 + i) * ldc + c0..(r0 + i) * ldc + c0 + width];
        for (c, d) in dst.iter_mut().enumerate() {
            *d += rows[c / NR][c % NR];
        }
    }
}
