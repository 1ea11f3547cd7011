//! Hypervector primitives, nonlinear encoding and the single-threaded
//! reference inference path.
//!
//! Hypervectors are stored as `f32` rather than bit-packed so that encoding
//! and similarity search stay in float SIMD arithmetic end to end. The
//! reference path here is deliberately plain: row-major matrices, one sample
//! at a time, fixed summation order. Every parallel executor in the crate is
//! tested against it.

use std::ops::Deref;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{HdError, Result};
use crate::matrix::Matrix;

/// A hypervector in `{-1, +1}^D`.
#[derive(Debug, Clone, PartialEq)]
pub struct BipolarVector(Vec<f32>);

impl BipolarVector {
    pub fn new(elements: Vec<f32>) -> Result<Self> {
        if elements.is_empty() {
            return Err(HdError::Empty("bipolar vector"));
        }
        if let Some(index) = elements.iter().position(|&v| v != 1.0 && v != -1.0) {
            return Err(HdError::NotBipolar {
                index,
                value: elements[index],
            });
        }
        Ok(BipolarVector(elements))
    }

    pub fn ones(dim: usize) -> Self {
        assert!(dim > 0, "hypervector dimension must be positive");
        BipolarVector(vec![1.0; dim])
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    pub fn to_real(&self) -> RealVector {
        RealVector(self.0.clone())
    }
}

impl Deref for BipolarVector {
    type Target = [f32];
    fn deref(&self) -> &[f32] {
        &self.0
    }
}

/// An unconstrained real-valued vector (bundles, feature rows, scores).
#[derive(Debug, Clone, PartialEq)]
pub struct RealVector(Vec<f32>);

impl RealVector {
    pub fn new(elements: Vec<f32>) -> Result<Self> {
        if elements.is_empty() {
            return Err(HdError::Empty("real vector"));
        }
        Ok(RealVector(elements))
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }
}

impl Deref for RealVector {
    type Target = [f32];
    fn deref(&self) -> &[f32] {
        &self.0
    }
}

/// Trained HDC classifier: base matrix `B` (F×D) and transposed class matrix
/// `J = Mᵀ` (D×K).
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    base: Matrix,
    class_t: Matrix,
}

impl Model {
    pub fn new(base: Matrix, class_t: Matrix) -> Result<Self> {
        if base.rows() == 0 {
            return Err(HdError::Empty("model has no features"));
        }
        if base.cols() == 0 {
            return Err(HdError::Empty("model has zero dimensionality"));
        }
        if class_t.rows() != base.cols() {
            return Err(HdError::DimensionMismatch {
                context: "class matrix rows vs hypervector dimension",
                expected: base.cols(),
                actual: class_t.rows(),
            });
        }
        if class_t.cols() < 2 {
            return Err(HdError::config(format!(
                "model needs at least 2 classes, got {}",
                class_t.cols()
            )));
        }
        if let Some(index) = base.first_non_finite() {
            return Err(HdError::NonFinite {
                context: "base matrix",
                index,
            });
        }
        if let Some(index) = class_t.first_non_finite() {
            return Err(HdError::NonFinite {
                context: "class matrix",
                index,
            });
        }
        Ok(Model { base, class_t })
    }

    /// Builds a model from class hypervectors given one per row (K×D).
    pub fn from_class_rows(base: Matrix, classes: &Matrix) -> Result<Self> {
        Model::new(base, classes.transpose())
    }

    pub fn features(&self) -> usize {
        self.base.rows()
    }

    pub fn dim(&self) -> usize {
        self.base.cols()
    }

    pub fn classes(&self) -> usize {
        self.class_t.cols()
    }

    /// Base matrix `B`, F×D row-major.
    pub fn base(&self) -> &Matrix {
        &self.base
    }

    /// Transposed class matrix `J`, D×K row-major.
    pub fn class_t(&self) -> &Matrix {
        &self.class_t
    }
}

/// A batch of `N` feature rows with optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Matrix,
    labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn new(features: Matrix, labels: Option<Vec<usize>>) -> Result<Self> {
        if features.rows() == 0 {
            return Err(HdError::Empty("batch has no samples"));
        }
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(HdError::DimensionMismatch {
                    context: "label count vs sample count",
                    expected: features.rows(),
                    actual: l.len(),
                });
            }
        }
        Ok(Batch { features, labels })
    }

    pub fn unlabeled(features: Matrix) -> Result<Self> {
        Batch::new(features, None)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn into_parts(self) -> (Matrix, Option<Vec<usize>>) {
        (self.features, self.labels)
    }

    /// Rows `[start, end)` as a new batch.
    pub fn slice(&self, start: usize, end: usize) -> Result<Batch> {
        if start >= end || end > self.len() {
            return Err(HdError::config(format!(
                "row range {start}..{end} invalid for {} samples",
                self.len()
            )));
        }
        Batch::new(
            self.features.slice_rows(start, end),
            self.labels.as_ref().map(|l| l[start..end].to_vec()),
        )
    }

    /// Checks feature width and label range against a model.
    pub fn check_against(&self, model: &Model) -> Result<()> {
        if self.features.cols() != model.features() {
            return Err(HdError::DimensionMismatch {
                context: "batch feature count vs model",
                expected: model.features(),
                actual: self.features.cols(),
            });
        }
        if let Some(labels) = &self.labels {
            if let Some((sample, &label)) =
                labels.iter().enumerate().find(|(_, &l)| l >= model.classes())
            {
                return Err(HdError::LabelOutOfRange {
                    sample,
                    label: label as i64,
                    classes: model.classes(),
                });
            }
        }
        Ok(())
    }
}

/// Majority-vote normalization: `+1` for `x >= 0` (ties included), else `-1`.
pub fn hardsign(v: &[f32]) -> Result<BipolarVector> {
    if v.is_empty() {
        return Err(HdError::Empty("hardsign input"));
    }
    if let Some(index) = v.iter().position(|x| !x.is_finite()) {
        return Err(HdError::NonFinite {
            context: "hardsign input",
            index,
        });
    }
    let mut out = v.to_vec();
    hardsign_in_place(&mut out);
    Ok(BipolarVector(out))
}

/// Unchecked hot-path variant of [`hardsign`].
#[inline]
pub fn hardsign_in_place(v: &mut [f32]) {
    for x in v {
        *x = if *x >= 0.0 { 1.0 } else { -1.0 };
    }
}

fn check_dims(context: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(HdError::DimensionMismatch {
            context,
            expected: a,
            actual: b,
        });
    }
    Ok(())
}

/// Unconstrained bundling (element-wise addition).
pub fn bundle(h1: &BipolarVector, h2: &BipolarVector) -> Result<RealVector> {
    check_dims("bundle", h1.dim(), h2.dim())?;
    Ok(RealVector(
        h1.iter().zip(h2.iter()).map(|(a, b)| a + b).collect(),
    ))
}

/// Binding (element-wise multiplication). Self-inverse on bipolar vectors.
pub fn bind(h1: &BipolarVector, h2: &BipolarVector) -> Result<BipolarVector> {
    check_dims("bind", h1.dim(), h2.dim())?;
    Ok(BipolarVector(
        h1.iter().zip(h2.iter()).map(|(a, b)| a * b).collect(),
    ))
}

/// Binds a real scalar to a hypervector.
pub fn bind_scalar(c: f32, h: &BipolarVector) -> Result<RealVector> {
    if !c.is_finite() {
        return Err(HdError::NonFinite {
            context: "bind_scalar coefficient",
            index: 0,
        });
    }
    Ok(RealVector(h.iter().map(|x| c * x).collect()))
}

/// Cyclic right rotation: element `j` moves to `(j + shift) mod D`.
pub fn permute(h: &BipolarVector, shift: usize) -> BipolarVector {
    let mut out = h.0.clone();
    out.rotate_right(shift % h.dim());
    BipolarVector(out)
}

/// Encodes one feature row: `hardsign(Σ x_i · b_i)`.
pub fn encode_sample(x: &[f32], model: &Model) -> Result<BipolarVector> {
    check_dims("encode_sample feature count", model.features(), x.len())?;
    let mut acc = vec![0.0f32; model.dim()];
    encode_into(x, model.base(), &mut acc);
    Ok(BipolarVector(acc))
}

/// `acc = hardsign(x · B)`; `acc` must be zeroed and of length D.
pub(crate) fn encode_into(x: &[f32], base: &Matrix, acc: &mut [f32]) {
    for (i, &xi) in x.iter().enumerate() {
        for (a, &b) in acc.iter_mut().zip(base.row(i)) {
            *a += xi * b;
        }
    }
    hardsign_in_place(acc);
}

/// Inner products of `h` with every class hypervector.
pub fn similarity_scores(h: &BipolarVector, model: &Model) -> Result<RealVector> {
    check_dims("similarity_scores dimension", model.dim(), h.dim())?;
    let mut s = vec![0.0f32; model.classes()];
    scores_into(h, model.class_t(), &mut s);
    Ok(RealVector(s))
}

pub(crate) fn scores_into(h: &[f32], class_t: &Matrix, s: &mut [f32]) {
    for (j, &hj) in h.iter().enumerate() {
        for (sk, &jk) in s.iter_mut().zip(class_t.row(j)) {
            *sk += hj * jk;
        }
    }
}

/// Arg-max over similarity scores; the lowest index wins ties.
pub fn predict_single(s: &[f32]) -> Result<usize> {
    if s.is_empty() {
        return Err(HdError::Empty("score vector"));
    }
    Ok(argmax(s))
}

#[inline]
pub(crate) fn argmax(s: &[f32]) -> usize {
    let mut best = 0;
    for (k, &v) in s.iter().enumerate().skip(1) {
        if v > s[best] {
            best = k;
        }
    }
    best
}

/// Output of the reference path: encoded batch, scores and predictions.
#[derive(Debug, Clone)]
pub struct ReferenceOutput {
    pub encoded: Matrix,
    pub scores: Matrix,
    pub predictions: Vec<usize>,
}

/// Single-threaded `H = hardsign(XB)`, `S = HJ`, row-wise arg-max.
pub fn reference_forward(features: &Matrix, model: &Model) -> Result<ReferenceOutput> {
    check_dims("reference feature count", model.features(), features.cols())?;
    if features.rows() == 0 {
        return Err(HdError::Empty("batch has no samples"));
    }
    let n = features.rows();
    let mut encoded = Matrix::zeros(n, model.dim());
    let mut scores = Matrix::zeros(n, model.classes());
    let mut predictions = Vec::with_capacity(n);
    for i in 0..n {
        let h = encoded.row_mut(i);
        encode_into(features.row(i), model.base(), h);
        let s = scores.row_mut(i);
        scores_into(encoded.row(i), model.class_t(), s);
        predictions.push(argmax(scores.row(i)));
    }
    Ok(ReferenceOutput {
        encoded,
        scores,
        predictions,
    })
}

/// Reference predictions for a batch.
pub fn reference_infer_batch(batch: &Batch, model: &Model) -> Result<Vec<usize>> {
    batch.check_against(model)?;
    Ok(reference_forward(batch.features(), model)?.predictions)
}

/// Seeded portable generator used for every random artifact in the crate.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_bipolar(dim: usize, seed: u64) -> BipolarVector {
    assert!(dim > 0, "hypervector dimension must be positive");
    let mut rng = seeded_rng(seed);
    BipolarVector(fill_bipolar(&mut rng, dim))
}

pub(crate) fn fill_bipolar(rng: &mut impl Rng, len: usize) -> Vec<f32> {
    (0..len)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect()
}

/// Standard-normal base matrix (F×D).
pub fn random_gaussian_base(features: usize, dim: usize, seed: u64) -> Matrix {
    let mut rng = seeded_rng(seed);
    let data = (0..features * dim)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    Matrix::from_vec(features, dim, data).expect("length matches by construction")
}

/// Random bipolar matrix (rows×cols).
pub fn random_bipolar_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = seeded_rng(seed);
    Matrix::from_vec(rows, cols, fill_bipolar(&mut rng, rows * cols))
        .expect("length matches by construction")
}

/// Gaussian base plus random bipolar class hypervectors.
pub fn synthetic_model(features: usize, dim: usize, classes: usize, seed: u64) -> Result<Model> {
    let base = random_gaussian_base(features, dim, seed);
    let class_rows = random_bipolar_matrix(classes, dim, seed.wrapping_add(0x9e37_79b9));
    Model::from_class_rows(base, &class_rows)
}

/// Standard-normal feature batch (N×F).
pub fn random_features(rows: usize, features: usize, seed: u64) -> Matrix {
    random_gaussian_base(rows, features, seed)
}
