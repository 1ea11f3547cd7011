//! Model and dataset files, synthetic datasets, and single-pass training.
//!
//! Model file (little-endian throughout):
//!
//! | bytes      | content                          |
//! |------------|----------------------------------|
//! | 4          | magic `SHDM`                     |
//! | 4          | version (`1`)                    |
//! | 12         | `F`, `D`, `K` as `u32`           |
//! | 4·F·D      | `B`, row-major `f32`             |
//! | 4·D·K      | `J`, row-major `f32`             |
//!
//! Raw dataset file: magic `SHDX`, then `N`, `F`, `has_labels` as `u32`,
//! `N·F` row-major `f32` features and, if `has_labels != 0`, `N` `u32` labels.
//!
//! CSV datasets hold one sample per row: `F` numeric columns followed by an
//! integer label. A first row containing any non-numeric cell is a header.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{HdError, Result};
use crate::hdc::{encode_into, seeded_rng, Batch, Model};
use crate::matrix::Matrix;

pub const MODEL_MAGIC: [u8; 4] = *b"SHDM";
pub const MODEL_VERSION: u32 = 1;
pub const DATASET_MAGIC: [u8; 4] = *b"SHDX";

const MODEL_HEADER: usize = 20;
const DATASET_HEADER: usize = 16;

fn to_u32(value: usize, what: &'static str) -> Result<u32> {
    u32::try_from(value).map_err(|_| HdError::Parse {
        what,
        detail: format!("{value} does not fit in 32 bits"),
    })
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn get_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn get_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| HdError::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| HdError::io(path, e))
}

fn check_magic(path: &Path, bytes: &[u8], magic: [u8; 4]) -> Result<()> {
    if bytes.len() >= 4 && bytes[..4] != magic {
        return Err(HdError::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found: bytes[..4].to_vec(),
        });
    }
    Ok(())
}

fn check_length(path: &Path, actual: usize, expected: u64) -> Result<()> {
    let actual = actual as u64;
    if actual < expected {
        return Err(HdError::Truncated {
            path: path.to_path_buf(),
            expected,
            actual,
        });
    }
    if actual > expected {
        return Err(HdError::TrailingBytes {
            path: path.to_path_buf(),
            extra: actual - expected,
        });
    }
    Ok(())
}

/// Serializes a model to the `SHDM` byte layout.
pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    let (f, d, k) = (model.features(), model.dim(), model.classes());
    let mut out = Vec::with_capacity(MODEL_HEADER + 4 * (f * d + d * k));
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    for (v, what) in [(f, "feature count"), (d, "dimension"), (k, "class count")] {
        out.extend_from_slice(&to_u32(v, what)?.to_le_bytes());
    }
    put_f32s(&mut out, model.base().as_slice());
    put_f32s(&mut out, model.class_t().as_slice());
    Ok(out)
}

/// Parses `SHDM` bytes; `path` is only used in error messages.
pub fn decode_model(path: &Path, bytes: &[u8]) -> Result<Model> {
    check_magic(path, bytes, MODEL_MAGIC)?;
    if bytes.len() < MODEL_HEADER {
        return Err(HdError::Truncated {
            path: path.to_path_buf(),
            expected: MODEL_HEADER as u64,
            actual: bytes.len() as u64,
        });
    }
    let version = get_u32(bytes, 4);
    if version != MODEL_VERSION {
        return Err(HdError::UnsupportedVersion {
            path: path.to_path_buf(),
            expected: MODEL_VERSION,
            found: version,
        });
    }
    let f = get_u32(bytes, 8) as usize;
    let d = get_u32(bytes, 12) as usize;
    let k = get_u32(bytes, 16) as usize;
    let b_len = f as u64 * d as u64;
    let j_len = d as u64 * k as u64;
    check_length(path, bytes.len(), MODEL_HEADER as u64 + 4 * (b_len + j_len))?;
    let split = MODEL_HEADER + 4 * b_len as usize;
    let base = Matrix::from_vec(f, d, get_f32s(&bytes[MODEL_HEADER..split]))?;
    let class_t = Matrix::from_vec(d, k, get_f32s(&bytes[split..]))?;
    Model::new(base, class_t)
}

pub fn save_model(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    write_file(path.as_ref(), &encode_model(model)?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    decode_model(path, &read_file(path)?)
}

/// Serializes a batch to the `SHDX` byte layout.
pub fn encode_dataset(batch: &Batch) -> Result<Vec<u8>> {
    let x = batch.features();
    let labels = batch.labels();
    let mut out = Vec::with_capacity(DATASET_HEADER + 4 * (x.as_slice().len() + batch.len()));
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&to_u32(x.rows(), "sample count")?.to_le_bytes());
    out.extend_from_slice(&to_u32(x.cols(), "feature count")?.to_le_bytes());
    out.extend_from_slice(&u32::from(labels.is_some()).to_le_bytes());
    put_f32s(&mut out, x.as_slice());
    if let Some(labels) = labels {
        for &l in labels {
            out.extend_from_slice(&to_u32(l, "label")?.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses `SHDX` bytes; `path` is only used in error messages.
pub fn decode_dataset(path: &Path, bytes: &[u8]) -> Result<Batch> {
    check_magic(path, bytes, DATASET_MAGIC)?;
    if bytes.len() < DATASET_HEADER {
        return Err(HdError::Truncated {
            path: path.to_path_buf(),
            expected: DATASET_HEADER as u64,
            actual: bytes.len() as u64,
        });
    }
    let n = get_u32(bytes, 4) as usize;
    let f = get_u32(bytes, 8) as usize;
    let has_labels = get_u32(bytes, 12) != 0;
    let cells = n as u64 * f as u64;
    let expected = DATASET_HEADER as u64 + 4 * cells + if has_labels { 4 * n as u64 } else { 0 };
    check_length(path, bytes.len(), expected)?;
    let split = DATASET_HEADER + 4 * cells as usize;
    let features = Matrix::from_vec(n, f, get_f32s(&bytes[DATASET_HEADER..split]))?;
    let labels = has_labels.then(|| {
        bytes[split..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect()
    });
    Batch::new(features, labels)
}

pub fn save_dataset_shdx(path: impl AsRef<Path>, batch: &Batch) -> Result<()> {
    write_file(path.as_ref(), &encode_dataset(batch)?)
}

/// Writes a labeled batch as CSV without a header row.
pub fn save_dataset_csv(path: impl AsRef<Path>, batch: &Batch) -> Result<()> {
    let path = path.as_ref();
    let labels = batch
        .labels()
        .ok_or(HdError::MissingLabels("CSV datasets carry a label column"))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    let x = batch.features();
    let mut record = Vec::with_capacity(x.cols() + 1);
    for (i, &label) in labels.iter().enumerate() {
        record.clear();
        record.extend(x.row(i).iter().map(|v| v.to_string()));
        record.push(label.to_string());
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| HdError::io(path, e))?;
    Ok(())
}

/// Parses CSV text: `F` feature columns followed by an integer label.
pub fn parse_csv_dataset(path: &Path, text: &[u8]) -> Result<Batch> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text);
    let mut width = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut first = true;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if first {
            first = false;
            if record.iter().any(|c| c.parse::<f32>().is_err()) {
                continue;
            }
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(HdError::RaggedRow {
                path: path.to_path_buf(),
                line,
                expected,
                found: record.len(),
            });
        }
        if expected < 2 {
            return Err(HdError::Parse {
                what: "CSV dataset",
                detail: format!("{}:{line}: need at least one feature and a label", path.display()),
            });
        }
        let non_numeric = |column: usize| HdError::NonNumeric {
            path: path.to_path_buf(),
            line,
            column,
            cell: record[column].to_string(),
        };
        for column in 0..expected - 1 {
            data.push(record[column].parse::<f32>().map_err(|_| non_numeric(column))?);
        }
        let cell = &record[expected - 1];
        let label = cell
            .parse::<i64>()
            .or_else(|_| {
                // Accept integral floats such as "3.0".
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.fract() == 0.0 && v.abs() < 1e15)
                    .map(|v| v as i64)
                    .ok_or(())
            })
            .map_err(|_| non_numeric(expected - 1))?;
        if label < 0 {
            return Err(HdError::LabelOutOfRange {
                sample: labels.len(),
                label,
                classes: 0,
            });
        }
        labels.push(label as usize);
    }
    let Some(width) = width else {
        return Err(HdError::Empty("dataset has no samples"));
    };
    let features = Matrix::from_vec(labels.len(), width - 1, data)?;
    Batch::new(features, Some(labels))
}

/// Loads a dataset, choosing the format from the leading bytes: `SHDX` files
/// are read as raw data, anything else as CSV.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Batch> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    if bytes.is_empty() {
        return Err(HdError::Empty("dataset file is empty"));
    }
    if bytes.starts_with(&DATASET_MAGIC) {
        decode_dataset(path, &bytes)
    } else {
        parse_csv_dataset(path, &bytes)
    }
}

/// Writes `SHDX` unless the extension is `.csv`.
pub fn save_dataset(path: impl AsRef<Path>, batch: &Batch) -> Result<()> {
    let path = path.as_ref();
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        save_dataset_csv(path, batch)
    } else {
        save_dataset_shdx(path, batch)
    }
}

/// Gaussian clusters: class `c` is centered on a random sign pattern scaled
/// to `separation` standard deviations per feature, with unit-variance noise.
/// Sample `i` belongs to class `i mod classes`, so any contiguous half of the
/// rows is class-balanced to within one sample.
pub fn synthetic_clusters(
    samples: usize,
    features: usize,
    classes: usize,
    separation: f32,
    seed: u64,
) -> Result<Batch> {
    if samples == 0 || features == 0 {
        return Err(HdError::Empty("synthetic dataset needs samples and features"));
    }
    if classes < 2 {
        return Err(HdError::config("synthetic dataset needs at least two classes"));
    }
    let mut rng = seeded_rng(seed);
    let centers: Vec<f32> = (0..classes * features)
        .map(|_| if rng.random::<bool>() { separation } else { -separation })
        .collect();
    let mut data = Vec::with_capacity(samples * features);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let c = i % classes;
        let center = &centers[c * features..(c + 1) * features];
        data.extend(center.iter().map(|&m| m + rng.sample::<f32, _>(StandardNormal)));
        labels.push(c);
    }
    Batch::new(Matrix::from_vec(samples, features, data)?, Some(labels))
}

/// How class hypervectors are formed from the per-class sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClassNormalization {
    /// `hardsign` of the sum: bipolar class hypervectors.
    #[default]
    Bipolar,
    /// Keep the raw integer-valued sums.
    Unnormalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrainOptions {
    /// Number of classes; defaults to `max label + 1`.
    pub classes: Option<usize>,
    pub normalization: ClassNormalization,
}

/// Bundles the encodings of each class into its class hypervector.
pub fn single_pass_train(batch: &Batch, base: &Matrix, options: TrainOptions) -> Result<Model> {
    let labels = batch
        .labels()
        .ok_or(HdError::MissingLabels("training needs a labeled dataset"))?;
    let x = batch.features();
    if x.cols() != base.rows() {
        return Err(HdError::DimensionMismatch {
            context: "dataset feature count vs base matrix",
            expected: base.rows(),
            actual: x.cols(),
        });
    }
    let inferred = labels.iter().max().map_or(0, |&m| m + 1);
    let classes = options.classes.unwrap_or(inferred);
    if let Some((sample, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(HdError::LabelOutOfRange {
            sample,
            label: label as i64,
            classes,
        });
    }
    let dim = base.cols();
    let sums = class_sums(x, labels, base, classes);

    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    let empty: Vec<usize> = (0..classes).filter(|&c| counts[c] == 0).collect();
    if !empty.is_empty() {
        return Err(HdError::EmptyClasses(empty));
    }

    let mut class_rows = Matrix::from_vec(classes, dim, sums)?;
    if options.normalization == ClassNormalization::Bipolar {
        crate::hdc::hardsign_in_place(class_rows.as_mut_slice());
    }
    Model::from_class_rows(base.clone(), &class_rows)
}

/// Per-class sums of encoded samples (`K×D`, row-major). Every term is ±1,
/// so the `f32` sums are exact integers regardless of summation order.
#[cfg(feature = "parallel")]
fn class_sums(x: &Matrix, labels: &[usize], base: &Matrix, classes: usize) -> Vec<f32> {
    use rayon::prelude::*;
    let dim = base.cols();
    (0..x.rows())
        .into_par_iter()
        .fold(
            || (vec![0.0f32; classes * dim], vec![0.0f32; dim]),
            |(mut sums, mut h), i| {
                h.fill(0.0);
                encode_into(x.row(i), base, &mut h);
                let c = labels[i];
                for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(&h) {
                    *s += v;
                }
                (sums, h)
            },
        )
        .map(|(sums, _)| sums)
        .reduce(
            || vec![0.0f32; classes * dim],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
                a
            },
        )
}

#[cfg(not(feature = "parallel"))]
fn class_sums(x: &Matrix, labels: &[usize], base: &Matrix, classes: usize) -> Vec<f32> {
    let dim = base.cols();
    let mut sums = vec![0.0f32; classes * dim];
    let mut h = vec![0.0f32; dim];
    for (i, &c) in labels.iter().enumerate() {
        h.fill(0.0);
        encode_into(x.row(i), base, &mut h);
        for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(&h) {
            *s += v;
        }
    }
    sums
}
