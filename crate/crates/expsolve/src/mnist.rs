//! IDX-format digit data: loading, positivity preprocessing, and the
//! priming-number scan.
//!
//! Pixels are mapped through `(p + 1)/256` so every feature lands in `(0, 1]`
//! and the co-occurrence matrix stays strictly positive — no flooring is ever
//! exercised on this data. The scan accumulates `F` once and only re-derives
//! the translation weights for each candidate priming number.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use ndarray::Array2;
use rayon::prelude::*;

use crate::cooc::CooccurrenceMatrix;
use crate::engine::{argmax, DenseEngine};
use crate::error::{Error, Result};
use crate::solver::{explicit_solution, DecoderMatrix};
use crate::train::Engine;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Which half of the canonical split a dataset holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Flattened digits with entries in `(0, 1]` and labels in `0..10`.
#[derive(Debug)]
pub struct DigitDataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl DigitDataset {
    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    /// Wraps the dataset in a training engine (10 classes).
    pub fn engine(&self) -> Result<DenseEngine> {
        DenseEngine::from_matrix(self.features.clone(), self.labels.clone(), 10)
    }
}

/// Raw IDX payloads before preprocessing.
#[derive(Debug)]
pub struct RawDigits {
    pub pixels: Vec<u8>,
    pub rows: usize,
    pub cols: usize,
    pub labels: Vec<u8>,
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let display = path.display().to_string();
    let mut file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw).map_err(|e| Error::io(&display, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(&display, e))?;
        return Ok(out);
    }
    Ok(raw)
}

fn be_u32(data: &[u8], offset: usize, path: &str) -> Result<u32> {
    data.get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

/// Parses an images/labels IDX pair (gzip or raw), validating magic numbers,
/// dimension sizes, and that the two files agree on the sample count.
pub fn load_idx(images: &Path, labels: &Path) -> Result<RawDigits> {
    let img_path = images.display().to_string();
    let lbl_path = labels.display().to_string();

    let img = read_maybe_gz(images)?;
    let magic = be_u32(&img, 0, &img_path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::format(
            &img_path,
            format!("bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(&img, 4, &img_path)? as usize;
    let rows = be_u32(&img, 8, &img_path)? as usize;
    let cols = be_u32(&img, 12, &img_path)? as usize;
    let expected = 16 + count * rows * cols;
    if img.len() != expected {
        return Err(Error::format(
            &img_path,
            format!("payload is {} bytes, header implies {expected}", img.len()),
        ));
    }

    let lbl = read_maybe_gz(labels)?;
    let magic = be_u32(&lbl, 0, &lbl_path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::format(
            &lbl_path,
            format!("bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        ));
    }
    let lbl_count = be_u32(&lbl, 4, &lbl_path)? as usize;
    if lbl.len() != 8 + lbl_count {
        return Err(Error::format(
            &lbl_path,
            format!("payload is {} bytes, header implies {}", lbl.len(), 8 + lbl_count),
        ));
    }
    if lbl_count != count {
        return Err(Error::format(
            &lbl_path,
            format!("{lbl_count} labels for {count} images"),
        ));
    }

    Ok(RawDigits {
        pixels: img[16..].to_vec(),
        rows,
        cols,
        labels: lbl[8..].to_vec(),
    })
}

/// `(pixel + 1)/256` into flattened rows (row-major within each image).
pub fn preprocess(raw: &RawDigits, split: Split) -> Result<DigitDataset> {
    let dim = raw.rows * raw.cols;
    let m = raw.labels.len();
    let mut features = Array2::zeros((m, dim));
    {
        let out = features.as_slice_mut().expect("row-major");
        for (dst, &p) in out.iter_mut().zip(raw.pixels.iter()) {
            *dst = (p as f64 + 1.0) / 256.0;
        }
    }
    let labels = raw
        .labels
        .iter()
        .map(|&l| {
            let l = l as usize;
            if l >= 10 {
                return Err(Error::invalid(format!("label {l} out of digit range")));
            }
            Ok(l)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DigitDataset {
        features,
        labels,
        split,
    })
}

/// Convenience for the canonical file pair under one directory, trying the
/// gzipped names first.
pub fn load_split(dir: &Path, split: Split) -> Result<DigitDataset> {
    let (img, lbl) = match split {
        Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    };
    let pick = |name: &str| {
        let gz = dir.join(format!("{name}.gz"));
        if gz.exists() {
            gz
        } else {
            dir.join(name)
        }
    };
    let raw = load_idx(&pick(img), &pick(lbl))?;
    preprocess(&raw, split)
}

/// Fraction of rows whose argmax matches the label, ties resolved to the
/// smallest index.
pub fn accuracy(probs_or_logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if probs_or_logits.nrows() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} prediction rows for {} labels",
            probs_or_logits.nrows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::EmptyStream);
    }
    let correct = probs_or_logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &l)| argmax(row.as_slice().expect("row-major")) == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// One scan point: candidate priming number and the resulting test accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanPoint {
    pub k: usize,
    pub accuracy: f64,
}

/// Priming-number scan result over an inclusive integer range.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimeScanResult {
    pub points: Vec<ScanPoint>,
    pub argmax_k: usize,
}

impl PrimeScanResult {
    pub fn accuracy_at(&self, k: usize) -> Option<f64> {
        self.points.iter().find(|p| p.k == k).map(|p| p.accuracy)
    }

    /// CSV export with header `k,accuracy`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,accuracy\n");
        for p in &self.points {
            out.push_str(&format!("{},{}\n", p.k, p.accuracy));
        }
        out
    }
}

/// Scans integer priming numbers: `F` is accumulated once from the training
/// split and only the column translation is re-derived per candidate.
pub fn prime_scan(
    train: &DigitDataset,
    test: &DigitDataset,
    k_range: std::ops::RangeInclusive<usize>,
) -> Result<PrimeScanResult> {
    let engine = train.engine()?;
    let cooc = engine.cooccurrence()?;
    prime_scan_from(&cooc, test, k_range)
}

/// [`prime_scan`] against an already-accumulated co-occurrence matrix.
pub fn prime_scan_from(
    cooc: &CooccurrenceMatrix,
    test: &DigitDataset,
    k_range: std::ops::RangeInclusive<usize>,
) -> Result<PrimeScanResult> {
    if k_range.is_empty() {
        return Err(Error::invalid("empty priming range".to_string()));
    }
    let floor = crate::solver::default_floor(cooc)?;
    let ks: Vec<usize> = k_range.collect();
    let points: Vec<ScanPoint> = ks
        .par_iter()
        .map(|&k| -> Result<ScanPoint> {
            let decoder = explicit_solution(cooc, k as f64, floor)?;
            let acc = test_accuracy(&decoder, test)?;
            Ok(ScanPoint { k, accuracy: acc })
        })
        .collect::<Result<Vec<_>>>()?;
    let argmax_k = points
        .iter()
        .max_by(|a, b| {
            a.accuracy
                .partial_cmp(&b.accuracy)
                .expect("accuracies are finite")
                .then(b.k.cmp(&a.k)) // first k wins ties
        })
        .expect("nonempty range")
        .k;
    Ok(PrimeScanResult { points, argmax_k })
}

/// Test accuracy of a decoder on a digit dataset. Logits suffice: softmax is
/// monotone, so the argmax is taken before normalization.
pub fn test_accuracy(decoder: &DecoderMatrix, data: &DigitDataset) -> Result<f64> {
    let logits = data.features.dot(decoder.values());
    accuracy(&logits, &data.labels)
}
