//! Dense full-batch engine: features held as one row-major matrix.
//!
//! Passes are chunked and the chunk results reduced in index order, so loss
//! and gradient values do not depend on thread scheduling.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{s, Array2};
use rayon::prelude::*;

use crate::cooc::CooccurrenceMatrix;
use crate::error::{Error, Result};
use crate::sample::Sample;
use crate::softmax::{log_sum_exp, softmax_in_place};
use crate::train::{Engine, EvalStats};

const CHUNK: usize = 2048;

/// A dataset materialized as an M×D matrix with one target per row.
#[derive(Debug)]
pub struct DenseEngine {
    h: Array2<f64>,
    targets: Vec<usize>,
    classes: usize,
    feature_mass: f64,
    passes: AtomicUsize,
}

impl DenseEngine {
    /// Collects a sample stream into a dense matrix, validating every item.
    pub fn from_samples<I>(stream: I, dims: (usize, usize)) -> Result<Self>
    where
        I: IntoIterator<Item = Sample>,
    {
        let (d, n) = dims;
        let mut rows: Vec<f64> = Vec::new();
        let mut targets = Vec::new();
        for (index, sample) in stream.into_iter().enumerate() {
            sample.validate(index, d, n)?;
            rows.extend_from_slice(&sample.features);
            targets.push(sample.target);
        }
        let m = targets.len();
        let h = Array2::from_shape_vec((m, d), rows).expect("consistent row lengths");
        Self::from_matrix(h, targets, n)
    }

    /// Wraps an existing matrix. Entries must be finite and nonnegative.
    pub fn from_matrix(h: Array2<f64>, targets: Vec<usize>, classes: usize) -> Result<Self> {
        if h.nrows() != targets.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature rows for {} targets",
                h.nrows(),
                targets.len()
            )));
        }
        if let Some((index, &target)) = targets.iter().enumerate().find(|(_, t)| **t >= classes) {
            return Err(Error::TargetOutOfRange {
                index,
                target,
                classes,
            });
        }
        let mut mass = 0.0;
        for &v in h.iter() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::NonFinite {
                    context: "dense features",
                });
            }
            mass += v;
        }
        Ok(DenseEngine {
            h,
            targets,
            classes,
            feature_mass: mass,
            passes: AtomicUsize::new(0),
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.h
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    /// Softmax outputs for every sample: the next layer's features in the
    /// layer-local warm start. Counts as one pass over the data.
    pub fn probabilities(&self, u: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_u(u)?;
        self.passes.fetch_add(1, Ordering::Relaxed);
        let m = self.h.nrows();
        let mut out = Array2::zeros((m, u.ncols()));
        let results: Vec<(usize, Array2<f64>)> = chunk_ranges(m)
            .into_par_iter()
            .map(|(lo, hi)| {
                let mut z = self.h.slice(s![lo..hi, ..]).dot(u);
                for mut row in z.rows_mut() {
                    softmax_in_place(row.as_slice_mut().expect("row-major"));
                }
                (lo, z)
            })
            .collect();
        for (lo, z) in results {
            out.slice_mut(s![lo..lo + z.nrows(), ..]).assign(&z);
        }
        Ok(out)
    }

    fn check_u(&self, u: &Array2<f64>) -> Result<()> {
        if u.nrows() != self.h.ncols() || u.ncols() != self.classes {
            return Err(Error::ShapeMismatch(format!(
                "decoder is {:?} but the data needs ({}, {})",
                u.dim(),
                self.h.ncols(),
                self.classes
            )));
        }
        Ok(())
    }
}

fn chunk_ranges(m: usize) -> Vec<(usize, usize)> {
    (0..m.div_ceil(CHUNK))
        .map(|c| (c * CHUNK, ((c + 1) * CHUNK).min(m)))
        .collect()
}

impl Engine for DenseEngine {
    fn num_samples(&self) -> usize {
        self.targets.len()
    }

    fn dim(&self) -> usize {
        self.h.ncols()
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn loss_grad(&self, u: &Array2<f64>) -> Result<(EvalStats, Array2<f64>)> {
        self.check_u(u)?;
        self.passes.fetch_add(1, Ordering::Relaxed);
        let m = self.h.nrows();
        let parts: Vec<(f64, usize, Array2<f64>)> = chunk_ranges(m)
            .into_par_iter()
            .map(|(lo, hi)| {
                let hs = self.h.slice(s![lo..hi, ..]);
                let mut z = hs.dot(u);
                let mut loss = 0.0;
                let mut correct = 0usize;
                for (r, mut row) in z.rows_mut().into_iter().enumerate() {
                    let t = self.targets[lo + r];
                    let slice = row.as_slice_mut().expect("row-major");
                    let z_t = slice[t];
                    let argmax = argmax(slice);
                    let lse = softmax_in_place(slice);
                    loss += lse - z_t;
                    if argmax == t {
                        correct += 1;
                    }
                    slice[t] -= 1.0; // z now holds Ŷ − Y
                }
                (loss, correct, hs.t().dot(&z))
            })
            .collect();
        let mut grad = Array2::zeros(u.dim());
        let mut loss = 0.0;
        let mut correct = 0;
        for (l, c, g) in parts {
            loss += l;
            correct += c;
            grad += &g;
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: "training loss",
            });
        }
        Ok((
            EvalStats {
                loss,
                correct,
                samples: m,
            },
            grad,
        ))
    }

    fn evaluate(&self, u: &Array2<f64>) -> Result<EvalStats> {
        self.check_u(u)?;
        self.passes.fetch_add(1, Ordering::Relaxed);
        let m = self.h.nrows();
        let parts: Vec<(f64, usize)> = chunk_ranges(m)
            .into_par_iter()
            .map(|(lo, hi)| {
                let z = self.h.slice(s![lo..hi, ..]).dot(u);
                let mut loss = 0.0;
                let mut correct = 0usize;
                for (r, row) in z.rows().into_iter().enumerate() {
                    let t = self.targets[lo + r];
                    let slice = row.as_slice().expect("row-major");
                    loss += log_sum_exp(slice) - slice[t];
                    if argmax(slice) == t {
                        correct += 1;
                    }
                }
                (loss, correct)
            })
            .collect();
        let (mut loss, mut correct) = (0.0, 0usize);
        for (l, c) in parts {
            loss += l;
            correct += c;
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: "evaluation loss",
            });
        }
        Ok(EvalStats {
            loss,
            correct,
            samples: m,
        })
    }

    fn batch_grad(
        &self,
        u: &Array2<f64>,
        indices: &[usize],
        grad: &mut Array2<f64>,
    ) -> Result<f64> {
        self.check_u(u)?;
        grad.fill(0.0);
        let gslice = grad.as_slice_mut().expect("row-major");
        let n = self.classes;
        let mut loss = 0.0;
        let mut z = vec![0.0f64; n];
        for &m in indices {
            if m >= self.h.nrows() {
                return Err(Error::invalid(format!("sample index {m} out of range")));
            }
            let h_row = self.h.row(m);
            let h_slice = h_row.as_slice().expect("row-major");
            z.copy_from_slice(
                u.t()
                    .dot(&h_row)
                    .as_slice()
                    .expect("contiguous"),
            );
            let t = self.targets[m];
            let z_t = z[t];
            let lse = softmax_in_place(&mut z);
            loss += lse - z_t;
            z[t] -= 1.0;
            for (d, &hv) in h_slice.iter().enumerate() {
                if hv != 0.0 {
                    let dst = &mut gslice[d * n..(d + 1) * n];
                    for (g, &dv) in dst.iter_mut().zip(z.iter()) {
                        *g += hv * dv;
                    }
                }
            }
        }
        Ok(loss)
    }

    fn cooccurrence(&self) -> Result<CooccurrenceMatrix> {
        self.passes.fetch_add(1, Ordering::Relaxed);
        let (m, d) = self.h.dim();
        let mut values = Array2::zeros((d, self.classes));
        for r in 0..m {
            let mut col = values.column_mut(self.targets[r]);
            for (dst, &v) in col.iter_mut().zip(self.h.row(r).iter()) {
                *dst += v;
            }
        }
        Ok(CooccurrenceMatrix::from_values(
            values,
            m,
            self.feature_mass,
        ))
    }

    fn priming_estimate(&self) -> Result<f64> {
        if self.targets.is_empty() {
            return Err(Error::EmptyStream);
        }
        Ok(self.feature_mass / self.targets.len() as f64)
    }

    fn data_passes(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}
