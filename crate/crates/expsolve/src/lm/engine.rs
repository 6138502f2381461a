//! Full-batch engine over windowed token contexts.
//!
//! Language-model features are highly structured: every sample's feature
//! vector is determined by its K-token context, and the embedding table is
//! diagonal-plus-rank-one (`E = diag(q) + (1 − q)pᵀ`). This engine exploits
//! both facts. Positions with identical contexts are grouped (for `Sum` the
//! context is a multiset, so it is canonicalized by sorting), and all matrix
//! products against `E` reduce to row gathers plus a rank-one correction.
//! The arithmetic is exactly the full-batch computation over the densified
//! features — the window/featurize path is the reference the tests compare
//! against — just reassociated, never approximated.
//!
//! Chunk boundaries and shard ownership are fixed functions of the data, so
//! results are reproducible bit for bit regardless of thread count.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::Array2;
use rayon::prelude::*;

use crate::cooc::CooccurrenceMatrix;
use crate::engine::argmax;
use crate::error::{Error, Result};
use crate::softmax::{log_sum_exp, softmax_in_place};
use crate::solver::ScalingRow;
use crate::train::{Engine, EvalStats};

use super::noise::DenseEmbeddingTable;
use super::window::{WindowMode, WindowSpec};

const CTX_CHUNK: usize = 1024;
const SCATTER_SHARDS: usize = 32;

/// Deduplicated windowed contexts with per-target counts.
#[derive(Debug)]
pub struct ContextEngine {
    mode: WindowMode,
    radius: usize,
    n: usize,
    q: Vec<f64>,
    p: Vec<f64>,
    /// distinct contexts, row-major C×K, nearest-previous token first
    /// (sorted ascending for `Sum`, where only the multiset matters)
    contexts: Vec<u16>,
    /// total number of samples sharing each context
    ctx_weight: Vec<f64>,
    /// CSR target table per context
    tgt_indptr: Vec<u32>,
    tgt_ids: Vec<u16>,
    tgt_counts: Vec<f64>,
    num_samples: usize,
    feature_mass: f64,
    passes: AtomicUsize,
}

impl ContextEngine {
    /// Groups every position of every document by its (padded) context.
    pub fn build(
        docs: &[Vec<u32>],
        table: &DenseEmbeddingTable,
        spec: WindowSpec,
    ) -> Result<Self> {
        let n = table.n();
        if n > u16::MAX as usize + 1 {
            return Err(Error::invalid(format!(
                "vocabulary of {n} exceeds the context-engine limit"
            )));
        }
        if spec.pad_id as usize >= n {
            return Err(Error::invalid(format!(
                "pad id {} outside vocabulary of {n}",
                spec.pad_id
            )));
        }
        let k = spec.radius;
        let p_sum: f64 = table.noise().iter().sum();
        let row_sums: Vec<f64> = (0..n)
            .map(|t| table.reliability()[t] + (1.0 - table.reliability()[t]) * p_sum)
            .collect();

        let mut key_buf: Vec<u16> = vec![0; k];
        let mut packed: HashMap<u64, u32> = HashMap::new();
        let mut general: HashMap<Box<[u16]>, u32> = HashMap::new();
        let mut contexts: Vec<u16> = Vec::new();
        let mut pairs: Vec<(u32, u16)> = Vec::new();
        let mut feature_mass = 0.0;
        let mut num_samples = 0usize;

        for doc in docs {
            for (m, &target) in doc.iter().enumerate() {
                if target as usize >= n {
                    return Err(Error::TargetOutOfRange {
                        index: num_samples,
                        target: target as usize,
                        classes: n,
                    });
                }
                for (slot, offset) in key_buf.iter_mut().zip(1..=k) {
                    let id = if m >= offset {
                        doc[m - offset]
                    } else {
                        spec.pad_id
                    };
                    if id as usize >= n {
                        return Err(Error::TargetOutOfRange {
                            index: num_samples,
                            target: id as usize,
                            classes: n,
                        });
                    }
                    *slot = id as u16;
                }
                if spec.mode == WindowMode::Sum {
                    key_buf.sort_unstable();
                }
                let ctx_id = if k <= 4 {
                    let mut key = 0u64;
                    for &t in &key_buf {
                        key = key << 16 | t as u64;
                    }
                    let next = contexts.len() / k;
                    *packed.entry(key).or_insert_with(|| {
                        contexts.extend_from_slice(&key_buf);
                        next as u32
                    })
                } else {
                    let next = contexts.len() / k;
                    *general
                        .entry(key_buf.clone().into_boxed_slice())
                        .or_insert_with(|| {
                            contexts.extend_from_slice(&key_buf);
                            next as u32
                        })
                };
                pairs.push((ctx_id, target as u16));
                for &t in &key_buf {
                    feature_mass += row_sums[t as usize];
                }
                num_samples += 1;
            }
        }
        drop(packed);
        drop(general);

        let c = contexts.len() / k.max(1);
        pairs.sort_unstable();
        let mut tgt_indptr = vec![0u32; c + 1];
        let mut tgt_ids: Vec<u16> = Vec::new();
        let mut tgt_counts: Vec<f64> = Vec::new();
        let mut ctx_weight = vec![0.0f64; c];
        let mut i = 0usize;
        for ctx in 0..c {
            while i < pairs.len() && pairs[i].0 == ctx as u32 {
                let t = pairs[i].1;
                let mut count = 0.0;
                while i < pairs.len() && pairs[i] == (ctx as u32, t) {
                    count += 1.0;
                    i += 1;
                }
                tgt_ids.push(t);
                tgt_counts.push(count);
                ctx_weight[ctx] += count;
            }
            tgt_indptr[ctx + 1] = tgt_ids.len() as u32;
        }

        Ok(ContextEngine {
            mode: spec.mode,
            radius: k,
            n,
            q: table.reliability().to_vec(),
            p: table.noise().to_vec(),
            contexts,
            ctx_weight,
            tgt_indptr,
            tgt_ids,
            tgt_counts,
            num_samples,
            feature_mass,
            passes: AtomicUsize::new(0),
        })
    }

    pub fn distinct_contexts(&self) -> usize {
        self.ctx_weight.len()
    }

    pub fn mode(&self) -> WindowMode {
        self.mode
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    fn blocks(&self) -> usize {
        match self.mode {
            WindowMode::Sum => 1,
            WindowMode::Cat => self.radius,
        }
    }

    fn check_u(&self, u: &Array2<f64>) -> Result<()> {
        if u.dim() != (self.dim(), self.n) {
            return Err(Error::ShapeMismatch(format!(
                "decoder is {:?} but the engine needs ({}, {})",
                u.dim(),
                self.dim(),
                self.n
            )));
        }
        Ok(())
    }

    /// `p · U` per block: the rank-one halves of every `E`-product.
    fn noise_rows(&self, u: &Array2<f64>) -> Array2<f64> {
        let blocks = self.blocks();
        let n = self.n;
        let mut pu = Array2::<f64>::zeros((blocks, n));
        let u_flat = u.as_slice().expect("row-major");
        pu.axis_iter_mut(ndarray::Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(b, mut row)| {
                let dst = row.as_slice_mut().expect("row-major");
                for j in 0..n {
                    let pj = self.p[j];
                    if pj == 0.0 {
                        continue;
                    }
                    let src = &u_flat[(b * n + j) * n..(b * n + j + 1) * n];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += pj * s;
                    }
                }
            });
        pu
    }

    /// Assembles the logit row of context `c` into `z`.
    #[inline]
    fn assemble_logits(&self, u_flat: &[f64], pu: &Array2<f64>, c: usize, z: &mut [f64]) {
        let n = self.n;
        let k = self.radius;
        let ctx = &self.contexts[c * k..(c + 1) * k];
        z.fill(0.0);
        for (slot, &tok) in ctx.iter().enumerate() {
            let block = if self.mode == WindowMode::Sum { 0 } else { slot };
            let qv = self.q[tok as usize];
            let coef = 1.0 - qv;
            let row = &u_flat[(block * n + tok as usize) * n..(block * n + tok as usize + 1) * n];
            let pu_row = pu.row(block);
            let pu_slice = pu_row.as_slice().expect("row-major");
            for i in 0..n {
                z[i] += qv * row[i] + coef * pu_slice[i];
            }
        }
    }

    /// In place: `A ← Eᵀ·A` per block, using the diagonal-plus-rank-one form.
    fn apply_e_transpose(&self, a: &mut Array2<f64>) {
        let n = self.n;
        for b in 0..self.blocks() {
            let mut rank1 = vec![0.0f64; n];
            for j in 0..n {
                let w = 1.0 - self.q[j];
                if w == 0.0 {
                    continue;
                }
                let row = a.row(b * n + j);
                let src = row.as_slice().expect("row-major");
                for (dst, &s) in rank1.iter_mut().zip(src) {
                    *dst += w * s;
                }
            }
            let rows: Vec<usize> = (0..n).collect();
            let a_ptr = UnsafeRows(a.as_mut_ptr());
            rows.par_chunks(512).for_each(|chunk| {
                for &j in chunk {
                    // each row index is visited exactly once across chunks
                    let row = unsafe { a_ptr.slice_mut((b * n + j) * n, n) };
                    let qj = self.q[j];
                    let pj = self.p[j];
                    for (dst, &r1) in row.iter_mut().zip(rank1.iter()) {
                        *dst = qj * *dst + pj * r1;
                    }
                }
            });
        }
    }

    /// K-power-mean scaling diagnostic against a (floored) co-occurrence
    /// matrix, computed in one pass over the distinct contexts.
    pub fn scaling_diagnostic(
        &self,
        cooc: &CooccurrenceMatrix,
        priming: f64,
        floor: f64,
    ) -> Result<Vec<ScalingRow>> {
        if !(priming > 0.0) {
            return Err(Error::invalid(format!(
                "priming number must be positive, got {priming}"
            )));
        }
        if !(floor > 0.0) {
            return Err(Error::invalid(format!(
                "floor must be positive, got {floor}"
            )));
        }
        if cooc.dims() != (self.dim(), self.n) {
            return Err(Error::ShapeMismatch(format!(
                "co-occurrence is {:?} but the engine needs ({}, {})",
                cooc.dims(),
                self.dim(),
                self.n
            )));
        }
        self.passes.fetch_add(1, Ordering::Relaxed);
        let w = cooc.values().mapv(|v| v.max(floor).ln());
        let pu = self.noise_rows(&w);
        let w_flat = w.as_slice().expect("row-major");
        let n = self.n;

        let c_total = self.distinct_contexts();
        let chunk_sums: Vec<Vec<f64>> = (0..c_total.div_ceil(CTX_CHUNK))
            .into_par_iter()
            .map(|chunk_idx| {
                let lo = chunk_idx * CTX_CHUNK;
                let hi = ((chunk_idx + 1) * CTX_CHUNK).min(c_total);
                let mut acc = vec![0.0f64; n];
                let mut s = vec![0.0f64; n];
                for c in lo..hi {
                    self.assemble_logits(w_flat, &pu, c, &mut s);
                    let wc = self.ctx_weight[c];
                    for (a, &sv) in acc.iter_mut().zip(s.iter()) {
                        *a += wc * sv.exp();
                    }
                }
                acc
            })
            .collect();
        let mut power_sums = vec![0.0f64; n];
        for part in chunk_sums {
            for (dst, v) in power_sums.iter_mut().zip(part) {
                *dst += v;
            }
        }
        let m = self.num_samples as f64;
        Ok((0..n)
            .map(|i| ScalingRow {
                token: i,
                count: cooc.col_sums()[i],
                power_mean: (power_sums[i] / m).powf(1.0 / priming),
            })
            .collect())
    }
}

/// Pointer wrapper so disjoint row slices can be written from a parallel
/// loop; ownership of each row index is unique by construction.
struct UnsafeRows(*mut f64);
unsafe impl Send for UnsafeRows {}
unsafe impl Sync for UnsafeRows {}

impl UnsafeRows {
    /// Caller guarantees no two live slices overlap.
    #[allow(clippy::mut_from_ref)]
    unsafe fn slice_mut(&self, offset: usize, len: usize) -> &mut [f64] {
        std::slice::from_raw_parts_mut(self.0.add(offset), len)
    }
}

impl Engine for ContextEngine {
    fn num_samples(&self) -> usize {
        self.num_samples
    }

    fn dim(&self) -> usize {
        self.blocks() * self.n
    }

    fn classes(&self) -> usize {
        self.n
    }

    fn evaluate(&self, u: &Array2<f64>) -> Result<EvalStats> {
        self.check_u(u)?;
        self.passes.fetch_add(1, Ordering::Relaxed);
        let pu = self.noise_rows(u);
        let u_flat = u.as_slice().expect("row-major");
        let n = self.n;
        let c_total = self.distinct_contexts();
        let parts: Vec<(f64, f64)> = (0..c_total.div_ceil(CTX_CHUNK))
            .into_par_iter()
            .map(|chunk_idx| {
                let lo = chunk_idx * CTX_CHUNK;
                let hi = ((chunk_idx + 1) * CTX_CHUNK).min(c_total);
                let mut z = vec![0.0f64; n];
                let mut loss = 0.0;
                let mut correct = 0.0;
                for c in lo..hi {
                    self.assemble_logits(u_flat, &pu, c, &mut z);
                    let lse = log_sum_exp(&z);
                    let best = argmax(&z);
                    let (s, e) = (self.tgt_indptr[c] as usize, self.tgt_indptr[c + 1] as usize);
                    // per-context subtotal, associated exactly as in loss_grad
                    let mut l = self.ctx_weight[c] * lse;
                    for idx in s..e {
                        let t = self.tgt_ids[idx] as usize;
                        let cnt = self.tgt_counts[idx];
                        l -= cnt * z[t];
                        if t == best {
                            correct += cnt;
                        }
                    }
                    loss += l;
                }
                (loss, correct)
            })
            .collect();
        let mut loss = 0.0;
        let mut correct = 0.0;
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
            correct: correct as usize,
            samples: self.num_samples,
        })
    }

    fn loss_grad(&self, u: &Array2<f64>) -> Result<(EvalStats, Array2<f64>)> {
        self.check_u(u)?;
        self.passes.fetch_add(1, Ordering::Relaxed);
        let pu = self.noise_rows(u);
        let u_flat = u.as_slice().expect("row-major");
        let n = self.n;
        let k = self.radius;
        let c_total = self.distinct_contexts();
        let mut grad = Array2::<f64>::zeros(u.dim());
        let d_rows = self.dim();

        let mut loss = 0.0;
        let mut correct = 0.0;
        let mut delta = vec![0.0f64; CTX_CHUNK * n];
        // fixed shard boundaries over gradient rows; ownership is unique, so
        // scatter order per row is context order regardless of threading
        let shard_span = d_rows.div_ceil(SCATTER_SHARDS);

        for lo in (0..c_total).step_by(CTX_CHUNK) {
            let hi = (lo + CTX_CHUNK).min(c_total);
            let rows = hi - lo;
            let parts: Vec<(f64, f64)> = delta[..rows * n]
                .par_chunks_mut(n)
                .enumerate()
                .map(|(r, row)| {
                    let c = lo + r;
                    self.assemble_logits(u_flat, &pu, c, row);
                    let wc = self.ctx_weight[c];
                    let best = argmax(row);
                    let zt: Vec<f64> = {
                        let (s, e) =
                            (self.tgt_indptr[c] as usize, self.tgt_indptr[c + 1] as usize);
                        (s..e).map(|i| row[self.tgt_ids[i] as usize]).collect()
                    };
                    let lse = softmax_in_place(row);
                    let mut l = wc * lse;
                    let mut corr = 0.0;
                    for v in row.iter_mut() {
                        *v *= wc;
                    }
                    let (s, e) = (self.tgt_indptr[c] as usize, self.tgt_indptr[c + 1] as usize);
                    for (idx, z_target) in (s..e).zip(zt) {
                        let t = self.tgt_ids[idx] as usize;
                        let cnt = self.tgt_counts[idx];
                        l -= cnt * z_target;
                        row[t] -= cnt;
                        if t == best {
                            corr += cnt;
                        }
                    }
                    (l, corr)
                })
                .collect();
            let mut batch_loss = 0.0;
            let mut batch_correct = 0.0;
            for (l, c) in parts {
                batch_loss += l;
                batch_correct += c;
            }
            loss += batch_loss;
            correct += batch_correct;

            // scatter Δ rows into the pre-transform gradient accumulator
            let grad_ptr = UnsafeRows(grad.as_mut_ptr());
            let delta_ref = &delta;
            (0..SCATTER_SHARDS).into_par_iter().for_each(|shard| {
                let row_lo = shard * shard_span;
                let row_hi = ((shard + 1) * shard_span).min(d_rows);
                if row_lo >= row_hi {
                    return;
                }
                for r in 0..rows {
                    let c = lo + r;
                    let src = &delta_ref[r * n..(r + 1) * n];
                    let ctx = &self.contexts[c * k..(c + 1) * k];
                    for (slot, &tok) in ctx.iter().enumerate() {
                        let block = if self.mode == WindowMode::Sum { 0 } else { slot };
                        let row_idx = block * n + tok as usize;
                        if row_idx < row_lo || row_idx >= row_hi {
                            continue;
                        }
                        let dst = unsafe { grad_ptr.slice_mut(row_idx * n, n) };
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            });
        }

        self.apply_e_transpose(&mut grad);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: "training loss",
            });
        }
        Ok((
            EvalStats {
                loss,
                correct: correct as usize,
                samples: self.num_samples,
            },
            grad,
        ))
    }

    fn cooccurrence(&self) -> Result<CooccurrenceMatrix> {
        self.passes.fetch_add(1, Ordering::Relaxed);
        let n = self.n;
        let k = self.radius;
        let mut counts = Array2::<f64>::zeros((self.dim(), n));
        for c in 0..self.distinct_contexts() {
            let ctx = &self.contexts[c * k..(c + 1) * k];
            let (s, e) = (self.tgt_indptr[c] as usize, self.tgt_indptr[c + 1] as usize);
            for (slot, &tok) in ctx.iter().enumerate() {
                let block = if self.mode == WindowMode::Sum { 0 } else { slot };
                for idx in s..e {
                    counts[[block * n + tok as usize, self.tgt_ids[idx] as usize]] +=
                        self.tgt_counts[idx];
                }
            }
        }
        self.apply_e_transpose(&mut counts);
        Ok(CooccurrenceMatrix::from_values(
            counts,
            self.num_samples,
            self.feature_mass,
        ))
    }

    fn priming_estimate(&self) -> Result<f64> {
        if self.num_samples == 0 {
            return Err(Error::EmptyStream);
        }
        Ok(self.feature_mass / self.num_samples as f64)
    }

    fn data_passes(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }
}
