//! The observation-noise model that densifies one-hot embeddings.
//!
//! Token counts give a per-token reliability `q[n] = f[n]/(f[n] + 1)` and a
//! near-uniform noise distribution `p = (1 − ē)/‖1 − ē‖₁` built from the
//! average basis vector `ē = f/M`. Each embedding row is the convex blend
//! `q[n]·e⁽ⁿ⁾ + (1 − q[n])·p`, so every row stays a strictly positive
//! distribution and downstream co-occurrences never hit `log 0`.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Per-token reliabilities and the shared noise distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    counts: Vec<f64>,
    q: Vec<f64>,
    p: Vec<f64>,
    tokens: usize,
}

impl NoiseModel {
    pub fn vocab_size(&self) -> usize {
        self.counts.len()
    }

    /// Total tokens the counts were taken over.
    pub fn num_tokens(&self) -> usize {
        self.tokens
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }
}

/// Counts a token-id sequence and derives the noise model for a vocabulary
/// of `n` ids.
pub fn build_noise_model(ids: impl IntoIterator<Item = u32>, n: usize) -> Result<NoiseModel> {
    if n <= 1 {
        return Err(Error::invalid(
            "noise model needs a vocabulary of at least 2 tokens".to_string(),
        ));
    }
    let mut counts = vec![0.0f64; n];
    let mut tokens = 0usize;
    for id in ids {
        let id = id as usize;
        if id >= n {
            return Err(Error::TargetOutOfRange {
                index: tokens,
                target: id,
                classes: n,
            });
        }
        counts[id] += 1.0;
        tokens += 1;
    }
    if tokens == 0 {
        return Err(Error::EmptyStream);
    }
    let m = tokens as f64;
    // ē = f/M; p = (1 − ē)/‖1 − ē‖₁; q = f/(f+1)
    let one_minus_ebar: Vec<f64> = counts.iter().map(|&f| 1.0 - f / m).collect();
    let norm: f64 = one_minus_ebar.iter().map(|v| v.abs()).sum();
    if norm == 0.0 {
        return Err(Error::invalid(
            "degenerate corpus: noise distribution has no mass".to_string(),
        ));
    }
    let p: Vec<f64> = one_minus_ebar.iter().map(|&v| v / norm).collect();
    let q: Vec<f64> = counts.iter().map(|&f| f / (f + 1.0)).collect();
    Ok(NoiseModel {
        counts,
        q,
        p,
        tokens,
    })
}

/// The densified N×N embedding table, stored in its diagonal-plus-rank-one
/// form. Row `n` is `q[n]·e⁽ⁿ⁾ + (1 − q[n])·p`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseEmbeddingTable {
    q: Vec<f64>,
    p: Vec<f64>,
}

/// Blends each one-hot row with the noise distribution.
pub fn densify(noise: &NoiseModel) -> DenseEmbeddingTable {
    DenseEmbeddingTable {
        q: noise.q.clone(),
        p: noise.p.clone(),
    }
}

impl DenseEmbeddingTable {
    /// Builds the table directly from reliabilities and a noise distribution.
    pub fn from_parts(q: Vec<f64>, p: Vec<f64>) -> Result<Self> {
        if q.len() != p.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} reliabilities for {} noise entries",
                q.len(),
                p.len()
            )));
        }
        Ok(DenseEmbeddingTable { q, p })
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn reliability(&self) -> &[f64] {
        &self.q
    }

    pub fn noise(&self) -> &[f64] {
        &self.p
    }

    pub fn entry(&self, row: usize, col: usize) -> f64 {
        let base = (1.0 - self.q[row]) * self.p[col];
        if row == col {
            self.q[row] + base
        } else {
            base
        }
    }

    /// Materializes row `n` as a dense vector.
    pub fn row(&self, n: usize) -> Vec<f64> {
        let scale = 1.0 - self.q[n];
        let mut row: Vec<f64> = self.p.iter().map(|&pj| scale * pj).collect();
        row[n] += self.q[n];
        row
    }

    /// Sum of row `n` (exactly `q + (1 − q)·Σp`, which is 1 up to rounding).
    pub fn row_sum(&self, n: usize) -> f64 {
        let p_sum: f64 = self.p.iter().sum();
        self.q[n] + (1.0 - self.q[n]) * p_sum
    }

    /// Fully materialized matrix; intended for small vocabularies and tests.
    pub fn to_matrix(&self) -> Array2<f64> {
        let n = self.n();
        Array2::from_shape_fn((n, n), |(r, c)| self.entry(r, c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case_counts() {
        // f = [3, 1], M = 4
        let noise = build_noise_model([0, 0, 0, 1].into_iter(), 2).unwrap();
        assert_eq!(noise.p(), &[0.25, 0.75]);
        assert_eq!(noise.q(), &[0.75, 0.5]);
        assert_eq!(noise.num_tokens(), 4);
    }

    #[test]
    fn uniform_counts_give_uniform_noise() {
        let noise = build_noise_model([0, 1, 2, 3].into_iter(), 4).unwrap();
        for &p in noise.p() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn unseen_token_rows_become_the_noise_vector() {
        let noise = build_noise_model([0, 0, 1].into_iter(), 3).unwrap();
        assert_eq!(noise.q()[2], 0.0);
        let table = densify(&noise);
        let row = table.row(2);
        for (a, b) in row.iter().zip(noise.p()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn densified_row_hand_case() {
        // q = 0.75, p = [0.25, 0.75], row 0 = [0.8125, 0.1875]
        let table = DenseEmbeddingTable::from_parts(vec![0.75, 0.5], vec![0.25, 0.75]).unwrap();
        let row = table.row(0);
        assert!((row[0] - 0.8125).abs() < 1e-15);
        assert!((row[1] - 0.1875).abs() < 1e-15);
    }

    #[test]
    fn high_count_rows_approach_one_hot() {
        let mut ids = vec![0u32; 100_000];
        ids.extend([1, 2, 3]);
        let noise = build_noise_model(ids.into_iter(), 4).unwrap();
        let table = densify(&noise);
        let row = table.row(0);
        assert!(row[0] > 0.9999);
        assert!(row.iter().skip(1).all(|&v| v < 1e-4));
    }

    #[test]
    fn rows_sum_to_one() {
        let noise = build_noise_model([0, 1, 1, 2, 2, 2, 3].into_iter(), 5).unwrap();
        let table = densify(&noise);
        for n in 0..table.n() {
            let sum: f64 = table.row(n).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12, "row {n} sums to {sum}");
            assert!(table.row(n).iter().all(|&v| v > 0.0));
        }
        let m = table.to_matrix();
        assert_eq!(m[[1, 1]], table.entry(1, 1));
    }

    #[test]
    fn single_token_vocab_is_rejected() {
        assert!(build_noise_model([0].into_iter(), 1).is_err());
    }
}
