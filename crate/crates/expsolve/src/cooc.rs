//! Generalized co-occurrence accumulation.
//!
//! The co-occurrence matrix `F` of a stream is the sum of outer products of
//! each feature vector with the one-hot row of its target, i.e. `F = HᵀY`.
//! Because every target row has unit 1-norm, the total mass of `F` equals the
//! summed 1-norms of the features — an invariant the tests lean on.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::sample::Sample;

/// The D×N accumulator `F(H, Y)` with cached column sums.
#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceMatrix {
    values: Array2<f64>,
    col_sums: Array1<f64>,
    num_samples: usize,
    feature_mass: f64,
}

impl CooccurrenceMatrix {
    /// Builds directly from parts, recomputing the column-sum cache.
    pub fn from_values(values: Array2<f64>, num_samples: usize, feature_mass: f64) -> Self {
        let col_sums = values.sum_axis(ndarray::Axis(0));
        CooccurrenceMatrix {
            values,
            col_sums,
            num_samples,
            feature_mass,
        }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Column sums `f`: `f[i] = Σ_d F[d, i]`.
    pub fn col_sums(&self) -> &Array1<f64> {
        &self.col_sums
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    /// Total feature mass `Σ_m ‖H_m‖₁` observed during accumulation.
    pub fn feature_mass(&self) -> f64 {
        self.feature_mass
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Priming-number estimate from cached statistics: mass / samples.
    pub fn priming_estimate(&self) -> Result<f64> {
        if self.num_samples == 0 {
            return Err(Error::EmptyStream);
        }
        Ok(self.feature_mass / self.num_samples as f64)
    }

    /// Entrywise merge of a shard into this accumulator. Shards must be merged
    /// in a fixed order for reproducible floating-point results.
    pub fn merge(&mut self, shard: &CooccurrenceMatrix) -> Result<()> {
        if self.dims() != shard.dims() {
            return Err(Error::ShapeMismatch(format!(
                "cannot merge {:?} into {:?}",
                shard.dims(),
                self.dims()
            )));
        }
        self.values += &shard.values;
        self.col_sums += &shard.col_sums;
        self.num_samples += shard.num_samples;
        self.feature_mass += shard.feature_mass;
        Ok(())
    }

    /// Checks the structural invariants: nonnegative entries, consistent
    /// column sums, and mass conservation, at relative tolerance `rel`.
    pub fn check_invariants(&self, rel: f64) -> Result<()> {
        if self.values.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "co-occurrence entries",
            });
        }
        let recomputed = self.values.sum_axis(ndarray::Axis(0));
        for (i, (&cached, &fresh)) in self.col_sums.iter().zip(recomputed.iter()).enumerate() {
            if (cached - fresh).abs() > rel * fresh.abs().max(1.0) {
                return Err(Error::InvalidArgument(format!(
                    "column sum cache stale at column {i}: {cached} vs {fresh}"
                )));
            }
        }
        let total: f64 = self.col_sums.sum();
        if (total - self.feature_mass).abs() > rel * self.feature_mass.abs().max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "mass not conserved: columns sum to {total}, feature mass is {}",
                self.feature_mass
            )));
        }
        Ok(())
    }
}

/// Accumulates a stream into the D×N co-occurrence matrix.
///
/// Each sample contributes its feature vector to the column of its target.
/// Items are validated as they arrive; the error names the offending stream
/// position. The result is independent of stream order up to floating-point
/// addition order.
pub fn accumulate<I>(stream: I, dims: (usize, usize)) -> Result<CooccurrenceMatrix>
where
    I: IntoIterator<Item = Sample>,
{
    let (d, n) = dims;
    let mut values = Array2::<f64>::zeros((d, n));
    let mut num_samples = 0usize;
    let mut feature_mass = 0.0;
    for (index, sample) in stream.into_iter().enumerate() {
        sample.validate(index, d, n)?;
        let mut col = values.column_mut(sample.target);
        for (dst, &h) in col.iter_mut().zip(sample.features.iter()) {
            *dst += h;
        }
        feature_mass += sample.norm1();
        num_samples += 1;
    }
    Ok(CooccurrenceMatrix::from_values(
        values,
        num_samples,
        feature_mass,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::Sample;

    fn one_hot(dim: usize, at: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[at] = 1.0;
        v
    }

    #[test]
    fn single_outer_product() {
        // H = e1 (0-indexed dim 1), target 2, D = N = 3
        let stream = vec![Sample::new(one_hot(3, 1), 2)];
        let f = accumulate(stream, (3, 3)).unwrap();
        assert_eq!(f.values()[[1, 2]], 1.0);
        assert_eq!(f.values().sum(), 1.0);
        assert_eq!(f.num_samples(), 1);
    }

    #[test]
    fn bigram_pair_counts() {
        // token sequence a,b,a,b with one-hot K=1 features:
        // pairs (a->b), (b->a), (a->b)
        let (a, b) = (0usize, 1usize);
        let stream = vec![
            Sample::new(one_hot(2, a), b),
            Sample::new(one_hot(2, b), a),
            Sample::new(one_hot(2, a), b),
        ];
        let f = accumulate(stream, (2, 2)).unwrap();
        assert_eq!(f.values()[[a, b]], 2.0);
        assert_eq!(f.values()[[b, a]], 1.0);
        assert_eq!(f.values()[[a, a]], 0.0);
        assert_eq!(f.values()[[b, b]], 0.0);
    }

    #[test]
    fn sharded_accumulation_matches_single_pass() {
        let stream: Vec<Sample> = (0..40)
            .map(|i| {
                let mut v = vec![0.25, 0.5, 0.125, 0.0625];
                v.rotate_left(i % 4);
                Sample::new(v, (i * 7) % 3)
            })
            .collect();
        let whole = accumulate(stream.clone(), (4, 3)).unwrap();
        let mut first = accumulate(stream[..17].to_vec(), (4, 3)).unwrap();
        let second = accumulate(stream[17..].to_vec(), (4, 3)).unwrap();
        first.merge(&second).unwrap();
        for (w, s) in whole.values().iter().zip(first.values().iter()) {
            assert!((w - s).abs() <= 1e-12);
        }
        assert_eq!(whole.num_samples(), first.num_samples());
        whole.check_invariants(1e-9).unwrap();
    }

    #[test]
    fn rejects_dimension_mismatch_with_context() {
        let stream = vec![
            Sample::new(vec![1.0, 0.0], 0),
            Sample::new(vec![1.0, 0.0, 0.0], 1),
        ];
        match accumulate(stream, (2, 2)) {
            Err(Error::DimensionMismatch { index: 1, got: 3, expected: 2 }) => {}
            other => panic!("expected dimension mismatch, got {other:?}"),
        }
    }

    #[test]
    fn mass_conservation() {
        let stream: Vec<Sample> = (0..25)
            .map(|i| Sample::new(vec![0.1 * (i % 5) as f64, 1.0, 0.3], i % 4))
            .collect();
        let f = accumulate(stream.clone(), (3, 4)).unwrap();
        let mass: f64 = stream.iter().map(Sample::norm1).sum();
        assert!((f.col_sums().sum() - mass).abs() <= 1e-9 * mass);
        f.check_invariants(1e-9).unwrap();
    }
}
