//! Sample streams: ordered supplies of (feature vector, target index) pairs.
//!
//! A stream is any iterator of [`Sample`]s. Feature vectors are nonnegative
//! and dense; targets index the output vocabulary `0..n`. Pipelines produce
//! streams lazily so corpora never have to be materialized as a matrix.

use crate::error::{Error, Result};

/// One observation: a nonnegative feature vector paired with a target class.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub target: usize,
}

impl Sample {
    pub fn new(features: Vec<f64>, target: usize) -> Self {
        Sample { features, target }
    }

    /// 1-norm of the feature vector (entries are nonnegative, so a plain sum).
    pub fn norm1(&self) -> f64 {
        self.features.iter().sum()
    }

    /// Checks dimensions, nonnegativity, and target range. `index` is the
    /// stream position used for error context.
    pub fn validate(&self, index: usize, dim: usize, classes: usize) -> Result<()> {
        if self.features.len() != dim {
            return Err(Error::DimensionMismatch {
                index,
                got: self.features.len(),
                expected: dim,
            });
        }
        if let Some((d, &value)) = self
            .features
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::NegativeFeature {
                index,
                dim: d,
                value,
            });
        }
        if self.target >= classes {
            return Err(Error::TargetOutOfRange {
                index,
                target: self.target,
                classes,
            });
        }
        Ok(())
    }
}

/// Average feature 1-norm over the stream: the priming-number estimate K̂.
///
/// For unit-normalized features summed over a radius `K` this recovers `K`
/// exactly; for arbitrary positive features it is the estimate used in place
/// of an analytically known norm.
pub fn estimate_priming<I>(stream: I) -> Result<f64>
where
    I: IntoIterator<Item = Sample>,
{
    let mut mass = 0.0;
    let mut count = 0usize;
    for sample in stream {
        mass += sample.norm1();
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyStream);
    }
    Ok(mass / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn priming_of_unit_rows_is_one() {
        let stream = vec![
            Sample::new(vec![1.0, 0.0], 0),
            Sample::new(vec![0.5, 0.5], 1),
        ];
        assert_eq!(estimate_priming(stream).unwrap(), 1.0);
    }

    #[test]
    fn priming_is_the_mean_norm() {
        // rows with 1-norms 2 and 4
        let stream = vec![
            Sample::new(vec![2.0, 0.0], 0),
            Sample::new(vec![1.0, 3.0], 1),
        ];
        assert_eq!(estimate_priming(stream).unwrap(), 3.0);
    }

    #[test]
    fn priming_of_empty_stream_errors() {
        assert!(matches!(
            estimate_priming(Vec::<Sample>::new()),
            Err(Error::EmptyStream)
        ));
    }

    #[test]
    fn validate_rejects_negative_feature() {
        let s = Sample::new(vec![0.5, -0.1], 0);
        assert!(matches!(
            s.validate(3, 2, 2),
            Err(Error::NegativeFeature { index: 3, dim: 1, .. })
        ));
    }

    #[test]
    fn validate_rejects_bad_target() {
        let s = Sample::new(vec![0.5, 0.1], 7);
        assert!(matches!(
            s.validate(0, 2, 3),
            Err(Error::TargetOutOfRange { target: 7, .. })
        ));
    }
}
