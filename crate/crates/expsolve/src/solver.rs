//! The closed-form decoder.
//!
//! A softmax layer over nonnegative inputs whose feature vectors have 1-norm
//! `K` is approximately optimized by a column-wise translation of the log
//! co-occurrence matrix:
//!
//! ```text
//! U[j, i] = ln F[j, i] − ((K − 1) / K) · ln f[i]      f[i] = Σ_d F[d, i]
//! ```
//!
//! `K` is the priming number. When feature norms vary it is estimated as the
//! average feature 1-norm. Zeros in `F` are replaced by a multiplicative
//! floor before the logarithm; the column sums are recomputed afterwards so
//! the translation stays consistent with what is actually logged.

use ndarray::Array2;
use rayon::prelude::*;

use crate::cooc::CooccurrenceMatrix;
use crate::error::{Error, Result};
use crate::sample::Sample;

/// Relative floor applied to zero entries: `DEFAULT_FLOOR_SCALE` times the
/// smallest positive entry of `F`.
pub const DEFAULT_FLOOR_SCALE: f64 = 1e-10;

/// The D×N parameter matrix of a softmax layer, in log space.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderMatrix {
    values: Array2<f64>,
    priming: f64,
}

impl DecoderMatrix {
    /// Wraps raw parameters. Fails on non-finite entries or `priming <= 0`.
    pub fn new(values: Array2<f64>, priming: f64) -> Result<Self> {
        if !(priming > 0.0) {
            return Err(Error::invalid(format!(
                "priming number must be positive, got {priming}"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "decoder entries",
            });
        }
        Ok(DecoderMatrix { values, priming })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    /// Priming number the decoder was built with (1.0 for iterative-only
    /// decoders that never went through the explicit solution).
    pub fn priming(&self) -> f64 {
        self.priming
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// What to do with output columns that were never observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmptyColumns {
    /// Fail, naming the column. The right contract for classification data
    /// where a silent all-floor class hides a data bug.
    #[default]
    Reject,
    /// Floor the whole column. Language-model vocabularies reserve ids (pad,
    /// out-of-vocabulary) that never occur as targets; flooring keeps their
    /// probability mass tiny but finite.
    Floor,
}

/// Options for [`explicit_solution_with`]. `delta` is the optional correction
/// to the translation exponent, turning `(K − 1)/K` into `(K − 1 + delta)/K`;
/// the proven value is `delta = 0`.
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub floor: Option<f64>,
    pub delta: f64,
    pub empty_columns: EmptyColumns,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            floor: None,
            delta: 0.0,
            empty_columns: EmptyColumns::Reject,
        }
    }
}

/// Closed-form decoder from an accumulated co-occurrence matrix.
///
/// `floor` replaces zero entries before the logarithm. Columns that are zero
/// *before* flooring correspond to classes never observed and are rejected by
/// name.
pub fn explicit_solution(
    cooc: &CooccurrenceMatrix,
    priming: f64,
    floor: f64,
) -> Result<DecoderMatrix> {
    explicit_solution_with(
        cooc,
        priming,
        SolveOptions {
            floor: Some(floor),
            delta: 0.0,
            empty_columns: EmptyColumns::Reject,
        },
    )
}

/// [`explicit_solution`] with the floor defaulted from the data and the
/// optional exponent correction exposed.
pub fn explicit_solution_with(
    cooc: &CooccurrenceMatrix,
    priming: f64,
    options: SolveOptions,
) -> Result<DecoderMatrix> {
    if !(priming > 0.0) {
        return Err(Error::invalid(format!(
            "priming number must be positive, got {priming}"
        )));
    }
    if options.empty_columns == EmptyColumns::Reject {
        if let Some(i) = cooc.col_sums().iter().position(|&f| f == 0.0) {
            return Err(Error::EmptyColumn { column: i });
        }
    }
    let floor = match options.floor {
        Some(f) if f > 0.0 => f,
        Some(f) => {
            return Err(Error::invalid(format!("floor must be positive, got {f}")));
        }
        None => default_floor(cooc)?,
    };

    let exponent = (priming - 1.0 + options.delta) / priming;
    let f = cooc.values();
    let (d, n) = f.dim();
    let mut values = Array2::<f64>::zeros((d, n));
    for i in 0..n {
        // column sums are recomputed after flooring
        let mut col_sum = 0.0;
        for j in 0..d {
            col_sum += f[[j, i]].max(floor);
        }
        let shift = exponent * col_sum.ln();
        for j in 0..d {
            values[[j, i]] = f[[j, i]].max(floor).ln() - shift;
        }
    }
    DecoderMatrix::new(values, priming)
}

/// Default floor: [`DEFAULT_FLOOR_SCALE`] times the smallest positive entry.
pub fn default_floor(cooc: &CooccurrenceMatrix) -> Result<f64> {
    let min_positive = cooc
        .values()
        .iter()
        .filter(|v| **v > 0.0)
        .fold(f64::INFINITY, |a, &b| a.min(b));
    if !min_positive.is_finite() {
        return Err(Error::invalid(
            "co-occurrence matrix has no positive entries".to_string(),
        ));
    }
    Ok(DEFAULT_FLOOR_SCALE * min_positive)
}

/// One row of the scaling-assumption diagnostic: for output token `i`, its
/// observed count and the K-power mean over samples of the geometric mean of
/// co-occurrences conditioned on each sample's features.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub token: usize,
    pub count: f64,
    pub power_mean: f64,
}

/// Empirical check of the proportionality the explicit solution relies on.
///
/// For each sample the geometric mean `E_G[F[j, i] | H_m] =
/// exp((Σ_d H[m, d] · ln F'[d, i]) / K)` is computed against the floored
/// matrix `F'`, then reduced over samples by the K-power mean
/// `(Σ_m E_G^K / M)^(1/K)`. Plotting `power_mean` against `count` per token
/// on log-log axes makes the assumed linear scaling visible.
pub fn scaling_diagnostic<I>(
    cooc: &CooccurrenceMatrix,
    stream: I,
    priming: f64,
    floor: f64,
) -> Result<Vec<ScalingRow>>
where
    I: IntoIterator<Item = Sample>,
{
    if !(priming > 0.0) {
        return Err(Error::invalid(format!(
            "priming number must be positive, got {priming}"
        )));
    }
    if !(floor > 0.0) {
        return Err(Error::invalid(format!("floor must be positive, got {floor}")));
    }
    let (d, n) = cooc.dims();
    let log_floored = cooc.values().mapv(|v| v.max(floor).ln());

    let mut power_sums = vec![0.0f64; n];
    let mut count = 0usize;
    // Chunked so the inner product runs as a matrix product.
    let mut chunk: Vec<Sample> = Vec::with_capacity(SCALING_CHUNK);
    let flush = |chunk: &mut Vec<Sample>, power_sums: &mut Vec<f64>| -> Result<()> {
        if chunk.is_empty() {
            return Ok(());
        }
        let mut h = Array2::<f64>::zeros((chunk.len(), d));
        for (r, s) in chunk.iter().enumerate() {
            for (c, &v) in s.features.iter().enumerate() {
                h[[r, c]] = v;
            }
        }
        let s = h.dot(&log_floored); // chunk × n exponents, already summed over d
        let partial: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| s.column(i).iter().map(|&v| v.exp()).sum::<f64>())
            .collect();
        for (dst, p) in power_sums.iter_mut().zip(partial) {
            *dst += p;
        }
        chunk.clear();
        Ok(())
    };

    for (index, sample) in stream.into_iter().enumerate() {
        sample.validate(index, d, n)?;
        chunk.push(sample);
        count += 1;
        if chunk.len() == SCALING_CHUNK {
            flush(&mut chunk, &mut power_sums)?;
        }
    }
    flush(&mut chunk, &mut power_sums)?;
    if count == 0 {
        return Err(Error::EmptyStream);
    }

    let m = count as f64;
    Ok((0..n)
        .map(|i| ScalingRow {
            token: i,
            count: cooc.col_sums()[i],
            power_mean: (power_sums[i] / m).powf(1.0 / priming),
        })
        .collect())
}

const SCALING_CHUNK: usize = 512;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cooc::accumulate;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn cooc_from(values: Array2<f64>) -> CooccurrenceMatrix {
        let mass = values.sum();
        CooccurrenceMatrix::from_values(values, 1, mass)
    }

    #[test]
    fn priming_one_is_plain_log() {
        let f = cooc_from(array![[2.0, 1.0], [1.0, 3.0]]);
        let u = explicit_solution(&f, 1.0, 1e-12).unwrap();
        assert_eq!(u.values()[[0, 0]], 2.0f64.ln());
        assert_eq!(u.values()[[1, 1]], 3.0f64.ln());
        assert_eq!(u.values()[[0, 1]], 0.0);
    }

    #[test]
    fn priming_two_frozen_values() {
        // F = [[2,1],[1,3]], f = [3,4]:
        //   U11 = ln2 − ½ln3, U22 = ln3 − ½ln4 (independent evaluation)
        let f = cooc_from(array![[2.0, 1.0], [1.0, 3.0]]);
        let u = explicit_solution(&f, 2.0, 1e-12).unwrap();
        assert_relative_eq!(u.values()[[0, 0]], 0.1438410362258904, max_relative = 1e-12);
        assert_relative_eq!(u.values()[[1, 1]], 0.4054651081081645, max_relative = 1e-12);
        assert_relative_eq!(u.values()[[0, 1]], -0.6931471805599453, max_relative = 1e-12);
        assert_relative_eq!(u.values()[[1, 0]], -0.5493061443340549, max_relative = 1e-12);
    }

    #[test]
    fn empty_column_is_named() {
        let f = cooc_from(array![[2.0, 0.0], [1.0, 0.0]]);
        match explicit_solution(&f, 2.0, 1e-12) {
            Err(Error::EmptyColumn { column: 1 }) => {}
            other => panic!("expected EmptyColumn(1), got {other:?}"),
        }
    }

    #[test]
    fn empty_columns_can_be_floored_instead() {
        let f = cooc_from(array![[2.0, 0.0], [1.0, 0.0]]);
        let opts = SolveOptions {
            floor: Some(0.25),
            delta: 0.0,
            empty_columns: EmptyColumns::Floor,
        };
        let u = explicit_solution_with(&f, 2.0, opts).unwrap();
        // column 1 is all floor: ln(0.25) − ½ln(0.5)
        let expected = 0.25f64.ln() - 0.5 * 0.5f64.ln();
        assert_relative_eq!(u.values()[[0, 1]], expected, max_relative = 1e-12);
        assert_relative_eq!(u.values()[[1, 1]], expected, max_relative = 1e-12);
    }

    #[test]
    fn column_sums_recomputed_after_flooring() {
        // zero entry floored to 0.5 changes the translated column sum
        let f = cooc_from(array![[0.0, 2.0], [3.0, 1.0]]);
        let u = explicit_solution(&f, 2.0, 0.5).unwrap();
        let expected = 0.5f64.ln() - 0.5 * 3.5f64.ln();
        assert_relative_eq!(u.values()[[0, 0]], expected, max_relative = 1e-12);
    }

    #[test]
    fn default_floor_scales_the_smallest_positive_entry() {
        let f = cooc_from(array![[0.0, 2.0], [4.0, 1.0]]);
        assert_relative_eq!(default_floor(&f).unwrap(), 1e-10, max_relative = 1e-12);
    }

    #[test]
    fn delta_correction_shifts_the_exponent() {
        let f = cooc_from(array![[2.0, 1.0], [1.0, 3.0]]);
        let opts = SolveOptions {
            floor: Some(1e-12),
            delta: 0.5,
            empty_columns: EmptyColumns::Reject,
        };
        let u = explicit_solution_with(&f, 2.0, opts).unwrap();
        // exponent (K−1+δ)/K = 1.5/2
        let expected = 2.0f64.ln() - 0.75 * 3.0f64.ln();
        assert_relative_eq!(u.values()[[0, 0]], expected, max_relative = 1e-12);
    }

    #[test]
    fn diagnostic_with_one_hot_features_averages_cooccurrence_rows() {
        // 3-token toy corpus: sequence a,b,a,c encoded as one-hot K=1 pairs
        let one_hot = |at: usize| {
            let mut v = vec![0.0; 3];
            v[at] = 1.0;
            v
        };
        let stream = vec![
            Sample::new(one_hot(0), 1), // a -> b
            Sample::new(one_hot(1), 0), // b -> a
            Sample::new(one_hot(0), 2), // a -> c
        ];
        let f = accumulate(stream.clone(), (3, 3)).unwrap();
        let floor = 1e-10;
        let rows = scaling_diagnostic(&f, stream.clone(), 1.0, floor).unwrap();

        // Brute force: with K = 1 and one-hot features the geometric mean is
        // the observed context row entry, and the power mean is arithmetic.
        let floored = f.values().mapv(|v| v.max(floor));
        for (i, row) in rows.iter().enumerate() {
            let mut expect = 0.0;
            for s in &stream {
                let j = s.features.iter().position(|&v| v == 1.0).unwrap();
                expect += floored[[j, i]];
            }
            expect /= stream.len() as f64;
            assert_relative_eq!(row.power_mean, expect, max_relative = 1e-9);
            assert_eq!(row.count, f.col_sums()[i]);
        }
    }

    #[test]
    fn diagnostic_rejects_nonpositive_priming() {
        let f = cooc_from(array![[1.0]]);
        let res = scaling_diagnostic(&f, vec![Sample::new(vec![1.0], 0)], 0.0, 1e-10);
        assert!(res.is_err());
    }
}
