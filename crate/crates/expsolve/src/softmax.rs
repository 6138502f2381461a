//! Softmax, cross-entropy, and perplexity.
//!
//! Row kernels are written against 4-lane f64 SIMD; they are exact pure
//! functions of their inputs, so results are reproducible bit-for-bit across
//! runs of the same binary.

use ndarray::Array2;
use wide::f64x4;

use crate::error::{Error, Result};
use crate::solver::DecoderMatrix;

/// Probabilities below this are clamped before the log in cross-entropy.
pub const CROSS_ENTROPY_CLAMP: f64 = 1e-300;

#[inline]
fn max_of(row: &[f64]) -> f64 {
    row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
}

/// Exponentiates `row` shifted by `shift`, returning the sum of the results.
#[inline]
pub(crate) fn exp_shifted_sum(row: &mut [f64], shift: f64) -> f64 {
    let shift4 = f64x4::splat(shift);
    let mut acc = f64x4::splat(0.0);
    let mut chunks = row.chunks_exact_mut(4);
    for c in &mut chunks {
        let v = (f64x4::from([c[0], c[1], c[2], c[3]]) - shift4).exp();
        let a: [f64; 4] = v.into();
        c.copy_from_slice(&a);
        acc += v;
    }
    let lanes: [f64; 4] = acc.into();
    let mut sum = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for v in chunks.into_remainder() {
        *v = (*v - shift).exp();
        sum += *v;
    }
    sum
}

/// Stabilized softmax of one row, in place. Returns the log-sum-exp so the
/// caller can read off the log-likelihood of any entry.
pub(crate) fn softmax_in_place(row: &mut [f64]) -> f64 {
    let max = max_of(row);
    let sum = exp_shifted_sum(row, max);
    let inv = 1.0 / sum;
    let inv4 = f64x4::splat(inv);
    let mut chunks = row.chunks_exact_mut(4);
    for c in &mut chunks {
        let v = f64x4::from([c[0], c[1], c[2], c[3]]) * inv4;
        let a: [f64; 4] = v.into();
        c.copy_from_slice(&a);
    }
    for v in chunks.into_remainder() {
        *v *= inv;
    }
    max + sum.ln()
}

/// Log-sum-exp of a row without modifying it.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = max_of(row);
    let max4 = f64x4::splat(max);
    let mut acc = f64x4::splat(0.0);
    let mut chunks = row.chunks_exact(4);
    for c in &mut chunks {
        acc += (f64x4::from([c[0], c[1], c[2], c[3]]) - max4).exp();
    }
    let lanes: [f64; 4] = acc.into();
    let mut sum = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for &v in chunks.remainder() {
        sum += (v - max).exp();
    }
    max + sum.ln()
}

/// Softmax forward pass: `softmax(H · U)` row by row, with max-subtraction
/// stabilization. Every output row sums to 1.
pub fn forward(h: &Array2<f64>, u: &DecoderMatrix) -> Result<Array2<f64>> {
    if h.ncols() != u.dims().0 {
        return Err(Error::ShapeMismatch(format!(
            "features are {}-dimensional but the decoder expects {}",
            h.ncols(),
            u.dims().0
        )));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "forward input",
        });
    }
    let mut z = h.dot(u.values());
    for mut row in z.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("row-major layout"));
    }
    Ok(z)
}

/// Total negative log-likelihood of the targets under row-stochastic `probs`,
/// with the number of clamped (zero-probability) targets reported alongside.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    pub total: f64,
    pub clamped: usize,
}

/// Cross-entropy `−Σ_m ln probs[m, target_m]` over normalized rows.
///
/// A probability of exactly zero at a target is clamped to
/// [`CROSS_ENTROPY_CLAMP`] and counted in the result instead of producing an
/// infinite loss.
pub fn cross_entropy(probs: &Array2<f64>, targets: &[usize]) -> Result<CrossEntropy> {
    if probs.nrows() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} probability rows for {} targets",
            probs.nrows(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    let mut clamped = 0usize;
    for (m, (&t, row)) in targets.iter().zip(probs.rows()).enumerate() {
        if t >= probs.ncols() {
            return Err(Error::TargetOutOfRange {
                index: m,
                target: t,
                classes: probs.ncols(),
            });
        }
        let mut p = row[t];
        if p <= 0.0 {
            p = CROSS_ENTROPY_CLAMP;
            clamped += 1;
        }
        total -= p.ln();
    }
    Ok(CrossEntropy { total, clamped })
}

/// Average perplexity `exp(L / M)` of a total loss over `m` predictions.
pub fn perplexity(loss: f64, m: usize) -> f64 {
    assert!(m >= 1, "perplexity needs at least one prediction");
    (loss / m as f64).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn zero_decoder_gives_uniform_rows() {
        let h = array![[0.3, 0.7], [2.0, 0.0]];
        let u = DecoderMatrix::new(Array2::zeros((2, 4)), 1.0).unwrap();
        let p = forward(&h, &u).unwrap();
        for row in p.rows() {
            for &v in row {
                assert_relative_eq!(v, 0.25, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn softmax_of_log_counts_recovers_conditionals() {
        // H = e_j, U = ln F: the row is F[j, :] normalized
        let f = array![[2.0, 6.0], [4.0, 4.0]];
        let u = DecoderMatrix::new(f.mapv(f64::ln), 1.0).unwrap();
        let h = array![[1.0, 0.0]];
        let p = forward(&h, &u).unwrap();
        assert_relative_eq!(p[[0, 0]], 0.25, max_relative = 1e-12);
        assert_relative_eq!(p[[0, 1]], 0.75, max_relative = 1e-12);
    }

    #[test]
    fn rows_sum_to_one_under_extreme_logits() {
        let h = array![[700.0, 0.0], [0.0, 1e-6]];
        let u = DecoderMatrix::new(array![[1.0, -1.0, 0.5], [0.0, 2.0, -3.0]], 1.0).unwrap();
        let p = forward(&h, &u).unwrap();
        for row in p.rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() <= 1e-9, "row sums to {s}");
            assert!(row.iter().all(|&v| v >= 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn forward_rejects_non_finite_input() {
        let h = array![[f64::NAN, 0.0]];
        let u = DecoderMatrix::new(Array2::zeros((2, 2)), 1.0).unwrap();
        assert!(forward(&h, &u).is_err());
    }

    #[test]
    fn uniform_cross_entropy() {
        // uniform probabilities, N = 4, M = 3: L = 3·ln4
        let probs = Array2::from_elem((3, 4), 0.25);
        let ce = cross_entropy(&probs, &[0, 1, 2]).unwrap();
        assert_relative_eq!(ce.total, 3.0 * 4.0f64.ln(), max_relative = 1e-12);
        assert_eq!(ce.clamped, 0);
    }

    #[test]
    fn perfect_predictions_have_zero_loss() {
        let probs = array![[1.0, 0.0], [0.0, 1.0]];
        let ce = cross_entropy(&probs, &[0, 1]).unwrap();
        assert_eq!(ce.total, 0.0);
    }

    #[test]
    fn hand_case_and_clamping() {
        // targets hit probabilities 0.5 and 0.25: L = ln2 + ln4
        let probs = array![[0.5, 0.5], [0.25, 0.75]];
        let ce = cross_entropy(&probs, &[0, 0]).unwrap();
        assert_relative_eq!(ce.total, 2.0794415416798357, max_relative = 1e-12);

        let degenerate = array![[0.0, 1.0]];
        let ce = cross_entropy(&degenerate, &[0]).unwrap();
        assert_eq!(ce.clamped, 1);
        assert!(ce.total.is_finite());
    }

    #[test]
    fn perplexity_of_uniform_model_is_vocabulary_size() {
        let loss = 3.0 * 4.0f64.ln();
        assert_relative_eq!(perplexity(loss, 3), 4.0, max_relative = 1e-12);
        assert_eq!(perplexity(0.0, 10), 1.0);
    }

    #[test]
    fn forward_matches_high_precision_reference() {
        // Expected rows were evaluated independently at 60 decimal digits.
        let h = array![
            [0.73, 0.02, 1.40],
            [0.11, 0.95, 0.27],
            [2.05, 0.33, 0.08],
            [0.42, 0.61, 0.55]
        ];
        let u = DecoderMatrix::new(
            array![
                [0.31, -1.24, 0.07, 2.11, -0.55],
                [-0.86, 0.44, 1.92, -0.13, 0.66],
                [1.05, 0.38, -0.71, 0.29, -1.48]
            ],
            1.0,
        )
        .unwrap();
        let expected = array![
            [
                0.39620934951492617585,
                0.051338591070609855582,
                0.029914482627900615317,
                0.51622500774414777216,
                0.0063125690424155810982
            ],
            [
                0.063102206038025311592,
                0.1526817561418700199,
                0.53601156102732076931,
                0.12534321941459769984,
                0.12286125737818619936
            ],
            [
                0.019775176518152708789,
                0.001200007059799276912,
                0.026285762425127435265,
                0.94816395910487682468,
                0.0045750948920437543533
            ],
            [
                0.15883089090601797272,
                0.12663894147617205299,
                0.29732923405641196401,
                0.34763047320993089305,
                0.069570460351467117237
            ]
        ];
        let p = forward(&h, &u).unwrap();
        for (got, want) in p.iter().zip(expected.iter()) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn log_sum_exp_matches_softmax_normalizer() {
        let mut row = vec![0.1, -2.0, 3.5, 0.0, 7.25, -0.125, 2.0];
        let lse = log_sum_exp(&row);
        let lse2 = softmax_in_place(&mut row);
        assert_eq!(lse, lse2);
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() <= 1e-12);
    }
}
