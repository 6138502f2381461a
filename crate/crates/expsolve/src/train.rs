//! The iterative baseline: exact softmax cross-entropy gradients and an
//! Adagrad loop supporting cold starts, warm starts, epoch-0 evaluation, and
//! naïve early stopping.
//!
//! Datasets are driven through the [`Engine`] trait so the loop itself never
//! touches raw features: dense matrices (digit classification, small tests)
//! and structured context streams (language modeling) both plug in. Every
//! reduction runs in a fixed order, so a given seed and dataset reproduce the
//! same [`TrainHistory`] bit for bit.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wide::f64x4;

use crate::cooc::CooccurrenceMatrix;
use crate::error::{Error, Result};
use crate::softmax::forward;
use crate::solver::DecoderMatrix;

/// Loss, top-1 correctness, and size of one evaluation pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub loss: f64,
    pub correct: usize,
    pub samples: usize,
}

impl EvalStats {
    pub fn accuracy(&self) -> f64 {
        if self.samples == 0 {
            return 0.0;
        }
        self.correct as f64 / self.samples as f64
    }
}

/// Full-batch access to a dataset for softmax training.
///
/// Implementations own the feature representation and compute fused
/// loss/gradient passes over it. All methods that traverse the underlying
/// data increment the pass counter, which tests use to assert single-pass
/// claims.
pub trait Engine: Sync {
    fn num_samples(&self) -> usize;
    /// Feature dimension D.
    fn dim(&self) -> usize;
    /// Output vocabulary size N.
    fn classes(&self) -> usize;

    /// Loss, accuracy, and the full-batch gradient `Hᵀ(Ŷ − Y)` at `u`.
    fn loss_grad(&self, u: &Array2<f64>) -> Result<(EvalStats, Array2<f64>)>;

    /// Loss and accuracy at `u` without forming the gradient.
    fn evaluate(&self, u: &Array2<f64>) -> Result<EvalStats>;

    /// Gradient over a subset of samples, accumulated into `grad` (which is
    /// zeroed first). Returns the subset loss. Engines that cannot address
    /// individual samples reject this.
    fn batch_grad(
        &self,
        _u: &Array2<f64>,
        _indices: &[usize],
        _grad: &mut Array2<f64>,
    ) -> Result<f64> {
        Err(Error::invalid(
            "this engine does not support mini-batches".to_string(),
        ))
    }

    /// Accumulates the generalized co-occurrence matrix `HᵀY`.
    fn cooccurrence(&self) -> Result<CooccurrenceMatrix>;

    /// Average feature 1-norm (the priming-number estimate).
    fn priming_estimate(&self) -> Result<f64>;

    /// Number of full traversals of the underlying data so far.
    fn data_passes(&self) -> usize;
}

// ---------------------------------------------------------------------------
// Spec-level operations on dense data
// ---------------------------------------------------------------------------

/// Exact cross-entropy gradient `Hᵀ(Ŷ − Y)` for a dense feature matrix.
pub fn gradient(h: &Array2<f64>, u: &DecoderMatrix, targets: &[usize]) -> Result<Array2<f64>> {
    if h.nrows() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature rows for {} targets",
            h.nrows(),
            targets.len()
        )));
    }
    let mut delta = forward(h, u)?;
    for (m, &t) in targets.iter().enumerate() {
        if t >= delta.ncols() {
            return Err(Error::TargetOutOfRange {
                index: m,
                target: t,
                classes: delta.ncols(),
            });
        }
        delta[[m, t]] -= 1.0;
    }
    let grad = h.t().dot(&delta);
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "gradient",
        });
    }
    Ok(grad)
}

/// Adagrad accumulator: `state += g²; u −= η·g/(√state + ε)`, elementwise.
#[derive(Debug, Clone)]
pub struct Adagrad {
    state: Array2<f64>,
    pub learning_rate: f64,
    pub epsilon: f64,
}

impl Adagrad {
    pub fn new(dims: (usize, usize), learning_rate: f64, epsilon: f64) -> Self {
        Adagrad {
            state: Array2::zeros(dims),
            learning_rate,
            epsilon,
        }
    }

    pub fn state(&self) -> &Array2<f64> {
        &self.state
    }

    /// One deterministic update of `u` against `grad`.
    pub fn step(&mut self, u: &mut Array2<f64>, grad: &Array2<f64>) {
        debug_assert_eq!(u.dim(), grad.dim());
        debug_assert_eq!(u.dim(), self.state.dim());
        let lr = f64x4::splat(self.learning_rate);
        let eps = f64x4::splat(self.epsilon);
        let un = u.as_slice_mut().expect("row-major");
        let gn = grad.as_slice().expect("row-major");
        let sn = self.state.as_slice_mut().expect("row-major");
        let n = un.len();
        let mut i = 0;
        while i + 4 <= n {
            let g = f64x4::from([gn[i], gn[i + 1], gn[i + 2], gn[i + 3]]);
            let mut s = f64x4::from([sn[i], sn[i + 1], sn[i + 2], sn[i + 3]]);
            s += g * g;
            let upd = lr * g / (s.sqrt() + eps);
            let sa: [f64; 4] = s.into();
            let ua: [f64; 4] = upd.into();
            sn[i..i + 4].copy_from_slice(&sa);
            for lane in 0..4 {
                un[i + lane] -= ua[lane];
            }
            i += 4;
        }
        while i < n {
            let g = gn[i];
            sn[i] += g * g;
            un[i] -= self.learning_rate * g / (sn[i].sqrt() + self.epsilon);
            i += 1;
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Parameter initialization: seeded uniform noise or an explicit decoder.
#[derive(Debug, Clone)]
pub enum Init {
    Cold { seed: u64, scale: f64 },
    Warm(DecoderMatrix),
}

/// Which split the early-stopping criterion watches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MonitorSplit {
    Train,
    Dev,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EarlyStop {
    None,
    /// Halt the first epoch the monitored loss exceeds its previous value and
    /// return the parameters from the previous epoch.
    OnLossIncrease(MonitorSplit),
}

/// Gradient batching per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchRegime {
    /// One exact gradient per epoch.
    Full,
    /// Fixed-size batches; `shuffle` reorders samples each epoch with a
    /// seeded permutation, `None` keeps corpus order.
    Mini { size: usize, shuffle: Option<u64> },
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub adagrad_epsilon: f64,
    pub init: Init,
    pub early_stop: EarlyStop,
    pub batch: BatchRegime,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            epochs: 32,
            adagrad_epsilon: 1e-10,
            init: Init::Cold {
                seed: 0,
                scale: 0.01,
            },
            early_stop: EarlyStop::None,
            batch: BatchRegime::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.adagrad_epsilon > 0.0) {
            return Err(Error::invalid(format!(
                "adagrad epsilon must be positive, got {}",
                self.adagrad_epsilon
            )));
        }
        if let BatchRegime::Mini { size, .. } = self.batch {
            if size == 0 {
                return Err(Error::invalid("mini-batch size must be nonzero".to_string()));
            }
        }
        Ok(())
    }
}

/// Per-epoch measurements. Record 0 is the evaluation before any update.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub dev_loss: Option<f64>,
    pub dev_accuracy: Option<f64>,
}

/// Metric written to the `..._ppl_or_acc` CSV columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Perplexity,
    Accuracy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub stopped_early: bool,
    pub epochs_run: usize,
    pub train_samples: usize,
    pub dev_samples: Option<usize>,
}

impl TrainHistory {
    /// CSV export with the fixed schema
    /// `epoch,train_loss,train_ppl_or_acc,dev_loss,dev_ppl_or_acc`.
    pub fn to_csv(&self, metric: Metric) -> String {
        let mut out = String::from("epoch,train_loss,train_ppl_or_acc,dev_loss,dev_ppl_or_acc\n");
        for r in &self.records {
            let train_metric = match metric {
                Metric::Perplexity => crate::softmax::perplexity(r.train_loss, self.train_samples),
                Metric::Accuracy => r.train_accuracy,
            };
            let (dev_loss, dev_metric) = match (r.dev_loss, self.dev_samples) {
                (Some(l), Some(m)) => {
                    let dm = match metric {
                        Metric::Perplexity => crate::softmax::perplexity(l, m),
                        Metric::Accuracy => r.dev_accuracy.unwrap_or(0.0),
                    };
                    (format!("{l}"), format!("{dm}"))
                }
                _ => (String::new(), String::new()),
            };
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.train_loss, train_metric, dev_loss, dev_metric
            ));
        }
        out
    }

    pub fn final_record(&self) -> &EpochRecord {
        self.records.last().expect("history always has record 0")
    }
}

fn cold_init(dims: (usize, usize), seed: u64, scale: f64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Array2::zeros(dims);
    for v in values.iter_mut() {
        *v = rng.random_range(-scale..scale);
    }
    values
}

/// Runs the iterative baseline over `train_data`, optionally tracking a dev
/// split, and returns the final (or early-stop-restored) decoder plus the
/// full history.
pub fn train(
    train_data: &dyn Engine,
    dev: Option<&dyn Engine>,
    config: &TrainConfig,
) -> Result<(DecoderMatrix, TrainHistory)> {
    config.validate()?;
    let dims = (train_data.dim(), train_data.classes());
    let (mut u, priming) = match &config.init {
        Init::Cold { seed, scale } => (cold_init(dims, *seed, *scale), 1.0),
        Init::Warm(decoder) => {
            if decoder.dims() != dims {
                return Err(Error::ShapeMismatch(format!(
                    "warm start is {:?} but the data needs {:?}",
                    decoder.dims(),
                    dims
                )));
            }
            (decoder.values().clone(), decoder.priming())
        }
    };
    let monitor = match config.early_stop {
        EarlyStop::OnLossIncrease(split) => {
            if split == MonitorSplit::Dev && dev.is_none() {
                return Err(Error::invalid(
                    "early stopping on the dev split requires a dev split".to_string(),
                ));
            }
            Some(split)
        }
        EarlyStop::None => None,
    };

    let mut optimizer = Adagrad::new(dims, config.learning_rate, config.adagrad_epsilon);
    let mut history = TrainHistory {
        records: Vec::with_capacity(config.epochs + 1),
        stopped_early: false,
        epochs_run: 0,
        train_samples: train_data.num_samples(),
        dev_samples: dev.map(Engine::num_samples),
    };

    let eval_record = |epoch: usize, u: &Array2<f64>| -> Result<EpochRecord> {
        let stats = train_data.evaluate(u)?;
        let dev_stats = dev.map(|d| d.evaluate(u)).transpose()?;
        Ok(EpochRecord {
            epoch,
            train_loss: stats.loss,
            train_accuracy: stats.accuracy(),
            dev_loss: dev_stats.map(|s| s.loss),
            dev_accuracy: dev_stats.map(|s| s.accuracy()),
        })
    };

    history.records.push(eval_record(0, &u)?);
    let monitored = |r: &EpochRecord| -> f64 {
        match monitor {
            Some(MonitorSplit::Dev) => r.dev_loss.expect("validated above"),
            _ => r.train_loss,
        }
    };
    let mut prev_monitor = monitored(&history.records[0]);

    let mut order: Vec<usize> = match config.batch {
        BatchRegime::Mini { .. } => (0..train_data.num_samples()).collect(),
        BatchRegime::Full => Vec::new(),
    };
    let mut shuffle_rng = match config.batch {
        BatchRegime::Mini {
            shuffle: Some(seed),
            ..
        } => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    let mut batch_buffer = match config.batch {
        BatchRegime::Mini { .. } => Some(Array2::<f64>::zeros(dims)),
        BatchRegime::Full => None,
    };

    let mut previous_u: Option<Array2<f64>> = None;
    for epoch in 1..=config.epochs {
        if monitor.is_some() {
            previous_u = Some(u.clone());
        }
        match config.batch {
            BatchRegime::Full => {
                let (_, grad) = train_data.loss_grad(&u)?;
                optimizer.step(&mut u, &grad);
            }
            BatchRegime::Mini { size, .. } => {
                if let Some(rng) = shuffle_rng.as_mut() {
                    shuffle(&mut order, rng);
                }
                let grad = batch_buffer.as_mut().expect("allocated above");
                for batch in order.chunks(size) {
                    train_data.batch_grad(&u, batch, grad)?;
                    optimizer.step(&mut u, grad);
                }
            }
        }
        history.records.push(eval_record(epoch, &u)?);
        history.epochs_run = epoch;
        let current = monitored(history.records.last().expect("just pushed"));
        if monitor.is_some() && current > prev_monitor {
            history.stopped_early = true;
            u = previous_u.expect("saved before the epoch");
            break;
        }
        prev_monitor = current;
    }

    Ok((DecoderMatrix::new(u, priming)?, history))
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    // Fisher-Yates, written out so the permutation is pinned to this crate
    // rather than to a rand version.
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::DenseEngine;
    use crate::sample::Sample;
    use crate::solver::{explicit_solution, DecoderMatrix};
    use approx::assert_relative_eq;
    use ndarray::array;

    fn toy_engine() -> DenseEngine {
        // 3 classes, 4 dims, deterministic pseudo-random data
        let mut samples = Vec::new();
        let mut x = 0.1f64;
        for i in 0..30 {
            let features: Vec<f64> = (0..4)
                .map(|d| {
                    x = (x * 7.31 + 0.17 + d as f64 * 0.05).fract();
                    x
                })
                .collect();
            samples.push(Sample::new(features, i % 3));
        }
        DenseEngine::from_samples(samples, (4, 3)).unwrap()
    }

    #[test]
    fn gradient_is_zero_at_perfect_predictions() {
        // huge correct logits make Ŷ one-hot to machine precision
        let h = array![[1.0, 0.0], [0.0, 1.0]];
        let u = DecoderMatrix::new(array![[60.0, -60.0], [-60.0, 60.0]], 1.0).unwrap();
        let g = gradient(&h, &u, &[0, 1]).unwrap();
        for &v in g.iter() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_hand_case() {
        // U = 0, one sample H = e1, target 0, N = 2: row 0 is [−½, ½]
        let h = array![[1.0, 0.0]];
        let u = DecoderMatrix::new(Array2::zeros((2, 2)), 1.0).unwrap();
        let g = gradient(&h, &u, &[0]).unwrap();
        assert_relative_eq!(g[[0, 0]], -0.5, max_relative = 1e-12);
        assert_relative_eq!(g[[0, 1]], 0.5, max_relative = 1e-12);
        assert_eq!(g[[1, 0]], 0.0);
        assert_eq!(g[[1, 1]], 0.0);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let engine = toy_engine();
        let u0 = cold_init((4, 3), 11, 0.5);
        let (_, grad) = engine.loss_grad(&u0).unwrap();
        let step = 1e-5;
        for j in 0..4 {
            for i in 0..3 {
                let mut up = u0.clone();
                let mut dn = u0.clone();
                up[[j, i]] += step;
                dn[[j, i]] -= step;
                let lp = engine.evaluate(&up).unwrap().loss;
                let ln = engine.evaluate(&dn).unwrap().loss;
                let fd = (lp - ln) / (2.0 * step);
                let g = grad[[j, i]];
                assert!(
                    (fd - g).abs() <= 1e-4 * g.abs().max(1.0),
                    "({j},{i}): fd {fd} vs grad {g}"
                );
            }
        }
    }

    #[test]
    fn adagrad_first_step_is_learning_rate_sized() {
        let mut u = Array2::zeros((1, 1));
        let g = array![[1.0]];
        let mut opt = Adagrad::new((1, 1), 0.01, 1e-10);
        opt.step(&mut u, &g);
        assert!((u[[0, 0]] + 0.01).abs() < 1e-9);
        opt.step(&mut u, &g);
        // second unit gradient: delta = −0.01/√2
        let expected = -0.01 / (1.0 + 1e-10) - 0.01 / (2.0f64.sqrt() + 1e-10);
        assert!((u[[0, 0]] - expected).abs() < 1e-12);
    }

    #[test]
    fn adagrad_zero_gradient_is_a_fixed_point() {
        let mut u = array![[0.25, -0.5]];
        let before = u.clone();
        let mut opt = Adagrad::new((1, 2), 0.01, 1e-10);
        opt.step(&mut u, &Array2::zeros((1, 2)));
        assert_eq!(u, before);
    }

    #[test]
    fn adagrad_state_is_monotone() {
        let mut u = Array2::zeros((2, 2));
        let mut opt = Adagrad::new((2, 2), 0.01, 1e-10);
        let mut prev = opt.state().clone();
        let mut x = 0.3f64;
        for _ in 0..10 {
            let g = Array2::from_shape_fn((2, 2), |_| {
                x = (x * 3.9).fract() - 0.5;
                x
            });
            opt.step(&mut u, &g);
            for (s, p) in opt.state().iter().zip(prev.iter()) {
                assert!(s >= p);
            }
            prev = opt.state().clone();
        }
    }

    #[test]
    fn zero_epochs_returns_init_with_epoch_zero_record() {
        let engine = toy_engine();
        let config = TrainConfig {
            epochs: 0,
            init: Init::Cold {
                seed: 3,
                scale: 0.01,
            },
            ..TrainConfig::default()
        };
        let (decoder, history) = train(&engine, None, &config).unwrap();
        assert_eq!(history.records.len(), 1);
        assert_eq!(history.epochs_run, 0);
        assert!(!history.stopped_early);
        assert_eq!(decoder.values(), &cold_init((4, 3), 3, 0.01));
    }

    #[test]
    fn warm_start_at_stationary_point_keeps_loss() {
        // one-hot K=1 data: the explicit solution is exactly the MLE, so the
        // full-batch gradient vanishes and epoch 1 equals epoch 0
        let mut samples = Vec::new();
        for (ctx, tgt, times) in [(0, 0, 3), (0, 1, 1), (1, 0, 2), (1, 1, 2)] {
            for _ in 0..times {
                let mut f = vec![0.0; 2];
                f[ctx] = 1.0;
                samples.push(Sample::new(f, tgt));
            }
        }
        let engine = DenseEngine::from_samples(samples, (2, 2)).unwrap();
        let cooc = engine.cooccurrence().unwrap();
        let u0 = explicit_solution(&cooc, 1.0, 1e-12).unwrap();
        let config = TrainConfig {
            epochs: 1,
            init: Init::Warm(u0),
            ..TrainConfig::default()
        };
        let (_, history) = train(&engine, None, &config).unwrap();
        assert!(
            (history.records[1].train_loss - history.records[0].train_loss).abs() <= 1e-8,
            "loss moved from a stationary start"
        );
    }

    #[test]
    fn identical_seeds_give_identical_histories() {
        let engine = toy_engine();
        let config = TrainConfig {
            epochs: 5,
            batch: BatchRegime::Mini {
                size: 7,
                shuffle: Some(99),
            },
            init: Init::Cold {
                seed: 5,
                scale: 0.01,
            },
            ..TrainConfig::default()
        };
        let (d1, h1) = train(&engine, None, &config).unwrap();
        let (d2, h2) = train(&engine, None, &config).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(d1.values(), d2.values());
    }

    #[test]
    fn early_stop_returns_previous_epoch_parameters() {
        // A large learning rate on a tiny dataset overshoots quickly; the
        // restored parameters must be those of the epoch before the increase.
        let engine = toy_engine();
        let config = TrainConfig {
            learning_rate: 5.0,
            epochs: 50,
            early_stop: EarlyStop::OnLossIncrease(MonitorSplit::Train),
            init: Init::Cold {
                seed: 1,
                scale: 0.01,
            },
            ..TrainConfig::default()
        };
        let (decoder, history) = train(&engine, None, &config).unwrap();
        if history.stopped_early {
            let stop = history.epochs_run;
            assert!(history.records[stop].train_loss > history.records[stop - 1].train_loss);
            // the returned decoder evaluates to the pre-increase loss
            let loss = engine.evaluate(decoder.values()).unwrap().loss;
            assert_relative_eq!(
                loss,
                history.records[stop - 1].train_loss,
                max_relative = 1e-12
            );
        } else {
            panic!("expected the overshooting run to stop early");
        }
    }

    #[test]
    fn cold_start_converges_to_brute_force_optimum() {
        // tiny synthetic set; oracle is an independent fixed-step descent
        let mut samples = Vec::new();
        let mut x = 0.37f64;
        for i in 0..50 {
            let features: Vec<f64> = (0..5)
                .map(|d| {
                    x = (x * 5.17 + 0.071 + (d as f64) * 0.013).fract();
                    x
                })
                .collect();
            samples.push(Sample::new(features, (i * 3 + 1) % 5));
        }
        let engine = DenseEngine::from_samples(samples.clone(), (5, 5)).unwrap();

        // oracle: plain gradient descent to convergence, no library reuse
        let mut h = Array2::<f64>::zeros((50, 5));
        for (r, s) in samples.iter().enumerate() {
            for (c, &v) in s.features.iter().enumerate() {
                h[[r, c]] = v;
            }
        }
        let targets: Vec<usize> = samples.iter().map(|s| s.target).collect();
        let mut w = Array2::<f64>::zeros((5, 5));
        let mut oracle_loss = f64::INFINITY;
        for _ in 0..20000 {
            let z = h.dot(&w);
            let mut p = z.clone();
            let mut loss = 0.0;
            for (m, mut row) in p.rows_mut().into_iter().enumerate() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
                loss -= row[targets[m]].ln();
            }
            oracle_loss = loss;
            for (m, &t) in targets.iter().enumerate() {
                p[[m, t]] -= 1.0;
            }
            let g = h.t().dot(&p);
            w = &w - &(g * 0.05);
        }

        let config = TrainConfig {
            learning_rate: 0.3,
            epochs: 4000,
            init: Init::Cold {
                seed: 8,
                scale: 0.01,
            },
            ..TrainConfig::default()
        };
        let (_, history) = train(&engine, None, &config).unwrap();
        let final_loss = history.final_record().train_loss;
        assert!(
            (final_loss - oracle_loss).abs() <= 0.01 * oracle_loss,
            "trained {final_loss} vs oracle {oracle_loss}"
        );
    }
}
