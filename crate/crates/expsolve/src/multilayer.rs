//! Layer-local warm starts for two-layer softmax networks.
//!
//! The closed-form solution is applied layer by layer: solve the first
//! decoder from `F(H, Y)`, push the data through its softmax to get
//! second-order features `H⁽²⁾`, and solve the second decoder from
//! `F(H⁽²⁾, Y)`. Rows of `H⁽²⁾` are probability distributions, so the
//! second layer's priming number is 1 — asserted from the data rather than
//! assumed. Construction reads the data exactly once per layer and never
//! backpropagates.
//!
//! Joint fine-tuning backpropagates through both softmaxes with the exact
//! Jacobian-vector product `s ⊙ (g − (s·g))` and one Adagrad accumulator per
//! layer.

use ndarray::{s, Array2};
use rayon::prelude::*;

use crate::cooc::CooccurrenceMatrix;
use crate::engine::{argmax, DenseEngine};
use crate::error::{Error, Result};
use crate::softmax::softmax_in_place;
use crate::solver::{default_floor, explicit_solution};
use crate::train::{
    Adagrad, BatchRegime, EarlyStop, Engine, EpochRecord, EvalStats, MonitorSplit, TrainConfig,
    TrainHistory,
};

/// Tolerance for the layer-2 priming assertion: softmax rows are unit-norm.
const PRIMING2_TOLERANCE: f64 = 1e-9;

/// A two-layer softmax stack `softmax(softmax(H·U1)·U2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerModel {
    pub u1: Array2<f64>,
    pub u2: Array2<f64>,
    pub priming1: f64,
    pub priming2: f64,
}

impl TwoLayerModel {
    pub fn dims(&self) -> ((usize, usize), (usize, usize)) {
        (self.u1.dim(), self.u2.dim())
    }
}

/// Builds both layers with one forward pass each and no backpropagation.
///
/// `priming1` defaults to the estimated average feature norm. The layer-2
/// priming number is measured from the softmax outputs and must come out as
/// 1 within tolerance.
pub fn local_warm_start(engine: &DenseEngine, priming1: Option<f64>) -> Result<TwoLayerModel> {
    let f1 = engine.cooccurrence()?;
    let k1 = match priming1 {
        Some(k) => k,
        None => engine.priming_estimate()?,
    };
    let u1 = explicit_solution(&f1, k1, default_floor(&f1)?)?;

    let h2 = engine.probabilities(u1.values())?;
    let m = h2.nrows();
    let mass: f64 = h2.sum();
    let priming2 = mass / m as f64;
    if (priming2 - 1.0).abs() > PRIMING2_TOLERANCE {
        return Err(Error::invalid(format!(
            "layer-2 priming estimate {priming2} is not 1: softmax rows are not unit mass"
        )));
    }

    let mut f2_values = Array2::<f64>::zeros((h2.ncols(), engine.classes()));
    for (r, &t) in engine.targets().iter().enumerate() {
        let mut col = f2_values.column_mut(t);
        for (dst, &v) in col.iter_mut().zip(h2.row(r).iter()) {
            *dst += v;
        }
    }
    let f2 = CooccurrenceMatrix::from_values(f2_values, m, mass);
    // H⁽²⁾ entries can underflow toward zero, so the floor stays in play
    let u2 = explicit_solution(&f2, 1.0, default_floor(&f2)?)?;

    Ok(TwoLayerModel {
        u1: u1.into_values(),
        u2: u2.into_values(),
        priming1: k1,
        priming2: 1.0,
    })
}

/// `softmax(softmax(H·U1)·U2)`, rows summing to 1.
pub fn forward_2layer(h: &Array2<f64>, model: &TwoLayerModel) -> Result<Array2<f64>> {
    if h.ncols() != model.u1.nrows() || model.u1.ncols() != model.u2.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "features {:?} through layers {:?} and {:?}",
            h.dim(),
            model.u1.dim(),
            model.u2.dim()
        )));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "two-layer forward input",
        });
    }
    let mut s1 = h.dot(&model.u1);
    for mut row in s1.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("row-major"));
    }
    let mut s2 = s1.dot(&model.u2);
    for mut row in s2.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("row-major"));
    }
    Ok(s2)
}

/// Initialization for joint two-layer training.
#[derive(Debug, Clone)]
pub enum Init2 {
    Cold { seed: u64, scale: f64 },
    Warm(TwoLayerModel),
}

struct Grad2 {
    g1: Array2<f64>,
    g2: Array2<f64>,
}

/// Fused two-layer loss/accuracy/gradient over a row range of `h`.
fn chunk_pass(
    h: &Array2<f64>,
    targets: &[usize],
    lo: usize,
    hi: usize,
    u1: &Array2<f64>,
    u2: &Array2<f64>,
    with_grad: bool,
) -> (f64, usize, Option<Grad2>) {
    let hs = h.slice(s![lo..hi, ..]);
    let mut s1 = hs.dot(u1);
    for mut row in s1.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("row-major"));
    }
    let mut s2 = s1.dot(u2);
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (r, mut row) in s2.rows_mut().into_iter().enumerate() {
        let t = targets[lo + r];
        let slice = row.as_slice_mut().expect("row-major");
        let z_t = slice[t];
        if argmax(slice) == t {
            correct += 1;
        }
        let lse = softmax_in_place(slice);
        loss += lse - z_t;
    }
    if !with_grad {
        return (loss, correct, None);
    }
    // s2 now holds Ŷ; turn it into Δ2 = Ŷ − Y
    for (r, mut row) in s2.rows_mut().into_iter().enumerate() {
        row[targets[lo + r]] -= 1.0;
    }
    let g2 = s1.t().dot(&s2);
    // backprop through the inner softmax: Δ1 = s ⊙ (Δ2·U2ᵀ − (s·(Δ2·U2ᵀ)))
    let mut ds1 = s2.dot(&u2.t());
    for (mut drow, srow) in ds1.rows_mut().into_iter().zip(s1.rows()) {
        let dot: f64 = drow
            .as_slice()
            .expect("row-major")
            .iter()
            .zip(srow.as_slice().expect("row-major"))
            .map(|(d, s)| d * s)
            .sum();
        for (d, &sv) in drow.iter_mut().zip(srow.iter()) {
            *d = sv * (*d - dot);
        }
    }
    let g1 = hs.t().dot(&ds1);
    (loss, correct, Some(Grad2 { g1, g2 }))
}

fn full_pass(
    h: &Array2<f64>,
    targets: &[usize],
    u1: &Array2<f64>,
    u2: &Array2<f64>,
    with_grad: bool,
) -> Result<(EvalStats, Option<Grad2>)> {
    const CHUNK: usize = 2048;
    let m = h.nrows();
    let ranges: Vec<(usize, usize)> = (0..m.div_ceil(CHUNK))
        .map(|c| (c * CHUNK, ((c + 1) * CHUNK).min(m)))
        .collect();
    let parts: Vec<(f64, usize, Option<Grad2>)> = ranges
        .into_par_iter()
        .map(|(lo, hi)| chunk_pass(h, targets, lo, hi, u1, u2, with_grad))
        .collect();
    let mut loss = 0.0;
    let mut correct = 0;
    let mut grad: Option<Grad2> = None;
    for (l, c, g) in parts {
        loss += l;
        correct += c;
        if let Some(g) = g {
            match grad.as_mut() {
                Some(acc) => {
                    acc.g1 += &g.g1;
                    acc.g2 += &g.g2;
                }
                None => grad = Some(g),
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "two-layer loss",
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

/// Joint full-batch or mini-batch fine-tuning of both layers with Adagrad.
///
/// `freeze_layer1` skips the first layer's updates; both layers train by
/// default. Evaluation (and dev-split monitoring) reuses the same fused
/// forward as training.
pub fn train_2layer(
    train: &DenseEngine,
    dev: Option<&DenseEngine>,
    init: Init2,
    config: &TrainConfig,
    freeze_layer1: bool,
) -> Result<(TwoLayerModel, TrainHistory)> {
    config.validate()?;
    let (d, n) = (train.dim(), train.classes());
    let (mut u1, mut u2, priming1, priming2) = match init {
        Init2::Cold { seed, scale } => {
            use rand::Rng;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut a = Array2::zeros((d, n));
            for v in a.iter_mut() {
                *v = rng.random_range(-scale..scale);
            }
            let mut b = Array2::zeros((n, n));
            for v in b.iter_mut() {
                *v = rng.random_range(-scale..scale);
            }
            (a, b, 1.0, 1.0)
        }
        Init2::Warm(model) => {
            if model.u1.dim() != (d, n) || model.u2.dim() != (n, n) {
                return Err(Error::ShapeMismatch(format!(
                    "warm start dims {:?} do not fit data ({d}, {n})",
                    model.dims()
                )));
            }
            (model.u1, model.u2, model.priming1, model.priming2)
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

    let h = train.features();
    let targets = train.targets();
    let mut opt1 = Adagrad::new((d, n), config.learning_rate, config.adagrad_epsilon);
    let mut opt2 = Adagrad::new((n, n), config.learning_rate, config.adagrad_epsilon);

    let eval_record = |epoch: usize, u1: &Array2<f64>, u2: &Array2<f64>| -> Result<EpochRecord> {
        let (stats, _) = full_pass(h, targets, u1, u2, false)?;
        let dev_stats = dev
            .map(|e| full_pass(e.features(), e.targets(), u1, u2, false).map(|(s, _)| s))
            .transpose()?;
        Ok(EpochRecord {
            epoch,
            train_loss: stats.loss,
            train_accuracy: stats.accuracy(),
            dev_loss: dev_stats.map(|s| s.loss),
            dev_accuracy: dev_stats.map(|s| s.accuracy()),
        })
    };

    let mut history = TrainHistory {
        records: vec![eval_record(0, &u1, &u2)?],
        stopped_early: false,
        epochs_run: 0,
        train_samples: train.num_samples(),
        dev_samples: dev.map(Engine::num_samples),
    };
    let monitored = |r: &EpochRecord| match monitor {
        Some(MonitorSplit::Dev) => r.dev_loss.expect("validated above"),
        _ => r.train_loss,
    };
    let mut prev_monitor = monitored(&history.records[0]);

    let mut order: Vec<usize> = (0..train.num_samples()).collect();
    let mut shuffle_rng = match config.batch {
        BatchRegime::Mini {
            shuffle: Some(seed),
            ..
        } => {
            use rand::SeedableRng;
            Some(rand_chacha::ChaCha8Rng::seed_from_u64(seed))
        }
        _ => None,
    };

    let mut previous: Option<(Array2<f64>, Array2<f64>)> = None;
    for epoch in 1..=config.epochs {
        if monitor.is_some() {
            previous = Some((u1.clone(), u2.clone()));
        }
        match config.batch {
            BatchRegime::Full => {
                let (_, grad) = full_pass(h, targets, &u1, &u2, true)?;
                let grad = grad.expect("with_grad");
                if !freeze_layer1 {
                    opt1.step(&mut u1, &grad.g1);
                }
                opt2.step(&mut u2, &grad.g2);
            }
            BatchRegime::Mini { size, .. } => {
                if let Some(rng) = shuffle_rng.as_mut() {
                    use rand::Rng;
                    for i in (1..order.len()).rev() {
                        let j = rng.random_range(0..=i);
                        order.swap(i, j);
                    }
                }
                for batch in order.chunks(size) {
                    let (_, _, grad) =
                        batch_pass(h, targets, batch, &u1, &u2);
                    let grad = grad.expect("with_grad");
                    if !freeze_layer1 {
                        opt1.step(&mut u1, &grad.g1);
                    }
                    opt2.step(&mut u2, &grad.g2);
                }
            }
        }
        history.records.push(eval_record(epoch, &u1, &u2)?);
        history.epochs_run = epoch;
        let current = monitored(history.records.last().expect("just pushed"));
        if monitor.is_some() && current > prev_monitor {
            history.stopped_early = true;
            let (p1, p2) = previous.expect("saved before the epoch");
            u1 = p1;
            u2 = p2;
            break;
        }
        prev_monitor = current;
    }

    Ok((
        TwoLayerModel {
            u1,
            u2,
            priming1,
            priming2,
        },
        history,
    ))
}

/// Gathered-row variant of [`chunk_pass`] for mini-batches.
fn batch_pass(
    h: &Array2<f64>,
    targets: &[usize],
    indices: &[usize],
    u1: &Array2<f64>,
    u2: &Array2<f64>,
) -> (f64, usize, Option<Grad2>) {
    let mut hb = Array2::zeros((indices.len(), h.ncols()));
    let mut tb = Vec::with_capacity(indices.len());
    for (r, &m) in indices.iter().enumerate() {
        hb.row_mut(r).assign(&h.row(m));
        tb.push(targets[m]);
    }
    chunk_pass(&hb, &tb, 0, indices.len(), u1, u2, true)
}
