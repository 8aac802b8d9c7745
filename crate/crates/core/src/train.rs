//! Small supervised loop around a single MoE layer.
//!
//! The task is a piecewise-linear regression with four regimes keyed on the
//! signs of the first two inputs. It exists to exercise the load-balancing
//! loss: with `w_importance > 0` the final importance CV should be lower than
//! without it.

use crate::moe::{Mode, MoeLayer};
use crate::rng::Rng;
use crate::tensor::{Batch, Matrix};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct RegressionTask {
    pub inputs: Batch<f64>,
    pub targets: Batch<f64>,
}

impl RegressionTask {
    /// Inputs uniform in `[-1, 1]` with a trailing constant 1 column, so the
    /// layer input width is `features + 1`. Each sign pattern of the first two
    /// features selects its own random linear map.
    pub fn piecewise_linear(samples: usize, features: usize, out_dim: usize, rng: &mut Rng) -> Result<Self> {
        if features < 2 {
            return Err(Error::invalid("the regime key needs at least two features"));
        }
        let in_dim = features + 1;
        let maps: Vec<Matrix<f64>> = (0..4)
            .map(|_| Matrix::uniform(in_dim, out_dim, 1.0, rng))
            .collect();
        let mut inputs = Vec::with_capacity(samples * in_dim);
        let mut targets = Vec::with_capacity(samples * out_dim);
        for _ in 0..samples {
            let mut x: Vec<f64> = (0..features).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            x.push(1.0);
            let regime = usize::from(x[0] >= 0.0) + 2 * usize::from(x[1] >= 0.0);
            let m = &maps[regime];
            for c in 0..out_dim {
                targets.push((0..in_dim).map(|r| x[r] * m.get(r, c)).sum());
            }
            inputs.extend(x);
        }
        Ok(Self {
            inputs: Batch::new(samples, in_dim, inputs)?,
            targets: Batch::new(samples, out_dim, targets)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub w_importance: f64,
    /// `None` for full-batch descent.
    pub batch_size: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.1,
            w_importance: 0.1,
            batch_size: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean squared error, averaged over samples.
    pub task_loss: f64,
    pub importance_loss: f64,
    pub cv: f64,
}

/// Gradient descent on `MSE + w·CV(Importance)²`. Records are averaged over
/// the mini-batches of each epoch. The layer is switched to train mode for
/// the duration and restored afterwards.
pub fn train_lite(
    layer: &mut MoeLayer<f64>,
    task: &RegressionTask,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Vec<EpochRecord>> {
    let samples = task.inputs.batch_size();
    if task.targets.batch_size() != samples {
        return Err(Error::invalid("inputs and targets differ in length"));
    }
    if task.inputs.dim() != layer.in_dim() || task.targets.dim() != layer.out_dim() {
        return Err(Error::invalid("task dimensions do not match the layer"));
    }
    if samples == 0 {
        return Err(Error::invalid("empty dataset"));
    }
    let batch = cfg.batch_size.unwrap_or(samples).clamp(1, samples);

    let previous = layer.mode();
    layer.set_mode(Mode::Train);
    let result = run_epochs(layer, task, cfg, batch, rng);
    layer.set_mode(previous);
    layer.clear_recorded();
    result
}

fn run_epochs(
    layer: &mut MoeLayer<f64>,
    task: &RegressionTask,
    cfg: &TrainConfig,
    batch: usize,
    rng: &mut Rng,
) -> Result<Vec<EpochRecord>> {
    let samples = task.inputs.batch_size();
    let mut order: Vec<usize> = (0..samples).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if batch < samples {
            shuffle(&mut order, rng);
        }
        let (mut task_sum, mut imp_sum, mut cv_sum, mut chunks) = (0.0, 0.0, 0.0, 0usize);
        for idx in order.chunks(batch) {
            let x = task.inputs.select_rows(idx);
            let t = task.targets.select_rows(idx);
            let y = match layer.forward_train(&x, Some(rng)) {
                Err(Error::AllMasked) => {
                    return Err(Error::Diverged {
                        epoch,
                        task_loss: f64::NAN,
                        importance_loss: f64::NAN,
                    })
                }
                other => other?,
            };
            let scale = 1.0 / idx.len() as f64;
            let mut mse = 0.0;
            let upstream: Vec<f64> = y
                .data()
                .iter()
                .zip(t.data())
                .map(|(a, b)| {
                    mse += (a - b) * (a - b);
                    2.0 * (a - b) * scale
                })
                .collect();
            let upstream = Batch::new(y.batch_size(), y.dim(), upstream)?;
            let grads = layer.backward(&upstream, cfg.w_importance)?;
            let task_loss = mse * scale;
            if !task_loss.is_finite() || !grads.load.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    task_loss,
                    importance_loss: grads.load.loss,
                });
            }
            layer.apply_gradients(&grads, cfg.lr);
            task_sum += task_loss;
            imp_sum += grads.load.loss;
            cv_sum += grads.load.cv;
            chunks += 1;
        }
        let c = chunks as f64;
        trace.push(EpochRecord {
            epoch,
            task_loss: task_sum / c,
            importance_loss: imp_sum / c,
            cv: cv_sum / c,
        });
    }
    Ok(trace)
}

fn shuffle(v: &mut [usize], rng: &mut Rng) {
    for i in (1..v.len()).rev() {
        let j = (rng.uniform() * (i + 1) as f64) as usize;
        v.swap(i, j.min(i));
    }
}
