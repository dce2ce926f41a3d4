//! Loss, optimizer, augmentation, and the training loop with
//! validation-based early stopping.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Gradients, NodeId, ParamId, Tape};
use crate::data::{Dataset, DataError};
use crate::metrics::{self, MetricsError};
use crate::model::{LoTeNetModel, ModelError, Phase};
use crate::scalar::Real;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("empty {split} split")]
    EmptySplit { split: &'static str },
    #[error("non-finite loss (divergence) at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("parameter {index}: shape {param:?} does not match gradient {grad:?}")]
    GradShape {
        index: usize,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error("augmentation supports 2D images only; got rank {rank}")]
    AugmentRank { rank: usize },
    #[error("90-degree rotation needs square images; got {h}x{w}")]
    AugmentNonSquare { h: usize, w: usize },
    #[error("AUC early stopping needs a binary task; got {classes} classes")]
    AucNeedsBinary { classes: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Early-stopping metric on the validation split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EarlyStopMetric {
    #[default]
    Accuracy,
    Auc,
}

/// Training hyperparameters; the optimizer defaults follow the fixed recipe
/// (Adam, learning rate 5e-4, patience 10).
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub metric: EarlyStopMetric,
    pub augment: bool,
    pub seed: u64,
    /// When false, history records carry `elapsed_seconds = 0` so that runs
    /// are byte-reproducible.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            batch_size: 512,
            patience: 10,
            max_epochs: 100,
            metric: EarlyStopMetric::Accuracy,
            augment: false,
            seed: 0,
            record_timing: true,
        }
    }
}

/// One line of `history.jsonl`.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub elapsed_seconds: f64,
}

/// Result of a training run: the best-validation snapshot, not the last
/// state.
pub struct TrainOutcome<T> {
    pub model: LoTeNetModel<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

/// Adam first/second moments per parameter plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction (beta1 = 0.9, beta2 = 0.999,
/// eps = 1e-8). Parameters without a gradient entry are left untouched.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<(), TrainError> {
    let beta1 = T::real(0.9);
    let beta2 = T::real(0.999);
    let eps = T::real(1e-8);
    let lr = T::real(lr);
    state.step += 1;
    let bc1 = T::one() - beta1.powi(state.step as i32);
    let bc2 = T::one() - beta2.powi(state.step as i32);
    for (i, param) in params.iter_mut().enumerate() {
        let Some(grad) = grads.get(ParamId(i)) else {
            continue;
        };
        if grad.shape() != param.shape() {
            return Err(TrainError::GradShape {
                index: i,
                param: param.shape().to_vec(),
                grad: grad.shape().to_vec(),
            });
        }
        let mut m = state.m[i].data().to_vec();
        let mut v = state.v[i].data().to_vec();
        let mut p = param.data().to_vec();
        for ((pi, (mi, vi)), &gi) in p
            .iter_mut()
            .zip(m.iter_mut().zip(v.iter_mut()))
            .zip(grad.data())
        {
            *mi = beta1 * *mi + (T::one() - beta1) * gi;
            *vi = beta2 * *vi + (T::one() - beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi = *pi - lr * m_hat / (v_hat.sqrt() + eps);
        }
        state.m[i] = Tensor::from_vec(grad.shape().to_vec(), m)?;
        state.v[i] = Tensor::from_vec(grad.shape().to_vec(), v)?;
        **param = Tensor::from_vec(grad.shape().to_vec(), p)?;
    }
    Ok(())
}

/// Records the cross-entropy loss on the tape: mean over the batch of
/// `-log softmax(logits)[label]` via log-sum-exp. A single-output model uses
/// the binary sigmoid form, realized as softmax over the augmented logits
/// `[z, 0]` whose first column carries class 1.
pub fn cross_entropy<T: Real>(
    tape: &mut Tape<T>,
    logits: NodeId,
    labels: &[usize],
    n_classes: usize,
) -> Result<NodeId, TrainError> {
    let shape = tape.value(logits).shape().to_vec();
    let batch = shape[0];
    debug_assert_eq!(batch, labels.len());
    let label_cap = n_classes.max(2);
    if let Some(&bad) = labels.iter().find(|&&l| l >= label_cap) {
        return Err(TrainError::LabelRange {
            label: bad,
            classes: n_classes,
        });
    }
    let (wide, columns, column_of): (NodeId, usize, fn(usize) -> usize) = if n_classes == 1 {
        // [z, 0] has softmax [sigma(z), 1 - sigma(z)]: column 0 is class 1
        let embed = tape.constant(Tensor::from_vec(vec![1, 2], vec![T::one(), T::zero()])?);
        let wide = tape.contract(logits, embed, &[1], &[0])?;
        (wide, 2, |label| 1 - label)
    } else {
        (logits, n_classes, |label| label)
    };
    let log_probs = tape.log_softmax(wide)?;
    let mut mask = vec![T::zero(); batch * columns];
    for (bi, &label) in labels.iter().enumerate() {
        mask[bi * columns + column_of(label)] = T::one();
    }
    let mask = tape.constant(Tensor::from_vec(vec![batch, columns], mask)?);
    let picked = tape.mul(log_probs, mask)?;
    let total = tape.sum_all(picked)?;
    Ok(tape.scale(total, T::real(-1.0 / batch as f64))?)
}

/// Axis-aligned 2D augmentation: independently with probability 0.5, a
/// horizontal flip, a vertical flip, and a k * 90-degree rotation with k
/// uniform in 0..4. Deterministic per seed.
pub fn augment<T: Real>(image: &Tensor<T>, seed: u64) -> Result<Tensor<T>, TrainError> {
    if image.ndim() != 3 {
        return Err(TrainError::AugmentRank { rank: image.ndim().saturating_sub(1) });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let do_h = rng.gen_bool(0.5);
    let do_v = rng.gen_bool(0.5);
    let do_rot = rng.gen_bool(0.5);
    let quarter_turns = rng.gen_range(0..4u32);

    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut current = image.data().to_vec();
    let at = |data: &[T], i: usize, j: usize, ch: usize| data[(i * w + j) * c + ch];
    if do_h {
        let mut flipped = vec![T::zero(); current.len()];
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    flipped[(i * w + j) * c + ch] = at(&current, i, w - 1 - j, ch);
                }
            }
        }
        current = flipped;
    }
    if do_v {
        let mut flipped = vec![T::zero(); current.len()];
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    flipped[(i * w + j) * c + ch] = at(&current, h - 1 - i, j, ch);
                }
            }
        }
        current = flipped;
    }
    if do_rot && quarter_turns % 4 != 0 {
        if h != w {
            return Err(TrainError::AugmentNonSquare { h, w });
        }
        for _ in 0..quarter_turns {
            let mut rotated = vec![T::zero(); current.len()];
            // clockwise: out[i][j] = in[n - 1 - j][i]
            for i in 0..h {
                for j in 0..w {
                    for ch in 0..c {
                        rotated[(i * w + j) * c + ch] = at(&current, h - 1 - j, i, ch);
                    }
                }
            }
            current = rotated;
        }
    }
    Ok(Tensor::from_vec(image.shape().to_vec(), current)?)
}

fn is_divergence(err: &TrainError) -> bool {
    fn tensor_nonfinite(e: &TensorError) -> bool {
        matches!(e, TensorError::NonFinite { .. })
    }
    fn autodiff_nonfinite(e: &AutodiffError) -> bool {
        matches!(e, AutodiffError::Tensor(t) if tensor_nonfinite(t))
    }
    match err {
        TrainError::Tensor(t) => tensor_nonfinite(t),
        TrainError::Autodiff(a) => autodiff_nonfinite(a),
        TrainError::Model(m) => match m {
            ModelError::Tensor(t) => tensor_nonfinite(t),
            ModelError::TapeAtLayer { source, .. } => autodiff_nonfinite(source),
            ModelError::AtLayer { source, .. } => matches!(
                source,
                crate::mps::MpsError::Tensor(t) if tensor_nonfinite(t)
            ) || matches!(
                source,
                crate::mps::MpsError::AtSite { source: a, .. } if autodiff_nonfinite(a)
            ) || matches!(
                source,
                crate::mps::MpsError::Autodiff(a) if autodiff_nonfinite(a)
            ),
            _ => false,
        },
        _ => false,
    }
}

/// Validation metric for early stopping.
fn val_metric<T: Real>(
    model: &LoTeNetModel<T>,
    val: &Dataset<T>,
    batch_size: usize,
    metric: EarlyStopMetric,
) -> Result<f64, TrainError> {
    let outputs = metrics::eval_outputs(model, val, batch_size)?;
    match metric {
        EarlyStopMetric::Accuracy => Ok(metrics::accuracy(&outputs.predictions, &val.labels)),
        EarlyStopMetric::Auc => Ok(metrics::auc(&outputs.scores, &val.labels)?),
    }
}

/// Runs one gradient step on a batch; returns the batch loss.
fn train_step<T: Real>(
    model: &mut LoTeNetModel<T>,
    images: &Tensor<T>,
    labels: &[usize],
    adam: &mut AdamState<T>,
    lr: f64,
) -> Result<f64, TrainError> {
    let n_classes = model.config().n_classes;
    let mut fwd = model.forward_tracked(images, Phase::Train, true)?;
    let loss = cross_entropy(&mut fwd.tape, fwd.logits, labels, n_classes)?;
    let loss_value = fwd.tape.value(loss).item().to_f64_lossy();
    let grads = fwd.tape.backward(loss)?;
    let stats = fwd.bn_stats;
    {
        let mut params = model.params_mut();
        adam_step(&mut params, &grads, adam, lr)?;
    }
    model.update_bn_stats(&stats);
    Ok(loss_value)
}

/// Epoch loop: seeded shuffle, minibatch forward/loss/backward/Adam, one
/// validation evaluation per epoch, a snapshot on strict improvement, and a
/// stop after `patience` stagnant epochs (or `max_epochs`). Returns the
/// snapshot, not the last state.
pub fn train<T: Real>(
    model: LoTeNetModel<T>,
    train_split: &Dataset<T>,
    val_split: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    train_with_progress(model, train_split, val_split, cfg, |_| {})
}

/// [`train`] with a per-epoch callback (invoked after each history record).
pub fn train_with_progress<T: Real>(
    model: LoTeNetModel<T>,
    train_split: &Dataset<T>,
    val_split: &Dataset<T>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>, TrainError> {
    if train_split.is_empty() {
        return Err(TrainError::EmptySplit { split: "train" });
    }
    if val_split.is_empty() {
        return Err(TrainError::EmptySplit { split: "validation" });
    }
    if cfg.metric == EarlyStopMetric::Auc && model.config().n_classes > 2 {
        return Err(TrainError::AucNeedsBinary {
            classes: model.config().n_classes,
        });
    }
    let mut model = model;
    let mut adam = AdamState::new(&model.params());
    let mut history = Vec::new();
    let mut best: Option<(LoTeNetModel<T>, usize, f64)> = None;
    let mut stagnant = 0usize;
    let n = train_split.len();

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut shuffle_rng);

        let mut batches: Vec<Vec<usize>> = order
            .chunks(cfg.batch_size.max(1))
            .map(|c| c.to_vec())
            .collect();
        // a trailing batch of one merges into the previous batch
        if batches.len() >= 2 && batches.last().is_some_and(|b| b.len() == 1) {
            let last = batches.pop().unwrap();
            batches.last_mut().unwrap().extend(last);
        }

        let mut loss_sum = 0.0f64;
        for (bi, batch_indices) in batches.iter().enumerate() {
            let batch = train_split.subset(batch_indices)?;
            let images = if cfg.augment {
                let mut parts = Vec::with_capacity(batch.len());
                for (pos, &ds_index) in batch_indices.iter().enumerate() {
                    let img = batch.image(pos)?;
                    let sample_seed = cfg
                        .seed
                        .wrapping_add((epoch as u64) << 32)
                        .wrapping_add(ds_index as u64);
                    let aug = augment(&img, sample_seed)?;
                    let mut shape = vec![1];
                    shape.extend_from_slice(aug.shape());
                    parts.push(aug.reshape(&shape)?);
                }
                stack_batch(&parts)?
            } else {
                batch.images.clone()
            };
            let loss = train_step(&mut model, &images, &batch.labels, &mut adam, cfg.lr)
                .map_err(|e| {
                    if is_divergence(&e) {
                        TrainError::Diverged { epoch, batch: bi }
                    } else {
                        e
                    }
                })?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: bi });
            }
            loss_sum += loss * batch_indices.len() as f64;
        }
        let train_loss = loss_sum / n as f64;
        let metric = val_metric(&model, val_split, cfg.batch_size.max(1), cfg.metric)?;
        let elapsed_seconds = if cfg.record_timing {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_metric: metric,
            elapsed_seconds,
        });
        on_epoch(history.last().expect("just pushed"));

        let improved = best.as_ref().map_or(true, |(_, _, b)| metric > *b);
        if improved {
            best = Some((model.clone(), epoch, metric));
            stagnant = 0;
        } else {
            stagnant += 1;
        }
        if stagnant >= cfg.patience {
            break;
        }
    }
    let (model, best_epoch, best_metric) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_metric,
    })
}

/// Concatenates `(1, ...)` sample tensors along the batch axis.
fn stack_batch<T: Real>(parts: &[Tensor<T>]) -> Result<Tensor<T>, TensorError> {
    let sample = parts[0].shape()[1..].to_vec();
    let row: usize = sample.iter().product();
    let mut data = Vec::with_capacity(parts.len() * row);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![parts.len()];
    shape.extend(sample);
    Tensor::from_vec(shape, data)
}
