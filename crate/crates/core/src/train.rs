//! Training: sparse categorical cross-entropy, Adam with decoupled weight
//! decay, cosine learning-rate schedule, the epoch loop, and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, SceneSequence};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, SegmentationMetrics};
use crate::model::SequenceModel;
use crate::tensor::{BnMode, Tensor};

/// Floor applied inside the loss logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Mean over pixels of -log p(true class), with a per-pixel softmax over
/// the K channels of `logits` and the log floored at 1e-12.
pub fn cross_entropy(logits: &Tensor, labels: &LabelMap) -> Result<Tensor> {
    if logits.rank() != 3 {
        return Err(Error::Shape(format!(
            "cross_entropy expects [K,H,W] logits, got {:?}",
            logits.shape()
        )));
    }
    let (k, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    if labels.height != h || labels.width != w {
        return Err(Error::Shape(format!(
            "labels {}x{} do not match logits {:?}",
            labels.height,
            labels.width,
            logits.shape()
        )));
    }
    let n_pix = h * w;
    for (pix, &l) in labels.data.iter().enumerate() {
        if l as usize >= k {
            return Err(Error::Data(format!(
                "label {l} at pixel ({}, {}) out of range for {k} classes",
                pix / w,
                pix % w
            )));
        }
    }

    let x = logits.values();
    let mut probs = vec![0.0; k * n_pix];
    let mut loss = 0.0;
    for pix in 0..n_pix {
        let mut max = f64::NEG_INFINITY;
        for c in 0..k {
            max = max.max(x[c * n_pix + pix]);
        }
        let mut denom = 0.0;
        for c in 0..k {
            let e = (x[c * n_pix + pix] - max).exp();
            probs[c * n_pix + pix] = e;
            denom += e;
        }
        for c in 0..k {
            probs[c * n_pix + pix] /= denom;
        }
        let p_true = probs[labels.data[pix] as usize * n_pix + pix];
        loss -= p_true.max(LOG_FLOOR).ln();
    }
    loss /= n_pix as f64;

    let label_data = labels.data.clone();
    Ok(Tensor::from_op(
        vec![1],
        vec![loss],
        vec![logits.clone()],
        Box::new(move |_out, parents, gy| {
            vec![parents[0].requires_grad().then(|| {
                let scale = gy[0] / n_pix as f64;
                let mut dx = probs;
                for (pix, &l) in label_data.iter().enumerate() {
                    dx[l as usize * n_pix + pix] -= 1.0;
                }
                for v in &mut dx {
                    *v *= scale;
                }
                dx
            })]
        }),
    ))
}

/// Cosine learning-rate schedule without warmup or restarts.
pub fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f64) -> f64 {
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos())
}

/// One Adam update on a single parameter: decoupled weight decay, then
/// the bias-corrected moment step.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    values: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: usize,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    debug_assert!(t >= 1);
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..values.len() {
        values[i] *= 1.0 - lr * weight_decay;
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Adam optimizer state, aligned with the model's parameter traversal
/// order.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: usize,
    state: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Adam {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            state: Vec::new(),
        }
    }

    /// Apply one step to every parameter; parameters with no accumulated
    /// gradient receive a zero gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor], lr: f64) -> Result<()> {
        if self.state.is_empty() {
            self.state = params
                .iter()
                .map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()]))
                .collect();
        }
        if self.state.len() != params.len() {
            return Err(Error::Usage(format!(
                "optimizer tracks {} parameters, step got {}",
                self.state.len(),
                params.len()
            )));
        }
        self.t += 1;
        for (param, (m, v)) in params.iter_mut().zip(&mut self.state) {
            let grad = param
                .take_grad()
                .unwrap_or_else(|| vec![0.0; param.numel()]);
            let mut values = param.values().to_vec();
            adam_update(
                &mut values,
                &grad,
                m,
                v,
                self.t,
                lr,
                self.weight_decay,
                self.beta1,
                self.beta2,
                self.eps,
            );
            **param = Tensor::param(param.shape(), values)?;
        }
        Ok(())
    }
}

/// Training hyperparameters. Defaults follow the paper profile; the desk
/// benchmark overrides lr, batch size and epochs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr: 1e-4,
            batch_size: 128,
            weight_decay: 1e-4,
            epochs: 25,
            seed: 0,
            train_fraction: 0.8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} is invalid", self.lr)));
        }
        if !(0.0..1.0).contains(&self.train_fraction) || self.train_fraction == 0.0 {
            return Err(Error::Config(format!(
                "train fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-epoch record: mean training loss over the epoch's batches plus
/// metrics evaluated on the training scenes after the epoch.
#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub metrics: SegmentationMetrics,
}

/// Train with a per-epoch callback; returning false stops early.
pub fn train_with<F>(
    model: &mut SequenceModel,
    train_scenes: &[SceneSequence],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<Vec<EpochLog>>
where
    F: FnMut(&EpochLog, &SequenceModel) -> bool,
{
    cfg.validate()?;
    if train_scenes.is_empty() {
        return Err(Error::Data("training on an empty dataset".into()));
    }
    let mut adam = Adam::new(cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7f4a7c15);
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr);
        let mut order: Vec<usize> = (0..train_scenes.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let losses = batch
                .iter()
                .map(|&i| {
                    let scene = &train_scenes[i];
                    let logits = model.forward(&scene.frames, BnMode::Train)?;
                    cross_entropy(&logits, &scene.labels)
                })
                .collect::<Result<Vec<_>>>()?;
            let flat: Vec<Tensor> = losses
                .iter()
                .map(|l| l.reshape(&[1]))
                .collect::<Result<_>>()?;
            let batch_loss = Tensor::concat(&flat, 0)?.mean_all()?;
            let loss_value = batch_loss.item()?;
            if !loss_value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                });
            }
            loss_sum += loss_value * batch.len() as f64;
            batch_loss.backward()?;
            adam.step(&mut model.params_mut(), lr)?;
        }

        let metrics = evaluate(model, train_scenes)?;
        let log = EpochLog {
            epoch,
            lr,
            loss: loss_sum / train_scenes.len() as f64,
            metrics,
        };
        let keep_going = on_epoch(&log, model);
        logs.push(log);
        if !keep_going {
            break;
        }
    }
    Ok(logs)
}

/// Train for the configured number of epochs.
pub fn train(
    model: &mut SequenceModel,
    train_scenes: &[SceneSequence],
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    train_with(model, train_scenes, cfg, |_, _| true)
}

/// Evaluate a model over scenes: per-scene prediction, confusion tallies
/// merged associatively. Bit-reproducible at any thread count.
pub fn evaluate(model: &SequenceModel, scenes: &[SceneSequence]) -> Result<SegmentationMetrics> {
    let k = model.cfg.n_classes();
    let cm = scenes
        .par_iter()
        .map(|scene| -> Result<ConfusionMatrix> {
            let pred = model.predict(&scene.frames)?;
            let mut cm = ConfusionMatrix::new(k);
            cm.add(&pred, &scene.labels)?;
            Ok(cm)
        })
        .try_reduce(
            || ConfusionMatrix::new(k),
            |mut a, b| {
                a.merge(&b);
                Ok(a)
            },
        )?;
    Ok(cm.metrics())
}

/// Predict label maps for every scene (evaluation order preserved).
pub fn predict_all(model: &SequenceModel, scenes: &[SceneSequence]) -> Result<Vec<LabelMap>> {
    scenes
        .par_iter()
        .map(|scene| model.predict(&scene.frames))
        .collect()
}
