use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{bag_loss, Aggregation, EncodedBag};
use super::params::ModelParams;
use super::Scalar;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub dim: usize,
    pub max_len: usize,
    pub init_range: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    /// Batch, epochs, linear decay and norm clipping as used for BERT
    /// fine-tuning; the learning rate is raised for the from-scratch lite
    /// encoder.
    fn default() -> Self {
        TrainConfig {
            batch_size: 2,
            lr: 7e-3,
            epochs: 3,
            dim: 64,
            max_len: 128,
            init_range: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning hyperparameters for a pretrained encoder.
    pub fn fine_tuning() -> Self {
        TrainConfig { lr: 2e-5, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.dim == 0 {
            return Err(Error::Config("batch_size and dim must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be finite and >= 0".into()));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::Config("clip_norm must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Mean validation loss, recorded at the last step of each epoch.
    pub valid_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters from the epoch with the lowest validation loss (the final
    /// epoch when there is no validation data).
    pub params: ModelParams<T>,
    pub trace: Vec<StepLog>,
    pub best_epoch: usize,
}

struct Adam<T> {
    m: ModelParams<T>,
    v: ModelParams<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    fn new(p: &ModelParams<T>) -> Self {
        Adam { m: p.zeros_like(), v: p.zeros_like(), t: 0 }
    }

    fn step(&mut self, p: &mut ModelParams<T>, g: &ModelParams<T>, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let c = |x: f64| T::from_f64(x).unwrap();
        let (b1, b2) = (c(cfg.beta1), c(cfg.beta2));
        let one = T::one();
        let bc1 = one - b1.powi(self.t);
        let bc2 = one - b2.powi(self.t);
        let (lr, eps) = (c(lr), c(cfg.adam_eps));
        let tensors = p
            .tensors_mut()
            .into_iter()
            .zip(g.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()));
        for (((_, pt), (_, gt)), ((_, mt), (_, vt))) in tensors {
            for i in 0..pt.len() {
                let gi = gt[i];
                mt[i] = b1 * mt[i] + (one - b1) * gi;
                vt[i] = b2 * vt[i] + (one - b2) * gi * gi;
                let mhat = mt[i] / bc1;
                let vhat = vt[i] / bc2;
                pt[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Mean loss over `bags`, computed in parallel and reduced in index order.
pub fn mean_loss<T: Scalar>(p: &ModelParams<T>, bags: &[EncodedBag<T>], mode: Aggregation) -> Result<f64> {
    if bags.is_empty() {
        return Ok(f64::NAN);
    }
    let losses: Vec<T> = bags.par_iter().map(|b| bag_loss(p, b, mode, None)).collect::<Result<_>>()?;
    Ok(losses.iter().map(|l| l.to_f64().unwrap()).sum::<f64>() / bags.len() as f64)
}

/// Mini-batch Adam on mean bag cross-entropy with a learning rate decaying
/// linearly to zero. Shuffling is keyed by `(seed, epoch)`.
pub fn train<T: Scalar>(
    init: ModelParams<T>,
    train_bags: &[EncodedBag<T>],
    valid_bags: &[EncodedBag<T>],
    mode: Aggregation,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let mut params = init;
    let mut adam = Adam::new(&params);
    let per_epoch = train_bags.len().div_ceil(cfg.batch_size);
    let total = (per_epoch * cfg.epochs).max(1);
    let mut trace = Vec::with_capacity(total);
    let mut best: Option<(f64, usize, ModelParams<T>)> = None;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_bags.len()).collect();
        order.shuffle(&mut rng::stream(seed, &format!("shuffle|{epoch}")));
        for batch in order.chunks(cfg.batch_size) {
            let lr = cfg.lr * (1.0 - step as f64 / total as f64);
            let results: Vec<(T, ModelParams<T>)> = batch
                .par_iter()
                .map(|&i| {
                    let mut g = params.zeros_like();
                    let loss = bag_loss(&params, &train_bags[i], mode, Some(&mut g))?;
                    Ok((loss, g))
                })
                .collect::<Result<_>>()?;
            let scale = T::one() / T::from_usize(batch.len()).unwrap();
            let mut grad = params.zeros_like();
            let mut loss = 0.0;
            for ((l, g), &bag) in results.iter().zip(batch) {
                let l = l.to_f64().unwrap();
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss { step, bag });
                }
                loss += l;
                grad.add_scaled(g, scale);
            }
            if cfg.clip_norm > 0.0 {
                let norm = grad.norm().to_f64().unwrap();
                if norm > cfg.clip_norm {
                    grad.scale(T::from_f64(cfg.clip_norm / norm).unwrap());
                }
            }
            adam.step(&mut params, &grad, lr, cfg);
            trace.push(StepLog { step, epoch, lr, train_loss: loss / batch.len() as f64, valid_loss: None });
            step += 1;
        }
        let valid = mean_loss(&params, valid_bags, mode)?;
        if let Some(last) = trace.last_mut() {
            last.valid_loss = valid.is_finite().then_some(valid);
        }
        let better = match &best {
            None => true,
            Some((b, _, _)) => valid.is_finite() && valid < *b,
        };
        if better || !valid.is_finite() {
            best = Some((if valid.is_finite() { valid } else { f64::INFINITY }, epoch, params.clone()));
        }
    }
    let (best_epoch, params) = match best {
        Some((_, e, p)) => (e, p),
        None => (0, params),
    };
    Ok(TrainOutcome { params, trace, best_epoch })
}
