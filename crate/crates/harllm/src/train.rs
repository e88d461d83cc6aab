//! Adam optimizer, early stopping and the training loop.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::windows::{batch_tensor, WindowSet};
use crate::metrics;
use crate::model::{argmax_rows, Model};
use crate::numerics::{Scalar, Tape, Tensor};
use crate::params::ParamStore;
use crate::rng::SeedStream;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Global-norm gradient clipping threshold; off when absent.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_epochs: 200,
            patience: 10,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive and finite"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config("clip_norm must be positive and finite"));
            }
        }
        Ok(())
    }
}

/// Rescales all gradients in place so their joint L2 norm is at most `max`.
pub fn clip_global_norm<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max: f64) {
    let sq: f64 = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v.cast_f64() * v.cast_f64())
        .sum();
    let norm = sq.sqrt();
    if norm > max && norm > 0.0 {
        let scale = max / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v = T::cast_from(v.cast_f64() * scale);
            }
        }
    }
}

/// Bias-corrected Adam over named parameters. Moments are allocated on
/// first contact and updates run in name order, so a given sequence of
/// gradients produces one exact sequence of parameter values.
#[derive(Debug)]
pub struct Adam<T: Scalar> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    names: Vec<String>,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: &TrainConfig, names: Vec<String>) -> Self {
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            names,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over all registered names. A name absent from `grads`
    /// counts as a zero gradient; its moments still decay.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for name in &self.names {
            let grad = grads.get(name);
            if let Some(g) = grad {
                if g.data().iter().any(|v| !v.cast_f64().is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        step: self.t,
                        parameter: name.clone(),
                    });
                }
            }
            let mut value = params.get(name).clone();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(value.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(value.shape()));
            for i in 0..value.numel() {
                let g = grad.map_or(0.0, |g| g.data()[i].cast_f64());
                let mi = self.beta1 * m.data()[i].cast_f64() + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.data()[i].cast_f64() + (1.0 - self.beta2) * g * g;
                m.data_mut()[i] = T::cast_from(mi);
                v.data_mut()[i] = T::cast_from(vi);
                let update = self.lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                let next = value.data()[i].cast_f64() - update;
                value.data_mut()[i] = T::cast_from(next);
            }
            params.set(name, value);
        }
        Ok(())
    }
}

/// Tracks the best validation score; strict improvement resets the clock.
#[derive(Debug, Clone)]
pub struct EarlyStop {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        EarlyStop {
            patience,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Returns true when `value` is a new best.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        match self.best {
            Some(b) if value <= b => {
                self.stale += 1;
                false
            }
            _ => {
                self.best = Some(value);
                self.best_epoch = epoch;
                self.stale = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_weighted_f1: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_weighted_f1: f64,
}

/// Wall-clock time is metadata; every other column is a pure function of
/// the config and seed.
pub fn write_train_log(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "val_weighted_f1", "val_accuracy", "seconds"])?;
    for r in log {
        w.write_record([
            r.epoch.to_string(),
            format!("{:.6}", r.train_loss),
            format!("{:.6}", r.val_weighted_f1),
            format!("{:.6}", r.val_accuracy),
            format!("{:.3}", r.seconds),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Trains in place: shuffled minibatches, Adam on the trainable set,
/// weighted F1 on the validation split after every epoch, early stopping
/// with restoration of the best-scoring parameters.
pub fn fit<T: Scalar>(
    model: &mut Model<T>,
    train: &WindowSet,
    val: &WindowSet,
    cfg: &TrainConfig,
    seeds: &SeedStream,
) -> Result<FitReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::config("training and validation sets must be non-empty"));
    }
    let names = model.trainable_names();
    let mut adam = Adam::new(cfg, names.clone());
    let mut stopper = EarlyStop::new(cfg.patience);
    let mut log = Vec::new();
    let mut best_snapshot: BTreeMap<String, Tensor<T>> = BTreeMap::new();

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seeds.stream(&format!("train/shuffle.{epoch}")));

        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let windows = batch_tensor::<T>(train, chunk);
            let targets: Vec<usize> =
                chunk.iter().map(|&i| train.labels[i] as usize).collect();
            let mut tape = Tape::new();
            let staged = model.stage(&mut tape);
            let mut drop_rng = seeds.stream(&format!("train/dropout.{epoch}.{bi}"));
            let logits = model.forward(&mut tape, &staged, &windows, true, &mut drop_rng)?;
            let loss = tape.softmax_cross_entropy(logits, &targets)?;
            let loss_value = tape.value(loss).item().cast_f64();
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss at epoch {epoch}, batch {bi}"
                )));
            }
            loss_sum += loss_value * chunk.len() as f64;
            tape.backward(loss)?;
            let mut grads = staged.grads(&mut tape, &names);
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            adam.step(&mut model.params, &grads)?;
        }

        let report = evaluate_model(model, val, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_weighted_f1: report.weighted_f1,
            val_accuracy: report.accuracy,
            seconds: start.elapsed().as_secs_f64(),
        };
        log.push(record);

        if stopper.observe(epoch, report.weighted_f1) {
            best_snapshot = names
                .iter()
                .map(|n| (n.clone(), model.params.get(n).clone()))
                .collect();
        }
        if stopper.should_stop() {
            break;
        }
    }

    for (name, value) in &best_snapshot {
        model.params.set(name, value.clone());
    }
    let best = stopper.best().expect("at least one epoch ran");
    let max_logged = log
        .iter()
        .map(|r| r.val_weighted_f1)
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(
        (best - max_logged).abs() < 1e-12,
        "restored score {best} disagrees with log maximum {max_logged}"
    );
    Ok(FitReport {
        log,
        best_epoch: stopper.best_epoch(),
        best_val_weighted_f1: best,
    })
}

/// Eval-mode metrics over a window set, batched.
pub fn evaluate_model<T: Scalar>(
    model: &Model<T>,
    set: &WindowSet,
    batch_size: usize,
) -> Result<metrics::EvalReport> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let k = model.n_classes();
    if let Some(&bad) = set.labels.iter().find(|&&y| y as usize >= k) {
        return Err(Error::Eval(format!(
            "label id {bad} outside the model's {k}-class vocabulary"
        )));
    }
    let indices: Vec<usize> = (0..set.len()).collect();
    let mut preds = Vec::with_capacity(set.len());
    for chunk in indices.chunks(batch_size) {
        let windows = batch_tensor::<T>(set, chunk);
        preds.extend(argmax_rows(&model.logits(&windows)?).into_iter().map(|p| p as usize));
    }
    let truth: Vec<usize> = set.labels.iter().map(|&y| y as usize).collect();
    metrics::evaluate(&truth, &preds, k)
}
