//! SGD training with best-epoch selection, evaluation, k-fold
//! cross-validation and the single-view ablation.

mod cv;
mod folds;

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use cv::{ablate_single_view, ablation_table, cross_validate, mean_std, AblationRow, FoldResult, ViewSelection};
pub use folds::{kfold_split, FoldPlan, Split};

use crate::metrics::{confusion_labels, roc_auc, ClassificationMetrics, ConfusionCounts, RocCurve};
use crate::models::Model;
use crate::nn::{ParamKind, ParamStore, Tape, Tensor};
use crate::seed::rng_for;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-4,
            momentum: 0.9,
            batch_size: 8,
            epochs: 1000,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", "must be in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size", "must be positive"));
        }
        Ok(())
    }
}

/// Classic (heavy-ball) momentum: `v = momentum * v + g`, `w -= lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    velocity: Vec<Tensor<f32>>,
}

impl Sgd {
    pub fn new(store: &ParamStore<f32>) -> Self {
        Sgd {
            velocity: store.iter().map(|(_, _, _, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// `grads` is aligned with the store, as from `Grads::for_params`.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Tensor<f32>], cfg: &OptimizerConfig) -> Result<()> {
        if grads.len() != store.len() || self.velocity.len() != store.len() {
            return Err(Error::shape("sgd", "gradients do not match the parameter store"));
        }
        let lr = cfg.learning_rate as f32;
        let mu = cfg.momentum as f32;
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            if store.kind(id) != ParamKind::Trainable {
                continue;
            }
            let g = &grads[i];
            if g.shape() != store.get(id).shape() {
                return Err(Error::shape("sgd", format!("gradient for {}", store.name(id))));
            }
            let v = self.velocity[i].data_mut();
            for (v, &g) in v.iter_mut().zip(g.data()) {
                *v = mu * *v + g;
            }
            let w = store.get_mut(id).data_mut();
            for (w, &v) in w.iter_mut().zip(self.velocity[i].data()) {
                *w -= lr * v;
            }
        }
        Ok(())
    }
}

/// Equally shaped samples with binary labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Tensor<f32>>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(inputs: Vec<Tensor<f32>>, labels: Vec<u8>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::shape("dataset", format!("{} inputs, {} labels", inputs.len(), labels.len())));
        }
        if let Some(first) = inputs.first() {
            if inputs.iter().any(|t| t.shape() != first.shape()) {
                return Err(Error::shape("dataset", "inputs differ in shape"));
            }
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::invalid("label", "labels must be 0 or 1"));
        }
        Ok(Dataset { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Stacked inputs and class indices of the given samples.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let items: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.inputs[i]).collect();
        let labels = indices.iter().map(|&i| self.labels[i] as usize).collect();
        Ok((Tensor::stack(&items)?, labels))
    }
}

/// One SGD step on one batch in train mode; returns the batch loss.
pub fn train_step(
    model: &Model,
    store: &mut ParamStore<f32>,
    sgd: &mut Sgd,
    x: Tensor<f32>,
    labels: &[usize],
    cfg: &OptimizerConfig,
    seed: u64,
) -> Result<f64> {
    let mut tape = Tape::train(ChaCha8Rng::seed_from_u64(seed));
    let xv = tape.input(x);
    let logits = model.forward(&mut tape, store, xv)?;
    let (loss, _) = tape.softmax_cross_entropy(logits, labels)?;
    let value = tape.value(loss).data()[0] as f64;
    let grads = tape.backward(loss)?.for_params(store);
    let updates = tape.take_buffer_updates();
    sgd.step(store, &grads, cfg)?;
    store.apply_updates(updates)?;
    Ok(value)
}

/// Positive-class probabilities and mean cross-entropy in eval mode.
pub fn predict(
    model: &Model,
    store: &ParamStore<f32>,
    data: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<(Vec<f64>, f64)> {
    let mut scores = Vec::with_capacity(indices.len());
    let mut loss_sum = 0.0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk)?;
        let mut tape = Tape::eval();
        let xv = tape.input(x);
        let logits = model.forward(&mut tape, store, xv)?;
        let (loss, probs) = tape.softmax_cross_entropy(logits, &labels)?;
        loss_sum += tape.value(loss).data()[0] as f64 * chunk.len() as f64;
        scores.extend(probs.chunks(2).map(|p| p[1] as f64));
    }
    Ok((scores, loss_sum / indices.len().max(1) as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the epoch with the lowest validation loss, or the
    /// initial parameters when no epoch ran.
    pub best: ParamStore<f32>,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn best_val_loss(&self) -> Option<f64> {
        let e = self.best_epoch?;
        Some(self.history[e - 1].val_loss)
    }
}

/// 1-based epoch with the lowest validation loss; the earliest on ties.
pub fn best_epoch(val_losses: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &l) in val_losses.iter().enumerate() {
        if best.map_or(true, |(_, b)| l < b) {
            best = Some((i + 1, l));
        }
    }
    best.map(|(e, _)| e)
}

/// Trains on `train`, selects the epoch by loss on `val`. Shuffling and
/// every stochastic layer draw from `seed`.
pub fn train(
    model: &Model,
    init: ParamStore<f32>,
    data: &Dataset,
    train: &[usize],
    val: &[usize],
    cfg: &OptimizerConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("split", "training and validation sets must be nonempty"));
    }
    let mut in_train = alloc::vec![false; data.len()];
    for &i in train.iter().chain(val) {
        if i >= data.len() {
            return Err(Error::invalid("split", format!("sample {i} out of range")));
        }
    }
    for &i in train {
        in_train[i] = true;
    }
    if let Some(&i) = val.iter().find(|&&i| in_train[i]) {
        return Err(Error::OverlappingSplits(i));
    }
    let mut store = init;
    let mut best = store.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_at = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut sgd = Sgd::new(&store);
    let mut rng = rng_for(seed, 0);
    let mut order = train.to_vec();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = data.batch(chunk)?;
            let loss = train_step(model, &mut store, &mut sgd, x, &labels, cfg, rng.next_u64())?;
            sum += loss * chunk.len() as f64;
        }
        let (_, val_loss) = predict(model, &store, data, val, cfg.batch_size)?;
        let rec = EpochRecord {
            epoch,
            train_loss: sum / order.len() as f64,
            val_loss,
        };
        if val_loss < best_loss {
            best_loss = val_loss;
            best_at = Some(epoch);
            best = store.clone();
        }
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(TrainOutcome {
        best,
        best_epoch: best_at,
        history,
    })
}

/// Threshold metrics at 0.5 and, when both classes are present, the ROC.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub counts: ConfusionCounts,
    pub metrics: ClassificationMetrics,
    pub roc: Option<RocCurve>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl EvalReport {
    pub fn auc(&self) -> Option<f64> {
        self.roc.as_ref().map(|r| r.auc)
    }
}

pub const THRESHOLD: f64 = 0.5;

/// A sample is called positive when its score is at least [`THRESHOLD`].
pub fn report(scores: &[f64], labels: &[u8]) -> Result<EvalReport> {
    let pred: Vec<u8> = scores.iter().map(|&s| u8::from(s >= THRESHOLD)).collect();
    let counts = confusion_labels(&pred, labels)?;
    let roc = match roc_auc(scores, labels) {
        Ok(r) => Some(r),
        Err(Error::SingleClass) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        counts,
        metrics: counts.classification(),
        roc,
        scores: scores.to_vec(),
        labels: labels.to_vec(),
    })
}

pub fn evaluate(model: &Model, store: &ParamStore<f32>, data: &Dataset, indices: &[usize]) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(Error::invalid("evaluation set", "empty"));
    }
    let (scores, _) = predict(model, store, data, indices, 8)?;
    let labels: Vec<u8> = indices.iter().map(|&i| data.labels[i]).collect();
    report(&scores, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, Model2DSpec, ModelSpec};
    use alloc::vec;

    fn one_param_store(w: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("w", ParamKind::Trainable, Tensor::full(&[1], w)).unwrap();
        s.insert("stat", ParamKind::Buffer, Tensor::full(&[1], 5.0)).unwrap();
        s
    }

    #[test]
    fn sgd_recurrence() {
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            ..Default::default()
        };
        let mut store = one_param_store(1.0);
        let mut sgd = Sgd::new(&store);
        let zero = vec![Tensor::zeros(&[1]), Tensor::zeros(&[1])];
        sgd.step(&mut store, &zero, &cfg).unwrap();
        assert_eq!(store.get(store.id("w").unwrap()).data(), &[1.0]);
        let g = vec![Tensor::full(&[1], 2.0), Tensor::full(&[1], 7.0)];
        sgd.step(&mut store, &g, &cfg).unwrap();
        let w = store.get(store.id("w").unwrap()).data()[0];
        assert!((w - (1.0 - 0.1 * 2.0)).abs() < 1e-7);
        sgd.step(&mut store, &g, &cfg).unwrap();
        let w = store.get(store.id("w").unwrap()).data()[0];
        assert!((w - (1.0 - 0.1 * 2.0 * 2.9)).abs() < 1e-6);
        // buffers are never touched by the optimizer
        assert_eq!(store.get(store.id("stat").unwrap()).data(), &[5.0]);
    }

    #[test]
    fn best_epoch_is_earliest_minimum() {
        assert_eq!(best_epoch(&[0.9, 0.4, 0.6]), Some(2));
        assert_eq!(best_epoch(&[0.5, 0.3, 0.3]), Some(2));
        assert_eq!(best_epoch(&[]), None);
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        let bad = OptimizerConfig {
            momentum: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = OptimizerConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    fn toy() -> (Model, ParamStore<f32>, Dataset) {
        let spec = ModelSpec::Views(Model2DSpec::new(1, 1, 1).with_input(4, 4));
        let (model, store) = build_model(&spec, 0).unwrap();
        let inputs = (0..6)
            .map(|i| Tensor::full(&[3, 4, 4], i as f32 / 6.0))
            .collect();
        let data = Dataset::new(inputs, vec![0, 1, 0, 1, 0, 1]).unwrap();
        (model, store, data)
    }

    #[test]
    fn zero_epochs_returns_initial_weights() {
        let (model, store, data) = toy();
        let cfg = OptimizerConfig {
            epochs: 0,
            ..Default::default()
        };
        let out = train(&model, store.clone(), &data, &[0, 1, 2, 3], &[4, 5], &cfg, 1, &mut |_| {}).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.best_epoch, None);
        let same = out.best.iter().zip(store.iter()).all(|(a, b)| a.3 == b.3);
        assert!(same);
    }

    #[test]
    fn overlapping_splits_rejected() {
        let (model, store, data) = toy();
        let cfg = OptimizerConfig::default();
        let err = train(&model, store, &data, &[0, 1, 2], &[2, 3], &cfg, 1, &mut |_| {}).unwrap_err();
        assert_eq!(err, Error::OverlappingSplits(2));
    }

    #[test]
    fn history_and_checkpoint_agree() {
        let (model, store, data) = toy();
        let cfg = OptimizerConfig {
            learning_rate: 0.05,
            epochs: 4,
            batch_size: 2,
            ..Default::default()
        };
        let run = || train(&model, store.clone(), &data, &[0, 1, 2, 3], &[4, 5], &cfg, 7, &mut |_| {}).unwrap();
        let a = run();
        let b = run();
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 4);
        let losses: Vec<f64> = a.history.iter().map(|r| r.val_loss).collect();
        assert_eq!(a.best_epoch, best_epoch(&losses));
        let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(a.best_val_loss(), Some(min));
        // the checkpoint reproduces the recorded validation loss
        let (_, again) = predict(&model, &a.best, &data, &[4, 5], cfg.batch_size).unwrap();
        assert_eq!(again, min);
    }

    #[test]
    fn report_matches_metrics_module() {
        let scores = [0.9, 0.2, 0.7, 0.4, 0.5];
        let labels = [1, 0, 0, 1, 1];
        let r = report(&scores, &labels).unwrap();
        let c = confusion_labels(&[1, 0, 1, 0, 1], &labels).unwrap();
        assert_eq!(r.counts, c);
        assert_eq!(r.metrics, c.classification());
        assert_eq!(r.auc(), Some(roc_auc(&scores, &labels).unwrap().auc));
        let perfect = report(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap();
        assert_eq!((perfect.auc(), perfect.metrics.accuracy), (Some(1.0), Some(1.0)));
        assert_eq!(report(&[0.5; 4], &[0, 1, 1, 0]).unwrap().auc(), Some(0.5));
        let single = report(&[0.9, 0.2], &[1, 1]).unwrap();
        assert!(single.roc.is_none());
        assert_eq!(single.metrics.sensitivity, Some(0.5));
    }
}
