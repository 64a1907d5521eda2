//! Mini-batch training with checkpointing, plateau LR decay and early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{bce_loss, Adam, AdamState, FeatureBatch, HeadConfig, HeadModel, Mode};
use crate::error::{domain, Error, Result};
use crate::model::{decide, Label, DEFAULT_THRESHOLD};

/// Val-loss decrease needed to count as an improvement.
const MIN_DELTA: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without improvement before stopping.
    pub es_patience: usize,
    pub lr_factor: f64,
    /// Epochs without improvement before the learning rate is cut.
    pub lr_patience: usize,
    pub min_lr: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub head: HeadConfig,
    pub adam: Adam,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 20,
            batch_size: 16,
            es_patience: 5,
            lr_factor: 0.5,
            lr_patience: 2,
            min_lr: 1e-6,
            val_fraction: 0.1,
            seed: 0,
            head: HeadConfig::default(),
            adam: Adam::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(domain(format!("lr_factor {} must lie in (0, 1)", self.lr_factor)));
        }
        if !(self.min_lr > 0.0) {
            return Err(domain("min_lr must be positive"));
        }
        if !(self.learning_rate >= self.min_lr && self.learning_rate.is_finite()) {
            return Err(domain("learning_rate must be finite and at least min_lr"));
        }
        if self.batch_size == 0 {
            return Err(domain("batch_size must be positive"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(domain("val_fraction must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Rate used during this epoch.
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch of the returned checkpoint.
    pub best_epoch: Option<usize>,
    /// Last epoch run.
    pub stopped_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn best_val_loss(&self) -> Option<f64> {
        self.epochs.iter().map(|e| e.val_loss).reduce(f64::min)
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const STREAM_SPLIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

/// Per-class shuffled split; returns `(train, val)` index lists.
fn stratified_split(labels: &[Label], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = stream(seed, STREAM_SPLIT);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for class in [Label::Normal, Label::Pneumonia] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n_val = (idx.len() as f64 * fraction).round() as usize;
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn check_two_classes(batch: &FeatureBatch, what: &str) -> Result<()> {
    let pos = batch.labels().iter().filter(|l| l.is_positive()).count();
    if pos == 0 || pos == batch.len() {
        return Err(Error::DegenerateInput(format!("{what} split contains a single class")));
    }
    Ok(())
}

/// Trains on a stratified split of `features`; the held-out part drives the callbacks.
pub fn train(features: &FeatureBatch, cfg: &TrainConfig) -> Result<(HeadModel, TrainHistory)> {
    cfg.validate()?;
    let (train_idx, val_idx) = stratified_split(features.labels(), cfg.val_fraction, cfg.seed);
    if train_idx.is_empty() {
        return Err(Error::DegenerateInput("training split is empty".into()));
    }
    if val_idx.is_empty() {
        return Err(Error::DegenerateInput("validation split is empty".into()));
    }
    let train_set = features.subset(&train_idx)?;
    let val_set = features.subset(&val_idx)?;
    train_with_validation(&train_set, &val_set, cfg)
}

fn evaluate(model: &HeadModel, pooled: &[f64], labels: &[Label]) -> Result<(f64, f64)> {
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let (probs, _) = model.forward_pooled(pooled, Mode::Infer, &mut unused)?;
    let loss = bce_loss(&probs, labels)?;
    let correct = probs
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| decide(p, DEFAULT_THRESHOLD) == y)
        .count();
    Ok((loss, correct as f64 / labels.len() as f64))
}

/// Training loop with an explicit validation set.
///
/// After every epoch the validation loss is compared with the best so far.
/// An improvement checkpoints the model; otherwise the learning rate is
/// multiplied by `lr_factor` every `lr_patience` stale epochs (floored at
/// `min_lr`) and training ends after `es_patience` stale epochs. The best
/// checkpoint is returned.
pub fn train_with_validation(
    train_set: &FeatureBatch,
    val_set: &FeatureBatch,
    cfg: &TrainConfig,
) -> Result<(HeadModel, TrainHistory)> {
    cfg.validate()?;
    check_two_classes(train_set, "training")?;
    if train_set.dims().3 != val_set.dims().3 {
        return Err(domain("training and validation channel counts differ"));
    }
    let c = train_set.dims().3;
    let mut model = HeadModel::new(c, &cfg.head, cfg.seed)?;
    let mut history = TrainHistory::default();
    if cfg.epochs == 0 {
        return Ok((model, history));
    }

    let train_pooled = train_set.pooled();
    let val_pooled = val_set.pooled();
    let labels = train_set.labels();
    let mut states: Vec<AdamState> = model.trainable().iter().map(|t| AdamState::new(t.len())).collect();
    let mut shuffle_rng = stream(cfg.seed, STREAM_SHUFFLE);
    let mut dropout_rng = stream(cfg.seed, STREAM_DROPOUT);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut lr = cfg.learning_rate;
    let mut best: Option<(f64, HeadModel)> = None;
    let (mut stale_es, mut stale_lr) = (0usize, 0usize);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let pooled: Vec<f64> = chunk
                .iter()
                .flat_map(|&i| &train_pooled[i * c..(i + 1) * c])
                .copied()
                .collect();
            let batch_labels: Vec<Label> = chunk.iter().map(|&i| labels[i]).collect();
            let (probs, cache) = model.forward_pooled(&pooled, Mode::Train, &mut dropout_rng)?;
            loss_sum += bce_loss(&probs, &batch_labels)? * chunk.len() as f64;
            let grads = model.backward(&cache, &batch_labels)?;
            model.update_running_stats(&cache)?;
            for ((param, g), state) in model.trainable_mut().into_iter().zip(grads.groups()).zip(&mut states) {
                super::adam_step(param, g, state, lr, &cfg.adam)?;
            }
        }

        let (val_loss, val_accuracy) = evaluate(&model, &val_pooled, val_set.labels())?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss,
            val_accuracy,
            learning_rate: lr,
        });
        history.stopped_epoch = Some(epoch);

        let improved = best.as_ref().is_none_or(|(b, _)| val_loss < b - MIN_DELTA);
        if improved {
            best = Some((val_loss, model.clone()));
            history.best_epoch = Some(epoch);
            stale_es = 0;
            stale_lr = 0;
        } else {
            stale_es += 1;
            stale_lr += 1;
            if stale_lr >= cfg.lr_patience.max(1) {
                lr = (lr * cfg.lr_factor).max(cfg.min_lr);
                stale_lr = 0;
            }
            if stale_es >= cfg.es_patience.max(1) {
                history.stopped_early = true;
                break;
            }
        }
    }

    let (_, best_model) = best.expect("at least one epoch ran");
    Ok((best_model, history))
}
