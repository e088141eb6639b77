//! Loss, optimizer, training loop, splits, metrics and repeated runs.

mod adamw;
mod loss;
mod metrics;
mod split;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adamw::{AdamW, AdamWConfig};
pub use loss::cross_entropy;
pub use metrics::{compute_metrics, MetricsReport, RunStats};
pub use split::{make_split, SplitPlan, FOLDS};

use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::model::{Model, ModelConfig};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Drives shuffling and dropout masks.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's mini-batches, sample-weighted.
    pub loss: f64,
    /// Accuracy of the training-mode predictions seen during the epoch.
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// `epoch,loss,train_acc,val_acc` with an empty last field when no
    /// validation set was supplied.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,train_acc,val_acc\n");
        for r in &self.epochs {
            let val = r.val_acc.map_or(String::new(), |v| format!("{v:.6}"));
            let _ = writeln!(s, "{},{:.9},{:.6},{}", r.epoch, r.loss, r.train_acc, val);
        }
        s
    }
}

/// Independent 64-bit seed for stream `stream` of a master seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

fn labels_usize<T: Real>(data: &Dataset<T>, idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| data.label(i)).collect()
}

/// Mini-batch AdamW training. Each epoch reshuffles with the seeded rng and
/// keeps the final partial batch. `on_epoch` sees every record as it is made.
pub fn train_with<T: Real>(
    model: &mut Model<T>,
    data: &Dataset<T>,
    validation: Option<&Dataset<T>>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 || cfg.batch_size > data.len() {
        return Err(Error::InvalidArgument(format!(
            "batch size {} must lie in 1..={} (dataset size)",
            cfg.batch_size,
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.optimizer, model.store());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = History::default();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let images: Vec<&Tensor<T>> = batch.iter().map(|&i| data.image(i)).collect();
            let labels = labels_usize(data, batch);
            model.store_mut().zero_grads();
            let (logits, cache) = model.forward(&images, true, &mut rng)?;
            let (loss, grad) = cross_entropy(&logits, &labels)?;
            loss_sum += loss * batch.len() as f64;
            correct += crate::nn::predict(&logits)?
                .iter()
                .zip(&labels)
                .filter(|(p, y)| p == y)
                .count();
            model.backward(&cache, &grad, false)?;
            opt.step(model.store_mut())?;
        }
        let val_acc = match validation {
            Some(v) => Some(evaluate(model, v)?.accuracy),
            None => None,
        };
        let record = EpochRecord {
            epoch,
            loss: loss_sum / data.len() as f64,
            train_acc: correct as f64 / data.len() as f64,
            val_acc,
        };
        on_epoch(&record);
        history.epochs.push(record);
    }
    Ok(history)
}

pub fn train<T: Real>(
    model: &mut Model<T>,
    data: &Dataset<T>,
    validation: Option<&Dataset<T>>,
    cfg: &TrainConfig,
) -> Result<History> {
    train_with(model, data, validation, cfg, |_| {})
}

/// Eval-mode metrics of `model` on `data`.
pub fn evaluate<T: Real>(model: &Model<T>, data: &Dataset<T>) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let images: Vec<&Tensor<T>> = data.images().iter().collect();
    let preds = model.predict(&images, 64)?;
    let labels: Vec<usize> = (0..data.len()).map(|i| data.label(i)).collect();
    compute_metrics(&preds, &labels, model.config().classes)
}

/// Outcome of [`repeat_runs`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatReport {
    pub accuracy: RunStats,
    pub macro_f1: RunStats,
    pub reports: Vec<MetricsReport>,
}

/// Trains `k` independent models (run `i` uses model and training seeds
/// derived from stream `i`) and evaluates each on `test`.
pub fn repeat_runs(
    config: &ModelConfig,
    train_set: &Dataset<f32>,
    test_set: &Dataset<f32>,
    k: usize,
    cfg: &TrainConfig,
) -> Result<RepeatReport> {
    repeat_runs_with(config, train_set, test_set, k, cfg, |_, _| {})
}

/// [`repeat_runs`] with a callback after each finished run.
pub fn repeat_runs_with(
    config: &ModelConfig,
    train_set: &Dataset<f32>,
    test_set: &Dataset<f32>,
    k: usize,
    cfg: &TrainConfig,
    mut on_run: impl FnMut(usize, &MetricsReport),
) -> Result<RepeatReport> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("repeat_runs needs k ≥ 2, got {k}")));
    }
    let mut reports = Vec::with_capacity(k);
    for run in 0..k as u64 {
        let (model_cfg, train_cfg) = run_configs(config, cfg, run);
        let mut model = Model::<f32>::build(&model_cfg)?;
        train(&mut model, train_set, None, &train_cfg)?;
        let report = evaluate(&model, test_set)?;
        on_run(run as usize, &report);
        reports.push(report);
    }
    Ok(RepeatReport {
        accuracy: RunStats::from_runs(reports.iter().map(|r| r.accuracy).collect())?,
        macro_f1: RunStats::from_runs(reports.iter().map(|r| r.macro_f1).collect())?,
        reports,
    })
}

/// Model and training configs of repeated run `run`.
pub fn run_configs(config: &ModelConfig, cfg: &TrainConfig, run: u64) -> (ModelConfig, TrainConfig) {
    let mut model_cfg = config.clone();
    model_cfg.seed = derive_seed(config.seed, 2 * run);
    let train_cfg = TrainConfig {
        seed: derive_seed(cfg.seed, 2 * run + 1),
        ..*cfg
    };
    (model_cfg, train_cfg)
}

/// Five-fold cross-validation over `plan.train`: validation accuracy of
/// each fold after training on the other four.
pub fn cross_validate(
    config: &ModelConfig,
    data: &Dataset<f32>,
    plan: &SplitPlan,
    cfg: &TrainConfig,
) -> Result<RunStats> {
    let mut accs = Vec::with_capacity(plan.folds.len());
    for k in 0..plan.folds.len() {
        let (fit, held) = plan.fold_split(k);
        let (model_cfg, train_cfg) = run_configs(config, cfg, k as u64);
        let mut model = Model::<f32>::build(&model_cfg)?;
        train(&mut model, &data.subset(&fit)?, None, &train_cfg)?;
        accs.push(evaluate(&model, &data.subset(&held)?)?.accuracy);
    }
    RunStats::from_runs(accs)
}
