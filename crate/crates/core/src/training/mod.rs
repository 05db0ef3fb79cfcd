//! Quantile-loss training and evaluation.
//!
//! Models train on the transformed target (see
//! [`TargetTransform`](crate::dataset::TargetTransform)); evaluation maps
//! forecasts back to demand units before scoring.

mod adam;
mod eval;
mod loss;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use eval::{evaluate, forecast_task, quantile_label, report_from_forecasts, EvalReport};
pub use loss::{batch_loss, per_quantile_loss, quantile_loss};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{make_batches, ForecastTask, PreparedPanel};
use crate::error::{Error, Result};
use crate::models::{Model, ModelInputs};
use crate::nn::graph::Graph;
use crate::nn::ptwf;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; 0 disables checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            clip_norm: adam.clip_norm,
            seed: 0,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            clip_norm: self.clip_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        self.adam().validate()
    }

    /// Shuffle seed of epoch `k` (1-based).
    pub fn epoch_seed(&self, k: usize) -> u64 {
        self.seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean summed quantile loss per training example, in model space.
    pub train_loss: f64,
    /// The same mean split by quantile label.
    pub train_loss_by_quantile: BTreeMap<String, f64>,
    /// Test QWE by quantile label.
    pub test_qwe: BTreeMap<String, f64>,
    /// Checkpoint file name, relative to the checkpoint directory.
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn test_series(&self, tau: f64) -> Vec<f64> {
        let key = quantile_label(tau);
        self.epochs
            .iter()
            .map(|e| e.test_qwe.get(&key).copied().unwrap_or(f64::NAN))
            .collect()
    }
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch}.ptwf")
}

/// Trains the trainable tensors of `model` on `train_task`, scoring
/// `test_task` after every epoch. When `checkpoint_dir` is given, the
/// initial weights are saved as `epoch_0.ptwf` and epoch `k` as
/// `epoch_<k>.ptwf` at the configured cadence.
///
/// On a non-finite loss the weights are restored to the start of the failing
/// epoch and a training error is returned.
pub fn train(
    model: &mut Model,
    panel: &PreparedPanel,
    train_task: &ForecastTask,
    test_task: &ForecastTask,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainHistory> {
    train_observed(model, panel, train_task, test_task, cfg, checkpoint_dir, |_, _| Ok(()))
}

/// [`train`] that also calls `observe(epoch, model)` with the initial
/// weights (epoch 0) and after every epoch.
pub fn train_observed(
    model: &mut Model,
    panel: &PreparedPanel,
    train_task: &ForecastTask,
    test_task: &ForecastTask,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut observe: impl FnMut(usize, &Model) -> Result<()>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    train_task.validate_for(&panel.model_view)?;
    test_task.validate_for(&panel.raw)?;
    if let (Some(a), Some(b)) = (train_task.fcd_grid.iter().max(), test_task.fcd_grid.iter().min()) {
        if a >= b {
            return Err(Error::config(
                "task.fcd_grid",
                "every training date must precede every test date",
            ));
        }
    }
    let adam = cfg.adam();
    let quantiles = &train_task.quantiles;
    let save = |model: &Model, epoch: usize| -> Result<Option<String>> {
        match checkpoint_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let name = checkpoint_name(epoch);
                ptwf::save(&model.params, &PathBuf::from(dir).join(&name))?;
                Ok(Some(name))
            }
            None => Ok(None),
        }
    };
    if cfg.checkpoint_every > 0 {
        save(model, 0)?;
    }
    observe(0, model)?;
    let mut state = AdamState::default();
    let mut history = TrainHistory::default();
    for epoch in 1..=cfg.epochs {
        let snapshot = model.params.clone();
        let batches = make_batches(&panel.model_view, train_task, cfg.batch_size, cfg.epoch_seed(epoch))?;
        let mut by_q = vec![0.0; quantiles.len()];
        let mut examples = 0usize;
        for batch in &batches {
            let inputs = ModelInputs::from_batch(batch)?;
            let grads = {
                let mut g = Graph::new(&model.params);
                let out = model.forward(&mut g, &inputs)?;
                let loss = g.quantile_loss(out, batch.labels.data(), quantiles)?;
                if !g.value(loss).data()[0].is_finite() {
                    model.params = snapshot;
                    return Err(Error::Training(format!(
                        "non-finite loss in epoch {epoch}; weights restored to the start of the epoch"
                    )));
                }
                for (acc, l) in by_q
                    .iter_mut()
                    .zip(per_quantile_loss(g.value(out), &batch.labels, quantiles)?)
                {
                    *acc += l;
                }
                let grads = g.backward(loss)?;
                g.param_grads(&grads)
            };
            if let Err(e) = adam_step(&mut model.params, &grads, &mut state, &adam) {
                model.params = snapshot;
                return Err(e);
            }
            examples += batch.batch_size();
        }
        let n = examples.max(1) as f64;
        let report = evaluate(model, panel, test_task, cfg.batch_size.max(64))?;
        let checkpoint = if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            save(model, epoch)?
        } else {
            None
        };
        log::info!(
            "epoch {epoch}: train loss {:.5}, test {:?}",
            by_q.iter().sum::<f64>() / n,
            report.qwe
        );
        observe(epoch, model)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: by_q.iter().sum::<f64>() / n,
            train_loss_by_quantile: quantiles
                .iter()
                .zip(&by_q)
                .map(|(&tau, &l)| (quantile_label(tau), l / n))
                .collect(),
            test_qwe: report.qwe,
            checkpoint,
        });
    }
    Ok(history)
}
