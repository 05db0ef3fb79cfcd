//! Quantile-weighted errors on held-out forecast dates.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::quantile_loss;
use crate::dataset::{batch_for_rows, example_rows, ForecastTask, PreparedPanel};
use crate::error::{Error, Result};
use crate::models::{Model, ModelInputs};
use crate::nn::tensor::Tensor;

/// `P50` for 0.5, `P90` for 0.9.
pub fn quantile_label(tau: f64) -> String {
    let pct = tau * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("P{}", pct.round() as i64)
    } else {
        format!("P{pct}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub quantiles: Vec<f64>,
    pub horizons: Vec<usize>,
    /// `Σ ℓ_τ / Σ |y|` by quantile label.
    pub qwe: BTreeMap<String, f64>,
    /// Per-horizon QWE by quantile label, in horizon order. `None` where the
    /// horizon's labels are all zero.
    pub per_horizon: BTreeMap<String, Vec<Option<f64>>>,
    /// Share of `(row, horizon)` cells whose quantiles are out of order.
    pub crossing_rate: f64,
    pub cells: usize,
    /// Name of the run the ratios refer to.
    pub baseline: Option<String>,
    /// `qwe / baseline qwe` by quantile label; absent where the baseline
    /// QWE is zero.
    pub ratios: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn qwe_at(&self, tau: f64) -> Option<f64> {
        self.qwe.get(&quantile_label(tau)).copied()
    }

    /// Fills `ratios` against `baseline`.
    pub fn set_baseline(&mut self, name: &str, baseline: &EvalReport) {
        self.baseline = Some(name.to_string());
        self.ratios = self
            .qwe
            .iter()
            .filter_map(|(k, &v)| {
                let b = *baseline.qwe.get(k)?;
                (b > 0.0).then(|| (k.clone(), v / b))
            })
            .collect();
    }
}

/// Forecasts in demand units and the matching raw labels, row by row in
/// series-major order: `(predictions [R, H, Q], labels [R, H])`.
pub fn forecast_task(
    model: &Model,
    panel: &PreparedPanel,
    task: &ForecastTask,
    batch_size: usize,
) -> Result<(Tensor, Tensor)> {
    task.validate_for(&panel.raw)?;
    if batch_size == 0 {
        return Err(Error::config("eval.batch_size", "must be positive"));
    }
    let rows = example_rows(&panel.raw, task);
    let chunks: Vec<&[(usize, usize)]> = rows.chunks(batch_size).collect();
    let parts: Vec<Result<(Vec<f64>, Vec<f64>)>> = chunks
        .par_iter()
        .map(|chunk| {
            let view = batch_for_rows(&panel.model_view, task, chunk)?;
            let raw = batch_for_rows(&panel.raw, task, chunk)?;
            let grid = model.forecast(&ModelInputs::from_batch(&view)?)?;
            let preds = grid.values.data().iter().map(|&z| panel.transform.inverse(z)).collect();
            Ok((preds, raw.labels.into_data()))
        })
        .collect();
    let (mut preds, mut labels) = (Vec::new(), Vec::new());
    for part in parts {
        let (p, l) = part?;
        preds.extend(p);
        labels.extend(l);
    }
    let (r, h, q) = (rows.len(), task.horizons.len(), task.quantiles.len());
    Ok((Tensor::from_vec(&[r, h, q], preds)?, Tensor::from_vec(&[r, h], labels)?))
}

/// QWE report from forecasts `[R, H, Q]` and labels `[R, H]`, accumulated in
/// row order.
pub fn report_from_forecasts(
    preds: &Tensor,
    labels: &Tensor,
    horizons: &[usize],
    quantiles: &[f64],
) -> Result<EvalReport> {
    let (h, q) = (horizons.len(), quantiles.len());
    if preds.ndim() != 3 || preds.shape()[1..] != [h, q] || labels.shape() != &preds.shape()[..2] {
        return Err(Error::shape(format!(
            "forecasts {:?} and labels {:?} do not match {h} horizons and {q} quantiles",
            preds.shape(),
            labels.shape()
        )));
    }
    let r = labels.shape()[0];
    if r == 0 {
        return Err(Error::Evaluation("empty test set".into()));
    }
    let mut loss = vec![vec![0.0; h]; q];
    let mut denom = vec![0.0; h];
    let mut crossings = 0usize;
    for row in 0..r {
        for hi in 0..h {
            let y = labels.data()[row * h + hi];
            denom[hi] += y.abs();
            let cell = &preds.data()[(row * h + hi) * q..(row * h + hi + 1) * q];
            for (qi, &tau) in quantiles.iter().enumerate() {
                loss[qi][hi] += quantile_loss(y, cell[qi], tau);
            }
            let mut order: Vec<usize> = (0..q).collect();
            order.sort_by(|&a, &b| quantiles[a].total_cmp(&quantiles[b]));
            if order.windows(2).any(|w| cell[w[0]] > cell[w[1]]) {
                crossings += 1;
            }
        }
    }
    let total_denom: f64 = denom.iter().sum();
    if !(total_denom > 0.0) {
        return Err(Error::Evaluation("all test labels are zero; QWE is undefined".into()));
    }
    let mut qwe = BTreeMap::new();
    let mut per_horizon = BTreeMap::new();
    for (qi, &tau) in quantiles.iter().enumerate() {
        let label = quantile_label(tau);
        qwe.insert(label.clone(), loss[qi].iter().sum::<f64>() / total_denom);
        per_horizon.insert(
            label,
            (0..h)
                .map(|hi| (denom[hi] > 0.0).then(|| loss[qi][hi] / denom[hi]))
                .collect(),
        );
    }
    Ok(EvalReport {
        quantiles: quantiles.to_vec(),
        horizons: horizons.to_vec(),
        qwe,
        per_horizon,
        crossing_rate: crossings as f64 / (r * h) as f64,
        cells: r * h,
        baseline: None,
        ratios: BTreeMap::new(),
    })
}

/// Evaluates `model` on every `(series, fcd)` pair of `task`. The result
/// does not depend on `batch_size`.
pub fn evaluate(model: &Model, panel: &PreparedPanel, task: &ForecastTask, batch_size: usize) -> Result<EvalReport> {
    let (preds, labels) = forecast_task(model, panel, task, batch_size)?;
    report_from_forecasts(&preds, &labels, &task.horizons, &task.quantiles)
}
