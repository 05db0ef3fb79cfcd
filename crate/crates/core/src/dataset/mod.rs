//! Panel data, forecasting tasks, and supervised batches.
//!
//! Indexing convention: a forecast created at index `t` (the FCD) conditions
//! on periods `t−C .. t−1` and targets period `t + h − 1` for each horizon
//! `h ≥ 1`, so horizon 1 is the first unobserved period.

pub mod csv_io;
mod normalize;
mod synthetic;

pub use csv_io::{load_panel_csv, write_panel_csv};
pub use normalize::{PreparedPanel, TargetTransform};
pub use synthetic::{generate_panel, SyntheticConfig};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// `N` series over `T` periods.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelDataset {
    pub series_ids: Vec<String>,
    pub period_index: Vec<String>,
    /// `[N, T]`.
    pub target: Tensor,
    /// `[N, T, d]`.
    pub time_features: Tensor,
    /// `[N, m]`.
    pub static_features: Tensor,
    /// `[N, T, d_f]`, known in advance.
    pub future_features: Tensor,
    pub time_feature_names: Vec<String>,
    pub static_feature_names: Vec<String>,
    pub future_feature_names: Vec<String>,
}

impl PanelDataset {
    pub fn n_series(&self) -> usize {
        self.series_ids.len()
    }

    pub fn n_periods(&self) -> usize {
        self.period_index.len()
    }

    pub fn n_time_features(&self) -> usize {
        self.time_features.shape()[2]
    }

    pub fn n_static_features(&self) -> usize {
        self.static_features.shape()[1]
    }

    pub fn n_future_features(&self) -> usize {
        self.future_features.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let (n, t) = (self.n_series(), self.n_periods());
        let check = |field: &str, shape: &[usize], rank: usize, lead: &[usize]| -> Result<()> {
            if shape.len() != rank || &shape[..lead.len()] != lead {
                return Err(Error::config(
                    field,
                    format!("shape {shape:?} inconsistent with N={n}, T={t}"),
                ));
            }
            Ok(())
        };
        check("target", self.target.shape(), 2, &[n, t])?;
        check("time_features", self.time_features.shape(), 3, &[n, t])?;
        check("static_features", self.static_features.shape(), 2, &[n])?;
        check("future_features", self.future_features.shape(), 3, &[n, t])?;
        let names = [
            (
                "time_feature_names",
                self.time_feature_names.len(),
                self.n_time_features(),
            ),
            (
                "static_feature_names",
                self.static_feature_names.len(),
                self.n_static_features(),
            ),
            (
                "future_feature_names",
                self.future_feature_names.len(),
                self.n_future_features(),
            ),
        ];
        for (field, got, want) in names {
            if got != want {
                return Err(Error::config(field, format!("{got} names for {want} features")));
            }
        }
        for (field, t) in [
            ("target", &self.target),
            ("time_features", &self.time_features),
            ("static_features", &self.static_features),
            ("future_features", &self.future_features),
        ] {
            if !t.all_finite() {
                return Err(Error::config(field, "contains NaN or infinite values"));
            }
        }
        Ok(())
    }
}

pub fn default_quantiles() -> Vec<f64> {
    vec![0.5, 0.9]
}

/// Context length, horizons, quantiles, and the forecast creation dates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastTask {
    pub context: usize,
    pub horizons: Vec<usize>,
    #[serde(default = "default_quantiles")]
    pub quantiles: Vec<f64>,
    pub fcd_grid: Vec<usize>,
}

impl ForecastTask {
    pub fn max_horizon(&self) -> usize {
        self.horizons.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.context == 0 {
            return Err(Error::config("task.context", "must be at least 1"));
        }
        if self.horizons.is_empty() || self.horizons[0] == 0 || self.horizons.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                "task.horizons",
                "must be non-empty, positive, and strictly increasing",
            ));
        }
        if self.quantiles.is_empty() || self.quantiles.iter().any(|&q| !(q > 0.0 && q < 1.0)) {
            return Err(Error::config("task.quantiles", "each quantile must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn validate_for(&self, ds: &PanelDataset) -> Result<()> {
        self.validate()?;
        let Some(&lo) = self.fcd_grid.iter().min() else {
            return Err(Error::config("task.fcd_grid", "is empty"));
        };
        let hi = *self.fcd_grid.iter().max().expect("non-empty");
        if lo < self.context {
            return Err(Error::config(
                "task.fcd_grid",
                format!("FCD {lo} leaves less than {} periods of context", self.context),
            ));
        }
        if hi + self.max_horizon() > ds.n_periods() {
            return Err(Error::config(
                "task.fcd_grid",
                format!(
                    "FCD {hi} plus horizon {} runs past {} periods",
                    self.max_horizon(),
                    ds.n_periods()
                ),
            ));
        }
        Ok(())
    }

    /// Holds out the final `fraction` of the FCD grid (at least one date).
    /// Returns `(train, test)` tasks with disjoint grids.
    pub fn split(&self, fraction: f64) -> Result<(ForecastTask, ForecastTask)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::config("task.test_fraction", "must lie in (0, 1)"));
        }
        let mut grid = self.fcd_grid.clone();
        grid.sort_unstable();
        grid.dedup();
        let n = grid.len();
        let n_test = ((n as f64 * fraction).round() as usize).max(1);
        if n_test >= n {
            return Err(Error::config(
                "task.fcd_grid",
                format!("{n} forecast dates cannot be split into train and test"),
            ));
        }
        let test = grid.split_off(n - n_test);
        Ok((
            ForecastTask {
                fcd_grid: grid,
                ..self.clone()
            },
            ForecastTask {
                fcd_grid: test,
                ..self.clone()
            },
        ))
    }
}

/// Serialized task description; the FCD grid is derived from the panel
/// length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub context: usize,
    pub horizons: Vec<usize>,
    #[serde(default = "default_quantiles")]
    pub quantiles: Vec<f64>,
    /// Spacing between consecutive FCDs.
    #[serde(default = "one")]
    pub fcd_stride: usize,
    #[serde(default = "quarter")]
    pub test_fraction: f64,
}

fn one() -> usize {
    1
}

fn quarter() -> f64 {
    0.25
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            context: 24,
            horizons: vec![1, 2, 4, 8],
            quantiles: default_quantiles(),
            fcd_stride: 4,
            test_fraction: 0.25,
        }
    }
}

impl TaskConfig {
    /// All FCDs from `C` to `T − max(H)` spaced by `fcd_stride`.
    pub fn task_for(&self, n_periods: usize) -> Result<ForecastTask> {
        if self.fcd_stride == 0 {
            return Err(Error::config("task.fcd_stride", "must be positive"));
        }
        let mut task = ForecastTask {
            context: self.context,
            horizons: self.horizons.clone(),
            quantiles: self.quantiles.clone(),
            fcd_grid: Vec::new(),
        };
        task.validate()?;
        let last = n_periods
            .checked_sub(task.max_horizon())
            .filter(|&l| l >= self.context)
            .ok_or_else(|| {
                Error::config(
                    "task.context",
                    format!("context plus horizon do not fit in {n_periods} periods"),
                )
            })?;
        task.fcd_grid = (self.context..=last).step_by(self.fcd_stride).collect();
        Ok(task)
    }

    /// `(train, test)` tasks for a panel of `n_periods`.
    pub fn train_test(&self, n_periods: usize) -> Result<(ForecastTask, ForecastTask)> {
        self.task_for(n_periods)?.split(self.test_fraction)
    }
}

/// One supervised minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedBatch {
    /// `[B, C]`.
    pub past_target: Tensor,
    /// `[B, C, d]`.
    pub past_time_feats: Tensor,
    /// `[B, m]`.
    pub statics: Tensor,
    /// `[B, |H|, d_f]`.
    pub future_feats: Tensor,
    /// `[B, |H|]`.
    pub labels: Tensor,
    /// `(series, fcd)` for each row.
    pub rows: Vec<(usize, usize)>,
    pub context: usize,
    pub horizons: Vec<usize>,
}

impl SupervisedBatch {
    pub fn batch_size(&self) -> usize {
        self.rows.len()
    }

    /// Calendar indices read into the past tensors for `row`.
    pub fn past_indices(&self, row: usize) -> std::ops::Range<usize> {
        let t = self.rows[row].1;
        t - self.context..t
    }

    /// Calendar indices of the labels (and future features) for `row`.
    pub fn label_indices(&self, row: usize) -> Vec<usize> {
        let t = self.rows[row].1;
        self.horizons.iter().map(|h| t + h - 1).collect()
    }
}

/// Assembles a batch for explicit `(series, fcd)` pairs.
pub fn batch_for_rows(ds: &PanelDataset, task: &ForecastTask, rows: &[(usize, usize)]) -> Result<SupervisedBatch> {
    let (n, t_len) = (ds.n_series(), ds.n_periods());
    let (c, d, m, df) = (
        task.context,
        ds.n_time_features(),
        ds.n_static_features(),
        ds.n_future_features(),
    );
    let nh = task.horizons.len();
    let b = rows.len();
    let mut past_target = Vec::with_capacity(b * c);
    let mut past_time = Vec::with_capacity(b * c * d);
    let mut statics = Vec::with_capacity(b * m);
    let mut future = Vec::with_capacity(b * nh * df);
    let mut labels = Vec::with_capacity(b * nh);
    for &(i, t) in rows {
        if i >= n || t < c || t + task.max_horizon() > t_len {
            return Err(Error::config(
                "task.fcd_grid",
                format!("row (series {i}, fcd {t}) is outside the panel"),
            ));
        }
        past_target.extend_from_slice(&ds.target.data()[i * t_len + t - c..i * t_len + t]);
        past_time.extend_from_slice(&ds.time_features.data()[(i * t_len + t - c) * d..(i * t_len + t) * d]);
        statics.extend_from_slice(&ds.static_features.data()[i * m..(i + 1) * m]);
        for &h in &task.horizons {
            let at = i * t_len + t + h - 1;
            labels.push(ds.target.data()[at]);
            future.extend_from_slice(&ds.future_features.data()[at * df..(at + 1) * df]);
        }
    }
    Ok(SupervisedBatch {
        past_target: Tensor::from_vec(&[b, c], past_target)?,
        past_time_feats: Tensor::from_vec(&[b, c, d], past_time)?,
        statics: Tensor::from_vec(&[b, m], statics)?,
        future_feats: Tensor::from_vec(&[b, nh, df], future)?,
        labels: Tensor::from_vec(&[b, nh], labels)?,
        rows: rows.to_vec(),
        context: c,
        horizons: task.horizons.clone(),
    })
}

/// Every `(series, fcd)` pair in series-major order.
pub fn example_rows(ds: &PanelDataset, task: &ForecastTask) -> Vec<(usize, usize)> {
    (0..ds.n_series())
        .flat_map(|i| task.fcd_grid.iter().map(move |&t| (i, t)))
        .collect()
}

/// Batches covering every `(series, fcd)` pair exactly once, in an order
/// fully determined by `shuffle_seed`.
pub fn make_batches(
    ds: &PanelDataset,
    task: &ForecastTask,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<Vec<SupervisedBatch>> {
    task.validate_for(ds)?;
    let mut rows = example_rows(ds, task);
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    chunk_batches(ds, task, &rows, batch_size)
}

/// Batches in series-major order without shuffling.
pub fn ordered_batches(ds: &PanelDataset, task: &ForecastTask, batch_size: usize) -> Result<Vec<SupervisedBatch>> {
    task.validate_for(ds)?;
    chunk_batches(ds, task, &example_rows(ds, task), batch_size)
}

fn chunk_batches(
    ds: &PanelDataset,
    task: &ForecastTask,
    rows: &[(usize, usize)],
    batch_size: usize,
) -> Result<Vec<SupervisedBatch>> {
    if batch_size == 0 {
        return Err(Error::config("train.batch_size", "must be positive"));
    }
    rows.chunks(batch_size)
        .map(|chunk| batch_for_rows(ds, task, chunk))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_panel(n: usize, t: usize) -> PanelDataset {
        let target: Vec<f64> = (0..n * t).map(|v| v as f64).collect();
        PanelDataset {
            series_ids: (0..n).map(|i| format!("s{i}")).collect(),
            period_index: (0..t).map(|p| p.to_string()).collect(),
            target: Tensor::from_vec(&[n, t], target.clone()).unwrap(),
            time_features: Tensor::from_vec(&[n, t, 1], target.clone()).unwrap(),
            static_features: Tensor::zeros(&[n, 1]),
            future_features: Tensor::from_vec(&[n, t, 1], target).unwrap(),
            time_feature_names: vec!["x".into()],
            static_feature_names: vec!["s".into()],
            future_feature_names: vec!["f".into()],
        }
    }

    #[test]
    fn single_row_slices_context() {
        let ds = ramp_panel(1, 10);
        let task = ForecastTask {
            context: 4,
            horizons: vec![1, 2],
            quantiles: default_quantiles(),
            fcd_grid: vec![6],
        };
        let batches = make_batches(&ds, &task, 8, 0).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].past_target.data(), &[2.0, 3.0, 4.0, 5.0]);
        assert_eq!(batches[0].labels.data(), &[6.0, 7.0]);
    }

    #[test]
    fn three_series_two_dates_make_three_batches() {
        let ds = ramp_panel(3, 12);
        let task = ForecastTask {
            context: 4,
            horizons: vec![1],
            quantiles: default_quantiles(),
            fcd_grid: vec![5, 8],
        };
        let batches = make_batches(&ds, &task, 2, 9).unwrap();
        assert_eq!(batches.iter().map(|b| b.batch_size()).collect::<Vec<_>>(), [2, 2, 2]);
        let mut seen: Vec<_> = batches.iter().flat_map(|b| b.rows.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![(0, 5), (0, 8), (1, 5), (1, 8), (2, 5), (2, 8)]);
    }

    #[test]
    fn task_bounds_are_checked() {
        let ds = ramp_panel(1, 10);
        let mut task = ForecastTask {
            context: 4,
            horizons: vec![1, 3],
            quantiles: default_quantiles(),
            fcd_grid: vec![3],
        };
        assert!(task.validate_for(&ds).is_err());
        task.fcd_grid = vec![8];
        assert!(task.validate_for(&ds).is_err());
        task.fcd_grid = vec![7];
        assert!(task.validate_for(&ds).is_ok());
    }

    #[test]
    fn split_holds_out_final_quarter() {
        let task = ForecastTask {
            context: 2,
            horizons: vec![1],
            quantiles: default_quantiles(),
            fcd_grid: (2..10).collect(),
        };
        let (train, test) = task.split(0.25).unwrap();
        assert_eq!(train.fcd_grid, vec![2, 3, 4, 5, 6, 7]);
        assert_eq!(test.fcd_grid, vec![8, 9]);
    }
}
