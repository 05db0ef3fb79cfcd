//! Target transform and per-series feature standardization.

use serde::{Deserialize, Serialize};

use super::PanelDataset;
use crate::error::{Error, Result};

/// Transform applied to demand before it enters a model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetTransform {
    #[default]
    Log1p,
    Identity,
}

impl TargetTransform {
    pub fn forward(self, y: f64) -> f64 {
        match self {
            TargetTransform::Log1p => y.ln_1p(),
            TargetTransform::Identity => y,
        }
    }

    pub fn inverse(self, z: f64) -> f64 {
        match self {
            TargetTransform::Log1p => z.exp_m1(),
            TargetTransform::Identity => z,
        }
    }
}

/// A panel together with the view that models consume.
///
/// In `model_view` the target is transformed and every time feature is
/// standardized per series with moments from periods `0 .. fit_until`. A
/// standard deviation below `1e-12` is replaced by 1.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedPanel {
    pub raw: PanelDataset,
    pub model_view: PanelDataset,
    pub transform: TargetTransform,
    pub fit_until: usize,
}

impl PreparedPanel {
    pub fn new(raw: PanelDataset, transform: TargetTransform, fit_until: usize) -> Result<Self> {
        raw.validate()?;
        let (n, t_len, d) = (raw.n_series(), raw.n_periods(), raw.n_time_features());
        if fit_until == 0 || fit_until > t_len {
            return Err(Error::config(
                "normalize.fit_until",
                format!("must lie in 1..={t_len}, got {fit_until}"),
            ));
        }
        if transform == TargetTransform::Log1p && raw.target.data().iter().any(|&y| y <= -1.0) {
            return Err(Error::config("normalize.transform", "log1p needs demand above -1"));
        }
        let mut view = raw.clone();
        for y in view.target.data_mut() {
            *y = transform.forward(*y);
        }
        let x = view.time_features.data_mut();
        for i in 0..n {
            for f in 0..d {
                let at = |t: usize| (i * t_len + t) * d + f;
                let mean = (0..fit_until).map(|t| x[at(t)]).sum::<f64>() / fit_until as f64;
                let var = (0..fit_until).map(|t| (x[at(t)] - mean).powi(2)).sum::<f64>() / fit_until as f64;
                let std = if var.sqrt() < 1e-12 { 1.0 } else { var.sqrt() };
                for t in 0..t_len {
                    x[at(t)] = (x[at(t)] - mean) / std;
                }
            }
        }
        Ok(PreparedPanel {
            raw,
            model_view: view,
            transform,
            fit_until,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    fn panel() -> PanelDataset {
        PanelDataset {
            series_ids: vec!["a".into()],
            period_index: (0..4).map(|t| t.to_string()).collect(),
            target: Tensor::from_vec(&[1, 4], vec![0.0, 1.0, 3.0, 7.0]).unwrap(),
            time_features: Tensor::from_vec(&[1, 4, 2], vec![1.0, 5.0, 3.0, 5.0, 100.0, 5.0, 0.0, 6.0]).unwrap(),
            static_features: Tensor::zeros(&[1, 0]),
            future_features: Tensor::zeros(&[1, 4, 0]),
            time_feature_names: vec!["x".into(), "c".into()],
            static_feature_names: vec![],
            future_feature_names: vec![],
        }
    }

    #[test]
    fn log1p_round_trips() {
        for y in [0.0, 0.5, 3.0, 1e6] {
            let t = TargetTransform::Log1p;
            assert!((t.inverse(t.forward(y)) - y).abs() <= 1e-9 * y.max(1.0));
        }
    }

    #[test]
    fn moments_come_from_fit_window_only() {
        let p = PreparedPanel::new(panel(), TargetTransform::Log1p, 2).unwrap();
        let x = p.model_view.time_features.data();
        assert_eq!(&x[..4], &[-1.0, 0.0, 1.0, 0.0]);
        assert_eq!(x[4], 98.0);
        assert_eq!(x[7], 1.0);
        assert_eq!(p.model_view.target.data()[1], 2f64.ln());
    }

    #[test]
    fn rejects_empty_fit_window() {
        assert!(PreparedPanel::new(panel(), TargetTransform::Identity, 0).is_err());
    }
}
