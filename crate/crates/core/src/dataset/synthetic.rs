//! Seeded synthetic demand panels.
//!
//! Series `i` draws from its own ChaCha8 stream (`seed`, stream `i`) in this
//! order:
//!
//! 1. `z_level ~ N(0, 1)`, then `category ~ U{0 .. n_cat−1}`, then
//!    `phase ~ U[0, 1)`, then `z_trend ~ N(0, 1)`;
//! 2. for each period `t`: `promo_u`, `depth_u ~ U[0, 1)`; when `noise > 0`
//!    a gamma multiplier `G ~ Gamma(1/noise², noise²)` followed by the
//!    Poisson count; then one `N(0, 1)` per padding time feature and per
//!    padding future feature.
//!
//! The mean demand is
//!
//! ```text
//! level    = base_level · exp(level_sigma · z_level)
//! amp      = seasonal_amplitude · (category + 1) / n_cat
//! season_t = 1 + amp · sin(2π t / period + 2π phase)
//! trend_t  = max(0.1, 1 + trend_std · z_trend · t / T)
//! spike_t  = level · promo_lift · promo_t · (1 + 2 · depth_t)
//! μ_t      = level · season_t · trend_t + spike_t
//! ```
//!
//! with `promo_t = [promo_u < promo_rate]` (only when `d_f ≥ 1`) and
//! `depth_t = promo_t · (0.1 + 0.4 · depth_u)`. Demand is `μ_t` when
//! `noise = 0` and `Poisson(μ_t · G)` otherwise.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::PanelDataset;
use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// Names of the generated time features, in bank order. Features past the
/// bank are `N(0, 1)` noise.
pub const TIME_FEATURE_BANK: [&str; 6] = [
    "log_lag1",
    "log_rolling_mean4",
    "season_sin",
    "season_cos",
    "log_lag_period",
    "log_rolling_mean_period",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub series: usize,
    pub periods: usize,
    pub time_features: usize,
    pub static_features: usize,
    pub future_features: usize,
    pub base_level: f64,
    pub level_sigma: f64,
    pub seasonal_period: usize,
    pub seasonal_amplitude: f64,
    pub trend_std: f64,
    pub promo_rate: f64,
    pub promo_lift: f64,
    /// Coefficient of variation of the gamma multiplier; 0 disables noise.
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            series: 200,
            periods: 160,
            time_features: 6,
            static_features: 4,
            future_features: 2,
            base_level: 20.0,
            level_sigma: 1.0,
            seasonal_period: 7,
            seasonal_amplitude: 0.5,
            trend_std: 0.5,
            promo_rate: 0.1,
            promo_lift: 1.5,
            noise: 0.3,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |f: &str, m: &str| Err(Error::config(format!("data.{f}"), m));
        if self.series < 1 {
            return fail("series", "must be at least 1");
        }
        if self.periods < 8 {
            return fail("periods", "must be at least 8");
        }
        if self.time_features < 1 {
            return fail("time_features", "must be at least 1");
        }
        if self.static_features < 1 {
            return fail("static_features", "must be at least 1");
        }
        if self.seasonal_period < 1 {
            return fail("seasonal_period", "must be at least 1");
        }
        if !(self.base_level > 0.0 && self.base_level.is_finite()) {
            return fail("base_level", "must be positive and finite");
        }
        if !(0.0..1.0).contains(&self.seasonal_amplitude) {
            return fail("seasonal_amplitude", "must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.promo_rate) {
            return fail("promo_rate", "must lie in [0, 1]");
        }
        for (f, v) in [
            ("level_sigma", self.level_sigma),
            ("trend_std", self.trend_std),
            ("promo_lift", self.promo_lift),
            ("noise", self.noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(f, "must be non-negative and finite");
            }
        }
        Ok(())
    }

    pub fn n_categories(&self) -> usize {
        self.static_features.saturating_sub(1).max(1)
    }
}

/// Generates a panel; identical `(config, seed)` give identical bytes.
pub fn generate_panel(cfg: &SyntheticConfig, seed: u64) -> Result<PanelDataset> {
    cfg.validate()?;
    let (n, t_len) = (cfg.series, cfg.periods);
    let (d, m, df) = (cfg.time_features, cfg.static_features, cfg.future_features);
    let n_cat = cfg.n_categories();
    let period = cfg.seasonal_period as f64;

    let mut target = Vec::with_capacity(n * t_len);
    let mut time = vec![0.0; n * t_len * d];
    let mut statics = vec![0.0; n * m];
    let mut future = vec![0.0; n * t_len * df];
    let gamma = if cfg.noise > 0.0 {
        let v = cfg.noise * cfg.noise;
        Some(Gamma::new(1.0 / v, v).map_err(|e| Error::config("data.noise", e.to_string()))?)
    } else {
        None
    };

    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let z_level: f64 = StandardNormal.sample(&mut rng);
        let category = rng.random_range(0..n_cat);
        let phase: f64 = rng.random();
        let z_trend: f64 = StandardNormal.sample(&mut rng);

        let level = cfg.base_level * (cfg.level_sigma * z_level).exp();
        let amp = cfg.seasonal_amplitude * (category + 1) as f64 / n_cat as f64;
        let mut y = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let promo_u: f64 = rng.random();
            let depth_u: f64 = rng.random();
            let promo = if df >= 1 && promo_u < cfg.promo_rate { 1.0 } else { 0.0 };
            let depth = promo * (0.1 + 0.4 * depth_u);
            let season = 1.0 + amp * (TAU * t as f64 / period + TAU * phase).sin();
            let trend = (1.0 + cfg.trend_std * z_trend * t as f64 / t_len as f64).max(0.1);
            let spike = level * cfg.promo_lift * promo * (1.0 + 2.0 * depth);
            let mean = level * season * trend + spike;
            let value = match &gamma {
                None => mean,
                Some(g) => {
                    let rate = mean * g.sample(&mut rng);
                    if rate > 0.0 {
                        Poisson::new(rate)
                            .map_err(|e| Error::config("data.noise", e.to_string()))?
                            .sample(&mut rng)
                    } else {
                        0.0
                    }
                }
            };
            y.push(value);
            let row = &mut time[(i * t_len + t) * d..(i * t_len + t + 1) * d];
            for (f, slot) in row.iter_mut().enumerate().skip(TIME_FEATURE_BANK.len()) {
                let _ = f;
                *slot = StandardNormal.sample(&mut rng);
            }
            let frow = &mut future[(i * t_len + t) * df..(i * t_len + t + 1) * df];
            for (f, slot) in frow.iter_mut().enumerate() {
                *slot = match f {
                    0 => promo,
                    1 => depth,
                    _ => StandardNormal.sample(&mut rng),
                };
            }
        }
        for t in 0..t_len {
            let row = &mut time[(i * t_len + t) * d..(i * t_len + t + 1) * d];
            for (f, slot) in row.iter_mut().enumerate().take(TIME_FEATURE_BANK.len()) {
                *slot = time_feature(f, &y, t, cfg.seasonal_period);
            }
        }
        target.extend_from_slice(&y);

        let srow = &mut statics[i * m..(i + 1) * m];
        srow[0] = level.ln();
        if m > 1 {
            srow[1 + category] = 1.0;
        }
    }

    let mut time_names: Vec<String> = TIME_FEATURE_BANK.iter().take(d).map(|s| s.to_string()).collect();
    time_names.extend((TIME_FEATURE_BANK.len()..d).map(|f| format!("noise{f}")));
    let mut static_names = vec!["log_size".to_string()];
    if m > 1 {
        static_names.extend((0..n_cat).map(|c| format!("category{c}")));
    }
    let future_names = (0..df)
        .map(|f| match f {
            0 => "promo".to_string(),
            1 => "discount_depth".to_string(),
            _ => format!("noise{f}"),
        })
        .collect();

    let ds = PanelDataset {
        series_ids: (0..n).map(|i| format!("s{i:04}")).collect(),
        period_index: (0..t_len).map(|t| t.to_string()).collect(),
        target: Tensor::from_vec(&[n, t_len], target)?,
        time_features: Tensor::from_vec(&[n, t_len, d], time)?,
        static_features: Tensor::from_vec(&[n, m], statics)?,
        future_features: Tensor::from_vec(&[n, t_len, df], future)?,
        time_feature_names: time_names,
        static_feature_names: static_names,
        future_feature_names: future_names,
    };
    ds.validate()?;
    Ok(ds)
}

/// Feature `f` of the bank at period `t`, computed from demand strictly
/// before `t`.
fn time_feature(f: usize, y: &[f64], t: usize, period: usize) -> f64 {
    let mean_last = |k: usize| -> f64 {
        let lo = t.saturating_sub(k);
        if lo == t {
            0.0
        } else {
            y[lo..t].iter().sum::<f64>() / (t - lo) as f64
        }
    };
    let phase = TAU * t as f64 / period as f64;
    match f {
        0 => t.checked_sub(1).map_or(0.0, |s| y[s].ln_1p()),
        1 => mean_last(4).ln_1p(),
        2 => phase.sin(),
        3 => phase.cos(),
        4 => t.checked_sub(period).map_or(0.0, |s| y[s].ln_1p()),
        5 => mean_last(period).ln_1p(),
        _ => unreachable!("feature {f} is outside the bank"),
    }
}
