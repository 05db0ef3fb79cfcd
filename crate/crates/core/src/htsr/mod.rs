//! Heavy-tailed spectral diagnostics of weight matrices.
//!
//! Each selected weight `W` yields the eigenvalues of `WᵀW` (its ESD). The
//! tail of the ESD is fitted with a power law and a truncated power law, and
//! the model-level α metric averages the PL exponent over layers whose
//! better fit has KS distance at most the report's threshold. Exponents
//! below 2 are flagged as unreliable but still averaged.

mod fit;

pub use fit::{fit_pl, fit_pl_at, fit_tpl, FitFamily, PowerLawFit, TplOptions, MIN_TAIL};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::nn::tensor::Tensor;

/// Eigenvalues of `WᵀW` in ascending order, one per `min(rows, cols)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Esd {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub eigenvalues: Vec<f64>,
}

impl Esd {
    /// Eigenvalues used for fitting: those above `1e-12 · λ_max`.
    pub fn positive(&self) -> Vec<f64> {
        let max = self.eigenvalues.last().copied().unwrap_or(0.0);
        self.eigenvalues
            .iter()
            .copied()
            .filter(|&v| v > 1e-12 * max && v > 0.0)
            .collect()
    }
}

fn to_matrix(w: &Tensor) -> Result<DMatrix<f64>> {
    let (rows, cols) = match w.shape() {
        [r, c] => (*r, *c),
        [k, din, dout] => (k * din, *dout),
        s => return Err(Error::Diagnostics(format!("cannot read a matrix from shape {s:?}"))),
    };
    if rows == 0 || cols == 0 {
        return Err(Error::Diagnostics("empty matrix".into()));
    }
    if !w.all_finite() {
        return Err(Error::Diagnostics("matrix has non-finite entries".into()));
    }
    Ok(DMatrix::from_row_slice(rows, cols, w.data()))
}

/// ESD of a 2-D weight, or of a `[kernel, d_in, d_out]` convolution kernel
/// read as a `(kernel · d_in) × d_out` matrix. Computed from singular values.
pub fn gram_esd(name: &str, w: &Tensor) -> Result<Esd> {
    let m = to_matrix(w)?;
    let mut eigenvalues: Vec<f64> = m.singular_values().iter().map(|s| s * s).collect();
    eigenvalues.sort_by(f64::total_cmp);
    Ok(Esd {
        name: name.to_string(),
        rows: m.nrows(),
        cols: m.ncols(),
        eigenvalues,
    })
}

/// `‖W‖_F² / ‖W‖_2²`.
pub fn stable_rank(w: &Tensor) -> Result<f64> {
    stable_rank_of(&gram_esd("", w)?)
}

fn stable_rank_of(esd: &Esd) -> Result<f64> {
    let max = esd.eigenvalues.last().copied().unwrap_or(0.0);
    if !(max > 0.0) {
        return Err(Error::Diagnostics(format!("{} is a zero matrix", esd.name)));
    }
    Ok(esd.eigenvalues.iter().sum::<f64>() / max)
}

/// Empirical CCDF: `(λ_(i), (n − i)/n)` for the sorted eigenvalues,
/// `i = 1..n`.
pub fn ccdf(eigenvalues: &[f64]) -> Vec<(f64, f64)> {
    let mut xs = eigenvalues.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.into_iter()
        .enumerate()
        .map(|(i, x)| (x, (n - (i + 1) as f64) / n))
        .collect()
}

/// Eigenvalues where the log-log CCDF bends convexly: local maxima of the
/// second difference of `ln CCDF` over an evenly spaced `ln λ` grid, above
/// `min_curvature`.
pub fn kink_candidates(eigenvalues: &[f64], min_curvature: f64) -> Vec<f64> {
    let pts: Vec<(f64, f64)> = ccdf(eigenvalues)
        .into_iter()
        .filter(|&(x, y)| x > 0.0 && y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 5 {
        return Vec::new();
    }
    let (lo, hi) = (pts[0].0, pts[pts.len() - 1].0);
    if !(hi > lo) {
        return Vec::new();
    }
    let k = 32;
    let step = (hi - lo) / (k - 1) as f64;
    let grid: Vec<(f64, f64)> = (0..k)
        .map(|j| {
            let u = lo + j as f64 * step;
            let idx = pts.partition_point(|p| p.0 <= u).max(1) - 1;
            (u, pts[idx].1)
        })
        .collect();
    let d2: Vec<f64> = grid
        .windows(3)
        .map(|w| (w[2].1 - 2.0 * w[1].1 + w[0].1) / (step * step))
        .collect();
    (0..d2.len())
        .filter(|&j| {
            d2[j] > min_curvature && (j == 0 || d2[j] >= d2[j - 1]) && (j + 1 == d2.len() || d2[j] > d2[j + 1])
        })
        .map(|j| grid[j + 1].0.exp())
        .collect()
}

/// Which tensors of a checkpoint are analyzed: `.weight` tensors of rank 2
/// or 3, optionally only trainable ones, optionally restricted to name
/// prefixes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayerFilter {
    pub trainable_only: bool,
    /// Empty means every prefix.
    pub prefixes: Vec<String>,
}

impl Default for LayerFilter {
    fn default() -> Self {
        LayerFilter {
            trainable_only: true,
            prefixes: Vec::new(),
        }
    }
}

impl LayerFilter {
    pub fn all() -> Self {
        LayerFilter {
            trainable_only: false,
            prefixes: Vec::new(),
        }
    }

    pub fn selects(&self, store: &ParamStore, name: &str) -> bool {
        let Ok(t) = store.tensor(name) else { return false };
        name.ends_with(".weight")
            && matches!(t.ndim(), 2 | 3)
            && (!self.trainable_only || store.is_trainable(name))
            && (self.prefixes.is_empty() || self.prefixes.iter().any(|p| name.starts_with(p.as_str())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseOptions {
    /// Largest KS distance of the better fit for a layer to count toward
    /// the α metric.
    pub ks_threshold: f64,
    /// Skip the truncated fit when false.
    pub fit_tpl: bool,
    pub tpl: TplOptions,
    /// Smallest second difference reported by [`kink_candidates`].
    pub kink_curvature: f64,
}

impl Default for DiagnoseOptions {
    fn default() -> Self {
        DiagnoseOptions {
            ks_threshold: 0.10,
            fit_tpl: true,
            tpl: TplOptions::default(),
            kink_curvature: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub esd: Esd,
    pub pl: Option<PowerLawFit>,
    pub tpl: Option<PowerLawFit>,
    pub stable_rank: f64,
    /// Counted in the α metric.
    pub included: bool,
    /// PL exponent below 2.
    pub unreliable: bool,
    /// Why the fits are absent, when they are.
    pub fit_error: Option<String>,
    /// Eigenvalues where the log-log CCDF bends convexly.
    pub kinks: Vec<f64>,
}

impl LayerReport {
    /// Smaller KS distance of the PL and TPL fits.
    pub fn best_ks(&self) -> Option<f64> {
        [self.pl, self.tpl]
            .iter()
            .flatten()
            .map(|f| f.ks_distance)
            .reduce(f64::min)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EsdReport {
    pub layers: Vec<LayerReport>,
    /// Mean PL exponent over included layers; `None` when none qualify.
    pub alpha_metric: Option<f64>,
    pub mean_stable_rank: f64,
    pub included: Vec<String>,
    pub ks_threshold: f64,
}

/// Mean of `alpha` over `(alpha, ks_distance)` pairs with distance at most
/// `threshold`.
pub fn alpha_metric(fits: &[(f64, f64)], threshold: f64) -> Option<f64> {
    let kept: Vec<f64> = fits.iter().filter(|f| f.1 <= threshold).map(|f| f.0).collect();
    (!kept.is_empty()).then(|| kept.iter().sum::<f64>() / kept.len() as f64)
}

fn diagnose_layer(name: &str, w: &Tensor, opts: &DiagnoseOptions) -> Result<LayerReport> {
    let esd = gram_esd(name, w)?;
    let stable_rank = stable_rank_of(&esd)?;
    let values = esd.positive();
    let (pl, tpl, fit_error) = match fit_pl(&values) {
        Ok(pl) => {
            let tpl = if opts.fit_tpl {
                fit_tpl(&values, &opts.tpl).ok()
            } else {
                None
            };
            (Some(pl), tpl, None)
        }
        Err(e) => (None, None, Some(e.to_string())),
    };
    let mut report = LayerReport {
        esd,
        pl,
        tpl,
        stable_rank,
        included: false,
        unreliable: pl.is_some_and(|f| f.alpha < 2.0),
        fit_error,
        kinks: kink_candidates(&values, opts.kink_curvature),
    };
    report.included = report.best_ks().is_some_and(|d| d <= opts.ks_threshold);
    Ok(report)
}

/// Per-layer ESDs, fits, and stable ranks of the selected tensors, in name
/// order, plus the model-level summaries.
pub fn diagnose(store: &ParamStore, filter: &LayerFilter, opts: &DiagnoseOptions) -> Result<EsdReport> {
    if !(0.0..=1.0).contains(&opts.ks_threshold) {
        return Err(Error::config("htsr.ks_threshold", "must lie in [0, 1]"));
    }
    let mut names: Vec<&str> = store.names().filter(|n| filter.selects(store, n)).collect();
    names.sort_unstable();
    if names.is_empty() {
        return Err(Error::Diagnostics("no weight matrix passes the layer filter".into()));
    }
    let layers = names
        .par_iter()
        .map(|n| diagnose_layer(n, store.tensor(n)?, opts))
        .collect::<Result<Vec<_>>>()?;
    let fits: Vec<(f64, f64)> = layers
        .iter()
        .filter(|l| l.included)
        .filter_map(|l| Some((l.pl?.alpha, l.best_ks()?)))
        .collect();
    Ok(EsdReport {
        alpha_metric: alpha_metric(&fits, opts.ks_threshold),
        mean_stable_rank: layers.iter().map(|l| l.stable_rank).sum::<f64>() / layers.len() as f64,
        included: layers
            .iter()
            .filter(|l| l.included)
            .map(|l| l.esd.name.clone())
            .collect(),
        ks_threshold: opts.ks_threshold,
        layers,
    })
}
