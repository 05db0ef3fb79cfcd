//! Power-law and truncated-power-law tail fits.
//!
//! For a cutoff `λ_min` the tail density is `K · λ^{−α} · e^{−βλ}` on
//! `[λ_min, ∞)`; `β = 0` is the plain power law. The cutoff is the candidate
//! whose fitted tail has the smallest Kolmogorov–Smirnov distance to the
//! empirical tail.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fewest tail points a cutoff may leave.
pub const MIN_TAIL: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitFamily {
    Pl,
    Tpl,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub family: FitFamily,
    pub alpha: f64,
    pub lambda_min: f64,
    pub ks_distance: f64,
    /// Decay rate; present only for a truncated fit with `β > 0`.
    pub beta: Option<f64>,
    pub n_tail: usize,
}

/// Continuous power-law MLE for a fixed cutoff:
/// `α̂ = 1 + n / Σ ln(λ/λ_min)` over the tail `λ ≥ λ_min`.
pub fn fit_pl_at(values: &[f64], lambda_min: f64) -> Result<PowerLawFit> {
    if !(lambda_min > 0.0) {
        return Err(Error::Fit(format!("cutoff {lambda_min} must be positive")));
    }
    let mut tail: Vec<f64> = values.iter().copied().filter(|&v| v >= lambda_min).collect();
    tail.sort_by(f64::total_cmp);
    let n = tail.len();
    let log_sum: f64 = tail.iter().map(|v| (v / lambda_min).ln()).sum();
    if n == 0 || !(log_sum > 0.0) {
        return Err(Error::Fit(format!("tail above {lambda_min} is empty or has no spread")));
    }
    let alpha = 1.0 + n as f64 / log_sum;
    Ok(PowerLawFit {
        family: FitFamily::Pl,
        alpha,
        lambda_min,
        ks_distance: ks(&tail, |x| 1.0 - (x / lambda_min).powf(1.0 - alpha)),
        beta: None,
        n_tail: n,
    })
}

/// KS distance between the sorted sample and a continuous CDF.
fn ks(sorted: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            ((i + 1) as f64 / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// Positive values in ascending order and the candidate cutoff positions:
/// first occurrences of distinct values that leave at least [`MIN_TAIL`]
/// points at or above them.
fn candidates(values: &[f64]) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut xs: Vec<f64> = values.iter().copied().filter(|&v| v > 0.0).collect();
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n < MIN_TAIL {
        return Err(Error::Fit(format!(
            "{n} positive eigenvalues; at least {MIN_TAIL} are needed"
        )));
    }
    let idx: Vec<usize> = (0..=n - MIN_TAIL).filter(|&i| i == 0 || xs[i] != xs[i - 1]).collect();
    Ok((xs, idx))
}

/// Power-law fit with the cutoff chosen by minimum KS distance over every
/// distinct eigenvalue that leaves at least [`MIN_TAIL`] points.
pub fn fit_pl(values: &[f64]) -> Result<PowerLawFit> {
    let (xs, idx) = candidates(values)?;
    let mut best: Option<PowerLawFit> = None;
    for i in idx {
        let Ok(fit) = fit_pl_sorted(&xs[i..]) else { continue };
        if best.is_none_or(|b| fit.ks_distance < b.ks_distance) {
            best = Some(fit);
        }
    }
    best.ok_or_else(|| Error::Fit("no cutoff leaves a tail with spread".into()))
}

fn fit_pl_sorted(tail: &[f64]) -> Result<PowerLawFit> {
    let lambda_min = tail[0];
    let log_sum: f64 = tail.iter().map(|v| (v / lambda_min).ln()).sum();
    if !(log_sum > 0.0) {
        return Err(Error::Fit("tail has no spread".into()));
    }
    let alpha = 1.0 + tail.len() as f64 / log_sum;
    Ok(PowerLawFit {
        family: FitFamily::Pl,
        alpha,
        lambda_min,
        ks_distance: ks(tail, |x| 1.0 - (x / lambda_min).powf(1.0 - alpha)),
        beta: None,
        n_tail: tail.len(),
    })
}

/// Search grid for the truncated fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TplOptions {
    /// Values of `β · λ_min`; must contain 0.
    pub beta_grid: Vec<f64>,
    /// Cutoff candidates are subsampled evenly to at most this many.
    pub max_cutoffs: usize,
    pub alpha_range: (f64, f64),
    /// Simpson intervals for the normalizing integral.
    pub quadrature: usize,
}

impl Default for TplOptions {
    fn default() -> Self {
        TplOptions {
            beta_grid: vec![0.0, 0.01, 0.03, 0.1, 0.3, 0.5, 1.0, 3.0],
            max_cutoffs: 24,
            alpha_range: (1.01, 12.0),
            quadrature: 256,
        }
    }
}

/// Integration limit in `u = ln(λ/λ_min)` beyond which the integrand
/// `e^{(1−α)u − b·e^u}` is negligible.
fn upper_limit(alpha: f64, b: f64) -> f64 {
    let mut u: f64 = 700.0;
    if alpha > 1.0 {
        u = u.min(40.0 / (alpha - 1.0));
    }
    if b > 0.0 {
        u = u.min((40.0 / b).max(1.0).ln() + 2.0);
    }
    u
}

/// `∫_0^U e^{(1−α)u − b e^u} du` (Simpson), the normalizer divided by
/// `λ_min^{1−α}`.
fn normalizer(alpha: f64, b: f64, intervals: usize) -> f64 {
    let upper = upper_limit(alpha, b);
    let m = intervals + intervals % 2;
    let h = upper / m as f64;
    let f = |u: f64| ((1.0 - alpha) * u - b * u.exp()).exp();
    let mut s = f(0.0) + f(upper);
    for k in 1..m {
        s += f(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Mean log-likelihood of the tail in `u` coordinates, up to constants.
fn tpl_loglik(alpha: f64, b: f64, mean_u: f64, mean_e: f64, intervals: usize) -> f64 {
    (1.0 - alpha) * mean_u - b * mean_e - normalizer(alpha, b, intervals).ln()
}

fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - r * (hi - lo);
    let mut d = lo + r * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..60 {
        if fc > fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - r * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + r * (hi - lo);
            fd = f(d);
        }
        if hi - lo < 1e-6 {
            break;
        }
    }
    (lo + hi) / 2.0
}

/// CDF of the truncated tail at each `u_i` (sorted ascending), by
/// cumulative Simpson steps.
fn tpl_cdf(us: &[f64], alpha: f64, b: f64, intervals: usize) -> Vec<f64> {
    let z = normalizer(alpha, b, intervals);
    let f = |u: f64| ((1.0 - alpha) * u - b * u.exp()).exp();
    let mut out = Vec::with_capacity(us.len());
    let (mut acc, mut prev) = (0.0, 0.0);
    for &u in us {
        if u > prev {
            let steps = 8;
            let h = (u - prev) / steps as f64;
            let mut s = f(prev) + f(u);
            for k in 1..steps {
                s += f(prev + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
            }
            acc += s * h / 3.0;
            prev = u;
        }
        out.push((acc / z).min(1.0));
    }
    out
}

fn fit_tpl_sorted(tail: &[f64], b: f64, opts: &TplOptions) -> Result<PowerLawFit> {
    if b == 0.0 {
        return fit_pl_sorted(tail);
    }
    let lambda_min = tail[0];
    let us: Vec<f64> = tail.iter().map(|v| (v / lambda_min).ln()).collect();
    let n = tail.len() as f64;
    let mean_u = us.iter().sum::<f64>() / n;
    let mean_e = us.iter().map(|u| u.exp()).sum::<f64>() / n;
    let (lo, hi) = opts.alpha_range;
    let alpha = golden_max(|a| tpl_loglik(a, b, mean_u, mean_e, opts.quadrature), lo, hi);
    let cdf = tpl_cdf(&us, alpha, b, opts.quadrature);
    let ks_distance = cdf
        .iter()
        .enumerate()
        .map(|(i, &f)| ((i + 1) as f64 / n - f).max(f - i as f64 / n))
        .fold(0.0, f64::max);
    Ok(PowerLawFit {
        family: FitFamily::Tpl,
        alpha,
        lambda_min,
        ks_distance,
        beta: Some(b / lambda_min),
        n_tail: tail.len(),
    })
}

/// Truncated-power-law fit over the `(λ_min, β)` grid, `α` by maximum
/// likelihood for each pair, best by KS distance. When the winner has
/// `β = 0` it is reported as a plain power law.
pub fn fit_tpl(values: &[f64], opts: &TplOptions) -> Result<PowerLawFit> {
    if !opts.beta_grid.contains(&0.0) || opts.beta_grid.iter().any(|&b| !(b >= 0.0)) {
        return Err(Error::config(
            "htsr.tpl.beta_grid",
            "must be non-negative and contain 0",
        ));
    }
    if opts.max_cutoffs == 0 || opts.quadrature < 2 {
        return Err(Error::config(
            "htsr.tpl.max_cutoffs",
            "cutoffs and quadrature must be positive",
        ));
    }
    let (xs, idx) = candidates(values)?;
    let step = idx.len().div_ceil(opts.max_cutoffs);
    let mut best: Option<PowerLawFit> = None;
    for &i in idx.iter().step_by(step) {
        for &b in &opts.beta_grid {
            let Ok(fit) = fit_tpl_sorted(&xs[i..], b, opts) else {
                continue;
            };
            if fit.ks_distance.is_finite() && best.is_none_or(|bst| fit.ks_distance < bst.ks_distance) {
                best = Some(fit);
            }
        }
    }
    best.ok_or_else(|| Error::Fit("no cutoff leaves a tail with spread".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pl_sample(n: usize, alpha: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let u: f64 = 1.0 - rng.random::<f64>();
                u.powf(-1.0 / (alpha - 1.0))
            })
            .collect()
    }

    #[test]
    fn forced_cutoff_closed_form() {
        let e = std::f64::consts::E;
        let fit = fit_pl_at(&[e, e, e], 1.0).unwrap();
        assert!((fit.alpha - 2.0).abs() < 1e-12);
        assert_eq!(fit.n_tail, 3);
    }

    #[test]
    fn too_few_points_is_a_fit_error() {
        assert!(matches!(fit_pl(&[1.0, 2.0, 3.0]), Err(Error::Fit(_))));
        assert!(matches!(fit_pl(&[1.0; 20]), Err(Error::Fit(_))));
    }

    #[test]
    fn recovers_pl_exponent() {
        let fit = fit_pl(&pl_sample(5000, 3.0, 1)).unwrap();
        assert!((2.85..=3.15).contains(&fit.alpha), "{fit:?}");
        assert!(fit.ks_distance <= 1.0);
    }

    #[test]
    fn zero_only_beta_grid_matches_pl() {
        let xs = pl_sample(300, 2.5, 4);
        let opts = TplOptions {
            beta_grid: vec![0.0],
            max_cutoffs: usize::MAX,
            ..TplOptions::default()
        };
        assert_eq!(fit_tpl(&xs, &opts).unwrap(), fit_pl(&xs).unwrap());
    }

    #[test]
    fn normalizer_matches_closed_form_without_truncation() {
        for alpha in [1.5, 2.0, 3.0, 5.0] {
            let z = normalizer(alpha, 0.0, 2048);
            assert!((z - 1.0 / (alpha - 1.0)).abs() < 1e-6, "alpha {alpha}: {z}");
        }
    }

    fn tpl_sample(n: usize, alpha: f64, beta: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let u: f64 = 1.0 - rng.random::<f64>();
            let x = u.powf(-1.0 / (alpha - 1.0));
            if rng.random::<f64>() < (-beta * (x - 1.0)).exp() {
                out.push(x);
            }
        }
        out
    }

    #[test]
    fn recovers_tpl_exponent() {
        let fit = fit_tpl(&tpl_sample(5000, 2.5, 0.5, 9), &TplOptions::default()).unwrap();
        assert!((2.2..=2.8).contains(&fit.alpha), "{fit:?}");
    }

    #[test]
    fn pure_pl_keeps_small_decay() {
        let opts = TplOptions::default();
        let fit = fit_tpl(&pl_sample(3000, 2.5, 5), &opts).unwrap();
        let b = fit.beta.map_or(0.0, |beta| beta * fit.lambda_min);
        assert!(b <= opts.beta_grid[1] + 1e-12, "{fit:?}");
    }
}
