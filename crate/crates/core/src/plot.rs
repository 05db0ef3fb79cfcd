//! SVG rendering of spectra and loss curves.
//!
//! Each renderer has a companion that returns the plotted series, so tests
//! can check the numbers behind a figure without parsing SVG.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::LossAlphaPoint;
use crate::htsr::{ccdf, LayerReport};

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 60.0;

/// Data behind a log-log CCDF plot, in base-10 logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcdfSeries {
    pub layer: String,
    /// `(log10 λ, log10 CCDF)`; the zero CCDF of the largest eigenvalue is
    /// drawn at `log10(1/(2n))`, below every positive value.
    pub points: Vec<(f64, f64)>,
    /// Fitted power-law tail, two end points; empty without a fit.
    pub fit_line: Vec<(f64, f64)>,
    pub log_lambda_min: Option<f64>,
    pub alpha: Option<f64>,
}

/// The empirical CCDF of a layer's ESD and, when a PL fit exists, the
/// fitted tail `CCDF(λ) = (n_tail/n) · (λ/λ_min)^{1−α}`.
pub fn ccdf_series(layer: &LayerReport) -> CcdfSeries {
    let values = layer.esd.positive();
    let floor = 0.5 / values.len().max(1) as f64;
    let points = ccdf(&values)
        .into_iter()
        .map(|(x, y)| (x.log10(), y.max(floor).log10()))
        .collect();
    let (fit_line, log_lambda_min, alpha) = match layer.pl {
        Some(f) => {
            let n = values.len() as f64;
            let max = values.last().copied().unwrap_or(f.lambda_min);
            let at = |x: f64| {
                let y = f.n_tail as f64 / n * (x / f.lambda_min).powf(1.0 - f.alpha);
                (x.log10(), y.log10())
            };
            (
                vec![at(f.lambda_min), at(max.max(f.lambda_min))],
                Some(f.lambda_min.log10()),
                Some(f.alpha),
            )
        }
        None => (Vec::new(), None, None),
    };
    CcdfSeries {
        layer: layer.esd.name.clone(),
        points,
        fit_line,
        log_lambda_min,
        alpha,
    }
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Result<Frame> {
        let range = |it: &mut dyn Iterator<Item = f64>| {
            it.filter(|v| v.is_finite()).fold(None, |acc: Option<(f64, f64)>, v| {
                Some(acc.map_or((v, v), |(a, b)| (a.min(v), b.max(v))))
            })
        };
        let pad = |(lo, hi): (f64, f64)| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        let x = range(&mut xs.clone()).ok_or_else(|| Error::Render("no finite x values".into()))?;
        let y = range(&mut ys.clone()).ok_or_else(|| Error::Render("no finite y values".into()))?;
        Ok(Frame { x: pad(x), y: pad(y) })
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * MARGIN)
    }
}

fn header(out: &mut String, title: &str, xlabel: &str, ylabel: &str, f: &Frame) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 16.0,
        escape(xlabel)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
    for (v, anchor, x, y) in [
        (f.x.0, "start", MARGIN, H - MARGIN + 16.0),
        (f.x.1, "end", W - MARGIN, H - MARGIN + 16.0),
        (f.y.0, "end", MARGIN - 4.0, H - MARGIN),
        (f.y.1, "end", MARGIN - 4.0, MARGIN + 10.0),
    ] {
        let _ = writeln!(
            out,
            r#"<text x="{x}" y="{y}" text-anchor="{anchor}">{}</text>"#,
            tick(v)
        );
    }
}

fn tick(v: f64) -> String {
    format!("{v:.3}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Log-log CCDF with the fitted PL tail and a vertical `λ_min` marker.
pub fn ccdf_svg(layer: &LayerReport) -> Result<String> {
    let s = ccdf_series(layer);
    if s.points.is_empty() {
        return Err(Error::Render(format!("{} has no positive eigenvalues", s.layer)));
    }
    let all = s.points.iter().chain(&s.fit_line);
    let f = Frame::fit(all.clone().map(|p| p.0), all.map(|p| p.1))?;
    let mut out = String::new();
    let title = match s.alpha {
        Some(a) => format!("{} (alpha = {a:.3})", s.layer),
        None => s.layer.clone(),
    };
    header(&mut out, &title, "log10 eigenvalue", "log10 CCDF", &f);
    for &(x, y) in &s.points {
        let _ = writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="steelblue"/>"#,
            f.px(x),
            f.py(y)
        );
    }
    if let [a, b] = s.fit_line[..] {
        let _ = writeln!(
            out,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black" stroke-dasharray="6 3"/>"#,
            f.px(a.0),
            f.py(a.1),
            f.px(b.0),
            f.py(b.1)
        );
    }
    if let Some(lm) = s.log_lambda_min {
        let _ = writeln!(
            out,
            r#"<line x1="{x:.2}" y1="{MARGIN}" x2="{x:.2}" y2="{}" stroke="red"/>"#,
            H - MARGIN,
            x = f.px(lm)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorMetric {
    Alpha,
    StableRank,
}

impl ColorMetric {
    fn value(self, p: &LossAlphaPoint) -> Option<f64> {
        match self {
            ColorMetric::Alpha => p.alpha_metric,
            ColorMetric::StableRank => Some(p.mean_stable_rank).filter(|v| v.is_finite()),
        }
    }

    fn label(self) -> &'static str {
        match self {
            ColorMetric::Alpha => "alpha metric",
            ColorMetric::StableRank => "stable rank",
        }
    }
}

/// Minimum and maximum of the coloring metric over `points`.
pub fn color_bounds(points: &[LossAlphaPoint], metric: ColorMetric) -> Option<(f64, f64)> {
    points.iter().filter_map(|p| metric.value(p)).fold(None, |acc, v| {
        Some(acc.map_or((v, v), |(a, b): (f64, f64)| (a.min(v), b.max(v))))
    })
}

/// Blue at 0, yellow at 1; grey for points without a metric.
fn color(t: Option<f64>) -> String {
    match t {
        None => "#999999".into(),
        Some(t) => {
            let t = t.clamp(0.0, 1.0);
            let r = (68.0 + t * (253.0 - 68.0)) as u8;
            let g = (1.0 + t * (231.0 - 1.0)) as u8;
            let b = (84.0 + t * (37.0 - 84.0)) as u8;
            format!("#{r:02x}{g:02x}{b:02x}")
        }
    }
}

/// Test P50 QWE by epoch, one polyline per run, markers colored by
/// `metric`. The legend shows the color bounds.
pub fn loss_svg(points: &[LossAlphaPoint], metric: ColorMetric) -> Result<String> {
    let pts: Vec<&LossAlphaPoint> = points
        .iter()
        .filter(|p| p.test_p50.is_some_and(f64::is_finite))
        .collect();
    if pts.is_empty() {
        return Err(Error::Render("no finite test losses to plot".into()));
    }
    let f = Frame::fit(
        pts.iter().map(|p| p.epoch as f64),
        pts.iter().map(|p| p.test_p50.unwrap_or(f64::NAN)),
    )?;
    let bounds = color_bounds(points, metric);
    let scale = |v: Option<f64>| {
        let (lo, hi) = bounds?;
        let v = v?;
        Some(if hi > lo { (v - lo) / (hi - lo) } else { 0.5 })
    };
    let mut out = String::new();
    header(
        &mut out,
        &format!("test P50 QWE colored by {}", metric.label()),
        "epoch",
        "test P50 QWE",
        &f,
    );
    let mut runs: Vec<&str> = Vec::new();
    for p in &pts {
        if !runs.contains(&p.run.as_str()) {
            runs.push(&p.run);
        }
    }
    for (i, run) in runs.iter().enumerate() {
        let curve: Vec<&&LossAlphaPoint> = pts.iter().filter(|p| p.run == *run).collect();
        let path: Vec<String> = curve
            .iter()
            .map(|p| {
                format!(
                    "{:.2},{:.2}",
                    f.px(p.epoch as f64),
                    f.py(p.test_p50.unwrap_or_default())
                )
            })
            .collect();
        let _ = writeln!(
            out,
            r##"<polyline points="{}" fill="none" stroke="#444444"/>"##,
            path.join(" ")
        );
        for p in &curve {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{}" stroke="black" stroke-width="0.5"/>"#,
                f.px(p.epoch as f64),
                f.py(p.test_p50.unwrap_or_default()),
                color(scale(metric.value(p)))
            );
        }
        if let Some(last) = curve.last() {
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" font-size="10">{}</text>"#,
                f.px(last.epoch as f64) - 4.0,
                f.py(last.test_p50.unwrap_or_default()) - 6.0 - 10.0 * (i % 2) as f64,
                escape(run)
            );
        }
    }
    if let Some((lo, hi)) = bounds {
        let (x, y) = (W - MARGIN + 8.0, MARGIN);
        for (k, t) in [(0, 1.0), (1, 0.75), (2, 0.5), (3, 0.25), (4, 0.0)] {
            let _ = writeln!(
                out,
                r#"<rect x="{x}" y="{}" width="12" height="16" fill="{}"/>"#,
                y + 16.0 * k as f64,
                color(Some(t))
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{x}" y="{}" font-size="10" class="legend-max">{}</text>"#,
            y - 4.0,
            tick(hi)
        );
        let _ = writeln!(
            out,
            r#"<text x="{x}" y="{}" font-size="10" class="legend-min">{}</text>"#,
            y + 92.0,
            tick(lo)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::htsr::{fit_pl, Esd};

    fn layer(values: Vec<f64>) -> LayerReport {
        let pl = fit_pl(&values).ok();
        LayerReport {
            esd: Esd {
                name: "w".into(),
                rows: values.len(),
                cols: values.len(),
                eigenvalues: values,
            },
            pl,
            tpl: None,
            stable_rank: 1.0,
            included: false,
            unreliable: false,
            fit_error: None,
            kinks: Vec::new(),
        }
    }

    fn point(run: &str, epoch: usize, p50: f64, alpha: Option<f64>) -> LossAlphaPoint {
        LossAlphaPoint {
            run: run.into(),
            epoch,
            train_loss: 0.0,
            test_p50: Some(p50),
            test_p90: None,
            alpha_metric: alpha,
            mean_stable_rank: 2.0,
        }
    }

    #[test]
    fn three_point_ccdf() {
        let l = layer(vec![1.0, 2.0, 3.0]);
        let s = ccdf_series(&l);
        assert_eq!(s.points.len(), 3);
        assert!(s.points.windows(2).all(|w| w[1].1 < w[0].1));
        let svg = ccdf_svg(&l).unwrap();
        assert_eq!(svg.matches("<circle").count(), 3);
    }

    #[test]
    fn fit_line_slope_matches_exponent() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut xs: Vec<f64> = (0..2000)
            .map(|_| (1.0 - rng.random::<f64>()).powf(-1.0 / 1.5))
            .collect();
        xs.sort_by(f64::total_cmp);
        let s = ccdf_series(&layer(xs));
        let alpha = s.alpha.unwrap();
        let [(x0, y0), (x1, y1)] = s.fit_line[..] else {
            panic!("two end points")
        };
        assert!(((y1 - y0) / (x1 - x0) + (alpha - 1.0)).abs() < 1e-9);
        assert!((alpha - 2.5).abs() < 0.2, "{alpha}");
    }

    #[test]
    fn legend_matches_alpha_range() {
        let pts = vec![
            point("a", 1, 0.5, Some(2.5)),
            point("a", 2, 0.4, Some(4.0)),
            point("b", 1, 0.6, None),
        ];
        assert_eq!(color_bounds(&pts, ColorMetric::Alpha), Some((2.5, 4.0)));
        let svg = loss_svg(&pts, ColorMetric::Alpha).unwrap();
        assert!(svg.contains(r#"class="legend-max">4.000<"#));
        assert!(svg.contains(r#"class="legend-min">2.500<"#));
    }

    #[test]
    fn empty_inputs_fail_to_render() {
        assert!(matches!(loss_svg(&[], ColorMetric::Alpha), Err(Error::Render(_))));
        assert!(matches!(ccdf_svg(&layer(vec![])), Err(Error::Render(_))));
    }
}
