//! On-disk layout of a suite:
//!
//! ```text
//! <out>/spec.json             effective experiment spec
//! <out>/report.json           ComparisonReport
//! <out>/table.csv             architecture, future_info, epochs, p50_ratio, p90_ratio
//! <out>/loss_by_alpha.csv     one row per (run, epoch)
//! <out>/loss_by_alpha.svg     test loss colored by the α metric
//! <out>/loss_by_stable_rank.svg
//! <out>/runs/<name>/history.json, eval.json
//! <out>/runs/<name>/esd/epoch_<k>.json
//! <out>/runs/<name>/checkpoints/epoch_<k>.ptwf
//! <out>/runs/<name>/ccdf/<layer>.csv, <layer>.svg   last epoch
//! ```

use std::path::Path;

use super::{ComparisonReport, ExperimentSpec};
use crate::error::{Error, Result};
use crate::htsr::{ccdf, EsdReport};
use crate::io::{write_atomic, write_json};
use crate::nn::ptwf;
use crate::plot::{ccdf_svg, loss_svg, ColorMetric};
use crate::training::checkpoint_name;

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Render(e.to_string());
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(&row).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::Render(e.to_string()))
}

/// `lambda,ccdf` rows of one layer's spectrum.
pub fn ccdf_csv(eigenvalues: &[f64]) -> Result<Vec<u8>> {
    csv_bytes(
        &["lambda", "ccdf"],
        ccdf(eigenvalues)
            .into_iter()
            .map(|(x, y)| vec![x.to_string(), y.to_string()]),
    )
}

fn write_ccdfs(report: &EsdReport, dir: &Path) -> Result<()> {
    for layer in &report.layers {
        write_atomic(
            &dir.join(format!("{}.csv", layer.esd.name)),
            &ccdf_csv(&layer.esd.eigenvalues)?,
        )?;
        if let Ok(svg) = ccdf_svg(layer) {
            write_atomic(&dir.join(format!("{}.svg", layer.esd.name)), svg.as_bytes())?;
        }
    }
    Ok(())
}

/// Writes every artifact of `report` under `out`.
pub fn write_artifacts(report: &ComparisonReport, spec: &ExperimentSpec, out: &Path) -> Result<()> {
    write_json(&out.join("spec.json"), spec)?;
    write_json(&out.join("report.json"), report)?;
    let table = csv_bytes(
        &["architecture", "future_info", "epochs", "p50_ratio", "p90_ratio"],
        report.table.iter().map(|r| {
            vec![
                r.architecture.clone(),
                r.future_info.to_string(),
                r.epochs.to_string(),
                opt(r.p50_ratio),
                opt(r.p90_ratio),
            ]
        }),
    )?;
    write_atomic(&out.join("table.csv"), &table)?;
    let series = csv_bytes(
        &[
            "run",
            "epoch",
            "train_loss",
            "test_p50",
            "test_p90",
            "alpha_metric",
            "mean_stable_rank",
        ],
        report.loss_by_alpha.iter().map(|p| {
            vec![
                p.run.clone(),
                p.epoch.to_string(),
                p.train_loss.to_string(),
                opt(p.test_p50),
                opt(p.test_p90),
                opt(p.alpha_metric),
                p.mean_stable_rank.to_string(),
            ]
        }),
    )?;
    write_atomic(&out.join("loss_by_alpha.csv"), &series)?;
    if !report.loss_by_alpha.is_empty() {
        write_atomic(
            &out.join("loss_by_alpha.svg"),
            loss_svg(&report.loss_by_alpha, ColorMetric::Alpha)?.as_bytes(),
        )?;
        write_atomic(
            &out.join("loss_by_stable_rank.svg"),
            loss_svg(&report.loss_by_alpha, ColorMetric::StableRank)?.as_bytes(),
        )?;
    }
    for run in &report.runs {
        let dir = out.join("runs").join(&run.name);
        write_json(&dir.join("history.json"), &run.history)?;
        if let Some(ev) = &run.eval {
            write_json(&dir.join("eval.json"), ev)?;
        }
        for (k, esd) in run.esd_reports.iter().enumerate() {
            write_json(&dir.join("esd").join(format!("epoch_{k}.json")), esd)?;
        }
        for (k, params) in run.checkpoints.iter().enumerate() {
            ptwf::save(params, &dir.join("checkpoints").join(checkpoint_name(k)))?;
        }
        if let Some(last) = run.esd_reports.last() {
            write_ccdfs(last, &dir.join("ccdf"))?;
        }
    }
    Ok(())
}
