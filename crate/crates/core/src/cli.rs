//! Command-line interface.
//!
//! Every subcommand writes `effective_config.json` (the configuration after
//! overrides) into its output directory. Exit codes: 0 on success, 2 when a
//! configuration or input fails validation, 1 on any other failure.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{
    csv_io, generate_panel, load_panel_csv, write_panel_csv, PreparedPanel, SyntheticConfig, TargetTransform,
    TaskConfig,
};
use crate::error::{Error, Result};
use crate::experiments::{ccdf_csv, run_suite_to, ExperimentSpec};
use crate::htsr::{diagnose, DiagnoseOptions, EsdReport, LayerFilter};
use crate::io::{read_json, write_atomic, write_json};
use crate::models::{pretrain_toy_lm, BlockConfig, InputDims, Model, ModelConfig, ModelSpec, ToyLmConfig};
use crate::nn::ptwf;
use crate::nn::BackboneKind;
use crate::plot::{ccdf_svg, loss_svg, ColorMetric};
use crate::training::{evaluate, quantile_label, train, EvalReport, TrainConfig, TrainHistory};

/// Caps the worker threads used for evaluation and diagnostics.
pub const THREADS_ENV: &str = "PATCHCAST_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "patchcast",
    version,
    about = "Patched adapters on frozen transformers for quantile forecasting"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// JSON configuration file; flags override its values.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory, created if absent.
    #[arg(long, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Master seed.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Log progress to standard error.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic panel as CSV files.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Number of series.
        #[arg(long)]
        series: Option<usize>,
        /// Number of periods.
        #[arg(long)]
        periods: Option<usize>,
    },
    /// Pretrain a backbone on the toy language task.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train a forecaster on a CSV panel.
    Train {
        #[command(flatten)]
        common: Common,
        /// Panel directory.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Pretrained backbone weights.
        #[arg(long, value_name = "PATH")]
        backbone: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Patch window.
        #[arg(long)]
        window: Option<usize>,
        /// Patch stride.
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Score a trained model on the test dates of a panel.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Output directory of `train`.
        #[arg(long, value_name = "DIR")]
        model: PathBuf,
        /// Weights to load instead of the final checkpoint.
        #[arg(long, value_name = "PATH")]
        weights: Option<PathBuf>,
        /// `eval.json` of the run that ratios are relative to.
        #[arg(long, value_name = "PATH")]
        baseline: Option<PathBuf>,
    },
    /// Spectral diagnostics of weight files.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Weight files, or directories whose `.ptwf` files are read in name order.
        #[arg(long, value_name = "PATH", required = true, num_args = 1..)]
        weights: Vec<PathBuf>,
        /// Analyze frozen tensors too.
        #[arg(long)]
        all_layers: bool,
        #[arg(long)]
        ks_threshold: Option<f64>,
    },
    /// Run a comparison suite (the canonical six runs without `--config`).
    Suite {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Render SVG plots from a suite or diagnostics report.
    Plot {
        #[command(flatten)]
        common: Common,
        /// `report.json` of a suite or an ESD report.
        #[arg(long, value_name = "PATH", required = true, num_args = 1..)]
        report: Vec<PathBuf>,
    },
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::Generate { common, .. }
            | Command::Pretrain { common, .. }
            | Command::Train { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Diagnose { common, .. }
            | Command::Suite { common, .. }
            | Command::Plot { common, .. } => common,
        }
    }
}

/// Configuration of `pretrain`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainJob {
    pub backbone: BackboneKind,
    pub d_llm: usize,
    pub stack: BlockConfig,
    pub toy: ToyLmConfig,
}

impl Default for PretrainJob {
    fn default() -> Self {
        PretrainJob {
            backbone: BackboneKind::DecoderOnly,
            d_llm: 64,
            stack: BlockConfig::default(),
            toy: ToyLmConfig::default(),
        }
    }
}

/// Configuration of `train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainJob {
    pub task: TaskConfig,
    pub transform: TargetTransform,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for TrainJob {
    fn default() -> Self {
        TrainJob {
            task: TaskConfig::default(),
            transform: TargetTransform::Log1p,
            model: ModelConfig::Patched(ModelSpec::fpt(
                crate::nn::AdapterKind::Linear,
                crate::nn::FreezePolicy::AdapterAndLayerNorms,
            )),
            train: TrainConfig::default(),
        }
    }
}

/// What `train` records next to the weights so `evaluate` can rebuild the
/// model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub job: TrainJob,
    pub dims: InputDims,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// SHA-256 over the listed files, each as name, NUL, bytes.
    pub checksum: String,
    pub files: Vec<String>,
    pub created_unix: u64,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over `files` (relative to `dir`) in the given order.
pub fn checksum(dir: &Path, files: &[String]) -> Result<String> {
    let mut h = Sha256::new();
    for f in files {
        let path = dir.join(f);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        h.update(f.as_bytes());
        h.update([0]);
        h.update(&bytes);
    }
    Ok(hex(&h.finalize()))
}

fn write_manifest(dir: &Path, command: &str, seed: u64, config: &impl Serialize, files: Vec<String>) -> Result<()> {
    let manifest = Manifest {
        command: command.into(),
        seed,
        config: serde_json::to_value(config)?,
        checksum: checksum(dir, &files)?,
        files,
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

fn load_config<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => read_json(p),
        None => Ok(T::default()),
    }
}

fn prepare(
    data: &Path,
    job: &TrainJob,
) -> Result<(
    PreparedPanel,
    (crate::dataset::ForecastTask, crate::dataset::ForecastTask),
)> {
    let raw = load_panel_csv(data)?;
    let tasks = job.task.train_test(raw.n_periods())?;
    let fit_until = tasks.0.fcd_grid.last().copied().unwrap_or(job.task.context);
    Ok((PreparedPanel::new(raw, job.transform, fit_until)?, tasks))
}

fn print_eval(ev: &EvalReport) {
    for (k, v) in &ev.qwe {
        match ev.ratios.get(k) {
            Some(r) => println!("{k}: QWE {v:.6}, ratio {r:.3}"),
            None => println!("{k}: QWE {v:.6}"),
        }
    }
}

fn cmd_generate(c: &Common, series: Option<usize>, periods: Option<usize>) -> Result<()> {
    let mut cfg: SyntheticConfig = load_config(c.config.as_deref())?;
    if let Some(s) = series {
        cfg.series = s;
    }
    if let Some(p) = periods {
        cfg.periods = p;
    }
    cfg.validate()?;
    write_json(&c.out.join("effective_config.json"), &cfg)?;
    let panel = generate_panel(&cfg, c.seed)?;
    write_panel_csv(&panel, &c.out)?;
    let files = [
        csv_io::TARGET_FILE,
        csv_io::TIME_FILE,
        csv_io::STATIC_FILE,
        csv_io::FUTURE_FILE,
    ]
    .into_iter()
    .filter(|f| c.out.join(f).exists())
    .map(String::from)
    .collect();
    write_manifest(&c.out, "generate", c.seed, &cfg, files)?;
    println!(
        "wrote {} series x {} periods to {}",
        cfg.series,
        cfg.periods,
        c.out.display()
    );
    Ok(())
}

fn cmd_pretrain(c: &Common, steps: Option<usize>) -> Result<()> {
    let mut job: PretrainJob = load_config(c.config.as_deref())?;
    if let Some(s) = steps {
        job.toy.steps = s;
    }
    write_json(&c.out.join("effective_config.json"), &job)?;
    let outcome = pretrain_toy_lm(&job.toy, job.backbone, &job.stack.stack(job.d_llm), c.seed)?;
    ptwf::save(&outcome.backbone, &c.out.join("backbone.ptwf"))?;
    write_json(
        &c.out.join("pretrain.json"),
        &serde_json::json!({
            "losses": outcome.losses,
            "final_loss": outcome.final_loss,
            "unigram_entropy": outcome.unigram_entropy,
            "accuracy": outcome.accuracy,
        }),
    )?;
    println!(
        "cross-entropy {:.4} (unigram {:.4}), accuracy {:.3}",
        outcome.final_loss, outcome.unigram_entropy, outcome.accuracy
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    c: &Common,
    data: &Path,
    backbone: Option<&Path>,
    epochs: Option<usize>,
    lr: Option<f64>,
    window: Option<usize>,
    stride: Option<usize>,
) -> Result<()> {
    let mut job: TrainJob = load_config(c.config.as_deref())?;
    job.train.seed = c.seed;
    if let Some(e) = epochs {
        job.train.epochs = e;
    }
    if let Some(l) = lr {
        job.train.lr = l;
    }
    if window.is_some() || stride.is_some() {
        let ModelConfig::Patched(spec) = &mut job.model else {
            return Err(Error::config("model.patch", "patch overrides need a patched model"));
        };
        spec.patch.window = window.unwrap_or(spec.patch.window);
        spec.patch.stride = stride.unwrap_or(spec.patch.stride);
    }
    job.train.validate()?;
    write_json(&c.out.join("effective_config.json"), &job)?;
    let (panel, (train_task, test_task)) = prepare(data, &job)?;
    let dims = InputDims::for_task(&panel.model_view, &train_task);
    let backbone = backbone.map(ptwf::load).transpose()?;
    let mut model = Model::build(job.model.clone(), dims, backbone.as_ref(), c.seed)?;
    let history = train(
        &mut model,
        &panel,
        &train_task,
        &test_task,
        &job.train,
        Some(&c.out.join("checkpoints")),
    )?;
    ptwf::save(&model.params, &c.out.join("final.ptwf"))?;
    write_json(&c.out.join("model.json"), &ModelCard { job: job.clone(), dims })?;
    write_json(&c.out.join("history.json"), &history)?;
    let ev = evaluate(&model, &panel, &test_task, 256)?;
    write_json(&c.out.join("eval.json"), &ev)?;
    let (total, trainable) = model.params.parameter_count();
    println!("{}: {trainable} of {total} parameters trained", model.config.label());
    print_eval(&ev);
    Ok(())
}

fn cmd_evaluate(
    c: &Common,
    data: &Path,
    model_dir: &Path,
    weights: Option<&Path>,
    baseline: Option<&Path>,
) -> Result<()> {
    let card: ModelCard = read_json(&model_dir.join("model.json"))?;
    let weights = weights.map_or_else(|| model_dir.join("final.ptwf"), Path::to_path_buf);
    write_json(
        &c.out.join("effective_config.json"),
        &serde_json::json!({ "model": card, "weights": weights, "baseline": baseline }),
    )?;
    let (panel, (train_task, test_task)) = prepare(data, &card.job)?;
    let dims = InputDims::for_task(&panel.model_view, &train_task);
    if dims != card.dims {
        return Err(Error::shape(format!(
            "panel gives input dims {dims:?}, model expects {:?}",
            card.dims
        )));
    }
    let model = Model::from_params(card.job.model.clone(), dims, ptwf::load(&weights)?)?;
    let mut ev = evaluate(&model, &panel, &test_task, 256)?;
    if let Some(b) = baseline {
        let base: EvalReport = read_json(b)?;
        ev.set_baseline(&b.display().to_string(), &base);
    }
    write_json(&c.out.join("eval.json"), &ev)?;
    let mut rows = String::from("quantile,qwe,ratio\n");
    for (k, v) in &ev.qwe {
        let ratio = ev.ratios.get(k).map(|r| format!("{r:.3}")).unwrap_or_default();
        rows.push_str(&format!("{k},{v},{ratio}\n"));
    }
    write_atomic(&c.out.join("ratios.csv"), rows.as_bytes())?;
    print_eval(&ev);
    Ok(())
}

fn weight_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "ptwf"))
                .collect();
            files.sort_by_key(|f| {
                let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                let num = stem.rsplit('_').next().and_then(|n| n.parse::<u64>().ok());
                (num.unwrap_or(u64::MAX), stem)
            });
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::config("weights", "no .ptwf files found"));
    }
    Ok(out)
}

fn cmd_diagnose(c: &Common, weights: &[PathBuf], all_layers: bool, ks: Option<f64>) -> Result<()> {
    let mut opts: DiagnoseOptions = load_config(c.config.as_deref())?;
    if let Some(k) = ks {
        opts.ks_threshold = k;
    }
    let filter = if all_layers {
        LayerFilter::all()
    } else {
        LayerFilter::default()
    };
    write_json(
        &c.out.join("effective_config.json"),
        &serde_json::json!({ "options": opts, "filter": filter, "weights": weights }),
    )?;
    for path in weight_files(weights)? {
        let store = ptwf::load(&path)?;
        let report = diagnose(&store, &filter, &opts)?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("weights")
            .to_string();
        write_json(&c.out.join(format!("{stem}.esd.json")), &report)?;
        for layer in &report.layers {
            let base = c.out.join("ccdf").join(format!("{stem}.{}", layer.esd.name));
            write_atomic(&base.with_extension("csv"), &ccdf_csv(&layer.esd.eigenvalues)?)?;
        }
        let alpha = report.alpha_metric.map_or("n/a".to_string(), |a| format!("{a:.3}"));
        println!(
            "{stem}: {} layers, {} included, alpha metric {alpha}, mean stable rank {:.3}",
            report.layers.len(),
            report.included.len(),
            report.mean_stable_rank
        );
    }
    Ok(())
}

fn cmd_suite(c: &Common, epochs: Option<usize>) -> Result<()> {
    let mut spec = match &c.config {
        Some(p) => read_json(p)?,
        None => ExperimentSpec::canonical(c.seed),
    };
    spec.master_seed = c.seed;
    if let Some(e) = epochs {
        for r in &mut spec.runs {
            r.train.epochs = e;
        }
    }
    spec.validate()?;
    write_json(&c.out.join("effective_config.json"), &spec)?;
    let report = run_suite_to(&spec, &c.out)?;
    println!(
        "{:<20} {:>7} {:>6} {:>9} {:>9}",
        "run", "future", "epochs", "P50", "P90"
    );
    let fmt = |v: Option<f64>| v.map_or("failed".to_string(), |v| format!("{v:.3}"));
    for row in &report.table {
        println!(
            "{:<20} {:>7} {:>6} {:>9} {:>9}",
            row.architecture,
            row.future_info,
            row.epochs,
            fmt(row.p50_ratio),
            fmt(row.p90_ratio)
        );
    }
    let failed = report.failed();
    if !failed.is_empty() {
        return Err(Error::Training(format!("runs failed: {}", failed.join(", "))));
    }
    Ok(())
}

fn cmd_plot(c: &Common, reports: &[PathBuf]) -> Result<()> {
    std::fs::create_dir_all(&c.out).map_err(|e| Error::io(&c.out, e))?;
    for path in reports {
        let value: serde_json::Value = read_json(path)?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("report")
            .to_string();
        if value.get("loss_by_alpha").is_some() {
            let points: Vec<crate::experiments::LossAlphaPoint> =
                serde_json::from_value(value["loss_by_alpha"].clone()).map_err(|e| Error::Render(e.to_string()))?;
            for (metric, name) in [(ColorMetric::Alpha, "alpha"), (ColorMetric::StableRank, "stable_rank")] {
                let svg = loss_svg(&points, metric)?;
                write_atomic(&c.out.join(format!("{stem}.loss_by_{name}.svg")), svg.as_bytes())?;
            }
        } else if value.get("layers").is_some() {
            let report: EsdReport = serde_json::from_value(value).map_err(|e| Error::Render(e.to_string()))?;
            for layer in &report.layers {
                let svg = ccdf_svg(layer)?;
                write_atomic(&c.out.join(format!("{stem}.{}.svg", layer.esd.name)), svg.as_bytes())?;
            }
        } else if value.get("epochs").is_some() {
            let history: TrainHistory = serde_json::from_value(value).map_err(|e| Error::Render(e.to_string()))?;
            let points: Vec<_> = history
                .epochs
                .iter()
                .map(|e| crate::experiments::LossAlphaPoint {
                    run: stem.clone(),
                    epoch: e.epoch,
                    train_loss: e.train_loss,
                    test_p50: e.test_qwe.get(&quantile_label(0.5)).copied(),
                    test_p90: e.test_qwe.get(&quantile_label(0.9)).copied(),
                    alpha_metric: None,
                    mean_stable_rank: f64::NAN,
                })
                .collect();
            write_atomic(
                &c.out.join(format!("{stem}.loss.svg")),
                loss_svg(&points, ColorMetric::Alpha)?.as_bytes(),
            )?;
        } else {
            return Err(Error::Render(format!(
                "{} is not a suite, ESD, or history report",
                path.display()
            )));
        }
    }
    println!("plots written to {}", c.out.display());
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(THREADS_ENV, format!("must be a positive integer, got `{v}`")))?;
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Executes a parsed command.
pub fn execute(cli: &Cli) -> Result<()> {
    configure_threads()?;
    let c = cli.command.common();
    std::fs::create_dir_all(&c.out).map_err(|e| Error::io(&c.out, e))?;
    match &cli.command {
        Command::Generate { series, periods, .. } => cmd_generate(c, *series, *periods),
        Command::Pretrain { steps, .. } => cmd_pretrain(c, *steps),
        Command::Train {
            data,
            backbone,
            epochs,
            lr,
            window,
            stride,
            ..
        } => cmd_train(c, data, backbone.as_deref(), *epochs, *lr, *window, *stride),
        Command::Evaluate {
            data,
            model,
            weights,
            baseline,
            ..
        } => cmd_evaluate(c, data, model, weights.as_deref(), baseline.as_deref()),
        Command::Diagnose {
            weights,
            all_layers,
            ks_threshold,
            ..
        } => cmd_diagnose(c, weights, *all_layers, *ks_threshold),
        Command::Suite { epochs, .. } => cmd_suite(c, *epochs),
        Command::Plot { report, .. } => cmd_plot(c, report),
    }
}

/// Exit code for a result.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_validation() => 2,
        Err(_) => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn parser_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn unknown_flags_are_rejected() {
        assert!(Cli::try_parse_from(["patchcast", "generate", "--bogus"]).is_err());
    }

    #[test]
    fn validation_maps_to_two() {
        assert_eq!(exit_code(&Err(Error::config("x", "y"))), 2);
        assert_eq!(exit_code(&Err(Error::Training("z".into()))), 1);
        assert_eq!(exit_code(&Ok(())), 0);
    }

    #[test]
    fn job_defaults_round_trip() {
        let job = TrainJob::default();
        let back: TrainJob = serde_json::from_str(&serde_json::to_string(&job).unwrap()).unwrap();
        assert_eq!(back, job);
    }
}
