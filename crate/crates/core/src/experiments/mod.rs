//! Seeded comparison suites on synthetic panels.
//!
//! A suite generates one panel, pretrains one backbone per distinct
//! backbone shape, then trains and evaluates each run in order. Every source
//! of randomness is a child seed of the master seed (see [`child_seed`]), so
//! a suite is reproducible bit for bit.

mod artifacts;

pub use artifacts::{ccdf_csv, write_artifacts};

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{generate_panel, PreparedPanel, SyntheticConfig, TargetTransform, TaskConfig};
use crate::error::{Error, Result};
use crate::htsr::{diagnose, DiagnoseOptions, EsdReport, LayerFilter};
use crate::models::{pretrain_toy_lm, InputDims, Model, ModelConfig, ModelSpec, PretrainOutcome, ToyLmConfig};
use crate::nn::layers::AdapterKind;
use crate::nn::params::ParamStore;
use crate::nn::FreezePolicy;
use crate::training::{evaluate, train_observed, EvalReport, TrainConfig, TrainHistory};

/// First eight bytes (little endian) of `SHA-256(master_le ‖ name)`.
pub fn child_seed(master: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub name: String,
    pub model: ModelConfig,
    /// The `seed` field is replaced by the run's child seed.
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub master_seed: u64,
    #[serde(default)]
    pub data: SyntheticConfig,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub transform: TargetTransform,
    #[serde(default)]
    pub pretrain: ToyLmConfig,
    #[serde(default)]
    pub diagnose: DiagnoseOptions,
    #[serde(default)]
    pub layer_filter: LayerFilter,
    pub baseline: String,
    pub runs: Vec<RunSpec>,
}

/// Names of the canonical runs, in table order.
pub const CANONICAL_RUNS: [&str; 6] = [
    "linear_only",
    "mlp_only",
    "no_decoder",
    "fpt_ln_linear",
    "fpt_ln_mlp",
    "fpt_frozen_linear",
];

impl ExperimentSpec {
    /// Six runs: the three backbone-free baselines and three runs on one
    /// pretrained decoder-only backbone (layer norms trainable with a linear
    /// or MLP adapter, and fully frozen with a linear adapter). Linear-Only
    /// is the baseline.
    pub fn canonical(master_seed: u64) -> Self {
        let train = TrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let runs = [
            ModelSpec::linear_only(),
            ModelSpec::mlp_only(),
            ModelSpec::no_decoder(),
            ModelSpec::fpt(AdapterKind::Linear, FreezePolicy::AdapterAndLayerNorms),
            ModelSpec::fpt(AdapterKind::Mlp2, FreezePolicy::AdapterAndLayerNorms),
            ModelSpec::fpt(AdapterKind::Linear, FreezePolicy::AdapterOnly),
        ]
        .into_iter()
        .zip(CANONICAL_RUNS)
        .map(|(spec, name)| RunSpec {
            name: name.into(),
            model: ModelConfig::Patched(spec),
            train: train.clone(),
        })
        .collect();
        ExperimentSpec {
            name: "canonical".into(),
            master_seed,
            data: SyntheticConfig::default(),
            task: TaskConfig::default(),
            transform: TargetTransform::Log1p,
            pretrain: ToyLmConfig::default(),
            diagnose: DiagnoseOptions::default(),
            layer_filter: LayerFilter::default(),
            baseline: CANONICAL_RUNS[0].into(),
            runs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs.is_empty() {
            return Err(Error::config("suite.runs", "at least one run is required"));
        }
        let mut seen = HashSet::new();
        for (i, r) in self.runs.iter().enumerate() {
            if r.name.is_empty() || r.name.contains(['/', '\\']) {
                return Err(Error::config(
                    format!("suite.runs[{i}].name"),
                    "must be a non-empty file name",
                ));
            }
            if !seen.insert(r.name.as_str()) {
                return Err(Error::config(
                    format!("suite.runs[{i}].name"),
                    format!("duplicate run `{}`", r.name),
                ));
            }
            r.train.validate()?;
        }
        if !seen.contains(self.baseline.as_str()) {
            return Err(Error::config(
                "suite.baseline",
                format!("no run named `{}`", self.baseline),
            ));
        }
        self.data.validate()?;
        self.task.train_test(self.data.periods)?;
        Ok(())
    }
}

/// Per-epoch spectral summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSpectrum {
    pub epoch: usize,
    pub alpha_metric: Option<f64>,
    pub mean_stable_rank: f64,
    pub included_layers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub name: String,
    pub architecture: String,
    pub use_future: bool,
    pub epochs: usize,
    pub seed: u64,
    pub total_params: usize,
    pub trainable_params: usize,
    pub eval: Option<EvalReport>,
    pub history: TrainHistory,
    /// Epoch 0 (initial weights) through the last completed epoch.
    pub spectra: Vec<EpochSpectrum>,
    pub failure: Option<String>,
    /// Full per-epoch reports; written as separate artifacts.
    #[serde(skip)]
    pub esd_reports: Vec<EsdReport>,
    #[serde(skip)]
    pub checkpoints: Vec<ParamStore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub architecture: String,
    pub future_info: bool,
    pub epochs: usize,
    pub p50_ratio: Option<f64>,
    pub p90_ratio: Option<f64>,
}

/// One point of a loss curve colored by a spectral metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossAlphaPoint {
    pub run: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub test_p50: Option<f64>,
    pub test_p90: Option<f64>,
    pub alpha_metric: Option<f64>,
    pub mean_stable_rank: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub name: String,
    pub master_seed: u64,
    pub baseline: String,
    pub pretraining: Vec<PretrainSummary>,
    pub runs: Vec<RunResult>,
    /// Rows in run order.
    pub table: Vec<TableRow>,
    /// Run names by ascending P50 ratio, then P90 ratio; failed runs last.
    pub ranking: Vec<String>,
    pub loss_by_alpha: Vec<LossAlphaPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub backbone: String,
    pub final_loss: f64,
    pub unigram_entropy: f64,
    pub accuracy: f64,
}

impl ComparisonReport {
    pub fn run(&self, name: &str) -> Option<&RunResult> {
        self.runs.iter().find(|r| r.name == name)
    }

    pub fn failed(&self) -> Vec<&str> {
        self.runs
            .iter()
            .filter(|r| r.failure.is_some())
            .map(|r| r.name.as_str())
            .collect()
    }
}

fn pretrain_key(spec: &ModelSpec) -> Option<String> {
    let kind = spec.backbone?;
    Some(serde_json::json!({ "kind": kind, "d_llm": spec.d_llm, "stack": spec.stack }).to_string())
}

fn run_one(
    run: &RunSpec,
    seed: u64,
    panel: &PreparedPanel,
    tasks: &(crate::dataset::ForecastTask, crate::dataset::ForecastTask),
    backbone: Option<&ParamStore>,
    spec: &ExperimentSpec,
    result: &mut RunResult,
) -> Result<()> {
    let dims = InputDims::for_task(&panel.model_view, &tasks.0);
    let mut model = Model::build(run.model.clone(), dims, backbone, seed)?;
    let (total, trainable) = model.params.parameter_count();
    result.total_params = total;
    result.trainable_params = trainable;
    let cfg = TrainConfig {
        seed: child_seed(seed, "shuffle"),
        checkpoint_every: 0,
        ..run.train.clone()
    };
    let mut reports = Vec::new();
    let mut checkpoints = Vec::new();
    let history = train_observed(&mut model, panel, &tasks.0, &tasks.1, &cfg, None, |epoch, m| {
        let report = diagnose(&m.params, &spec.layer_filter, &spec.diagnose)?;
        result.spectra.push(EpochSpectrum {
            epoch,
            alpha_metric: report.alpha_metric,
            mean_stable_rank: report.mean_stable_rank,
            included_layers: report.included.len(),
        });
        reports.push(report);
        checkpoints.push(m.params.clone());
        Ok(())
    });
    result.esd_reports = reports;
    result.checkpoints = checkpoints;
    result.history = history?;
    result.eval = Some(evaluate(&model, panel, &tasks.1, 256)?);
    Ok(())
}

/// Runs every entry of `spec` in order. A failing run is recorded with its
/// error and the suite continues; an invalid spec or a failing shared step
/// (data generation, pretraining) is an error.
pub fn run_suite(spec: &ExperimentSpec) -> Result<ComparisonReport> {
    spec.validate()?;
    let raw = generate_panel(&spec.data, child_seed(spec.master_seed, "data"))?;
    let tasks = spec.task.train_test(raw.n_periods())?;
    let fit_until = tasks.0.fcd_grid.last().copied().unwrap_or(spec.task.context);
    let panel = PreparedPanel::new(raw, spec.transform, fit_until)?;

    let mut backbones: BTreeMap<String, PretrainOutcome> = BTreeMap::new();
    for run in &spec.runs {
        let ModelConfig::Patched(ms) = &run.model else { continue };
        let (Some(key), Some(kind)) = (pretrain_key(ms), ms.backbone) else {
            continue;
        };
        if backbones.contains_key(&key) || !kind.is_pretrainable() {
            continue;
        }
        log::info!("pretraining {key}");
        let seed = child_seed(spec.master_seed, &format!("pretrain/{key}"));
        let outcome = pretrain_toy_lm(&spec.pretrain, kind, &ms.stack.stack(ms.d_llm), seed)?;
        backbones.insert(key, outcome);
    }

    let mut runs = Vec::with_capacity(spec.runs.len());
    for run in &spec.runs {
        log::info!("run {}", run.name);
        let seed = child_seed(spec.master_seed, &run.name);
        let backbone = match &run.model {
            ModelConfig::Patched(ms) => pretrain_key(ms).and_then(|k| backbones.get(&k)).map(|o| &o.backbone),
            ModelConfig::Mqcnn(_) => None,
        };
        let mut result = RunResult {
            name: run.name.clone(),
            architecture: run.model.label(),
            use_future: run.model.uses_future(),
            epochs: run.train.epochs,
            seed,
            total_params: 0,
            trainable_params: 0,
            eval: None,
            history: TrainHistory::default(),
            spectra: Vec::new(),
            failure: None,
            esd_reports: Vec::new(),
            checkpoints: Vec::new(),
        };
        if let Err(e) = run_one(run, seed, &panel, &tasks, backbone, spec, &mut result) {
            log::warn!("run {} failed: {e}", run.name);
            result.failure = Some(e.to_string());
        }
        runs.push(result);
    }

    let base = runs
        .iter()
        .find(|r| r.name == spec.baseline)
        .and_then(|r| r.eval.clone());
    if let Some(base) = &base {
        for r in &mut runs {
            if let Some(ev) = &mut r.eval {
                ev.set_baseline(&spec.baseline, base);
            }
        }
    }
    let ratio = |r: &RunResult, k: &str| r.eval.as_ref().and_then(|e| e.ratios.get(k).copied());
    let table = runs
        .iter()
        .map(|r| TableRow {
            architecture: r.name.clone(),
            future_info: r.use_future,
            epochs: r.epochs,
            p50_ratio: ratio(r, "P50"),
            p90_ratio: ratio(r, "P90"),
        })
        .collect::<Vec<_>>();
    let mut ranking: Vec<&TableRow> = table.iter().collect();
    let key = |v: Option<f64>| v.unwrap_or(f64::INFINITY);
    ranking.sort_by(|a, b| {
        key(a.p50_ratio)
            .total_cmp(&key(b.p50_ratio))
            .then(key(a.p90_ratio).total_cmp(&key(b.p90_ratio)))
    });
    let ranking = ranking.into_iter().map(|r| r.architecture.clone()).collect();
    let loss_by_alpha = runs
        .iter()
        .flat_map(|r| {
            r.history.epochs.iter().map(move |e| {
                let s = r.spectra.iter().find(|s| s.epoch == e.epoch);
                LossAlphaPoint {
                    run: r.name.clone(),
                    epoch: e.epoch,
                    train_loss: e.train_loss,
                    test_p50: e.test_qwe.get("P50").copied(),
                    test_p90: e.test_qwe.get("P90").copied(),
                    alpha_metric: s.and_then(|s| s.alpha_metric),
                    mean_stable_rank: s.map_or(f64::NAN, |s| s.mean_stable_rank),
                }
            })
        })
        .collect();
    Ok(ComparisonReport {
        name: spec.name.clone(),
        master_seed: spec.master_seed,
        baseline: spec.baseline.clone(),
        pretraining: backbones
            .iter()
            .map(|(k, o)| PretrainSummary {
                backbone: k.clone(),
                final_loss: o.final_loss,
                unigram_entropy: o.unigram_entropy,
                accuracy: o.accuracy,
            })
            .collect(),
        runs,
        table,
        ranking,
        loss_by_alpha,
    })
}

/// Runs the suite and writes its artifacts under `out`.
pub fn run_suite_to(spec: &ExperimentSpec, out: &Path) -> Result<ComparisonReport> {
    let report = run_suite(spec)?;
    write_artifacts(&report, spec, out)?;
    Ok(report)
}
