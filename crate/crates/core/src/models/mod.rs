//! Forecasting architectures.
//!
//! A patched model runs
//!
//! ```text
//! series [B, C, 1+d], statics [B, m]
//!   → multivariate patches [B, p, w(1+d+m)]
//!   → adapter            [B, p, d_llm]
//!   → backbone (optional, positional table added first)
//!   → expansion to [B, C, d_llm] (optional)
//!   → flatten, then append flattened future features (optional)
//!   → output block       [B, |H|·|Q|]  → [B, |H|, |Q|]
//! ```
//!
//! Channel 0 of the series input is the transformed past target; the time
//! features follow it.

mod mqcnn;
mod pretrain;

pub use mqcnn::MqcnnConfig;
pub use pretrain::{pretrain_toy_lm, ChainKind, PretrainOutcome, ToyLmConfig};

use serde::{Deserialize, Serialize};

use crate::dataset::{ForecastTask, PanelDataset, SupervisedBatch};
use crate::error::{Error, Result};
use crate::nn::freeze::apply_freeze;
use crate::nn::graph::Graph;
use crate::nn::layers::{AdapterBlock, AdapterKind};
use crate::nn::params::{ParamDecl, ParamStore};
use crate::nn::tape::Var;
use crate::nn::tensor::Tensor;
use crate::nn::transformer::{backbone_decls, backbone_forward, BackboneKind, StackConfig};
use crate::nn::FreezePolicy;
use crate::patching::{expansion_index, multivariate_patch, num_patches, PatchConfig};

pub const ADAPTER_PREFIX: &str = "adapter";
pub const OUTPUT_PREFIX: &str = "output";
pub const BACKBONE_PREFIX: &str = "backbone.";

/// Transformer hyperparameters other than the hidden width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockConfig {
    pub heads: usize,
    pub d_ff: usize,
    pub blocks: usize,
    pub max_positions: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig {
            heads: 4,
            d_ff: 256,
            blocks: 2,
            max_positions: 16,
        }
    }
}

impl BlockConfig {
    pub fn stack(&self, d_model: usize) -> StackConfig {
        StackConfig {
            d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            blocks: self.blocks,
            max_positions: self.max_positions,
        }
    }
}

/// Adapter, optional backbone, and output block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    /// `None` wires the adapter straight into the output block.
    pub backbone: Option<BackboneKind>,
    pub adapter: AdapterKind,
    pub output: AdapterKind,
    /// Expand patch states back to one state per context step before the
    /// output block.
    pub expand_to_series: bool,
    pub freeze: FreezePolicy,
    pub use_future: bool,
    pub patch: PatchConfig,
    pub d_llm: usize,
    pub adapter_hidden: usize,
    pub output_hidden: usize,
    pub stack: BlockConfig,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            backbone: Some(BackboneKind::DecoderOnly),
            adapter: AdapterKind::Linear,
            output: AdapterKind::Linear,
            expand_to_series: false,
            freeze: FreezePolicy::AdapterAndLayerNorms,
            use_future: true,
            patch: PatchConfig::default(),
            d_llm: 64,
            adapter_hidden: 64,
            output_hidden: 64,
            stack: BlockConfig::default(),
        }
    }
}

impl ModelSpec {
    /// Linear patch embedding, expansion to the series length, linear head.
    pub fn linear_only() -> Self {
        ModelSpec {
            backbone: None,
            expand_to_series: true,
            ..ModelSpec::default()
        }
    }

    pub fn mlp_only() -> Self {
        ModelSpec {
            backbone: None,
            adapter: AdapterKind::Mlp2,
            output: AdapterKind::Mlp2,
            ..ModelSpec::default()
        }
    }

    pub fn no_decoder() -> Self {
        ModelSpec {
            backbone: None,
            ..ModelSpec::default()
        }
    }

    pub fn fpt(adapter: AdapterKind, freeze: FreezePolicy) -> Self {
        ModelSpec {
            adapter,
            freeze,
            ..ModelSpec::default()
        }
    }

    pub fn adapter_block(&self, dims: &InputDims) -> AdapterBlock {
        let input = self.patch.window * (dims.time_channels + dims.static_channels);
        match self.adapter {
            AdapterKind::Linear => AdapterBlock::linear(input, self.d_llm),
            AdapterKind::Mlp2 => AdapterBlock::mlp2(input, self.adapter_hidden, self.d_llm),
        }
    }

    /// Number of hidden states handed to the output block.
    pub fn states(&self, dims: &InputDims) -> Result<usize> {
        if self.expand_to_series {
            Ok(dims.context)
        } else {
            num_patches(dims.context, &self.patch)
        }
    }

    pub fn output_block(&self, dims: &InputDims) -> Result<AdapterBlock> {
        let mut input = self.states(dims)? * self.d_llm;
        if self.use_future {
            input += dims.horizons * dims.future_channels;
        }
        let out = dims.horizons * dims.quantiles;
        Ok(match self.output {
            AdapterKind::Linear => AdapterBlock::linear(input, out),
            AdapterKind::Mlp2 => AdapterBlock::mlp2(input, self.output_hidden, out),
        })
    }

    pub fn validate(&self, dims: &InputDims) -> Result<()> {
        self.patch.validate()?;
        let p = num_patches(dims.context, &self.patch)?;
        if self.d_llm == 0 {
            return Err(Error::config("model.d_llm", "must be positive"));
        }
        if self.adapter == AdapterKind::Mlp2 && self.adapter_hidden == 0 {
            return Err(Error::config("model.adapter_hidden", "must be positive"));
        }
        if self.output == AdapterKind::Mlp2 && self.output_hidden == 0 {
            return Err(Error::config("model.output_hidden", "must be positive"));
        }
        if self.backbone.is_some() {
            let stack = self.stack.stack(self.d_llm);
            stack.validate()?;
            if stack.max_positions < p {
                return Err(Error::config(
                    "model.stack.max_positions",
                    format!("{} positions cannot hold {p} patches", stack.max_positions),
                ));
            }
        }
        Ok(())
    }
}

/// Architecture of a forecaster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Patched(ModelSpec),
    Mqcnn(MqcnnConfig),
}

impl ModelConfig {
    pub fn validate(&self, dims: &InputDims) -> Result<()> {
        match self {
            ModelConfig::Patched(s) => s.validate(dims),
            ModelConfig::Mqcnn(c) => c.validate(),
        }
    }

    pub fn decls(&self, dims: &InputDims) -> Result<Vec<ParamDecl>> {
        self.validate(dims)?;
        match self {
            ModelConfig::Patched(s) => {
                let mut out = s.adapter_block(dims).decls(ADAPTER_PREFIX);
                if let Some(kind) = s.backbone {
                    out.extend(backbone_decls(kind, &s.stack.stack(s.d_llm)));
                }
                out.extend(s.output_block(dims)?.decls(OUTPUT_PREFIX));
                Ok(out)
            }
            ModelConfig::Mqcnn(c) => Ok(c.decls(dims)),
        }
    }

    pub fn backbone(&self) -> Option<BackboneKind> {
        match self {
            ModelConfig::Patched(s) => s.backbone,
            ModelConfig::Mqcnn(_) => None,
        }
    }

    pub fn uses_future(&self) -> bool {
        match self {
            ModelConfig::Patched(s) => s.use_future,
            ModelConfig::Mqcnn(c) => c.use_future,
        }
    }

    /// Short human-readable architecture label.
    pub fn label(&self) -> String {
        match self {
            ModelConfig::Mqcnn(_) => "MQCNN-lite".into(),
            ModelConfig::Patched(s) => {
                let kind = |k: AdapterKind| match k {
                    AdapterKind::Linear => "Linear",
                    AdapterKind::Mlp2 => "MLP",
                };
                match s.backbone {
                    None => format!("{} adapter, no backbone, {} output", kind(s.adapter), kind(s.output)),
                    Some(b) => format!(
                        "{} adapter, {} backbone ({}), {} output",
                        kind(s.adapter),
                        snake(b),
                        snake(s.freeze),
                        kind(s.output)
                    ),
                }
            }
        }
    }
}

fn snake(v: impl Serialize) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Input widths a model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub context: usize,
    pub horizons: usize,
    pub quantiles: usize,
    /// `1 + d`: the past target plus the time features.
    pub time_channels: usize,
    pub static_channels: usize,
    pub future_channels: usize,
}

impl InputDims {
    pub fn for_task(ds: &PanelDataset, task: &ForecastTask) -> Self {
        InputDims {
            context: task.context,
            horizons: task.horizons.len(),
            quantiles: task.quantiles.len(),
            time_channels: 1 + ds.n_time_features(),
            static_channels: ds.n_static_features(),
            future_channels: ds.n_future_features(),
        }
    }
}

/// Model-ready tensors for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInputs {
    /// `[B, C, 1+d]`.
    pub series: Tensor,
    /// `[B, m]`.
    pub statics: Tensor,
    /// `[B, |H|, d_f]`.
    pub future: Tensor,
}

impl ModelInputs {
    pub fn from_batch(batch: &SupervisedBatch) -> Result<Self> {
        let (b, c) = (batch.batch_size(), batch.context);
        let d = batch.past_time_feats.shape()[2];
        let mut series = Vec::with_capacity(b * c * (d + 1));
        for r in 0..b * c {
            series.push(batch.past_target.data()[r]);
            series.extend_from_slice(&batch.past_time_feats.data()[r * d..(r + 1) * d]);
        }
        Ok(ModelInputs {
            series: Tensor::from_vec(&[b, c, d + 1], series)?,
            statics: batch.statics.clone(),
            future: batch.future_feats.clone(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.series.shape()[0]
    }
}

/// Quantile forecasts `[B, |H|, |Q|]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastGrid {
    pub values: Tensor,
}

/// A forecaster: its architecture, input widths, and weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub dims: InputDims,
    pub params: ParamStore,
}

impl Model {
    /// Initializes every tensor from `seed`, copies `backbone.*` tensors
    /// from `backbone` when given, then applies the freeze policy.
    pub fn build(config: ModelConfig, dims: InputDims, backbone: Option<&ParamStore>, seed: u64) -> Result<Self> {
        let decls = config.decls(&dims)?;
        let mut params = ParamStore::init(&decls, seed)?;
        if let Some(src) = backbone {
            if config.backbone().is_none() {
                return Err(Error::config(
                    "model.backbone",
                    "weights supplied for a model without a backbone",
                ));
            }
            params.load_prefix(src, BACKBONE_PREFIX)?;
        }
        if let ModelConfig::Patched(s) = &config {
            apply_freeze(&mut params, s.freeze)?;
        }
        Ok(Model { config, dims, params })
    }

    /// Wraps existing weights, checking that every declared tensor is present
    /// with the declared shape.
    pub fn from_params(config: ModelConfig, dims: InputDims, params: ParamStore) -> Result<Self> {
        let decls = config.decls(&dims)?;
        if decls.len() != params.len() {
            return Err(Error::WeightFile(format!(
                "model declares {} tensors, weights hold {}",
                decls.len(),
                params.len()
            )));
        }
        for d in &decls {
            let t = params
                .tensor(&d.name)
                .map_err(|_| Error::WeightFile(format!("missing tensor {}", d.name)))?;
            if t.shape() != d.shape.as_slice() {
                return Err(Error::WeightFile(format!(
                    "{}: shape {:?}, expected {:?}",
                    d.name,
                    t.shape(),
                    d.shape
                )));
            }
        }
        Ok(Model { config, dims, params })
    }

    /// Builds the forward graph; returns `[B, |H|, |Q|]`.
    pub fn forward(&self, g: &mut Graph<'_>, inputs: &ModelInputs) -> Result<Var> {
        let (b, c, k) = match inputs.series.shape() {
            &[b, c, k] => (b, c, k),
            s => return Err(Error::shape(format!("series input must be [B, C, k], got {s:?}"))),
        };
        let dims = &self.dims;
        if c != dims.context
            || k != dims.time_channels
            || inputs.statics.shape() != [b, dims.static_channels]
            || inputs.future.shape() != [b, dims.horizons, dims.future_channels]
        {
            return Err(Error::shape(format!(
                "inputs {:?} / {:?} / {:?} do not match model dims {dims:?}",
                inputs.series.shape(),
                inputs.statics.shape(),
                inputs.future.shape()
            )));
        }
        match &self.config {
            ModelConfig::Patched(s) => forward_patched(s, dims, g, inputs),
            ModelConfig::Mqcnn(cfg) => cfg.forward(dims, g, inputs),
        }
    }

    /// Forecasts in model space (before the inverse target transform).
    pub fn forecast(&self, inputs: &ModelInputs) -> Result<ForecastGrid> {
        let mut g = Graph::new(&self.params);
        let out = self.forward(&mut g, inputs)?;
        let values = g.value(out).clone();
        if !values.all_finite() {
            return Err(Error::Evaluation("forecast contains non-finite values".into()));
        }
        Ok(ForecastGrid { values })
    }
}

fn forward_patched(spec: &ModelSpec, dims: &InputDims, g: &mut Graph<'_>, inputs: &ModelInputs) -> Result<Var> {
    let b = inputs.batch_size();
    let patched = multivariate_patch(&inputs.series, &inputs.statics, &spec.patch)?;
    let x = g.input(patched.patches);
    let mut h = spec.adapter_block(dims).forward(g, ADAPTER_PREFIX, x)?;
    if let Some(kind) = spec.backbone {
        h = backbone_forward(g, kind, &spec.stack.stack(spec.d_llm), h)?;
    }
    if spec.expand_to_series {
        let index = expansion_index(dims.context, &spec.patch)?;
        h = g.gather_time(h, &index)?;
    }
    let states = spec.states(dims)?;
    let mut flat = g.reshape(h, &[b, states * spec.d_llm])?;
    if spec.use_future {
        let width = dims.horizons * dims.future_channels;
        let future = g.input(inputs.future.clone().reshape(&[b, width])?);
        flat = g.concat(&[flat, future])?;
    }
    let out = spec.output_block(dims)?.forward(g, OUTPUT_PREFIX, flat)?;
    g.reshape(out, &[b, dims.horizons, dims.quantiles])
}
