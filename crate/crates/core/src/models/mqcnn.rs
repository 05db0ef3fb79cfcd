//! Reduced multi-horizon quantile CNN.
//!
//! Stacked dilated causal convolutions encode the series and are read at
//! the last context step. A linear layer encodes the statics. One
//! horizon-agnostic MLP mixes both, and a small MLP per horizon maps the
//! mixed state (plus that horizon's future features) to `|Q|` quantiles.

use serde::{Deserialize, Serialize};

use super::{InputDims, ModelInputs};
use crate::error::{Error, Result};
use crate::nn::graph::Graph;
use crate::nn::layers::{conv1d, conv1d_decls, linear, linear_decls, mlp2, mlp2_decls, Activation};
use crate::nn::params::ParamDecl;
use crate::nn::tape::Var;
use crate::nn::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MqcnnConfig {
    pub channels: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
    pub static_width: usize,
    pub agnostic_width: usize,
    pub head_hidden: usize,
    pub use_future: bool,
}

impl Default for MqcnnConfig {
    fn default() -> Self {
        MqcnnConfig {
            channels: 16,
            kernel: 2,
            dilations: vec![1, 2, 4, 8],
            static_width: 8,
            agnostic_width: 32,
            head_hidden: 16,
            use_future: true,
        }
    }
}

impl MqcnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(Error::config("model.dilations", "need at least one positive dilation"));
        }
        for (field, v) in [
            ("model.channels", self.channels),
            ("model.kernel", self.kernel),
            ("model.static_width", self.static_width),
            ("model.agnostic_width", self.agnostic_width),
            ("model.head_hidden", self.head_hidden),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        Ok(())
    }

    /// Number of past steps that can influence the encoding.
    pub fn receptive_field(&self) -> usize {
        1 + self.dilations.iter().map(|d| (self.kernel - 1) * d).sum::<usize>()
    }

    fn static_encoded(&self, dims: &InputDims) -> usize {
        if dims.static_channels > 0 {
            self.static_width
        } else {
            0
        }
    }

    pub fn decls(&self, dims: &InputDims) -> Vec<ParamDecl> {
        let mut out = Vec::new();
        let mut d_in = dims.time_channels;
        for i in 0..self.dilations.len() {
            out.extend(conv1d_decls(
                &format!("mqcnn.conv.{i}"),
                self.kernel,
                d_in,
                self.channels,
            ));
            d_in = self.channels;
        }
        if dims.static_channels > 0 {
            out.extend(linear_decls("mqcnn.static", dims.static_channels, self.static_width));
        }
        let mixed = self.channels + self.static_encoded(dims);
        out.extend(mlp2_decls(
            "mqcnn.agnostic",
            mixed,
            self.agnostic_width,
            self.agnostic_width,
        ));
        let future = if self.use_future { dims.future_channels } else { 0 };
        for h in 0..dims.horizons {
            out.extend(mlp2_decls(
                &format!("mqcnn.horizon.{h}"),
                self.agnostic_width + future,
                self.head_hidden,
                dims.quantiles,
            ));
        }
        out
    }

    /// Encoding of the series at the last context step, `[B, channels]`.
    pub fn encode(&self, g: &mut Graph<'_>, series: Var) -> Result<Var> {
        let mut h = series;
        let last = self.dilations.len() - 1;
        for (i, &dil) in self.dilations.iter().enumerate() {
            h = conv1d(g, &format!("mqcnn.conv.{i}"), h, dil)?;
            if i < last {
                h = g.relu(h);
            }
        }
        let c = g.shape(h)[1];
        let b = g.shape(h)[0];
        let at = g.gather_time(h, &[c - 1])?;
        g.reshape(at, &[b, self.channels])
    }

    pub(super) fn forward(&self, dims: &InputDims, g: &mut Graph<'_>, inputs: &ModelInputs) -> Result<Var> {
        let b = inputs.batch_size();
        let series = g.input(inputs.series.clone());
        let mut parts = vec![self.encode(g, series)?];
        if dims.static_channels > 0 {
            let s = g.input(inputs.statics.clone());
            parts.push(linear(g, "mqcnn.static", s)?);
        }
        let mixed = g.concat(&parts)?;
        let agnostic = mlp2(g, "mqcnn.agnostic", mixed, Activation::Relu)?;
        let df = dims.future_channels;
        let mut heads = Vec::with_capacity(dims.horizons);
        for h in 0..dims.horizons {
            let input = if self.use_future && df > 0 {
                let mut f = Vec::with_capacity(b * df);
                for r in 0..b {
                    let at = (r * dims.horizons + h) * df;
                    f.extend_from_slice(&inputs.future.data()[at..at + df]);
                }
                let f = g.input(Tensor::from_vec(&[b, df], f)?);
                g.concat(&[agnostic, f])?
            } else {
                agnostic
            };
            heads.push(mlp2(g, &format!("mqcnn.horizon.{h}"), input, Activation::Relu)?);
        }
        let all = g.concat(&heads)?;
        g.reshape(all, &[b, dims.horizons, dims.quantiles])
    }
}
