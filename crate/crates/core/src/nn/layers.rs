//! Dense layers built from tape ops.
//!
//! Each layer comes as a pair: a `*_decls` function listing the tensors it
//! owns under a name prefix, and a forward function that reads them from a
//! [`Graph`]. Naming is `<prefix>.weight`, `<prefix>.bias` for affine maps
//! and `<prefix>.gamma`, `<prefix>.beta` for layer norms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::Graph;
use crate::nn::params::{Init, ParamDecl};
use crate::nn::tape::{Mask, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
}

pub fn activate(g: &mut Graph<'_>, x: Var, act: Activation) -> Var {
    match act {
        Activation::Relu => g.relu(x),
        Activation::Gelu => g.gelu(x),
    }
}

pub fn linear_decls(prefix: &str, k_in: usize, k_out: usize) -> Vec<ParamDecl> {
    vec![
        ParamDecl::new(format!("{prefix}.weight"), &[k_out, k_in], Init::Normal),
        ParamDecl::new(format!("{prefix}.bias"), &[k_out], Init::Zeros),
    ]
}

pub fn linear(g: &mut Graph<'_>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(&format!("{prefix}.weight"))?;
    let b = g.param(&format!("{prefix}.bias"))?;
    g.linear(x, w, Some(b))
}

pub fn mlp2_decls(prefix: &str, k_in: usize, hidden: usize, k_out: usize) -> Vec<ParamDecl> {
    let mut d = linear_decls(&format!("{prefix}.fc1"), k_in, hidden);
    d.extend(linear_decls(&format!("{prefix}.fc2"), hidden, k_out));
    d
}

/// `W2·act(W1·x + b1) + b2`.
pub fn mlp2(g: &mut Graph<'_>, prefix: &str, x: Var, act: Activation) -> Result<Var> {
    let h = linear(g, &format!("{prefix}.fc1"), x)?;
    let h = activate(g, h, act);
    linear(g, &format!("{prefix}.fc2"), h)
}

pub fn layer_norm_decls(prefix: &str, k: usize) -> Vec<ParamDecl> {
    vec![
        ParamDecl::new(format!("{prefix}.gamma"), &[k], Init::Ones),
        ParamDecl::new(format!("{prefix}.beta"), &[k], Init::Zeros),
    ]
}

pub fn layer_norm(g: &mut Graph<'_>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param(&format!("{prefix}.gamma"))?;
    let beta = g.param(&format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta)
}

pub fn mha_decls(prefix: &str, d_model: usize) -> Vec<ParamDecl> {
    ["q", "k", "v", "o"]
        .iter()
        .flat_map(|p| linear_decls(&format!("{prefix}.{p}"), d_model, d_model))
        .collect()
}

/// Multi-head attention with query/key/value/output projections.
pub fn mha(g: &mut Graph<'_>, prefix: &str, x_q: Var, x_kv: Var, heads: usize, mask: Mask) -> Result<Var> {
    let d = *g.shape(x_q).last().expect("shape");
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(
            "heads",
            format!("hidden width {d} is not divisible by {heads} heads"),
        ));
    }
    let q = linear(g, &format!("{prefix}.q"), x_q)?;
    let k = linear(g, &format!("{prefix}.k"), x_kv)?;
    let v = linear(g, &format!("{prefix}.v"), x_kv)?;
    let a = g.attention(q, k, v, heads, mask)?;
    linear(g, &format!("{prefix}.o"), a)
}

/// Kernel stored as `[k_c, d_in, d_out]`.
pub fn conv1d_decls(prefix: &str, kernel: usize, d_in: usize, d_out: usize) -> Vec<ParamDecl> {
    vec![
        ParamDecl::new(format!("{prefix}.weight"), &[kernel, d_in, d_out], Init::Normal),
        ParamDecl::new(format!("{prefix}.bias"), &[d_out], Init::Zeros),
    ]
}

pub fn conv1d(g: &mut Graph<'_>, prefix: &str, x: Var, dilation: usize) -> Result<Var> {
    let w = g.param(&format!("{prefix}.weight"))?;
    let b = g.param(&format!("{prefix}.bias"))?;
    g.conv1d_causal(x, w, b, dilation)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Linear,
    Mlp2,
}

/// Learned map between patch space and the backbone hidden space (or from
/// hidden states to forecasts).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterBlock {
    pub kind: AdapterKind,
    pub input: usize,
    /// Hidden width; ignored for [`AdapterKind::Linear`].
    pub hidden: usize,
    pub output: usize,
    pub activation: Activation,
}

impl AdapterBlock {
    pub fn linear(input: usize, output: usize) -> Self {
        AdapterBlock {
            kind: AdapterKind::Linear,
            input,
            hidden: 0,
            output,
            activation: Activation::Relu,
        }
    }

    pub fn mlp2(input: usize, hidden: usize, output: usize) -> Self {
        AdapterBlock {
            kind: AdapterKind::Mlp2,
            input,
            hidden,
            output,
            activation: Activation::Relu,
        }
    }

    pub fn decls(&self, prefix: &str) -> Vec<ParamDecl> {
        match self.kind {
            AdapterKind::Linear => linear_decls(prefix, self.input, self.output),
            AdapterKind::Mlp2 => mlp2_decls(prefix, self.input, self.hidden, self.output),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, prefix: &str, x: Var) -> Result<Var> {
        let width = *g.shape(x).last().expect("shape");
        if width != self.input {
            return Err(Error::shape(format!(
                "adapter `{prefix}` expects width {}, got {width}",
                self.input
            )));
        }
        match self.kind {
            AdapterKind::Linear => linear(g, prefix, x),
            AdapterKind::Mlp2 => mlp2(g, prefix, x, self.activation),
        }
    }
}
