//! Pre-norm transformer blocks and the four backbone wirings.
//!
//! Tensor names:
//!
//! | kind              | stacks used                                   |
//! |-------------------|-----------------------------------------------|
//! | `DecoderOnly`     | `backbone.stack` (causal self-attention)      |
//! | `EncoderOnly`     | `backbone.encoder` (unmasked self-attention)  |
//! | `EncoderDecoder`  | `backbone.encoder` and `backbone.decoder`     |
//! | `DecoderOfEncDec` | `backbone.decoder` (self- and cross-attention) |
//!
//! Each stack owns a positional table `<stack>.pos` of shape
//! `[max_positions, d_model]` and blocks `<stack>.blocks.<i>` with sublayers
//! `ln1`, `attn`, optionally `ln_cross` and `cross`, then `ln2`, `mlp`.
//! There is no final layer norm, so a zero-block stack is the identity up to
//! the positional addition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::Graph;
use crate::nn::layers::{layer_norm, layer_norm_decls, mha, mha_decls, mlp2, mlp2_decls, Activation};
use crate::nn::params::{Init, ParamDecl};
use crate::nn::tape::{Mask, Var};

pub const DECODER_ONLY_PREFIX: &str = "backbone.stack";
pub const ENCODER_PREFIX: &str = "backbone.encoder";
pub const DECODER_PREFIX: &str = "backbone.decoder";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    DecoderOnly,
    EncoderOnly,
    EncoderDecoder,
    DecoderOfEncDec,
}

impl BackboneKind {
    /// Stack prefixes owned by this wiring, in forward order.
    pub fn stacks(self) -> &'static [&'static str] {
        match self {
            BackboneKind::DecoderOnly => &[DECODER_ONLY_PREFIX],
            BackboneKind::EncoderOnly => &[ENCODER_PREFIX],
            BackboneKind::EncoderDecoder => &[ENCODER_PREFIX, DECODER_PREFIX],
            BackboneKind::DecoderOfEncDec => &[DECODER_PREFIX],
        }
    }

    /// Whether the pretraining stage can produce weights for this wiring
    /// directly (the others are sub-stacks of an encoder-decoder).
    pub fn is_pretrainable(self) -> bool {
        matches!(self, BackboneKind::DecoderOnly | BackboneKind::EncoderDecoder)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub blocks: usize,
    pub max_positions: usize,
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model < 2 {
            return Err(Error::config("stack.d_model", "must be at least 2"));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config(
                "stack.heads",
                format!("{} does not divide d_model {}", self.heads, self.d_model),
            ));
        }
        if self.d_ff == 0 {
            return Err(Error::config("stack.d_ff", "must be positive"));
        }
        if self.max_positions == 0 {
            return Err(Error::config("stack.max_positions", "must be positive"));
        }
        Ok(())
    }
}

pub fn block_decls(prefix: &str, cfg: &StackConfig, cross: bool) -> Vec<ParamDecl> {
    let d = cfg.d_model;
    let mut out = layer_norm_decls(&format!("{prefix}.ln1"), d);
    out.extend(mha_decls(&format!("{prefix}.attn"), d));
    if cross {
        out.extend(layer_norm_decls(&format!("{prefix}.ln_cross"), d));
        out.extend(mha_decls(&format!("{prefix}.cross"), d));
    }
    out.extend(layer_norm_decls(&format!("{prefix}.ln2"), d));
    out.extend(mlp2_decls(&format!("{prefix}.mlp"), d, cfg.d_ff, d));
    out
}

/// `x + MHA(LN(x))`, optionally `+ CrossMHA(LN(·), context)`, then
/// `+ MLP(LN(·))`. Cross-attention is present iff `context` is given.
pub fn transformer_block(
    g: &mut Graph<'_>,
    prefix: &str,
    x: Var,
    context: Option<Var>,
    heads: usize,
    mask: Mask,
) -> Result<Var> {
    let h = layer_norm(g, &format!("{prefix}.ln1"), x)?;
    let a = mha(g, &format!("{prefix}.attn"), h, h, heads, mask)?;
    let mut x = g.add(x, a)?;
    if let Some(ctx) = context {
        let h = layer_norm(g, &format!("{prefix}.ln_cross"), x)?;
        let c = mha(g, &format!("{prefix}.cross"), h, ctx, heads, Mask::None)?;
        x = g.add(x, c)?;
    }
    let h = layer_norm(g, &format!("{prefix}.ln2"), x)?;
    let m = mlp2(g, &format!("{prefix}.mlp"), h, Activation::Gelu)?;
    g.add(x, m)
}

pub fn stack_decls(prefix: &str, cfg: &StackConfig, cross: bool) -> Vec<ParamDecl> {
    let mut out = vec![ParamDecl::new(
        format!("{prefix}.pos"),
        &[cfg.max_positions, cfg.d_model],
        Init::Normal,
    )];
    for i in 0..cfg.blocks {
        out.extend(block_decls(&format!("{prefix}.blocks.{i}"), cfg, cross));
    }
    out
}

/// Adds the positional table and runs every block of one stack.
pub fn run_stack(
    g: &mut Graph<'_>,
    prefix: &str,
    x: Var,
    context: Option<Var>,
    cfg: &StackConfig,
    mask: Mask,
) -> Result<Var> {
    let len = g.shape(x)[1];
    if len > cfg.max_positions {
        return Err(Error::shape(format!(
            "{len} positions exceed the positional table ({})",
            cfg.max_positions
        )));
    }
    let pos = g.param(&format!("{prefix}.pos"))?;
    let mut h = g.add_rows(x, pos)?;
    for i in 0..cfg.blocks {
        h = transformer_block(g, &format!("{prefix}.blocks.{i}"), h, context, cfg.heads, mask)?;
    }
    Ok(h)
}

pub fn backbone_decls(kind: BackboneKind, cfg: &StackConfig) -> Vec<ParamDecl> {
    kind.stacks()
        .iter()
        .flat_map(|&p| stack_decls(p, cfg, p == DECODER_PREFIX))
        .collect()
}

/// Runs the backbone on embedded tokens `x` (`[B, p, d_model]`).
///
/// The stand-alone decoder of an encoder-decoder cross-attends to its own
/// input embeddings, since no encoder output exists.
pub fn backbone_forward(g: &mut Graph<'_>, kind: BackboneKind, cfg: &StackConfig, x: Var) -> Result<Var> {
    match kind {
        BackboneKind::DecoderOnly => run_stack(g, DECODER_ONLY_PREFIX, x, None, cfg, Mask::Causal),
        BackboneKind::EncoderOnly => run_stack(g, ENCODER_PREFIX, x, None, cfg, Mask::None),
        BackboneKind::EncoderDecoder => {
            let enc = run_stack(g, ENCODER_PREFIX, x, None, cfg, Mask::None)?;
            run_stack(g, DECODER_PREFIX, x, Some(enc), cfg, Mask::Causal)
        }
        BackboneKind::DecoderOfEncDec => run_stack(g, DECODER_PREFIX, x, Some(x), cfg, Mask::Causal),
    }
}

/// Whether a backbone tensor belongs to a layer norm (`ln1`, `ln2`,
/// `ln_cross`).
pub fn is_layer_norm_name(name: &str) -> bool {
    name.split('.')
        .any(|seg| seg == "ln1" || seg == "ln2" || seg == "ln_cross")
}
