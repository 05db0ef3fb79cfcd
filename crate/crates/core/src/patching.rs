//! Multivariate patching.
//!
//! Static covariates are replicated onto every time step of the context,
//! the augmented series is left-padded by `s` steps, and strided windows of
//! length `w` are cut and flattened. Inside a patch the layout is time-major:
//! element `τ·(d+m) + f` holds channel `f` at window offset `τ`, with the
//! `d` time channels ahead of the `m` static channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::Graph;
use crate::nn::layers::AdapterBlock;
use crate::nn::params::ParamStore;
use crate::nn::tensor::Tensor;

/// What fills the `s` left-padding steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    /// Zeros in every channel.
    #[default]
    Zero,
    /// Copies of the first augmented time step.
    Repeat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    pub window: usize,
    pub stride: usize,
    #[serde(default)]
    pub pad: PadMode,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            window: 12,
            stride: 6,
            pad: PadMode::Zero,
        }
    }
}

impl PatchConfig {
    pub fn new(window: usize, stride: usize) -> Result<Self> {
        let cfg = PatchConfig {
            window,
            stride,
            pad: PadMode::Zero,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.stride > self.window {
            return Err(Error::config(
                "patch.stride",
                format!(
                    "need 1 <= stride <= window, got stride {} and window {}",
                    self.stride, self.window
                ),
            ));
        }
        Ok(())
    }
}

/// `floor((C + s − w)/s) + 1`.
pub fn num_patches(context: usize, cfg: &PatchConfig) -> Result<usize> {
    cfg.validate()?;
    if context + cfg.stride < cfg.window {
        return Err(Error::shape(format!(
            "context {context} plus stride {} is shorter than window {}",
            cfg.stride, cfg.window
        )));
    }
    Ok((context + cfg.stride - cfg.window) / cfg.stride + 1)
}

/// Patched input, `[B, p, w·(d+m)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchedTensor {
    pub patches: Tensor,
    pub num_patches: usize,
    pub batch: usize,
    pub context: usize,
    pub time_channels: usize,
    pub static_channels: usize,
    pub config: PatchConfig,
}

impl PatchedTensor {
    pub fn width(&self) -> usize {
        self.config.window * (self.time_channels + self.static_channels)
    }
}

/// Embedded patches, `[B, p, d_llm]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedPatches {
    pub hidden: Tensor,
}

/// Concat → pad → strided windows → flatten.
///
/// `past` is `[B, C, d]`, `statics` is `[B, m]`.
pub fn multivariate_patch(past: &Tensor, statics: &Tensor, cfg: &PatchConfig) -> Result<PatchedTensor> {
    if past.ndim() != 3 || statics.ndim() != 2 || past.shape()[0] != statics.shape()[0] {
        return Err(Error::shape(format!(
            "patching needs [B, C, d] and [B, m], got {:?} and {:?}",
            past.shape(),
            statics.shape()
        )));
    }
    let (b, c, d) = (past.shape()[0], past.shape()[1], past.shape()[2]);
    let m = statics.shape()[1];
    let p = num_patches(c, cfg)?;
    let (w, s) = (cfg.window, cfg.stride);
    let k = d + m;
    let padded_len = c + s;

    let mut out = Vec::with_capacity(b * p * w * k);
    let mut padded = vec![0.0; padded_len * k];
    for bi in 0..b {
        let st = &statics.data()[bi * m..(bi + 1) * m];
        for t in 0..c {
            let row = &mut padded[(s + t) * k..(s + t + 1) * k];
            row[..d].copy_from_slice(&past.data()[(bi * c + t) * d..(bi * c + t + 1) * d]);
            row[d..].copy_from_slice(st);
        }
        let (head, tail) = padded.split_at_mut(s * k);
        match cfg.pad {
            PadMode::Zero => head.fill(0.0),
            PadMode::Repeat => {
                for slot in head.chunks_mut(k) {
                    slot.copy_from_slice(&tail[..k]);
                }
            }
        }
        for j in 0..p {
            out.extend_from_slice(&padded[j * s * k..(j * s + w) * k]);
        }
    }
    Ok(PatchedTensor {
        patches: Tensor::from_vec(&[b, p, w * k], out)?,
        num_patches: p,
        batch: b,
        context: c,
        time_channels: d,
        static_channels: m,
        config: *cfg,
    })
}

/// Applies `adapter` (stored under `prefix` in `params`) to every patch.
pub fn embed_patches(
    params: &ParamStore,
    prefix: &str,
    pt: &PatchedTensor,
    adapter: &AdapterBlock,
) -> Result<EmbeddedPatches> {
    if adapter.input != pt.width() {
        return Err(Error::shape(format!(
            "adapter input width {} does not match patch width {}",
            adapter.input,
            pt.width()
        )));
    }
    let mut g = Graph::new(params);
    let x = g.input(pt.patches.clone());
    let h = adapter.forward(&mut g, prefix, x)?;
    Ok(EmbeddedPatches {
        hidden: g.value(h).clone(),
    })
}

/// For each context position `t′`, the index of the last patch whose padded
/// window covers padded position `t′ + s`, clamped to `p − 1`.
pub fn expansion_index(context: usize, cfg: &PatchConfig) -> Result<Vec<usize>> {
    let p = num_patches(context, cfg)?;
    Ok((0..context)
        .map(|t| ((t + cfg.stride) / cfg.stride).min(p - 1))
        .collect())
}

/// Expands `[B, p, k]` per-patch values to `[B, C, k]` per-time values.
pub fn expand_to_series(x: &Tensor, context: usize, cfg: &PatchConfig) -> Result<Tensor> {
    let p = num_patches(context, cfg)?;
    if x.ndim() != 3 || x.shape()[1] != p {
        return Err(Error::shape(format!(
            "expected [B, {p}, k] for context {context}, got {:?}",
            x.shape()
        )));
    }
    let (b, k) = (x.shape()[0], x.shape()[2]);
    let index = expansion_index(context, cfg)?;
    let mut out = Vec::with_capacity(b * context * k);
    for bi in 0..b {
        for &j in &index {
            out.extend_from_slice(&x.data()[(bi * p + j) * k..(bi * p + j + 1) * k]);
        }
    }
    Tensor::from_vec(&[b, context, k], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_counts() {
        let cfg = PatchConfig::new(12, 6).unwrap();
        assert_eq!(num_patches(24, &cfg).unwrap(), 4);
        assert_eq!(num_patches(6, &cfg).unwrap(), 1);
        assert_eq!(num_patches(12, &cfg).unwrap(), 2);
        assert!(num_patches(5, &cfg).is_err());
    }

    #[test]
    fn stride_must_not_exceed_window() {
        assert!(PatchConfig::new(4, 5).is_err());
        assert!(PatchConfig::new(4, 0).is_err());
    }

    #[test]
    fn two_step_example() {
        let (x1, x2, c) = (1.5, -2.0, 7.0);
        let past = Tensor::from_vec(&[1, 2, 1], vec![x1, x2]).unwrap();
        let statics = Tensor::from_vec(&[1, 1], vec![c]).unwrap();
        let pt = multivariate_patch(&past, &statics, &PatchConfig::new(2, 2).unwrap()).unwrap();
        assert_eq!(pt.num_patches, 2);
        assert_eq!(pt.patches.data(), &[0.0, 0.0, 0.0, 0.0, x1, c, x2, c]);
    }

    #[test]
    fn repeat_padding_copies_first_step() {
        let past = Tensor::from_vec(&[1, 3, 1], vec![4.0, 5.0, 6.0]).unwrap();
        let statics = Tensor::from_vec(&[1, 1], vec![9.0]).unwrap();
        let mut cfg = PatchConfig::new(3, 2).unwrap();
        cfg.pad = PadMode::Repeat;
        let pt = multivariate_patch(&past, &statics, &cfg).unwrap();
        assert_eq!(&pt.patches.data()[..6], &[4.0, 9.0, 4.0, 9.0, 4.0, 9.0]);
    }

    #[test]
    fn expand_single_patch_broadcasts() {
        let cfg = PatchConfig::new(12, 6).unwrap();
        let x = Tensor::from_vec(&[1, 1, 2], vec![3.0, 4.0]).unwrap();
        let y = expand_to_series(&x, 6, &cfg).unwrap();
        assert_eq!(y.shape(), &[1, 6, 2]);
        assert!(y.data().chunks(2).all(|r| r == [3.0, 4.0]));
    }

    #[test]
    fn expand_rejects_wrong_patch_count() {
        let cfg = PatchConfig::new(12, 6).unwrap();
        let x = Tensor::zeros(&[1, 3, 2]);
        assert!(expand_to_series(&x, 24, &cfg).is_err());
    }
}
