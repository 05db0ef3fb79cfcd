//! Freeze policies over model tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::nn::transformer::is_layer_norm_name;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Backbone frozen except its layer norms.
    AdapterAndLayerNorms,
    /// Backbone fully frozen, layer norms included.
    AdapterOnly,
    AllTrainable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    /// Attention, MLP, and positional tensors of the backbone.
    BackboneCore,
    BackboneLayerNorm,
    /// Adapters, output blocks, and baseline-model layers.
    Trainable,
}

/// Classifies a tensor by name prefix.
pub fn tensor_role(name: &str) -> Result<TensorRole> {
    if name.starts_with("backbone.") {
        if is_layer_norm_name(name) {
            Ok(TensorRole::BackboneLayerNorm)
        } else {
            Ok(TensorRole::BackboneCore)
        }
    } else if ["adapter.", "output.", "mqcnn."].iter().any(|p| name.starts_with(p)) {
        Ok(TensorRole::Trainable)
    } else {
        Err(Error::config(
            name,
            "tensor name matches no known role (backbone., adapter., output., mqcnn.)",
        ))
    }
}

/// Sets every trainable flag in `ps` according to `policy`.
pub fn apply_freeze(ps: &mut ParamStore, policy: FreezePolicy) -> Result<()> {
    let mut flags = Vec::with_capacity(ps.len());
    for name in ps.names() {
        let trainable = match (tensor_role(name)?, policy) {
            (_, FreezePolicy::AllTrainable) => true,
            (TensorRole::Trainable, _) => true,
            (TensorRole::BackboneLayerNorm, FreezePolicy::AdapterAndLayerNorms) => true,
            (TensorRole::BackboneLayerNorm, FreezePolicy::AdapterOnly) => false,
            (TensorRole::BackboneCore, _) => false,
        };
        flags.push((name.to_string(), trainable));
    }
    for (name, t) in flags {
        ps.set_trainable(&name, t)?;
    }
    Ok(())
}
