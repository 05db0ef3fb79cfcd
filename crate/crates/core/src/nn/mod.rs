//! Dense layers with exact reverse-mode gradients.

pub mod freeze;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod ptwf;
pub mod tape;
pub mod tensor;
pub mod transformer;

pub use freeze::{apply_freeze, FreezePolicy};
pub use graph::Graph;
pub use layers::{Activation, AdapterBlock, AdapterKind};
pub use params::{Init, ParamDecl, ParamStore};
pub use tape::{Gradients, Mask, Tape, Var};
pub use tensor::Tensor;
pub use transformer::{BackboneKind, StackConfig};
