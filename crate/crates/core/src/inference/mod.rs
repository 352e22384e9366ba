//! CPU forward pass over resident or layer-streamed weights.

pub mod kernels;
mod model;
mod reference;
mod store;

pub use model::{score_continuation, ForwardReport, LanguageModel, LayerReport, Logits, Transformer};
pub use reference::build_reference_model;
pub use store::{materialize, HeadWeights, Held, LayerWeights, Mode, Residency, WeightRef, WeightStore};
