//! Named parameters and the small set of layers the models are built from.

mod layers;
mod store;

pub use layers::{Conv2d, GroupNorm, LayerNorm, Linear, Module};
pub use store::{LrGroup, Param, ParamStore, VarBuilder};
