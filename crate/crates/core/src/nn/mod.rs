//! The denoising network and the machinery to train it.

pub mod checkpoint;
pub mod model;
pub mod params;
pub mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use model::{
    count_params, AttentionPlacement, Backbone, DenoiserConfig, DenoiserModel, Prediction,
};
pub use params::{Grads, Init, ParamId, ParamStore};
pub use tape::{Tape, Tensor, Var};
