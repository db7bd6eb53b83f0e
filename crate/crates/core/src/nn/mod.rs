//! Differentiable kernels with hand-written backward passes.
//!
//! Activations are `frames x channels` matrices ([`Mat`]); sequences are processed
//! unpadded, one utterance at a time, so time reductions only ever see real frames.

pub mod attention;
pub mod gradcheck;
pub mod layers;
pub mod norm;
pub mod params;

pub use attention::SelfAttention;
pub use layers::{relu, Conv1d, Embedding, Linear, ResBlock};
pub use norm::{adain, instance_norm, ChannelStats, IN_EPS};
pub use params::{Grads, Init, ParamId, ParamStore};

pub type Mat = ndarray::Array2<f64>;
