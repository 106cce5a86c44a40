//! Dense-tensor network engine covering exactly the layer set the five
//! candidate classifiers need: same-padded 3D convolution, non-overlapping
//! 3D max pooling, inverted dropout, dense layers and a softmax head, with
//! reverse-mode gradients and AdaDelta updates.
//!
//! Everything is generic over [`Scalar`](crate::Scalar): `f32` for training,
//! `f64` when gradients are checked against finite differences.

mod adadelta;
mod io;
pub mod layers;
mod model;
mod tensor;

pub use adadelta::{AdaDeltaConfig, AdaDeltaState};
pub use io::{load_state, load_weights, load_weights_for, save_state, save_weights};
pub use model::{
    activation_after, backward_traced, forward_traced, Activation, LayerSpec, ModelId, ModelSpec,
    NamedTensor, Network, Parameters, Trace,
};
pub use tensor::Tensor;
