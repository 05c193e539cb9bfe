//! A small deterministic 1D neural-network engine: batched tensors, the
//! layer kinds needed by the autoencoder and the multi-task classifier,
//! reverse-mode gradients, He initialization and Adam.
//!
//! Tensors flowing between layers carry a leading batch axis: `[B, L, C]`
//! for sequences and `[B, N]` after flattening. Parameter reductions over
//! the batch always run in sample order, so results do not depend on the
//! rayon thread count.

mod layer;
mod loss;
mod optim;
mod sequential;
mod tensor;

pub use layer::{Activation, Cache, Layer, LayerSpec, Mode, Padding, Upstream};
pub use loss::{cross_entropy, mse_loss, softmax_ce_loss};
pub use optim::{adam_update, he_init, AdamConfig, AdamState, PlateauSchedule};
pub(crate) use sequential::mix_seed;
pub use sequential::{describe, keras_shape, Grads, LayerRow, Sequential, Tape};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
