//! Dense-array numerics with reverse-mode differentiation: tensors, the
//! Wengert tape, diagonal-Gaussian machinery, feedforward/recurrent building
//! blocks, Adam, and the parameter checkpoint container.

pub mod adam;
pub mod checkpoint;
pub mod gaussian;
pub mod nn;
pub mod tape;
pub mod tensor;

pub use adam::{clip_global_norm, AdamState};
pub use checkpoint::Checkpoint;
pub use gaussian::{gaussian_kl, GaussianDiag};
pub use nn::{CellKind, GaussianHead, Layer, Mlp, ParamReg, RecurrentCell};
pub use tape::{sigmoid, Activation, Tape, Var};
pub use tensor::Tensor;
