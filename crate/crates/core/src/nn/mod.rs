//! Reverse-mode autodiff, dense networks, Gumbel-Softmax sampling and ADAM.

mod adam;
mod dense;
pub mod gradcheck;
mod gumbel;
pub mod signal;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use dense::{Activation, Dense, DenseNet};
pub use gumbel::{gumbel_noise, gumbel_softmax_st};
pub use tape::{CustomOp, Gradients, Tape, Var};
