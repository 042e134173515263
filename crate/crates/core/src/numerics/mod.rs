//! Dense `f64` tensors, a reverse-mode tape, and the attention/linear layers
//! the branches are built from.

pub mod gradcheck;
mod layers;
mod tape;
mod tensor;

pub use layers::{attention, init_bound, linear, Attention, Linear};
pub use tape::{Gradients, Tape, Var, BCE_EPS};
pub use tensor::Tensor;
