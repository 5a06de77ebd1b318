//! Dense `f64` tensors with a reverse-mode tape, seeded randomness, and the
//! optimizer pieces used by the trainer.

pub mod gradcheck;
pub mod ops;
pub mod rng;
pub mod tape;
pub mod value;

pub use gradcheck::{grad_check, max_relative_error};
pub use ops::{cosine_lr, dropout, sgd_momentum_step};
pub use rng::{RngState, RngStream};
pub use tape::{Activation, Gradients, Tape, Var};
pub use value::Tensor;
