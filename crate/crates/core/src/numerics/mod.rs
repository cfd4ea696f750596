//! Dense linear algebra, reverse-mode differentiation, Adam and a
//! finite-difference gradient checker.
//!
//! Training and gradient checks run in `f64`; embeddings are persisted as
//! `f32`.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{Adam, AdamState};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub(crate) use tape::log_softmax;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{cosine, dot, sigmoid, softplus, Tensor2};
