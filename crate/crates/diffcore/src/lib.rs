//! Minimal reverse-mode differentiation for the small dense models used in
//! sequence-model imitation learning.
//!
//! A [`Graph`] records every primitive applied to [`Tensor`] values. Calling
//! [`Graph::backward`] on a scalar output walks the record in reverse and
//! returns the gradient of every parameter leaf. [`grad_check`] compares
//! those gradients against central finite differences.
//!
//! All values are `f64`. Matrix products run through `matrixmultiply`; with
//! the `parallel` feature (on by default) the row blocks of each product and
//! each batch of a batched product are spread over the rayon pool. Block
//! boundaries are fixed, so parallel and sequential builds produce identical
//! bits.

mod error;
mod gemm;
mod gradcheck;
mod graph;
pub mod par;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var, MASK_FILL};
pub use tensor::Tensor;
