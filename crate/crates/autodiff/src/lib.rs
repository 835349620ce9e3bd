//! Minimal dense-tensor engine with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied to its nodes; [`Graph::backward`]
//! walks the tape once in reverse. Trainable tensors live in a
//! [`ParamStore`] and are loaded onto a graph per forward pass, so the same
//! store can be shared by many short-lived tapes.
//!
//! ```
//! use mirssl_autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.input(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum_all(sq).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
//! ```

mod backward;
mod error;
mod gemm;
pub mod gradcheck;
mod graph;
mod param;
mod tensor;

pub use error::{AutodiffError, Result};
pub use graph::{mix64, Graph, Var};
pub use param::{Adam, ParamId, ParamStore, Parameter};
pub use tensor::{Real, Tensor};

#[cfg(test)]
mod tests;
