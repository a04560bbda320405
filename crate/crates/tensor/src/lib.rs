//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! The engine is deliberately small: a value type ([`Tensor`]), a recording
//! tape ([`Tape`] / [`Var`]), a finite-difference checker, a handful of
//! layers, AdamW, and a flat binary checkpoint format.
//!
//! ```
//! use minitensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0).with_requires_grad(true));
//! let y = x.mul(x).unwrap();
//! let grads = y.backward().unwrap();
//! assert_eq!(grads.get(x).unwrap().item().unwrap(), 6.0);
//! ```

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod kernels;
pub mod nn;
pub mod optim;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_report, GradCheck};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
