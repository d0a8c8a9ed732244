//! Minimal dense-tensor engine with tape-based reverse-mode
//! differentiation.
//!
//! A [`Graph`] records every forward operation as a node. Parameters enter as
//! [`Graph::param`] leaves, constants as [`Graph::constant`], and
//! [`Graph::detach`] cuts a branch out of the gradient flow. Calling
//! [`Graph::backward`] on a scalar node returns the [`Gradients`] of every
//! reachable trainable node.
//!
//! ```
//! use emkd_tape::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(&Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[6.0]);
//! ```

mod attention;
mod backward;
mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod ops;
mod tensor;

pub use attention::{AttentionMask, MASK_VALUE};
pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
