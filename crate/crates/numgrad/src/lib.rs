//! Dense `f64` tensors with a reverse-mode tape.
//!
//! The op set covers what a small transformer needs: matrix products,
//! broadcasting elementwise arithmetic, layer norm, row softmax, the usual
//! pointwise activations, reshapes, slicing and concatenation, and scalar
//! reductions. Ops evaluate eagerly as they are recorded on a [`Graph`];
//! [`Graph::backward`] then walks the tape in reverse from a scalar loss.
//!
//! ```
//! use numgrad::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.input(Tensor::row(vec![1.0, 2.0, 3.0]));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```
//!
//! A graph is plain owned data, so independent graphs can be built and
//! differentiated on different threads.

mod error;
mod gradcheck;
mod graph;
mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{central_difference, grad_check, grad_check_coords, relative_error};
pub use graph::{Gradients, Graph, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
