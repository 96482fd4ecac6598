//! Dense `f64` tensors with a recorded-tape reverse-mode autodiff.
//!
//! ```
//! use numcore::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap().with_grad());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0, 8.0]);
//! ```

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod tensor;

pub use error::NumError;
pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
pub use graph::{CustomOp, Graph, Var, MASK_BLOCK};
pub use tensor::Tensor;
