//! Dense `f32` tensors with tape-based reverse-mode differentiation.
//!
//! The op set is deliberately small: elementwise arithmetic, `matmul`,
//! `conv2d`, `relu`, shape ops (`reshape`, `permute`, `concat`), indexed
//! `gather`/`scatter_add`, reductions, `softmax`, `log` and a fused
//! softmax cross-entropy. Domain-specific kernels plug in through
//! [`CustomOp`]. No implicit broadcasting: shapes must match exactly except
//! for scalar ops.
//!
//! ```
//! use diffkit::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).data(), &[2.0, 4.0, 6.0]);
//! ```

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod kernels;
pub mod optim;
pub mod reference;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{softmax_row, CustomOp, Gradients, Graph, Var};
pub use kernels::Exec;
pub use optim::{OptimKind, OptimState, ParamSet};
pub use tensor::Tensor;
