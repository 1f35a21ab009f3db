//! Minimal dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! Values live in row-major `N,C,H,W` layout. A [`Graph`] records every op
//! executed during a forward pass; [`Graph::backward`] replays the chain rule
//! in reverse and accumulates gradients into the [`ParamStore`] leaves that
//! took part in the pass.
//!
//! ```
//! use mhmtl_autograd::{Graph, ParamStore, Tensor};
//!
//! let mut params = ParamStore::<f64>::new();
//! let w = params.insert("w", Tensor::full(&[2], 3.0)).unwrap();
//!
//! let mut g = Graph::new();
//! let wv = g.param(&params, w);
//! let sq = g.mul(wv, wv).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss, &mut params).unwrap();
//! assert_eq!(params.get(w).grad().unwrap(), &[6.0, 6.0]);
//! ```

mod error;
mod graph;
mod ops;
mod scalar;
mod tensor;

pub use error::TensorError;
pub use graph::{Backward, BackwardContext, Gradients, Graph, Var};
pub use ops::conv::conv2d_output_extent;
pub use scalar::Scalar;
pub use tensor::{ParamId, ParamStore, Tensor};

/// Clamp floor applied inside `log` so cross-entropy stays finite.
pub const LOG_EPS: f64 = 1e-12;
