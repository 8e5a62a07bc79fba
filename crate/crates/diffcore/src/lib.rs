//! Minimal dense-tensor computation with tape-based reverse-mode gradients.
//!
//! The crate covers exactly the operations needed by the trajectory models in
//! this workspace: dense matrix products, elementwise activations, row softmax
//! and its Gumbel relaxation, a same-length 1-D convolution, a fused GRU over a
//! full sequence, and soft-target cross-entropy. Parameters live in a
//! [`ParamStore`] which also owns the Adam moments.
//!
//! ```
//! use diffcore::{Graph, ParamStore, Tensor};
//!
//! let mut store = ParamStore::<f64>::new();
//! let w = store.add("w", Tensor::matrix(1, 1, vec![3.0]).unwrap()).unwrap();
//! let mut g = Graph::new();
//! let wn = g.param(&store, w);
//! let sq = g.hadamard(wn, wn).unwrap();
//! g.backward(sq).unwrap();
//! g.accumulate_param_grads(&mut store);
//! assert_eq!(store.grad(w).data(), &[6.0]);
//! ```

mod checkpoint;
mod error;
mod gradcheck;
mod graph;
mod kernels;
mod layers;
pub mod noise;
mod params;
mod real;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use error::{DiffError, Result};
pub use gradcheck::{
    analytic_gradient, compare_gradients, grad_check, numeric_gradient, rel_error, GradCheckReport, LossFn,
    NumericGradient,
};
pub use graph::{Graph, NodeId};
pub use params::{AdamConfig, Param, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
