//! Small reverse-mode automatic differentiation engine.
//!
//! A [`Graph`] records tensor operations during a forward pass and replays
//! them in reverse from a scalar loss. Trainable tensors live in a
//! [`ParamStore`], which also owns the gradient accumulators and the Adam
//! state, so one store can be shared by many per-video graphs and updated
//! once per step.
//!
//! ```
//! use aei::nn::{Graph, ParamStore, Tensor};
//!
//! let mut store = ParamStore::new();
//! let theta = store.add("theta", Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
//! let mut g = Graph::new(&store);
//! let x = g.param(theta);
//! let loss = g.sum(x);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
//! ```

pub mod gradcheck;
mod graph;
mod layers;
mod params;
mod tensor;

pub use graph::{Graph, Var};
pub use layers::{Conv1d, Linear, Mlp, SelfAttention};
pub use params::{parse_checkpoint, Adam, ParamId, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{0}: empty input")]
    EmptyInput(&'static str),
    #[error("backward already ran on this graph; call zero_grad first")]
    DoubleBackward,
    #[error("backward needs a single-element loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NnError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }
}
