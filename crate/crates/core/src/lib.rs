//! Adaptive-propagation graph convolutional network.
//!
//! Nodes are embedded by a two-layer MLP and the resulting class-logit seeds
//! are diffused over a normalized graph operator. A per-node halting unit
//! decides after every diffusion step whether that node should keep
//! propagating; a propagation-cost penalty trades depth against accuracy.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`). Concrete
//! aliases for the two precisions live at the crate root.

pub mod error;
pub mod graph;
pub mod io;
pub mod model;
pub mod nn;
pub mod protocol;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use graph::{GraphBundle, OperatorKind, PropagationOperator};
pub use model::{HaltingConfig, HaltingTrace, ModelConfig, ModelParams, Propagation};
pub use nn::{DenseMatrix, ParamTensor};
pub use protocol::{ExperimentPlan, RunResult};
pub use scalar::Scalar;
pub use training::{TrainConfig, TrainOutcome};

/// Training precision.
pub type Graph32 = GraphBundle<f32>;
pub type Matrix32 = DenseMatrix<f32>;
pub type Params32 = ModelParams<f32>;
pub type Trace32 = HaltingTrace<f32>;

/// Gradient-check precision.
pub type Graph64 = GraphBundle<f64>;
pub type Matrix64 = DenseMatrix<f64>;
pub type Params64 = ModelParams<f64>;
pub type Trace64 = HaltingTrace<f64>;
