//! Differentiation, gradient validation, optimization and persistence.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Dtype, Manifest, CHECKPOINT_MAGIC};
pub use gradcheck::{fd_check, FdOptions, FdReport};
pub use graph::{Cx, Graph, Precision, Var};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use params::{Gradients, ParamId, ParameterStore};
