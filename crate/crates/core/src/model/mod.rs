//! The DeadNet architecture: eight conv, four max-pool and three fc layers.

mod checkpoint;
mod network;
mod spec;

pub use checkpoint::{check_matches, Checkpoint, FORMAT_VERSION, MAGIC};
pub use network::{BatchNormParams, ClassScores, ForwardPass, Gradients, LayerParams, Network, ParamKind};
pub use spec::{LayerKind, LayerShape, LayerSpec, NetworkSpec};

/// Index of the healthy class in score vectors.
pub const HEALTHY: usize = 0;
/// Index of the sick class in score vectors.
pub const SICK: usize = 1;
