//! Complex block-sparse recovery: iterative shrinkage solvers, unfolded
//! networks with hand-written gradients, coherence-based recovery checks and a
//! frequency-agile radar measurement model.

pub mod coherence;
pub mod experiments;
pub mod error;
pub mod linalg;
pub mod networks;
pub mod ops;
pub mod radar;
pub mod solvers;
pub mod theory;
pub mod training;
pub mod types;

pub use error::{Error, Result};
pub use linalg::{CMatrix, C64};
pub use networks::{NetworkKind, NetworkParams, Weights};
pub use solvers::{IterativeConfig, SolveTrace, SolverKind};
pub use training::{Dataset, TrainingConfig};
pub use types::{BlockDictionary, BlockPartition, BlockSignal, Observation};
