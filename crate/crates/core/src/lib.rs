//! Automatic per-layer filter budgets for convolutional networks.
//!
//! Each convolution layer is flattened to a filters × parameters matrix, its
//! filter covariance is eigendecomposed, and the smallest number of principal
//! dimensions reaching a cumulative variance threshold becomes the layer's
//! filter budget. The resulting [`planner::ArchitecturePlan`] drives structured
//! pruning ([`prune`]) or serves as a distillation student description.
//!
//! The crate is `no_std` and only needs `alloc`. File IO and the command line
//! front end live in the `archslim` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod arch;
pub mod canon;
pub mod linalg;
pub mod network;
pub mod nwf;
pub mod planner;
pub mod prune;
pub mod spectral;
pub mod stats;

pub use arch::{ArchLayer, Architecture};
pub use network::{LayerKind, LayerRecord, NetworkBuilder, NetworkError, NetworkWeights, Tensor};
pub use planner::{ArchitecturePlan, CouplingPolicy, PlanConfig, PlanEntry, PlanError};
pub use prune::{Criterion, FilterScores, PruneError, PruneOutcome};
pub use spectral::{LayerSpectrum, Normalization, SpectralError};
pub use stats::{FlopConvention, InputShape, ModelStats, StatsError};
