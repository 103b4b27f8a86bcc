//! Singularity avoidance for planar manipulators with robust control barrier
//! functions.
//!
//! A nominal torque is filtered through a small QP whose rows keep the
//! singularity measure `z(q) = 1 − ε − f(q)ᵀg(q)` and the joint velocities
//! inside their safe sets. Model mismatch is learned by per-output Gaussian
//! process regression, and its deterministic error bound becomes a robustness
//! margin in every row.
//!
//! The crate is `no_std` and needs only `alloc`.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod barriers;
pub mod filter;
pub mod geometry;
pub mod gp;
pub mod optimize;
pub mod qp;
pub mod robot;
pub mod sim;
pub mod tuning;

pub use barriers::{BarrierParams, ClassK, ConstraintRow, RowTag};
pub use filter::{CbfFilter, FilterOutput, SafetyLayer, Unfiltered};
pub use geometry::{EtaModel, SingularityGeometry};
pub use gp::{Dataset, GpError, GpModel, KernelParams, MismatchModel, ZeroMismatch};
pub use qp::{solve_qp, FilterResult, QpProblem, QpStatus};
pub use robot::{JointState, LinkParams, ModelError, Plant, RobotParams};
pub use sim::{EpisodeLog, Mode, PidGains, TrajectorySpec};
pub use tuning::{ModelBounds, NormFactor, SearchConfig};
