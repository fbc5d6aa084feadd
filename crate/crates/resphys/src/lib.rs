//! Differentiable hexahedral-FEM soft-body simulation with learned residual
//! forces.
//!
//! The crate builds a pipeline in four stages:
//!
//! 1. [`sim`] — implicit-Euler time stepping of a corotational voxel mesh
//!    ([`mesh`], [`elastic`]) with adjoint gradients of next-state losses
//!    with respect to applied forces.
//! 2. [`fit`] — per-timestep L-BFGS fitting of dense corrective forces so a
//!    misparameterized simulator reproduces a target trajectory, observed
//!    either in full state or through sparse surface markers ([`markers`]).
//! 3. [`net`] — a block-MLP that learns to predict those corrective forces
//!    online, plus a simulator-free baseline; [`hybrid`] runs the resulting
//!    corrected simulator autoregressively.
//! 4. [`sysid`] / [`experiments`] / [`metrics`] — the system-identification
//!    baseline, synthetic beam experiment generators, and rollout error
//!    metrics used to compare methods.
//!
//! See the `examples/` directory for runnable end-to-end walkthroughs and the
//! `resphys` binary for a batch CLI over the same functionality.

pub mod ablation;
pub mod banded;
pub mod elastic;
pub mod error;
pub mod experiments;
pub mod fit;
pub mod hybrid;
pub mod io;
pub mod lbfgs;
pub mod markers;
pub mod material;
pub mod mesh;
pub mod metrics;
pub mod net;
pub mod sim;
pub mod sysid;

pub use error::{Error, Result};
pub use material::{lame_parameters, Material};
pub use mesh::{build_voxel_beam, ClampFace, HexMesh};
pub use sim::{LoadSpec, SimState, StepConfig};
