//! Joint reconstruction of image sequences and motion fields from severely
//! undersampled dynamic parallel-beam tomography.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: sparse per-time-step Radon blocks and their adjoints.
//! - [`schedule`]: per-time-step projection angle schedules.
//! - [`phantom`]: the moving-ball ("pinball") phantom and sinogram simulation.
//! - [`ops`]: gradient, transport and warping operators shared by the solvers.
//! - [`solver`]: primal-dual inner solvers and the alternating outer loop.
//! - [`metrics`]: relative errors and sequence SSIM.
//! - [`io`], [`config`] and [`cli`]: file formats, run configuration and the
//!   command-line pipeline.

pub mod cli;
pub mod config;
pub mod error;
pub mod geometry;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod ops;
pub mod phantom;
pub mod schedule;
pub mod sequence;
pub mod solver;

pub use error::{Error, Result};
pub use geometry::{BlockDiagonalOperator, DetectorSpec, GridSpec, RadonBlock};
pub use schedule::{AngleSchedule, Protocol};
pub use sequence::{FlowSequence, ImageSequence, SinogramStack};
pub use solver::{JointResult, SolverParams};
