//! Data-enabled predictive control with learned Hankel column selection.
//!
//! A context network scores every Hankel column for the current initial
//! trajectory and reference window; the receding-horizon controller then
//! solves DeePC on the `K` most beneficial columns only.

// `!(x >= 0.0)` is used on purpose so NaN parameters are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod closed_loop;
pub mod datamodel;
pub mod error;
pub mod grid;
mod linalg;
pub mod pipeline;
pub mod plants;
pub mod rng;
pub mod selection;
pub mod solver;
pub mod stats;
pub mod trajectory;

pub use error::{Error, Result};
pub use plants::{make_plant, rollout, NoiseSpec, PlantKind, PlantModel};
pub use solver::{solve_deepc, DeepcConfig, DeepcSolution, DeepcSolver, SolveStatus};
pub use trajectory::{build_hankel, excitation_rank, extract_columns, ColumnSubset, HankelSet, Trajectory};
