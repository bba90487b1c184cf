//! Constrained diffeomorphic landmark matching.
//!
//! A shape is a set of labeled landmarks; a deformation is the flow of a
//! smooth velocity field built from reproducing kernels anchored at those
//! landmarks. Matching one shape onto another means finding the flow that
//! minimizes kinetic energy plus a terminal mismatch, optionally subject to
//! constraints on the velocity: constant enclosed volume, multishape
//! interfaces stitched together, or interfaces that may slide tangentially.
//!
//! Two solvers cover the two constraint regimes:
//!
//! * [`optim::minimize_shooting`] optimizes the initial momentum and flows
//!   it along constrained Hamiltonian geodesics; it needs constraint rows
//!   that act within each kernel's own group (volume, stitching, fixed
//!   directions), and enforces them exactly at every integrator stage.
//! * [`optim::minimize_augmented_lagrangian`] optimizes per-step controls
//!   under a multiplier-plus-penalty objective; it also accepts rows that
//!   couple the groups' fields (sliding), which the geodesic flow cannot.
//!
//! The pieces compose in layers: [`kernels`] assembles per-group kernel
//! matrices and their derivatives, [`shapes`] holds landmark states and the
//! polygon/attachment geometry, [`constraints`] turns constraint providers
//! into multiplier solves and momentum projections, [`geodesics`] integrates
//! the forward flow and its backward adjoint, [`optim`] runs the descent
//! loops, and [`io`] reads configs and writes deterministic text artifacts.
//! The `shapeflow` binary (see [`cli`]) batches all of it behind
//! `run | shoot | check-grad | oracle | example` subcommands.
//!
//! The `examples/` directory has one runnable program per capability; start
//! with `unconstrained_matching` and `volume_constrained_matching`.

pub mod cli;
pub mod constraints;
pub mod error;
pub mod geodesics;
pub mod io;
pub mod kernels;
pub mod optim;
pub mod shapes;

pub use constraints::ConstraintSet;
pub use error::{Error, Result};
pub use geodesics::{integrate_geodesic, Trajectory};
pub use kernels::{GroupKernels, KernelSpec};
pub use optim::{
    minimize_augmented_lagrangian, minimize_shooting, Solution, SolveReport, SolverOptions,
};
pub use shapes::{LandmarkState, MatchProblem};
