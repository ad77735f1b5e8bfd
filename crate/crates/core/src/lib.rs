//! Numerical toolkit for mass-conserving self-similar coagulation.
//!
//! For the inverse power law kernel K(x, x*) = 2 (x x*)^-alpha this crate
//! computes scaling profiles by a positivity-preserving fixed-point
//! iteration on the flux balance identity, validates them against the
//! moment and transform identities the profile equation implies, probes
//! uniqueness numerically from multiple starting guesses, and evolves the
//! time-dependent equation with a flux-form scheme whose discrete mass is
//! conserved by construction. The constant kernel alpha = 0, where the
//! profile is the explicit exponential family, serves as the end-to-end
//! analytic baseline.

pub mod baseline;
pub mod cli;
pub mod dynamics;
pub mod error;
pub mod grid;
pub mod io;
pub mod kernel;
pub mod profile;
pub mod solver;

pub use error::{CoagError, Result};
pub use grid::{convolve, GridFn, GridHandle, SizeFn, SizeGrid};
pub use kernel::KernelSpec;
pub use profile::{EquationId, MomentSummary, Profile, TransformPair};
pub use solver::{
    fixed_point_step, normalize_unit_minus_alpha, rescale_to_mass, solve, uniqueness_experiment,
    InitKind, Normalization, SolveReport, SolverConfig, UniquenessReport, UniquenessVerdict,
};
