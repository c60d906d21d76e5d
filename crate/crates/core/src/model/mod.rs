//! Problem definitions: grids, paths, potentials and the three sampling
//! problems, plus numerical checks of the structural conditions on them.

mod grid;
mod potential;
mod problem;
mod validate;

pub use grid::{Grid, Path};
pub use potential::{
    builtin_potential, finite_difference_derivatives, BuiltinPotential, CustomPotential,
    FdDerivatives, LogAlpha, Potential,
};
pub use problem::{MatrixSet, Observations, ProblemKind, ProblemSpec, SmoothingMatrices};
pub use validate::{validate_problem, CheckStatus, ConditionCheck, ValidateOptions, ValidationReport};
