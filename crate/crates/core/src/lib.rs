//! Quadratically regularised optimal transport between discrete measures in the
//! unit ball: a dual solver producing sparse couplings, an exact transport
//! reference, the spread functions and convex surrogates that control the
//! support of the regularised plan, and checkers that measure every support
//! bound on concrete instances.

pub mod error;
pub mod exact_ot;
pub mod experiment;
pub mod geometry;
pub mod linalg;
pub mod measures;
pub mod plot;
pub mod qot_solver;
pub mod surrogate;
pub mod verify;

pub use error::{Error, Result};
pub use exact_ot::{monge_from_solution, solve_exact, ExactOTSolution};
pub use experiment::{run_experiment, ExperimentConfig, GeneratorSpec, InstanceSource};
pub use geometry::{build_spread, delta, delta_st, SpreadProfile};
pub use measures::{pushforward, uniform_ball_grid, DiscreteMeasure, MongeMapKind, MongeMapSpec};
pub use qot_solver::{
    assemble_coupling, evaluate_f_at, max_density, row_barycenter, solve, solve_scalar_update, Coupling,
    DualPotentials, SolverConfig,
};
pub use surrogate::{build_surrogate, eval_psi_prime, ConvexSurrogate, RestrictedConjugate};
pub use verify::{fit_rate, BoundId, BoundReport, Instance, RateFit};
