//! Optimal control of nonlinear Fokker–Planck equations with common noise.
//!
//! Finite-difference forward/backward solvers, first-order sensitivities,
//! a damped Picard iteration for the forward–backward system and an
//! Euler–Maruyama particle simulator, specialised to a bank-bailout model.

pub mod error;
pub mod grid;
pub mod model;
mod scheme;
pub mod forward;
pub mod adjoint;
pub mod sensitivity;
pub mod picard;
pub mod particles;
pub mod cli;

pub use adjoint::{solve_adjoint, solve_hjb, step_backward, AdjointPath};
pub use error::{Error, Result};
pub use forward::{
    evaluate_cost, mass_and_loss, path_cost, pushforward, pushforward_with_margin, solve_forward,
    step_forward, DensityPath, StepRecord,
};
pub use grid::{
    boundary_mass, flat_distance, gradient_fd, inverse_weight_norm, make_grid, mass, pair,
    sample_brownian, weighted_norm, Field, Grid, NoisePath,
};
pub use model::{
    bailout_model, bailout_model_unchecked, d_hamiltonian, d_hamiltonian_fd, gaussian_density,
    hamiltonian_h1, hazard, minimize_h1, running_cost, shift_model, shift_model_by,
    terminal_cost_eval, BailoutParams, ControlField, ModelBuilder, ModelSpec, Nonlocal,
    TerminalCost,
};
pub use sensitivity::{
    extract_control, gateaux_adjoint, gateaux_fd, gateaux_variation, gradient_check,
    smp_residual, solve_variation, Direction, GradCheckReport,
};
pub use picard::{
    active_set, cost_comparison, picard_solve, picard_sweep, write_active_set_csv, ActiveSlice,
    ComparisonReport, FbSolution, PicardOptions, Trial, TrialKind,
};
pub use particles::{
    empirical_density, estimate_cost, simulate, simulate_model, ParticleEnsemble, ParticleModel,
    ParticleRun, SimOptions, SummaryRow,
};
