//! Robust control of large populations through linear-quadratic mean-field-type games.
//!
//! The crate is organised around the pipeline a study runs through:
//!
//! - [`model`]: the time-varying LQ game, its configuration format and the
//!   linear policy representation.
//! - [`riccati`]: the exact solver. Coupled backward recursions give the Nash
//!   gains and value; on top of that sit attenuation-level certificates for the
//!   infinite and finite populations and closed-form policy evaluation.
//! - [`sim`]: a finite-population Monte-Carlo simulator whose empirical mean
//!   stands in for the mean-field.
//! - [`grad`]: exact receding-horizon policy gradients, the sphere-smoothing
//!   zero-order estimator and ball projection.
//! - [`learn`]: receding-horizon gradient descent ascent (model-free and exact)
//!   plus a simultaneous full-horizon baseline, instrumented against the
//!   Riccati oracle.
//!
//! Sign convention used everywhere: the minimizer plays
//! `u1 = -K1 (x - z) - L1 z` and the maximizer plays `u2 = K2 (x - z) + L2 z`,
//! where `z` is the (empirical) mean-field.

pub mod error;
pub mod grad;
pub mod instance;
pub mod learn;
pub mod linalg;
pub mod model;
pub mod riccati;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
pub use grad::{
    exact_gradient, project_ball, zero_order_gradient, ExactGradient, Player, RecedingProblem,
    SmoothingParams, StackedGain,
};
pub use learn::{
    baseline_gda, inner_gda, nash_gap, rgda, GradientMode, LearningTrace, LrSchedule, NashGap,
    RgdaConfig, TraceRow,
};
pub use model::{closed_loop_matrices, load_model, matrix_to_json, validate_model, LqMftgModel, PolicyProfile, StepGains, Violation};
pub use riccati::{
    check_viability_finite, check_viability_mf, closed_form_cost, compute_population_gap,
    find_min_viable_gamma, solve_riccati, ClosedFormCost, NoiseModel, PopulationGapAnalysis,
    RiccatiSolution, ValueRecursion, Viability, ViabilityMode,
};
pub use sim::{
    population_gap_estimate, receding_horizon_cost, rollout_cost, step_population, CostReport,
    GapEstimate, PopulationState, SimConfig,
};
