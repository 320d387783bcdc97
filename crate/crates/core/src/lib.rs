//! Spectral simulation of reaction-diffusion systems on the unit square with
//! stochastic Neumann boundary noise, together with their fast-diffusion
//! limit equations and a Monte-Carlo verification harness.
//!
//! The crate is organized along the pipeline:
//!
//! * [`basis`] — cosine eigenbasis of the Neumann Laplacian, transforms and
//!   exact averages of eigenfunction products;
//! * [`noise`] — boundary Wiener processes on the four edges and the interior
//!   covariance they induce through the trace coupling;
//! * [`ou`] — exact-in-law sampling of the fast Ornstein-Uhlenbeck modes and
//!   the correction process built from them;
//! * [`poly`] — polynomial reaction terms with multi-index calculus;
//! * [`solver`] — exponential-Euler time integration of the full system in
//!   spectral space;
//! * [`limit`] — construction of the effective limit ODE/SDE, including the
//!   noise-induced constants `C_l` and an independent series oracle;
//! * [`harness`] — epsilon sweeps, error metrics, convergence-order fits and
//!   averaging statistics.

pub mod basis;
pub mod error;
pub mod harness;
pub mod limit;
pub mod noise;
pub mod ou;
pub mod poly;
pub mod rng;
pub mod solver;

pub use basis::{
    basis_eval, edge_basis_eval, eigenvalue, mean_of_product, project_fluctuation, project_mean,
    ModeIndex, Transform, Truncation,
};
pub use error::{Error, Result};
pub use harness::{
    averaging_check, probability_estimate, run_sweep, AveragingPlan, AveragingReport,
    ExperimentPlan, PathRecord, ProbabilityEstimate, StepRule, SweepResult,
};
pub use limit::{
    build_limit_system, c_ell, case1_drift, closed_form_c2_heat, integrate_limit, CEllValue,
    LimitSystem, LimitTrajectory, NoiseDriver,
};
pub use noise::{
    assemble_covariance, sample_edge_increments, trace_coupling, BoundaryNoiseSpec, DecayLaw,
    Edge, EdgeNoise, InteriorCovariance, Regime,
};
pub use ou::{correction_process, stationary_variance, OuProcess};
pub use poly::ReactionPolynomial;
pub use rng::StreamKey;
pub use solver::{
    lp_norm, simulate_path, PathSummary, SpectralState, Stepper, SystemSpec, Workspace,
};
