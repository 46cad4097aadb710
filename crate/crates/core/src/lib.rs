//! Offset-free nonlinear MPC toolkit for implicit RNN plant models.
//!
//! The crate covers the full synthesis-and-simulation pipeline:
//!
//! 1. [`model`] — the implicit RNN plant class, its well-posedness checks,
//!    and steady-state solvers.
//! 2. [`velocity`] — the velocity-form reformulation that folds integral
//!    action into an augmented increment/offset state.
//! 3. [`sector`] — incremental sector bounds for the activation channels
//!    and their validity radii.
//! 4. [`lmi`] — a structured LMI front end over a conic interior-point
//!    solver, with independent eigenvalue re-verification.
//! 5. [`synthesis`] — controller, terminal-ingredient, and observer design
//!    by semidefinite programming.
//! 6. [`invariant`] — ellipsoidal invariant-set validity radii via
//!    constraint-wise concave maximization.
//! 7. [`runtime`] — certified static feedback laws executed online.
//! 8. [`nmpc`] — the finite-horizon optimal control problem and its
//!    sequential-quadratic-programming solver.
//! 9. [`sim`] — closed-loop simulation against perturbed surrogate plants.
//! 10. [`io`] — file formats for models, designs, scenarios, and traces.

pub mod errors;
pub mod gen;
pub mod invariant;
pub mod io;
pub mod lmi;
pub mod model;
pub mod nmpc;
pub mod qp;
pub mod runtime;
pub mod sector;
pub mod sim;
pub mod synthesis;
pub mod velocity;

pub use errors::{Error, Result};
pub use model::{Activation, BoxConstraints, PlantState, RnnModel, WellPosednessReport};
pub use nmpc::{NmpcController, NmpcOptions, NmpcProblem, NmpcSolution, NmpcState};
pub use sector::SectorBound;
pub use sim::{Designs, RunSummary, Scenario, StepRecord, Trajectory};
pub use synthesis::{
    ControllerCertificate, ControllerOptions, Gains, ObserverCertificate, ObserverOptions,
    TerminalIngredients, TerminalOptions,
};
pub use velocity::VelocityForm;
