//! Offline synthesis and online solver for recursively feasible real-time
//! parallel MPC of constrained linear systems.
//!
//! The crate is organized around the controller pipeline:
//!
//! * [`model`] — problem data (system, polyhedral sets, weights), DARE/LQR
//!   synthesis and the scalar constants used by the feasibility theory.
//! * [`contraction`] — β-contractive ellipsoid synthesis, separable
//!   time-varying constraint margins, terminal region, and the certificate
//!   shifting machinery behind the recursive feasibility argument.
//! * [`qp`] — small dense strictly convex QP kernel (dual active set).
//! * [`stage`] — the decoupled stage problems and the Riccati-sweep
//!   consensus solve with dual extraction.
//! * [`controller`] — the fixed-iteration real-time loop (RTI / RFRTI),
//!   shift update, and convergence diagnostics.
//! * [`simulation`] — closed-loop simulation, exact-MPC references, and
//!   infinite-horizon cost accounting.
//! * [`chain`] — the spring-mass-damper benchmark plant.

pub mod chain;
pub mod contraction;
pub mod controller;
pub mod design_io;
mod linalg;
pub mod model;
pub mod qp;
pub mod simulation;
pub mod stage;

pub use contraction::{Certificate, ContractionDesign, TightenedMargins};
pub use controller::{ConstraintProfile, ControllerConfig, IterateTriple, RtiController};
pub use model::{LtiSystem, MpcProblem, PolyhedralSet, RiccatiSolution};
pub use simulation::{ClosedLoopPolicy, ClosedLoopTrace, Reference};
