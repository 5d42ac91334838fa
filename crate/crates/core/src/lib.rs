//! Steady-state multiplicity analysis and closed-loop simulation for square
//! nonlinear plants, instantiated on a two-input, two-output CSTR with three
//! input instances for the same output setpoint.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`]: plant right-hand side, rate constants and analytic Jacobians.
//! * [`ode`]: fixed-step RK4 and adaptive Dormand-Prince integration.
//! * [`steady`]: steady states, input-instance search and pseudo-arclength
//!   continuation of input branches.
//! * [`linear`]: gain matrix, relative gain array, integral controllability of
//!   multi-loop pairings, sequential loop closing.
//! * [`iloop`]: nonlinear simulation and local stability of the plant under
//!   multi-loop integral control.
//! * [`optim`] and [`mpc`]: BFGS and the receding-horizon controller.
//! * [`basins`]: basin-of-attraction sweeps, boundary refinement and
//!   box-counting.
//!
//! Batch work (multistart seeds, basin cells) goes through [`par::Execution`],
//! which uses rayon when the `parallel` feature is enabled and falls back to a
//! sequential loop otherwise.

// Negated comparisons such as `!(x > 0.0)` are used to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basins;
pub mod error;
pub mod export;
pub mod iloop;
pub mod linear;
pub mod model;
pub mod mpc;
pub mod ode;
pub mod optim;
pub mod par;
pub mod steady;

pub use error::{Error, Result};
pub use model::{InputPair, OutputPair, PlantParams, StatePair};
pub use par::Execution;
