//! Supermarket-model server farms with threshold-based sleep/wake control.
//!
//! Servers sleep when they empty and wake once `m` tasks have accumulated;
//! arrivals join the shortest of `d` sampled queues. The crate provides
//!
//! * [`model`]: parameters, the tail-fraction state space and the rates `W_k`,
//! * [`meanfield`]: the mean-field ODE, its integration and steady state,
//! * [`fixedpoint`]: the recursive stationary solver,
//! * [`sim`]: a finite-N discrete-event simulator,
//! * [`oracle`]: exact small-N CTMC solves and closed forms used as references,
//! * [`metrics`]: queue-length, sojourn and energy measures.

// `!(x < y)` is used deliberately so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fixedpoint;
pub mod meanfield;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod sim;

pub use error::{Error, Result};
pub use model::{omega_distance, power_sum, rate_w, FractionState, ModelParams, OmegaDistance};
