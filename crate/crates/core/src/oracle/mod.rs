//! Independent references: exact small-N CTMC solves, closed forms for the
//! `d = 1` and `m = 1` reductions, and exact dispatch probabilities.

mod closed_form;
mod ctmc;
mod sampling;

pub use closed_form::{npolicy_mm1, npolicy_truncated, supermarket_m1, NPolicyDistribution};
pub use ctmc::{
    ctmc_exact_small_n, CtmcSolution, DENSE_LIMIT, RESIDUAL_LIMIT, STATE_LIMIT, TRUNCATION_LIMIT,
};
pub use sampling::{enumerate_sampling_probability, to_f64, Population};
