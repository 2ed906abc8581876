//! Fault-injection testbed for a 1-D compressible Euler solver, with a
//! checksum-retry resilience layer and a campaign driver.

// `!(x > 0.0)` is used deliberately so that NaN fails positivity checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arith;
pub mod campaign;
pub mod inject;
pub mod resilience;
pub mod rng;
pub mod solver;
