#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Wholesale market equilibria with prosumers and retail tariff design.
//!
//! The lower level is solved as a single concave welfare program whose
//! multipliers are the nodal prices. The upper level chooses volumetric and
//! fixed charges that recover a fixed cost while equalizing expenditure
//! incidence across household groups.

pub mod calibration;
pub mod config;
pub mod equilibrium;
pub mod model;
pub mod qp;
pub mod verification;
pub mod format;
pub mod tariff;
pub mod stochastic;
pub mod cli;
