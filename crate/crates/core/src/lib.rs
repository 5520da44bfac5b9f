//! Probability-free stochastic calculus on discretized paths.
//!
//! Paths live in a finite-dimensional truncation `ℝ^d` of a Hilbert space.
//! The crate computes quadratic variation along crossing-time partitions,
//! integrals of simple integrands, explicit superhedging certificates for
//! the second-order outer measure, Monte-Carlo lower bounds through
//! martingale measures, and Picard solutions of pathwise SDEs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod hedging;
pub mod io;
pub mod ito_limit;
pub mod outer_measure;
pub mod path_space;
pub mod sde;
pub mod selfcheck;
pub mod simple_integration;
pub mod stats;

pub use error::{Error, Result};
pub use path_space::{
    check_xi_c, crossing_partition, qv_at_level, quadratic_variation, sample_ensemble,
    ss_process, uniform_grid, CrossingPartition, Grid, MeasureTag, PathEnsemble, PathView,
    PredictionSetSpec, QvEnsemble, QvEstimate, QvMode, QvOptions, QvPath, RateProfile,
    SamplePath, Verdict, XiCheckOptions, XiReport,
};
