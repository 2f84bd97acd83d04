//! Desk-scale model of a fiber-coupled quantum frequency conversion chain.
//!
//! The crate covers the full path from device physics to measured figures of
//! merit:
//!
//! * [`phasematch`] solves quasi-phase-matching of the PPLN converter.
//! * [`chain`] carries the photon budget, conversion efficiency and noise.
//! * [`montecarlo`] generates detector time tags for HBT and UMZI setups, with
//!   an exact enumeration oracle for the expected peak areas.
//! * [`correlator`] streams tags into coincidence histograms and extracts
//!   g²(0), HOM visibility and corrected indistinguishability.
//! * [`fitting`] is a damped Gauss-Newton engine for the efficiency and
//!   phase-matching curve shapes.
//! * [`tagstore`] is the binary time-tag file format.
//!
//! [`config`] loads and validates TOML run configurations, and [`pipeline`]
//! strings the pieces together for the command line and the test suites.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chain;
pub mod config;
pub mod correlator;
pub mod error;
pub mod fitting;
pub mod montecarlo;
pub mod phasematch;
pub mod pipeline;
pub mod tagstore;
pub mod units;

pub use error::{Error, ErrorKind, Result};
