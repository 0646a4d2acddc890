//! Simulation of a polarization-encoding BB84 link whose state preparation
//! and measurement are done by LiNbO₃ phase modulators, together with the
//! autonomous polarization-controller calibration that keeps it aligned.
//!
//! The modules build on each other bottom-up: [`jones`] for the polarization
//! algebra, [`optics`] for the physical components, [`pulse`] for the
//! dispersion study, [`chain`] for the assembled link, [`calibration`] for
//! controller tuning, [`protocol`] for key sharing, and [`scenario`] for
//! configuration files and output artifacts.

// Range checks are written `!(x > 0.0)` so that NaN fails them too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod chain;
pub mod jones;
pub mod optics;
pub mod protocol;
pub mod pulse;
pub mod scenario;
