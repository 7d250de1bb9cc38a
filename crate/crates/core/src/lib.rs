//! Deterministic simulator and control library for microscope/OCT guided
//! autonomous subretinal needle insertion.
//!
//! The crate is organised by subsystem:
//!
//! - [`phantom`]: retina geometry, scleral pivot and the tool pose.
//! - [`galvo`]: voltage to scan-position calibration and scan-line synthesis.
//! - [`imaging`]: microscope and tool-tracking B-scan rendering plus the
//!   perception oracle that stands in for the detection networks.
//! - [`servo`]: Broyden visual servoing and the navigation/insertion workflow.
//! - [`robot`]: remote-center-of-motion kinematics and trajectory execution.
//! - [`metrics`]: evaluation metrics over completed trials.
//! - [`trial`]: configuration, interactive sessions, batch runs and replay.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod galvo;
pub mod imaging;
pub mod metrics;
pub mod phantom;
pub mod rng;
pub mod robot;
pub mod servo;
pub mod trial;
pub mod units;

pub use error::{Error, Result};
