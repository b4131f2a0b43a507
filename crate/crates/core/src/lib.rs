//! Key-rate engine for asymmetric sending-or-not-sending twin-field QKD.
//!
//! The crate evaluates the analytic model of the protocol (photon
//! statistics, decoy-window interference, signal-window counting and the
//! asymmetric decoy bounds), optimizes protocol parameters, and checks every
//! analytic observable against a pulse-level Monte Carlo simulation.
//!
//! ```
//! use snsqkd::{key_rate, FluctuationPolicy, LinkGeometry, ProtocolParams, SystemParams};
//!
//! let sys = SystemParams::default();
//! let geom = LinkGeometry::new(50.0, 150.0).unwrap();
//! let arms = snsqkd::arm_transmittances(&sys, &geom).unwrap();
//! let params = ProtocolParams::matched(0.45, 0.3, 0.04, 0.01, 0.8, arms);
//! let out = key_rate(&sys, &geom, &params, &FluctuationPolicy::default()).unwrap();
//! assert!(out.r > 0.0);
//! ```

// Checks are written as `!(x < y)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod config;
pub mod decoy;
pub mod error;
pub mod keyrate;
pub mod montecarlo;
pub mod optimizer;
pub mod parallel;
pub mod photon;
pub mod quadrature;
pub mod scan;
pub mod validate;
pub mod xwindow;
pub mod zwindow;

pub use channel::{arm_transmittances, transmittance, Arms, LinkGeometry, SystemParams};
pub use decoy::{
    validate_constraints, ConstraintReport, DecoySettings, FluctuationPolicy, ObservedRates,
};
pub use error::{Error, Result};
pub use keyrate::{binary_entropy, key_rate, key_rate_for_arms, ProtocolParams, RateBreakdown};
pub use optimizer::{optimize, symmetric_baseline, OptimizationResult, OptimizationSpec};
pub use parallel::Execution;
pub use photon::{IntensityPair, IntensityRatio};
