//! Fiber channel and detector model.
//!
//! Detector efficiency is folded into each arm's transmittance, so every
//! downstream formula works with a single overall efficiency per arm.

use serde::{Deserialize, Serialize};

use crate::error::{check_non_negative, check_probability, invalid, Error, Result};

/// Hardware and environment constants shared by every evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemParams {
    /// Detector efficiency.
    pub eta_d: f64,
    /// Dark count probability per pulse per detector.
    pub p_d: f64,
    /// Optical misalignment error.
    pub e_d: f64,
    /// Fiber loss in dB/km.
    pub alpha_db: f64,
    /// Error-correction inefficiency (>= 1).
    pub f_ec: f64,
    /// Total number of pulses sent.
    pub n_pulses: f64,
    /// Number of phase slices.
    pub m_slices: u32,
}

impl Default for SystemParams {
    fn default() -> Self {
        Self {
            eta_d: 0.5,
            p_d: 1e-10,
            e_d: 0.15,
            alpha_db: 0.2,
            f_ec: 1.1,
            n_pulses: 1e12,
            m_slices: 16,
        }
    }
}

impl SystemParams {
    pub fn validate(&self) -> Result<()> {
        check_probability("eta_d", self.eta_d)?;
        check_probability("p_d", self.p_d)?;
        check_probability("e_d", self.e_d)?;
        if self.e_d > 0.5 {
            return Err(invalid("e_d", format!("{} exceeds 0.5", self.e_d)));
        }
        check_non_negative("alpha_db", self.alpha_db)?;
        if !(self.f_ec.is_finite() && self.f_ec >= 1.0) {
            return Err(invalid("f_ec", format!("{} must be >= 1", self.f_ec)));
        }
        if !(self.n_pulses.is_finite() && self.n_pulses >= 1.0) {
            return Err(invalid(
                "n_pulses",
                format!("{} must be >= 1", self.n_pulses),
            ));
        }
        if self.m_slices < 2 {
            return Err(invalid(
                "m_slices",
                format!("{} must be >= 2", self.m_slices),
            ));
        }
        Ok(())
    }
}

/// Distances from each user to the untrusted measuring party.
///
/// By convention Alice is the nearer party, so `l_a <= l_b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkGeometry {
    pub l_a: f64,
    pub l_b: f64,
}

impl LinkGeometry {
    pub fn new(l_a: f64, l_b: f64) -> Result<Self> {
        let geom = Self { l_a, l_b };
        geom.validate()?;
        Ok(geom)
    }

    /// Splits a total distance so that `l_b - l_a = delta_l`.
    pub fn from_total(total_km: f64, delta_l_km: f64) -> Result<Self> {
        Self::new((total_km - delta_l_km) / 2.0, (total_km + delta_l_km) / 2.0)
    }

    pub fn total(&self) -> f64 {
        self.l_a + self.l_b
    }

    pub fn validate(&self) -> Result<()> {
        check_non_negative("l_a", self.l_a)?;
        check_non_negative("l_b", self.l_b)?;
        if self.l_a > self.l_b {
            return Err(Error::GeometryConvention {
                l_a: self.l_a,
                l_b: self.l_b,
            });
        }
        Ok(())
    }
}

/// Overall transmittances of Alice's and Bob's arms, detector included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arms {
    pub eta_a: f64,
    pub eta_b: f64,
}

impl Arms {
    pub fn swapped(self) -> Self {
        Self {
            eta_a: self.eta_b,
            eta_b: self.eta_a,
        }
    }
}

/// `eta_d * 10^(-alpha * L / 10)`.
pub fn transmittance(sys: &SystemParams, distance_km: f64) -> f64 {
    debug_assert!(distance_km >= 0.0);
    sys.eta_d * 10f64.powf(-sys.alpha_db * distance_km / 10.0)
}

pub fn arm_transmittances(sys: &SystemParams, geom: &LinkGeometry) -> Result<Arms> {
    geom.validate()?;
    Ok(Arms {
        eta_a: transmittance(sys, geom.l_a),
        eta_b: transmittance(sys, geom.l_b),
    })
}
