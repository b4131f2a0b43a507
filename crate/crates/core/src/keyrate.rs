//! Secret key rate per pulse.

use serde::{Deserialize, Serialize};

use crate::channel::{arm_transmittances, Arms, LinkGeometry, SystemParams};
use crate::decoy::{
    apply_fluctuations, e1_upper, validate_constraints, y1_lower, ConstraintReport, DecoySettings,
    FluctuationPolicy, ObservedRates, SampleSizes,
};
use crate::error::{check_non_negative, check_probability, Error, Result};
use crate::photon::vacuum_yield;
use crate::xwindow::{averaged_observables, XWindowObservables};
use crate::zwindow::{z_observables, ZWindowObservables, ZWindowParams};

/// `H(x) = -x log2 x - (1 - x) log2 (1 - x)`, with `H(0) = H(1) = 0`.
pub fn binary_entropy(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    -x * x.log2() - (1.0 - x) * (-x).ln_1p() / std::f64::consts::LN_2
}

/// Tunable protocol knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolParams {
    pub p_za: f64,
    pub p_zb: f64,
    pub eps_a: f64,
    pub eps_b: f64,
    pub u_a: f64,
    pub u_b: f64,
    pub decoys: DecoySettings,
    /// Overrides `SystemParams::m_slices` when set.
    #[serde(default)]
    pub m_slices: Option<u32>,
}

impl ProtocolParams {
    /// Symmetric probabilities with every intensity matched at the beam
    /// splitter: `u_a = u_b eta_b / eta_a`, likewise for both decoys.
    pub fn matched(u_b: f64, v_b: f64, w_b: f64, eps: f64, p_z: f64, arms: Arms) -> Self {
        let k = arms.eta_b / arms.eta_a;
        Self {
            p_za: p_z,
            p_zb: p_z,
            eps_a: eps,
            eps_b: eps,
            u_a: u_b * k,
            u_b,
            decoys: DecoySettings::matched(v_b, w_b, arms),
            m_slices: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_probability("p_za", self.p_za)?;
        check_probability("p_zb", self.p_zb)?;
        check_probability("eps_a", self.eps_a)?;
        check_probability("eps_b", self.eps_b)?;
        check_non_negative("u_a", self.u_a)?;
        check_non_negative("u_b", self.u_b)?;
        self.decoys.validate()?;
        if let Some(m) = self.m_slices {
            if m < 2 {
                return Err(crate::error::invalid(
                    "m_slices",
                    format!("{m} must be >= 2"),
                ));
            }
        }
        Ok(())
    }

    pub fn z_window(&self) -> ZWindowParams {
        ZWindowParams {
            u_a: self.u_a,
            u_b: self.u_b,
            eps_a: self.eps_a,
            eps_b: self.eps_b,
        }
    }

    /// The same protocol with the parties' roles exchanged.
    pub fn swapped(&self) -> Self {
        let d = self.decoys;
        Self {
            p_za: self.p_zb,
            p_zb: self.p_za,
            eps_a: self.eps_b,
            eps_b: self.eps_a,
            u_a: self.u_b,
            u_b: self.u_a,
            decoys: DecoySettings {
                v_a: d.v_b,
                v_b: d.v_a,
                w_a: d.w_b,
                w_b: d.w_a,
            },
            m_slices: self.m_slices,
        }
    }

    pub fn slices(&self, sys: &SystemParams) -> u32 {
        self.m_slices.unwrap_or(sys.m_slices)
    }
}

/// Every intermediate quantity of one key-rate evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateBreakdown {
    /// Key rate per pulse, never negative.
    pub r: f64,
    /// Unclamped value of the rate formula.
    pub r_raw: f64,
    /// Single-photon part of the rate, before subtracting the leakage.
    pub single_photon_term: f64,
    /// Information leaked in error correction.
    pub leakage_term: f64,
    pub y1_l: f64,
    pub e1_u: f64,
    pub e1_clamped: bool,
    pub z_gain: f64,
    pub z_qber: f64,
    pub z: ZWindowObservables,
    /// Decoy pair `w` (total `mu1`).
    pub x_mu1: XWindowObservables,
    /// Decoy pair `v` (total `mu2`).
    pub x_mu2: XWindowObservables,
    /// Rates as modeled, before any fluctuation.
    pub observed: ObservedRates,
    /// Rates fed into the bounds.
    pub bounded: ObservedRates,
    pub sample_sizes: SampleSizes,
    pub constraints: ConstraintReport,
    pub fluctuated: bool,
    pub m_slices: u32,
    pub arms: Arms,
}

pub fn key_rate(
    sys: &SystemParams,
    geom: &LinkGeometry,
    params: &ProtocolParams,
    policy: &FluctuationPolicy,
) -> Result<RateBreakdown> {
    let arms = arm_transmittances(sys, geom)?;
    key_rate_for_arms(sys, arms, params, policy)
}

/// Key rate for explicit arm transmittances. Unlike [`LinkGeometry`], the
/// arms need not be ordered, which allows relabeling the parties and
/// adding attenuation to one arm.
pub fn key_rate_for_arms(
    sys: &SystemParams,
    arms: Arms,
    params: &ProtocolParams,
    policy: &FluctuationPolicy,
) -> Result<RateBreakdown> {
    sys.validate()?;
    params.validate()?;
    let constraints = validate_constraints(&params.decoys, params.u_a, params.u_b);
    if !constraints.passes() {
        return Err(Error::Constraints(constraints));
    }
    let m = params.slices(sys);
    let d = &params.decoys;

    let x_mu1 = averaged_observables(d.w_a, d.w_b, arms, sys.p_d, sys.e_d, m)?;
    let x_mu2 = averaged_observables(d.v_a, d.v_b, arms, sys.p_d, sys.e_d, m)?;
    let observed = ObservedRates {
        q_mu1: x_mu1.gain,
        q_mu2: x_mu2.gain,
        qe_mu1: x_mu1.qe,
        y_0: vacuum_yield(sys.p_d),
    };
    let sample_sizes = SampleSizes::from_allocation(sys.n_pulses, params.p_za, params.p_zb, m);
    let bounded = apply_fluctuations(&observed, &sample_sizes, policy)?;

    let (mu1, mu2) = (d.mu1(), d.mu2());
    let y1_l = y1_lower(mu1, mu2, &bounded)?;
    let e1 = if y1_l > 0.0 {
        e1_upper(mu1, &bounded, y1_l)?
    } else {
        crate::decoy::E1Bound {
            value: 0.5,
            clamped: true,
            raw: f64::NAN,
        }
    };

    let z = z_observables(&params.z_window(), arms, sys.p_d)?;
    let (u_a, u_b) = (params.u_a, params.u_b);
    let (eps_a, eps_b) = (params.eps_a, params.eps_b);
    let single =
        eps_a * (1.0 - eps_b) * u_a * (-u_a).exp() + eps_b * (1.0 - eps_a) * u_b * (-u_b).exp();
    let p_zz = params.p_za * params.p_zb;
    let single_photon_term = p_zz * single * y1_l.max(0.0) * (1.0 - binary_entropy(e1.value));
    let leakage_term = p_zz * z.gain * sys.f_ec * binary_entropy(z.qber);
    let r_raw = single_photon_term - leakage_term;

    Ok(RateBreakdown {
        r: r_raw.max(0.0),
        r_raw,
        single_photon_term,
        leakage_term,
        y1_l,
        e1_u: e1.value,
        e1_clamped: e1.clamped,
        z_gain: z.gain,
        z_qber: z.qber,
        z,
        x_mu1,
        x_mu2,
        observed,
        bounded,
        sample_sizes,
        constraints,
        fluctuated: policy.enabled,
        m_slices: m,
        arms,
    })
}
