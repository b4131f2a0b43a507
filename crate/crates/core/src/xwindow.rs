//! Decoy-window (X-window) observables.
//!
//! The two decoy pulses interfere on the beam splitter. With phases
//! `delta_a`, `delta_b` the detector on the constructive port (`D+`) sees
//! mean photon number `I+ = (A + B)/2 + sqrt(AB) cos(delta_a - delta_b)` and
//! the other port (`D-`) sees `I- = (A + B)/2 - sqrt(AB) cos(...)`, where
//! `A = alpha eta_a` and `B = beta eta_b` are the arriving intensities. An
//! effective event is exactly one click; a lone `D-` click is an error in
//! the zero-phase slice.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::channel::Arms;
use crate::error::{Error, Result};
use crate::quadrature::{gl16, gl32, GaussLegendre};

/// Relative agreement demanded between the 32- and 16-node rules.
pub const QUADRATURE_TOLERANCE: f64 = 1e-9;

/// One decoy-window emission with explicit phases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XWindowPoint {
    pub alpha: f64,
    pub beta: f64,
    pub delta_a: f64,
    pub delta_b: f64,
}

impl XWindowPoint {
    /// Phases are wrapped into `[0, 2pi)`.
    pub fn new(alpha: f64, beta: f64, delta_a: f64, delta_b: f64) -> Self {
        Self {
            alpha,
            beta,
            delta_a: delta_a.rem_euclid(2.0 * PI),
            delta_b: delta_b.rem_euclid(2.0 * PI),
        }
    }
}

/// Phase-slice averaged gain and error rate of one decoy intensity pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XWindowObservables {
    pub gain: f64,
    /// Gain times QBER.
    pub qe: f64,
    pub qber: f64,
    pub e_sys: f64,
    pub delta_offset: f64,
}

/// `1 - (1 - p_d) e^{-I}`: probability that a detector with mean photon
/// number `I` clicks.
#[inline]
fn click(intensity: f64, p_d: f64) -> f64 {
    if intensity == 0.0 {
        p_d
    } else {
        -((-p_d).ln_1p() - intensity).exp_m1()
    }
}

/// `(P(only D+ clicks), P(only D- clicks))` for port intensities `I+`, `I-`.
#[inline]
fn lone_clicks(plus: f64, minus: f64, p_d: f64) -> (f64, f64) {
    let silent_plus = (1.0 - p_d) * (-plus).exp();
    let silent_minus = (1.0 - p_d) * (-minus).exp();
    (
        silent_minus * click(plus, p_d),
        silent_plus * click(minus, p_d),
    )
}

#[inline]
fn port_intensities(arriving_a: f64, arriving_b: f64, cos_theta: f64) -> (f64, f64) {
    let mean = 0.5 * (arriving_a + arriving_b);
    let cross = (arriving_a * arriving_b).sqrt() * cos_theta;
    ((mean + cross).max(0.0), (mean - cross).max(0.0))
}

/// Fixed-phase gain: probability that exactly one detector clicks.
pub fn gain_fixed_phase(point: XWindowPoint, arms: Arms, p_d: f64) -> f64 {
    let (ok, err) = fixed_phase(point, arms, p_d);
    ok + err
}

/// Fixed-phase error probability (gain times QBER): only `D-` clicks.
pub fn error_fixed_phase(point: XWindowPoint, arms: Arms, p_d: f64) -> f64 {
    fixed_phase(point, arms, p_d).1
}

fn fixed_phase(point: XWindowPoint, arms: Arms, p_d: f64) -> (f64, f64) {
    let (plus, minus) = port_intensities(
        point.alpha * arms.eta_a,
        point.beta * arms.eta_b,
        (point.delta_a - point.delta_b).cos(),
    );
    lone_clicks(plus, minus, p_d)
}

/// System error rate and the equivalent phase offset `arccos(1 - 2 e_sys)`
/// for the arriving intensities of the pair `(alpha, beta)`.
pub fn system_error(alpha: f64, beta: f64, arms: Arms, e_d: f64) -> Result<(f64, f64)> {
    let a = alpha * arms.eta_a;
    let b = beta * arms.eta_b;
    let sum = a + b;
    if !(sum > 0.0) {
        return Err(Error::NoArrivingIntensity);
    }
    let visibility = (a * b).sqrt() / sum;
    let e_sys = 0.5 - visibility + 2.0 * visibility * e_d;
    let delta = (1.0 - 2.0 * e_sys).clamp(-1.0, 1.0).acos();
    Ok((e_sys, delta))
}

/// Slice-averaged observables with the default 32x32 rule and a 16x16
/// error estimate.
pub fn averaged_observables(
    alpha: f64,
    beta: f64,
    arms: Arms,
    p_d: f64,
    e_d: f64,
    m_slices: u32,
) -> Result<XWindowObservables> {
    let fine = averaged_observables_with(gl32(), alpha, beta, arms, p_d, e_d, m_slices)?;
    let coarse = averaged_observables_with(gl16(), alpha, beta, arms, p_d, e_d, m_slices)?;
    let estimate = (fine.gain - coarse.gain)
        .abs()
        .max((fine.qe - coarse.qe).abs());
    let tolerance = QUADRATURE_TOLERANCE * fine.gain;
    if estimate > tolerance {
        return Err(Error::QuadratureNotConverged {
            estimate,
            tolerance,
        });
    }
    Ok(fine)
}

/// Slice-averaged observables with an explicit rule. The Alice phase spans
/// `[0, 2pi/M]` and Bob's `[Delta, 2pi/M + Delta]`; the opposite slice is
/// the mirror image with detector roles exchanged and gives the same values.
pub fn averaged_observables_with(
    rule: &GaussLegendre,
    alpha: f64,
    beta: f64,
    arms: Arms,
    p_d: f64,
    e_d: f64,
    m_slices: u32,
) -> Result<XWindowObservables> {
    if m_slices < 2 {
        return Err(crate::error::invalid("m_slices", "must be >= 2"));
    }
    let a = alpha * arms.eta_a;
    let b = beta * arms.eta_b;
    let (e_sys, delta) = if a + b > 0.0 {
        system_error(alpha, beta, arms, e_d)?
    } else {
        (0.5, PI)
    };
    let width = 2.0 * PI / m_slices as f64;
    let norm = 1.0 / (width * width);

    let mut gain = 0.0;
    let mut qe = 0.0;
    let bob: Vec<(f64, f64)> = rule.mapped(delta, width + delta).collect();
    for (da, wa) in rule.mapped(0.0, width) {
        for &(db, wb) in &bob {
            let (plus, minus) = port_intensities(a, b, (da - db).cos());
            let (ok, err) = lone_clicks(plus, minus, p_d);
            let w = wa * wb;
            gain += w * (ok + err);
            qe += w * err;
        }
    }
    gain *= norm;
    qe *= norm;
    let qber = if gain > 0.0 { qe / gain } else { 0.5 };
    Ok(XWindowObservables {
        gain,
        qe,
        qber,
        e_sys,
        delta_offset: delta,
    })
}
