//! Signal-window (Z-window) observables.
//!
//! Each user independently sends a pulse of intensity `u` with probability
//! `eps` or sends nothing. An effective event is a single click. Sending
//! maps to bit 1 for Alice and bit 0 for Bob, so the "both send" and
//! "neither sends" cases give mismatched bits and count as errors; the two
//! one-sided cases are correct.

use serde::{Deserialize, Serialize};

use crate::channel::Arms;
use crate::error::{check_non_negative, check_probability, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZWindowParams {
    pub u_a: f64,
    pub u_b: f64,
    pub eps_a: f64,
    pub eps_b: f64,
}

impl ZWindowParams {
    pub fn validate(&self) -> Result<()> {
        check_non_negative("u_a", self.u_a)?;
        check_non_negative("u_b", self.u_b)?;
        check_probability("eps_a", self.eps_a)?;
        check_probability("eps_b", self.eps_b)
    }

    /// Probability of each sending case.
    pub fn case_probability(&self, case: ZCase) -> f64 {
        let (a, b) = (self.eps_a, self.eps_b);
        match case {
            ZCase::Both => a * b,
            ZCase::AliceOnly => a * (1.0 - b),
            ZCase::BobOnly => (1.0 - a) * b,
            ZCase::Neither => (1.0 - a) * (1.0 - b),
        }
    }
}

/// Which users send a pulse in a Z-window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZCase {
    Both,
    AliceOnly,
    BobOnly,
    Neither,
}

impl ZCase {
    pub const ALL: [ZCase; 4] = [
        ZCase::Both,
        ZCase::AliceOnly,
        ZCase::BobOnly,
        ZCase::Neither,
    ];

    /// Whether an effective event in this case yields mismatched key bits.
    pub fn is_error(self) -> bool {
        matches!(self, ZCase::Both | ZCase::Neither)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZWindowObservables {
    pub gain: f64,
    pub qber: f64,
    /// Single-click probability conditioned on each case, in [`ZCase::ALL`] order.
    pub case_gains: [f64; 4],
}

/// `1 - (1 - p_d) e^{-I}`.
fn click(intensity: f64, p_d: f64) -> f64 {
    if intensity == 0.0 {
        p_d
    } else {
        -((-p_d).ln_1p() - intensity).exp_m1()
    }
}

/// Exactly-one-click probability when a single arm delivers `arriving`
/// photons on average, split evenly over the two detectors.
fn one_arm_gain(arriving: f64, p_d: f64) -> f64 {
    let half = 0.5 * arriving;
    2.0 * (1.0 - p_d) * (-half).exp() * click(half, p_d)
}

/// Single-click probability for one sending case. With both users sending,
/// the relative phase is uniform, and averaging the fixed-phase gain over it
/// gives `2(1-p_d) e^{-(A+B)/2} I0(sqrt(AB)) - 2(1-p_d)^2 e^{-(A+B)}`.
pub fn z_gain_case(case: ZCase, params: &ZWindowParams, arms: Arms, p_d: f64) -> f64 {
    let a = params.u_a * arms.eta_a;
    let b = params.u_b * arms.eta_b;
    match case {
        ZCase::Neither => 2.0 * p_d * (1.0 - p_d),
        ZCase::AliceOnly => one_arm_gain(a, p_d),
        ZCase::BobOnly => one_arm_gain(b, p_d),
        ZCase::Both => {
            let mean = 0.5 * (a + b);
            let s = (a * b).sqrt();
            if s < 30.0 {
                // 2(1-p_d) e^{-mean} [(I0(s) - 1) + (1 - (1-p_d) e^{-mean})]
                2.0 * (1.0 - p_d) * (-mean).exp() * (bessel_i0_minus_one(s) + click(mean, p_d))
            } else {
                2.0 * (1.0 - p_d)
                    * ((s - mean).exp() * bessel_i0_scaled(s) - (1.0 - p_d) * (-2.0 * mean).exp())
            }
        }
    }
}

pub fn z_observables(params: &ZWindowParams, arms: Arms, p_d: f64) -> Result<ZWindowObservables> {
    params.validate()?;
    let mut case_gains = [0.0; 4];
    let mut gain = 0.0;
    let mut errors = 0.0;
    for (slot, case) in case_gains.iter_mut().zip(ZCase::ALL) {
        *slot = z_gain_case(case, params, arms, p_d);
        let weighted = params.case_probability(case) * *slot;
        gain += weighted;
        if case.is_error() {
            errors += weighted;
        }
    }
    if !(gain > 0.0) {
        return Err(Error::DegenerateZWindow);
    }
    Ok(ZWindowObservables {
        gain,
        qber: errors / gain,
        case_gains,
    })
}

/// `I0(x) - 1` for `0 <= x < 30`, summed from the power series.
pub fn bessel_i0_minus_one(x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = 1.0;
    let mut sum = 0.0;
    for k in 1..200 {
        let kf = k as f64;
        term *= q / (kf * kf);
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

/// `e^{-x} I0(x)` from the large-argument expansion, for `x >= 30`.
fn bessel_i0_scaled(x: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..12 {
        let odd = (2 * k - 1) as f64;
        term *= odd * odd / (8.0 * k as f64 * x);
        sum += term;
    }
    sum / (2.0 * std::f64::consts::PI * x).sqrt()
}

pub fn bessel_i0(x: f64) -> f64 {
    let x = x.abs();
    if x < 30.0 {
        1.0 + bessel_i0_minus_one(x)
    } else {
        x.exp() * bessel_i0_scaled(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::GaussLegendre;
    use crate::xwindow::{gain_fixed_phase, XWindowPoint};
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    const TABLE_ARMS: Arms = Arms {
        eta_a: 0.05,
        eta_b: 0.0005,
    };

    fn params(u_a: f64, u_b: f64, eps_a: f64, eps_b: f64) -> ZWindowParams {
        ZWindowParams {
            u_a,
            u_b,
            eps_a,
            eps_b,
        }
    }

    #[test]
    fn bessel_reference_values() {
        // Abramowitz & Stegun table 9.8.
        assert_relative_eq!(
            bessel_i0(1.0),
            1.266_065_877_752_008_4,
            max_relative = 1e-15
        );
        assert_relative_eq!(bessel_i0(5.0), 27.239_871_823_604_44, max_relative = 1e-14);
        // Series and asymptotic branches agree at the switch point.
        let series = 1.0 + bessel_i0_minus_one(30.0);
        let asym = 30f64.exp() * bessel_i0_scaled(30.0);
        assert_relative_eq!(series, asym, max_relative = 1e-12);
    }

    #[test]
    fn vacuum_cases() {
        let p_d = 1e-6;
        let p = params(0.3, 0.4, 0.1, 0.2);
        assert_eq!(
            z_gain_case(ZCase::Neither, &p, TABLE_ARMS, p_d),
            2.0 * p_d * (1.0 - p_d)
        );
        let tiny = params(1e-300, 0.4, 0.1, 0.2);
        assert_relative_eq!(
            z_gain_case(ZCase::AliceOnly, &tiny, TABLE_ARMS, p_d),
            2.0 * p_d * (1.0 - p_d),
            max_relative = 1e-9
        );
    }

    #[test]
    fn both_send_is_phase_average_of_fixed_gain() {
        let p_d = 1e-10;
        let p = params(0.1, 0.4, 0.2, 0.2);
        let rule = GaussLegendre::new(256);
        let avg = rule.integrate(0.0, 2.0 * PI, |theta| {
            gain_fixed_phase(XWindowPoint::new(0.1, 0.4, theta, 0.0), TABLE_ARMS, p_d)
        }) / (2.0 * PI);
        let closed = z_gain_case(ZCase::Both, &p, TABLE_ARMS, p_d);
        assert!((avg - closed).abs() < 1e-9 * closed, "{avg} vs {closed}");

        let strong = Arms {
            eta_a: 1.0,
            eta_b: 1.0,
        };
        let p = params(40.0, 35.0, 0.5, 0.5);
        let avg = rule.integrate(0.0, 2.0 * PI, |theta| {
            gain_fixed_phase(XWindowPoint::new(40.0, 35.0, theta, 0.0), strong, p_d)
        }) / (2.0 * PI);
        let closed = z_gain_case(ZCase::Both, &p, strong, p_d);
        assert!((avg - closed).abs() < 1e-9 * closed, "{avg} vs {closed}");
    }

    #[test]
    fn observable_examples() {
        let obs = z_observables(&params(0.3, 0.3, 1.0, 0.0), TABLE_ARMS, 0.0).unwrap();
        assert_eq!(obs.qber, 0.0);
        let p_d = 1e-7;
        let obs = z_observables(&params(0.3, 0.3, 0.0, 0.0), TABLE_ARMS, p_d).unwrap();
        assert_relative_eq!(obs.gain, 2.0 * p_d * (1.0 - p_d), max_relative = 1e-15);
        assert_eq!(obs.qber, 1.0);
        assert!(matches!(
            z_observables(&params(0.3, 0.3, 0.0, 0.0), TABLE_ARMS, 0.0),
            Err(Error::DegenerateZWindow)
        ));
    }

    #[test]
    fn gain_is_weighted_case_sum() {
        let p = params(0.1, 0.45, 0.07, 0.21);
        let obs = z_observables(&p, TABLE_ARMS, 1e-10).unwrap();
        let manual: f64 = ZCase::ALL
            .iter()
            .map(|&c| p.case_probability(c) * z_gain_case(c, &p, TABLE_ARMS, 1e-10))
            .sum();
        assert_relative_eq!(obs.gain, manual, max_relative = 1e-12);
        assert!((0.0..=1.0).contains(&obs.qber));
    }

    #[test]
    fn qber_tends_to_one_without_senders() {
        let p_d = 1e-6;
        let mut prev = 0.0;
        for eps in [1e-3, 1e-4, 1e-6, 1e-8] {
            let q = z_observables(&params(0.3, 0.3, eps, eps), TABLE_ARMS, p_d)
                .unwrap()
                .qber;
            assert!(q > prev);
            prev = q;
        }
        assert!(prev > 0.9);
    }
}
