//! Decoy-state bounds on the single-photon yield and error rate that stay
//! valid when the two arms have different losses.
//!
//! With unequal arms the `n`-photon yield depends on the intensity ratio
//! `k`, so the two decoy pairs `w` (total `mu1`, ratio `k1`) and `v` (total
//! `mu2`, ratio `k2`) must satisfy `k1 <= k2`. The lower bound then
//! applies to `Y_1^{k1}`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::channel::Arms;
use crate::error::{check_non_negative, check_probability, Error, Result};
use crate::photon::{equivalent_yield_yn, poisson, truncation, IntensityPair, IntensityRatio};

/// Probability that a party picks any given decoy intensity in an X-window.
pub const DECOY_CHOICE_PROBABILITY: f64 = 1.0 / 3.0;

/// Error rate of vacuum events.
pub const VACUUM_ERROR_RATE: f64 = 0.5;

/// Relative slack when comparing ratios that should be equal by construction.
const RATIO_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoySettings {
    pub v_a: f64,
    pub v_b: f64,
    pub w_a: f64,
    pub w_b: f64,
}

impl DecoySettings {
    /// Decoys whose two halves arrive at the beam splitter with equal
    /// intensity, `v_a eta_a = v_b eta_b` and `w_a eta_a = w_b eta_b`.
    pub fn matched(v_b: f64, w_b: f64, arms: Arms) -> Self {
        let k = arms.eta_b / arms.eta_a;
        Self {
            v_a: v_b * k,
            v_b,
            w_a: w_b * k,
            w_b,
        }
    }

    pub fn w_pair(&self) -> IntensityPair {
        IntensityPair {
            x_a: self.w_a,
            x_b: self.w_b,
        }
    }

    pub fn v_pair(&self) -> IntensityPair {
        IntensityPair {
            x_a: self.v_a,
            x_b: self.v_b,
        }
    }

    pub fn mu1(&self) -> f64 {
        self.w_a + self.w_b
    }

    pub fn mu2(&self) -> f64 {
        self.v_a + self.v_b
    }

    pub fn k1(&self) -> IntensityRatio {
        self.w_pair().ratio()
    }

    pub fn k2(&self) -> IntensityRatio {
        self.v_pair().ratio()
    }

    pub fn validate(&self) -> Result<()> {
        check_non_negative("v_a", self.v_a)?;
        check_non_negative("v_b", self.v_b)?;
        check_non_negative("w_a", self.w_a)?;
        check_non_negative("w_b", self.w_b)
    }
}

/// A single failed constraint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "constraint", rename_all = "snake_case")]
pub enum ConstraintViolation {
    /// `k1 <= k2` fails.
    RatioOrder { k1: f64, k2: f64 },
    /// `u_a / u_b >= k1` fails.
    SignalRatio { ratio: f64, k1: f64 },
    /// `mu1 < mu2` fails.
    DecoyOrder { mu1: f64, mu2: f64 },
}

impl fmt::Display for ConstraintViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::RatioOrder { k1, k2 } => write!(f, "k1 <= k2 (k1 = {k1:e}, k2 = {k2:e})"),
            Self::SignalRatio { ratio, k1 } => {
                write!(f, "u_a/u_b >= k1 (u_a/u_b = {ratio:e}, k1 = {k1:e})")
            }
            Self::DecoyOrder { mu1, mu2 } => write!(f, "mu1 < mu2 (mu1 = {mu1:e}, mu2 = {mu2:e})"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub violations: Vec<ConstraintViolation>,
}

impl ConstraintReport {
    pub fn passes(&self) -> bool {
        self.violations.is_empty()
    }

    /// Sum of relative violation sizes; zero when every constraint holds.
    pub fn severity(&self) -> f64 {
        self.violations
            .iter()
            .map(|v| match *v {
                ConstraintViolation::RatioOrder { k1, k2 } => rel_gap(k1, k2),
                ConstraintViolation::SignalRatio { ratio, k1 } => rel_gap(k1, ratio),
                ConstraintViolation::DecoyOrder { mu1, mu2 } => rel_gap(mu1, mu2) + 1e-3,
            })
            .sum()
    }
}

fn rel_gap(big: f64, small: f64) -> f64 {
    if big.is_infinite() {
        1.0
    } else {
        (big - small) / big.abs().max(f64::MIN_POSITIVE)
    }
}

impl fmt::Display for ConstraintReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "all constraints satisfied");
        }
        let parts: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        write!(f, "{}", parts.join("; "))
    }
}

fn exceeds(lhs: f64, rhs: f64) -> bool {
    lhs > rhs * (1.0 + RATIO_SLACK)
}

/// Checks `k1 <= k2`, `u_a / u_b >= k1` and `mu1 < mu2`.
pub fn validate_constraints(settings: &DecoySettings, u_a: f64, u_b: f64) -> ConstraintReport {
    let mut violations = Vec::new();
    let k1 = settings.k1().value();
    let k2 = settings.k2().value();
    if exceeds(k1, k2) {
        violations.push(ConstraintViolation::RatioOrder { k1, k2 });
    }
    let ratio = IntensityPair { x_a: u_a, x_b: u_b }.ratio().value();
    if exceeds(k1, ratio) {
        violations.push(ConstraintViolation::SignalRatio { ratio, k1 });
    }
    let (mu1, mu2) = (settings.mu1(), settings.mu2());
    if !(mu1 < mu2) {
        violations.push(ConstraintViolation::DecoyOrder { mu1, mu2 });
    }
    ConstraintReport { violations }
}

/// Decoy-window statistics entering the bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservedRates {
    pub q_mu1: f64,
    pub q_mu2: f64,
    /// Gain times QBER of the `mu1` pair.
    pub qe_mu1: f64,
    pub y_0: f64,
}

impl ObservedRates {
    pub fn validate(&self) -> Result<()> {
        check_probability("q_mu1", self.q_mu1)?;
        check_probability("q_mu2", self.q_mu2)?;
        check_probability("qe_mu1", self.qe_mu1)?;
        check_probability("y_0", self.y_0)
    }
}

/// Lower bound on the single-photon yield `Y_1^{k1}`.
pub fn y1_lower(mu1: f64, mu2: f64, rates: &ObservedRates) -> Result<f64> {
    let (p0_1, p1_1, p2_1) = (poisson(0, mu1), poisson(1, mu1), poisson(2, mu1));
    let (p0_2, p1_2, p2_2) = (poisson(0, mu2), poisson(1, mu2), poisson(2, mu2));
    let denominator = p2_2 * p1_1 - p2_1 * p1_2;
    if !(denominator > 0.0) {
        return Err(Error::DegenerateDenominator(denominator));
    }
    let numerator =
        p2_2 * rates.q_mu1 - p2_1 * rates.q_mu2 + (p2_1 * p0_2 - p2_2 * p0_1) * rates.y_0;
    Ok(numerator / denominator)
}

/// Upper bound on the single-photon error rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct E1Bound {
    pub value: f64,
    /// The raw bound fell outside `[0, 0.5]` and was clamped.
    pub clamped: bool,
    pub raw: f64,
}

pub fn e1_upper(mu1: f64, rates: &ObservedRates, y1_lower: f64) -> Result<E1Bound> {
    if !(y1_lower > 0.0) {
        return Err(Error::NoSinglePhotonSignal(y1_lower));
    }
    let raw = (rates.qe_mu1 - poisson(0, mu1) * rates.y_0 * VACUUM_ERROR_RATE)
        / (poisson(1, mu1) * y1_lower);
    let value = raw.clamp(0.0, 0.5);
    Ok(E1Bound {
        value,
        clamped: value != raw,
        raw,
    })
}

/// Statistical fluctuation handling under a Gaussian approximation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FluctuationPolicy {
    pub enabled: bool,
    pub failure_prob: f64,
}

fn default_failure_prob() -> f64 {
    1e-7
}

impl Default for FluctuationPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            failure_prob: default_failure_prob(),
        }
    }
}

impl FluctuationPolicy {
    pub fn asymptotic() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    /// Two-sided Gaussian quantile for the failure probability.
    pub fn n_sigma(&self) -> f64 {
        std::f64::consts::SQRT_2 * statrs::function::erf::erfc_inv(self.failure_prob)
    }
}

/// Number of pulses behind each decoy observable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSizes {
    pub mu1: f64,
    pub mu2: f64,
}

impl SampleSizes {
    /// Pulses in which both users chose the X-window, both picked the pair
    /// in question, and the phases fell in one of the two accepted slices.
    pub fn from_allocation(n_pulses: f64, p_za: f64, p_zb: f64, m_slices: u32) -> Self {
        let per_pair = n_pulses
            * (1.0 - p_za)
            * (1.0 - p_zb)
            * DECOY_CHOICE_PROBABILITY
            * DECOY_CHOICE_PROBABILITY
            * (2.0 / m_slices as f64);
        Self {
            mu1: per_pair,
            mu2: per_pair,
        }
    }
}

/// Replaces each rate with the end of its `n_sigma` interval that is
/// pessimistic for the key rate: `Q_mu1` shrinks, `Q_mu2` and `QE_mu1`
/// grow. The vacuum yield is a calibrated model value and stays fixed.
pub fn apply_fluctuations(
    rates: &ObservedRates,
    sizes: &SampleSizes,
    policy: &FluctuationPolicy,
) -> Result<ObservedRates> {
    if !policy.enabled {
        return Ok(*rates);
    }
    if !(sizes.mu1 >= 1.0 && sizes.mu2 >= 1.0) {
        return Err(crate::error::invalid(
            "sample_sizes",
            "each sample size must be >= 1",
        ));
    }
    let ns = policy.n_sigma();
    let spread = |q: f64, n: f64| ns * (q / n).sqrt();
    Ok(ObservedRates {
        q_mu1: (rates.q_mu1 - spread(rates.q_mu1, sizes.mu1)).max(0.0),
        q_mu2: (rates.q_mu2 + spread(rates.q_mu2, sizes.mu2)).min(1.0),
        qe_mu1: (rates.qe_mu1 + spread(rates.qe_mu1, sizes.mu1)).min(1.0),
        y_0: rates.y_0,
    })
}

/// The two remainder terms dropped when deriving the yield bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Remainders {
    /// `sum_n (Y_n^{k2} - Y_n^{k1}) P_n(mu2)`.
    pub delta1: f64,
    /// `P_2(mu1) sum_{n>=3} Y_n^{k1} P_n(mu2) - P_2(mu2) sum_{n>=3} Y_n^{k1} P_n(mu1)`.
    pub delta2: f64,
}

/// Evaluates both remainders for yields generated by the loss model.
///
/// `delta2` is summed in the factored form
/// `P_2(mu1) P_2(mu2) sum_{n>=3} Y_n (2 / n!) (mu2^{n-2} - mu1^{n-2})`, which
/// is algebraically identical but free of cancellation.
pub fn remainders(settings: &DecoySettings, arms: Arms, p_d: f64) -> Remainders {
    let (mu1, mu2) = (settings.mu1(), settings.mu2());
    let (k1, k2) = (settings.k1(), settings.k2());
    let n_max = truncation(mu2.max(mu1));
    let delta1 = (1..=n_max)
        .map(|n| {
            (equivalent_yield_yn(n, k2, arms, p_d) - equivalent_yield_yn(n, k1, arms, p_d))
                * poisson(n, mu2)
        })
        .sum();
    let mut tail = 0.0;
    let mut inv_factorial = 0.5; // 1/2!
    for n in 3..=n_max {
        inv_factorial /= n as f64;
        let j = (n - 2) as i32;
        tail += equivalent_yield_yn(n, k1, arms, p_d)
            * 2.0
            * inv_factorial
            * (mu2.powi(j) - mu1.powi(j));
    }
    Remainders {
        delta1,
        delta2: poisson(2, mu1) * poisson(2, mu2) * tail,
    }
}

/// Decoy gains `(Q_mu1, Q_mu2)` generated from the photon-number yields.
pub fn modeled_decoy_gains(settings: &DecoySettings, arms: Arms, p_d: f64) -> (f64, f64) {
    let gain = |mu: f64, k: IntensityRatio| crate::photon::modeled_gain(mu, k, arms, p_d);
    (
        gain(settings.mu1(), settings.k1()),
        gain(settings.mu2(), settings.k2()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::photon::vacuum_yield;
    use approx::assert_relative_eq;

    const ARMS: Arms = Arms {
        eta_a: 0.05,
        eta_b: 0.0005,
    };

    #[test]
    fn matched_configuration_passes() {
        let d = DecoySettings::matched(0.3, 0.05, ARMS);
        let report = validate_constraints(&d, 1.0, 1.0);
        assert!(report.passes(), "{report}");
        assert_relative_eq!(
            d.k1().value(),
            ARMS.eta_b / ARMS.eta_a,
            max_relative = 1e-15
        );
    }

    #[test]
    fn ratio_order_violation() {
        let d = DecoySettings {
            v_a: 0.2,
            v_b: 0.2,
            w_a: 0.1,
            w_b: 0.05,
        };
        let report = validate_constraints(&d, 10.0, 1.0);
        assert_eq!(report.violations.len(), 1);
        assert!(matches!(
            report.violations[0],
            ConstraintViolation::RatioOrder { .. }
        ));
        assert!(report.to_string().contains("k1 <= k2"));
    }

    #[test]
    fn signal_ratio_violation() {
        let d = DecoySettings {
            v_a: 0.01,
            v_b: 0.5,
            w_a: 0.001,
            w_b: 0.1,
        };
        let report = validate_constraints(&d, 0.001, 1.0);
        assert_eq!(report.violations.len(), 1);
        assert!(matches!(
            report.violations[0],
            ConstraintViolation::SignalRatio { .. }
        ));
    }

    #[test]
    fn decoy_order_violation() {
        let d = DecoySettings::matched(0.05, 0.3, ARMS);
        let report = validate_constraints(&d, 1.0, 1.0);
        assert!(matches!(
            report.violations[..],
            [ConstraintViolation::DecoyOrder { .. }]
        ));
        assert!(report.severity() > 0.0);
    }

    #[test]
    fn bound_below_true_yield_at_table_point() {
        let p_d = 1e-10;
        let d = DecoySettings::matched(0.3, 0.05, ARMS);
        let (q1, q2) = modeled_decoy_gains(&d, ARMS, p_d);
        let rates = ObservedRates {
            q_mu1: q1,
            q_mu2: q2,
            qe_mu1: 0.0,
            y_0: vacuum_yield(p_d),
        };
        let y1l = y1_lower(d.mu1(), d.mu2(), &rates).unwrap();
        let y1 = equivalent_yield_yn(1, d.k1(), ARMS, p_d);
        assert!(y1l <= y1 && y1l > 0.9 * y1, "{y1l} vs {y1}");
    }

    #[test]
    fn equal_decoys_are_degenerate() {
        let rates = ObservedRates {
            q_mu1: 1e-3,
            q_mu2: 1e-3,
            qe_mu1: 1e-4,
            y_0: 0.0,
        };
        assert!(matches!(
            y1_lower(0.2, 0.2, &rates),
            Err(Error::DegenerateDenominator(_))
        ));
    }

    #[test]
    fn lossless_bound_capped() {
        let arms = Arms {
            eta_a: 1.0,
            eta_b: 1.0,
        };
        let d = DecoySettings::matched(0.4, 0.1, arms);
        let (q1, q2) = modeled_decoy_gains(&d, arms, 0.0);
        let rates = ObservedRates {
            q_mu1: q1,
            q_mu2: q2,
            qe_mu1: 0.0,
            y_0: 0.0,
        };
        assert!(y1_lower(d.mu1(), d.mu2(), &rates).unwrap() <= 1.0);
    }

    #[test]
    fn e1_examples() {
        let mu1 = 0.1;
        let y_0 = 1e-5;
        let rates = ObservedRates {
            q_mu1: 1e-3,
            q_mu2: 2e-3,
            qe_mu1: poisson(0, mu1) * y_0 * 0.5,
            y_0,
        };
        let e1 = e1_upper(mu1, &rates, 1e-2).unwrap();
        assert!(e1.value.abs() < 1e-18);
        assert!(matches!(
            e1_upper(mu1, &rates, 0.0),
            Err(Error::NoSinglePhotonSignal(_))
        ));

        let noisy = ObservedRates {
            qe_mu1: 5e-3,
            ..rates
        };
        let e1 = e1_upper(mu1, &noisy, 1e-3).unwrap();
        assert!(e1.clamped && e1.value == 0.5 && e1.raw > 0.5);
    }

    #[test]
    fn n_sigma_for_default_failure_probability() {
        let ns = FluctuationPolicy::default().n_sigma();
        // Two-sided tail 1e-7: erfc(z / sqrt 2) = 1e-7.
        assert!((ns - 5.326_723_886_384_5).abs() < 1e-6, "{ns}");
        let back = statrs::function::erf::erfc(ns / std::f64::consts::SQRT_2);
        assert_relative_eq!(back, 1e-7, max_relative = 1e-8);
    }

    #[test]
    fn fluctuation_behaviour() {
        let rates = ObservedRates {
            q_mu1: 1e-4,
            q_mu2: 5e-4,
            qe_mu1: 2e-5,
            y_0: 2e-10,
        };
        let sizes = SampleSizes { mu1: 1e9, mu2: 1e9 };
        let off = FluctuationPolicy::asymptotic();
        assert_eq!(apply_fluctuations(&rates, &sizes, &off).unwrap(), rates);

        let on = FluctuationPolicy::default();
        let worst = apply_fluctuations(&rates, &sizes, &on).unwrap();
        assert!(
            worst.q_mu1 < rates.q_mu1 && worst.q_mu2 > rates.q_mu2 && worst.qe_mu1 > rates.qe_mu1
        );

        let huge = SampleSizes {
            mu1: 1e30,
            mu2: 1e30,
        };
        let near = apply_fluctuations(&rates, &huge, &on).unwrap();
        assert_relative_eq!(near.q_mu1, rates.q_mu1, max_relative = 1e-9);
        assert_relative_eq!(near.qe_mu1, rates.qe_mu1, max_relative = 1e-9);

        let tiny = SampleSizes {
            mu1: 10.0,
            mu2: 10.0,
        };
        assert_eq!(apply_fluctuations(&rates, &tiny, &on).unwrap().q_mu1, 0.0);
    }

    #[test]
    fn remainder_signs() {
        let d = DecoySettings {
            v_a: 0.3,
            v_b: 0.2,
            w_a: 0.01,
            w_b: 0.05,
        };
        let r = remainders(&d, ARMS, 1e-8);
        assert!(r.delta1 >= 0.0 && r.delta2 > 0.0);

        // Direct form agrees with the factored one where cancellation is mild.
        let (mu1, mu2, k1) = (d.mu1(), d.mu2(), d.k1());
        let tail = |mu: f64| -> f64 {
            (3..=40)
                .map(|n| equivalent_yield_yn(n, k1, ARMS, 1e-8) * poisson(n, mu))
                .sum()
        };
        let direct = poisson(2, mu1) * tail(mu2) - poisson(2, mu2) * tail(mu1);
        assert_relative_eq!(r.delta2, direct, max_relative = 1e-8);
    }
}
