//! Photon-number statistics of the two phase-randomized weak coherent pulses.
//!
//! Alice's and Bob's pulses jointly behave like a single Poisson source with
//! mean `x_a + x_b`. Its `n`-photon component reaches a detector with an
//! equivalent per-photon transmittance that depends on the intensity ratio
//! `k = x_a / x_b`, which is what makes the decoy analysis ratio-dependent.

use serde::{Deserialize, Serialize};

use crate::channel::Arms;
use crate::error::{check_non_negative, invalid, Result};

/// Mean photon numbers launched by Alice and Bob in the same time window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityPair {
    pub x_a: f64,
    pub x_b: f64,
}

impl IntensityPair {
    pub fn new(x_a: f64, x_b: f64) -> Result<Self> {
        check_non_negative("x_a", x_a)?;
        check_non_negative("x_b", x_b)?;
        Ok(Self { x_a, x_b })
    }

    pub fn total(&self) -> f64 {
        self.x_a + self.x_b
    }

    /// `x_a / x_b`; an all-Alice pair maps to [`IntensityRatio::AliceOnly`].
    pub fn ratio(&self) -> IntensityRatio {
        if self.x_b > 0.0 {
            IntensityRatio::Finite(self.x_a / self.x_b)
        } else {
            IntensityRatio::AliceOnly
        }
    }
}

/// Intensity ratio `k = x_a / x_b`, carried explicitly so that `x_b = 0`
/// never produces a 0/0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum IntensityRatio {
    Finite(f64),
    AliceOnly,
}

impl IntensityRatio {
    pub fn new(k: f64) -> Result<Self> {
        if k.is_nan() || k < 0.0 {
            return Err(invalid("k", format!("{k} must be >= 0")));
        }
        Ok(if k.is_infinite() {
            Self::AliceOnly
        } else {
            Self::Finite(k)
        })
    }

    pub fn value(&self) -> f64 {
        match *self {
            Self::Finite(k) => k,
            Self::AliceOnly => f64::INFINITY,
        }
    }

    /// Probability that a single photon of the mixed source is lost,
    /// `(1 - eta_a) + (eta_a - eta_b) / (k + 1)`.
    pub fn loss(&self, arms: Arms) -> f64 {
        match *self {
            Self::Finite(k) => (1.0 - arms.eta_a) + (arms.eta_a - arms.eta_b) / (k + 1.0),
            Self::AliceOnly => 1.0 - arms.eta_a,
        }
    }

    /// Equivalent per-photon transmittance `(k eta_a + eta_b) / (k + 1)`.
    pub fn transmittance(&self, arms: Arms) -> f64 {
        match *self {
            Self::Finite(k) => (k * arms.eta_a + arms.eta_b) / (k + 1.0),
            Self::AliceOnly => arms.eta_a,
        }
    }
}

/// Poisson probability `P_n(mean)`.
pub fn poisson(n: u32, mean: f64) -> f64 {
    if mean == 0.0 {
        return if n == 0 { 1.0 } else { 0.0 };
    }
    if n < 100 {
        let mut p = (-mean).exp();
        for i in 1..=n {
            p *= mean / i as f64;
        }
        p
    } else {
        (n as f64 * mean.ln() - mean - ln_factorial(n)).exp()
    }
}

fn ln_factorial(n: u32) -> f64 {
    statrs::function::factorial::ln_factorial(n as u64)
}

/// Equivalent photon-number distribution of the pair: the convolution of
/// the two Poisson distributions, which is Poisson with mean `x_a + x_b`.
pub fn poisson_mixture_pn(n: u32, pair: IntensityPair) -> f64 {
    poisson(n, pair.total())
}

/// Photon-number cut-off for infinite sums: the Poisson tail beyond it is
/// far below 1e-15 of the total mass.
pub fn truncation(mean: f64) -> u32 {
    (mean + 12.0 * mean.sqrt() + 20.0).ceil() as u32
}

/// `1 - (1 - p_d)^2 (1 - eta_a)^m (1 - eta_b)^(n - m)`, evaluated without
/// cancellation for tiny detection probabilities.
fn click_probability(m: u32, rest: u32, arms: Arms, p_d: f64) -> f64 {
    let log_none = 2.0 * (-p_d).ln_1p()
        + times_log(m, (-arms.eta_a).ln_1p())
        + times_log(rest, (-arms.eta_b).ln_1p());
    -log_none.exp_m1()
}

/// `count * log_p`, taking `0 * ln 0` as 0.
fn times_log(count: u32, log_p: f64) -> f64 {
    if count == 0 {
        0.0
    } else {
        count as f64 * log_p
    }
}

/// Counting rate `Q_n` of `n`-photon effective events, summing over how the
/// `n` photons split between Alice (`m`) and Bob (`n - m`).
pub fn effective_gain_qn(n: u32, pair: IntensityPair, arms: Arms, p_d: f64) -> f64 {
    (0..=n)
        .map(|m| {
            poisson(m, pair.x_a) * poisson(n - m, pair.x_b) * click_probability(m, n - m, arms, p_d)
        })
        .sum()
}

/// Equivalent yield `Y_n^k = 1 - (1 - p_d)^2 [(k(1-eta_a) + (1-eta_b)) / (k+1)]^n`.
pub fn equivalent_yield_yn(n: u32, k: IntensityRatio, arms: Arms, p_d: f64) -> f64 {
    let log_none = 2.0 * (-p_d).ln_1p() + times_log(n, (-k.transmittance(arms)).ln_1p());
    (-log_none.exp_m1()).clamp(0.0, 1.0)
}

/// Overall gain `sum_n P_n(mu) Y_n^k` of a pair with total mean `mu`,
/// truncated at [`truncation`].
pub fn modeled_gain(mu: f64, k: IntensityRatio, arms: Arms, p_d: f64) -> f64 {
    (0..=truncation(mu))
        .map(|n| poisson(n, mu) * equivalent_yield_yn(n, k, arms, p_d))
        .sum()
}

/// Vacuum yield `Y_0 = 1 - (1 - p_d)^2`.
pub fn vacuum_yield(p_d: f64) -> f64 {
    p_d * (2.0 - p_d)
}
