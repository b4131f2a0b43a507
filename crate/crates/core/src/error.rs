use thiserror::Error;

use crate::decoy::ConstraintReport;

/// Errors produced by the key-rate engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("link geometry violates l_a <= l_b (l_a = {l_a} km, l_b = {l_b} km)")]
    GeometryConvention { l_a: f64, l_b: f64 },

    #[error("no light arrives at the beam splitter from either arm")]
    NoArrivingIntensity,

    #[error("decoy constraints violated: {0}")]
    Constraints(ConstraintReport),

    #[error("degenerate decoy denominator P2(mu2)P1(mu1) - P2(mu1)P1(mu2) = {0:e}")]
    DegenerateDenominator(f64),

    #[error("single-photon yield lower bound is not positive ({0:e}); no single-photon signal extractable")]
    NoSinglePhotonSignal(f64),

    #[error("quadrature did not converge: estimated error {estimate:e} exceeds {tolerance:e}")]
    QuadratureNotConverged { estimate: f64, tolerance: f64 },

    #[error("Z-window gain is zero; QBER undefined")]
    DegenerateZWindow,

    #[error("insufficient statistics: {0}")]
    InsufficientStatistics(String),

    #[error("no feasible starting point among {tried} candidates: {diagnostics}")]
    NoFeasibleStart { tried: usize, diagnostics: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

/// Checks that `value` is a finite probability.
pub(crate) fn check_probability(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(invalid(name, format!("{value} is not in [0, 1]")))
    }
}

pub(crate) fn check_non_negative(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(invalid(name, format!("{value} must be finite and >= 0")))
    }
}
