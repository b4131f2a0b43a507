//! Run configuration documents.
//!
//! A config is TOML, or JSON when the file ends in `.json` or its first
//! non-blank character is `{`. Every section is optional and unknown keys
//! are rejected.
//!
//! ```toml
//! [system]
//! e_d = 0.2
//!
//! [geometry]
//! l_a = 50.0
//! l_b = 150.0
//!
//! [matched]
//! u_b = 0.4
//! v_b = 0.1
//! w_b = 0.02
//! eps = 0.03
//! p_z = 0.8
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::{arm_transmittances, LinkGeometry, SystemParams};
use crate::decoy::FluctuationPolicy;
use crate::error::{check_probability, invalid, Error, Result};
use crate::keyrate::ProtocolParams;
use crate::optimizer::OptimizationSpec;
use crate::validate::SIGMA_THRESHOLD;

/// Protocol settings given in terms of the far user's intensities; the near
/// user's are scaled by `eta_b / eta_a` so both arrive equally bright.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchedProtocol {
    pub u_b: f64,
    pub v_b: f64,
    pub w_b: f64,
    pub eps: f64,
    pub p_z: f64,
    #[serde(default)]
    pub m_slices: Option<u32>,
}

impl Default for MatchedProtocol {
    fn default() -> Self {
        Self {
            u_b: 0.45,
            v_b: 0.3,
            w_b: 0.04,
            eps: 0.01,
            p_z: 0.8,
            m_slices: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationSection {
    pub trials: u64,
    pub seed: u64,
    pub threshold: f64,
    /// Test hook: scales the analytic transmittances.
    pub analytic_eta_scale: f64,
}

impl Default for ValidationSection {
    fn default() -> Self {
        Self {
            trials: 1_000_000,
            seed: 0,
            threshold: SIGMA_THRESHOLD,
            analytic_eta_scale: 1.0,
        }
    }
}

fn default_geometry() -> LinkGeometry {
    LinkGeometry {
        l_a: 50.0,
        l_b: 150.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub system: SystemParams,
    pub geometry: LinkGeometry,
    /// Explicit per-user settings. Mutually exclusive with `matched`.
    pub protocol: Option<ProtocolParams>,
    pub matched: Option<MatchedProtocol>,
    pub optimizer: OptimizationSpec,
    pub fluctuation: FluctuationPolicy,
    pub validation: ValidationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            system: SystemParams::default(),
            geometry: default_geometry(),
            protocol: None,
            matched: None,
            optimizer: OptimizationSpec::default(),
            fluctuation: FluctuationPolicy::default(),
            validation: ValidationSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfigFormat {
    Toml,
    Json,
}

impl ConfigFormat {
    fn detect(path: Option<&Path>, text: &str) -> Self {
        let json_ext = path
            .and_then(|p| p.extension())
            .is_some_and(|e| e.eq_ignore_ascii_case("json"));
        if json_ext || text.trim_start().starts_with('{') {
            ConfigFormat::Json
        } else {
            ConfigFormat::Toml
        }
    }
}

impl RunConfig {
    pub fn from_str_with(text: &str, format: ConfigFormat) -> Result<Self> {
        let cfg: Self = match format {
            ConfigFormat::Toml => toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?,
            ConfigFormat::Json => {
                serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_str_with(text, ConfigFormat::detect(None, text))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_with(&text, ConfigFormat::detect(Some(path), &text)).map_err(|e| {
            let msg = match e {
                Error::Config(m) => m,
                other => other.to_string(),
            };
            Error::Config(format!("{}: {msg}", path.display()))
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.geometry.validate()?;
        self.optimizer.validate()?;
        let fp = self.fluctuation.failure_prob;
        check_probability("fluctuation.failure_prob", fp)?;
        if fp == 0.0 || fp == 1.0 {
            return Err(invalid(
                "fluctuation.failure_prob",
                format!("{fp} must lie in (0, 1)"),
            ));
        }
        if self.protocol.is_some() && self.matched.is_some() {
            return Err(Error::Config(
                "give either [protocol] or [matched], not both".into(),
            ));
        }
        if let Some(p) = &self.protocol {
            p.validate()?;
        }
        let v = &self.validation;
        if !(v.threshold > 0.0 && v.analytic_eta_scale > 0.0) {
            return Err(invalid(
                "validation",
                "threshold and analytic_eta_scale must be positive",
            ));
        }
        Ok(())
    }

    /// The protocol point to evaluate: `protocol` if given, else the
    /// matched settings, else the default matched point.
    pub fn protocol_params(&self) -> Result<ProtocolParams> {
        if let Some(p) = self.protocol {
            return Ok(p);
        }
        let m = self.matched.unwrap_or_default();
        let arms = arm_transmittances(&self.system, &self.geometry)?;
        let mut p = ProtocolParams::matched(m.u_b, m.v_b, m.w_b, m.eps, m.p_z, arms);
        p.m_slices = m.m_slices;
        p.validate()?;
        Ok(p)
    }
}
