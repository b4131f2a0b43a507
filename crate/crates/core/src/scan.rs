//! Parameter scans over distance and misalignment, and scaling fits.

use serde::{Deserialize, Serialize};

use crate::channel::{arm_transmittances, LinkGeometry, SystemParams};
use crate::decoy::FluctuationPolicy;
use crate::error::{invalid, Error, Result};
use crate::optimizer::{optimize, symmetric_baseline, OptimizationResult, OptimizationSpec};
use crate::parallel::Execution;

/// How the two arms are laid out for a given total distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanMode {
    /// `l_b - l_a = delta_l`, optimized with independent parameters.
    Asym,
    /// Same geometry, but the short arm is attenuated to match the long one.
    Sym,
    /// Alice sits at the measuring party; `delta_l` is ignored.
    LaZero,
}

impl ScanMode {
    pub fn name(self) -> &'static str {
        match self {
            ScanMode::Asym => "asym",
            ScanMode::Sym => "sym",
            ScanMode::LaZero => "la_zero",
        }
    }

    pub fn geometry(self, total_km: f64, delta_l_km: f64) -> Result<LinkGeometry> {
        match self {
            ScanMode::Asym | ScanMode::Sym => {
                if delta_l_km > total_km {
                    return Err(invalid(
                        "delta_l",
                        format!("{delta_l_km} km exceeds the total distance {total_km} km"),
                    ));
                }
                LinkGeometry::from_total(total_km, delta_l_km)
            }
            ScanMode::LaZero => LinkGeometry::new(0.0, total_km),
        }
    }

    pub fn run(
        self,
        sys: &SystemParams,
        geom: &LinkGeometry,
        spec: &OptimizationSpec,
        policy: &FluctuationPolicy,
    ) -> Result<OptimizationResult> {
        match self {
            ScanMode::Sym => symmetric_baseline(sys, geom, spec, policy),
            ScanMode::Asym | ScanMode::LaZero => optimize(sys, geom, spec, policy),
        }
    }
}

impl std::str::FromStr for ScanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asym" => Ok(ScanMode::Asym),
            "sym" => Ok(ScanMode::Sym),
            "la_zero" | "la-zero" => Ok(ScanMode::LaZero),
            other => Err(invalid("mode", format!("unknown mode `{other}`"))),
        }
    }
}

/// Outcome label of a scan point.
pub const STATUS_OK: &str = "ok";
/// The optimizer ran but found no positive rate.
pub const STATUS_ZERO: &str = "zero_rate";

/// Optimized settings of one scan point. Empty when the point failed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub u_a: Option<f64>,
    pub u_b: Option<f64>,
    pub v_b: Option<f64>,
    pub w_b: Option<f64>,
    pub eps_a: Option<f64>,
    pub eps_b: Option<f64>,
    pub p_za: Option<f64>,
    pub p_zb: Option<f64>,
    pub m: Option<u32>,
}

impl Settings {
    fn from_result(res: &OptimizationResult) -> Self {
        let p = &res.params;
        Self {
            u_a: Some(p.u_a),
            u_b: Some(p.u_b),
            v_b: Some(p.decoys.v_b),
            w_b: Some(p.decoys.w_b),
            eps_a: Some(p.eps_a),
            eps_b: Some(p.eps_b),
            p_za: Some(p.p_za),
            p_zb: Some(p.p_zb),
            m: Some(res.m_slices),
        }
    }
}

/// Turns an optimizer outcome into `(rate, settings, status)`. Errors
/// become rate 0 with the message as status.
fn summarize(outcome: &Result<OptimizationResult>) -> (f64, Settings, String) {
    match outcome {
        Ok(res) => {
            let status = if res.breakdown.r > 0.0 {
                STATUS_OK
            } else {
                STATUS_ZERO
            };
            (
                res.breakdown.r,
                Settings::from_result(res),
                status.to_string(),
            )
        }
        Err(e) => (0.0, Settings::default(), format!("error: {e}")),
    }
}

/// One row of a distance scan; field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub mode: ScanMode,
    pub delta_l_km: f64,
    pub total_km: f64,
    pub l_a_km: Option<f64>,
    pub l_b_km: Option<f64>,
    pub rate: f64,
    pub u_a: Option<f64>,
    pub u_b: Option<f64>,
    pub v_b: Option<f64>,
    pub w_b: Option<f64>,
    pub eps_a: Option<f64>,
    pub eps_b: Option<f64>,
    pub p_za: Option<f64>,
    pub p_zb: Option<f64>,
    pub m: Option<u32>,
    pub status: String,
}

/// CSV header of [`ScanRow`].
pub const SCAN_COLUMNS: [&str; 16] = [
    "mode",
    "delta_l_km",
    "total_km",
    "l_a_km",
    "l_b_km",
    "rate",
    "u_a",
    "u_b",
    "v_b",
    "w_b",
    "eps_a",
    "eps_b",
    "p_za",
    "p_zb",
    "m",
    "status",
];

impl ScanRow {
    pub fn is_error(&self) -> bool {
        self.status.starts_with("error")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanRequest {
    pub modes: Vec<ScanMode>,
    pub delta_l_km: Vec<f64>,
    pub totals_km: Vec<f64>,
}

impl ScanRequest {
    /// Points in output order: mode, then `delta_l`, then total distance.
    /// `la_zero` ignores `delta_l` and appears once per total. Totals
    /// shorter than `delta_l` have no valid layout and are left out.
    pub fn points(&self) -> Vec<(ScanMode, f64, f64)> {
        let mut points = Vec::new();
        for &mode in &self.modes {
            let deltas: &[f64] = if mode == ScanMode::LaZero {
                &[0.0]
            } else {
                &self.delta_l_km
            };
            for &dl in deltas {
                for &total in &self.totals_km {
                    if mode == ScanMode::LaZero || total >= dl {
                        points.push((mode, dl, total));
                    }
                }
            }
        }
        points
    }
}

pub fn scan_point(
    sys: &SystemParams,
    spec: &OptimizationSpec,
    policy: &FluctuationPolicy,
    mode: ScanMode,
    delta_l_km: f64,
    total_km: f64,
) -> ScanRow {
    let (geom, outcome) = match mode.geometry(total_km, delta_l_km) {
        Ok(g) => (Some(g), mode.run(sys, &g, spec, policy)),
        Err(e) => (None, Err(e)),
    };
    let (rate, s, status) = summarize(&outcome);
    ScanRow {
        mode,
        delta_l_km: geom.map_or(delta_l_km, |g| g.l_b - g.l_a),
        total_km,
        l_a_km: geom.map(|g| g.l_a),
        l_b_km: geom.map(|g| g.l_b),
        rate,
        u_a: s.u_a,
        u_b: s.u_b,
        v_b: s.v_b,
        w_b: s.w_b,
        eps_a: s.eps_a,
        eps_b: s.eps_b,
        p_za: s.p_za,
        p_zb: s.p_zb,
        m: s.m,
        status,
    }
}

/// Optimizes every point of the request. Rows come back in
/// [`ScanRequest::points`] order whatever the execution mode.
pub fn scan_distance(
    sys: &SystemParams,
    spec: &OptimizationSpec,
    policy: &FluctuationPolicy,
    request: &ScanRequest,
    execution: Execution,
) -> Result<Vec<ScanRow>> {
    if request.modes.is_empty() || request.totals_km.is_empty() {
        return Err(invalid(
            "grid",
            "scan needs at least one mode and one distance",
        ));
    }
    if request.delta_l_km.is_empty() && request.modes.iter().any(|&m| m != ScanMode::LaZero) {
        return Err(invalid("delta_l", "list is empty"));
    }
    let points = request.points();
    Ok(execution.map_indexed(points.len(), |i| {
        let (mode, dl, total) = points[i];
        scan_point(sys, spec, policy, mode, dl, total)
    }))
}

/// Largest total distance with a positive rate, if any.
pub fn reach_km(rows: &[ScanRow]) -> Option<f64> {
    rows.iter()
        .filter(|r| r.rate > 0.0)
        .map(|r| r.total_km)
        .reduce(f64::max)
}

/// Bisects between a distance with a positive rate and a longer one
/// without, down to `resolution_km`. Returns the last positive distance
/// found. Assumes the rate vanishes only once along the interval.
pub fn refine_reach(
    mut rate_at: impl FnMut(f64) -> f64,
    mut positive_km: f64,
    mut zero_km: f64,
    resolution_km: f64,
) -> Result<f64> {
    if !(resolution_km > 0.0 && positive_km < zero_km) {
        return Err(invalid(
            "reach",
            "need positive_km < zero_km and a positive resolution",
        ));
    }
    while zero_km - positive_km > resolution_km {
        let mid = 0.5 * (positive_km + zero_km);
        if rate_at(mid) > 0.0 {
            positive_km = mid;
        } else {
            zero_km = mid;
        }
    }
    Ok(positive_km)
}

/// One row of a misalignment scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdRow {
    pub e_d: f64,
    pub l_a_km: f64,
    pub l_b_km: f64,
    pub rate: f64,
    pub u_a: Option<f64>,
    pub u_b: Option<f64>,
    pub v_b: Option<f64>,
    pub w_b: Option<f64>,
    pub eps_a: Option<f64>,
    pub eps_b: Option<f64>,
    pub p_za: Option<f64>,
    pub p_zb: Option<f64>,
    pub m: Option<u32>,
    pub status: String,
}

impl EdRow {
    pub fn is_error(&self) -> bool {
        self.status.starts_with("error")
    }
}

pub fn scan_ed(
    sys: &SystemParams,
    geom: &LinkGeometry,
    spec: &OptimizationSpec,
    policy: &FluctuationPolicy,
    e_d_grid: &[f64],
    execution: Execution,
) -> Result<Vec<EdRow>> {
    if e_d_grid.is_empty() {
        return Err(invalid("grid", "E_d grid is empty"));
    }
    if let Some(bad) = e_d_grid.iter().find(|e| !(0.0..0.5).contains(*e)) {
        return Err(invalid("e_d", format!("{bad} is outside [0, 0.5)")));
    }
    Ok(execution.map_indexed(e_d_grid.len(), |i| {
        let e_d = e_d_grid[i];
        let sys = SystemParams { e_d, ..*sys };
        let (rate, s, status) = summarize(&optimize(&sys, geom, spec, policy));
        EdRow {
            e_d,
            l_a_km: geom.l_a,
            l_b_km: geom.l_b,
            rate,
            u_a: s.u_a,
            u_b: s.u_b,
            v_b: s.v_b,
            w_b: s.w_b,
            eps_a: s.eps_a,
            eps_b: s.eps_b,
            p_za: s.p_za,
            p_zb: s.p_zb,
            m: s.m,
            status,
        }
    }))
}

/// Least-squares fit of `ln R = sigma ln(eta_a eta_b / eta_d^2) + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaFit {
    pub sigma: f64,
    pub intercept: f64,
    /// Root-mean-square residual in natural-log units.
    pub residual_rms: f64,
    pub points: usize,
    pub min_total_km: f64,
    pub max_total_km: f64,
}

pub const MIN_FIT_POINTS: usize = 5;

/// Fits the scaling exponent on the positive-rate rows. The abscissa is
/// the channel transmittance over the whole link, detectors excluded.
pub fn fit_sigma(sys: &SystemParams, rows: &[ScanRow]) -> Result<SigmaFit> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut totals = Vec::new();
    for row in rows.iter().filter(|r| r.rate > 0.0) {
        let (Some(l_a), Some(l_b)) = (row.l_a_km, row.l_b_km) else {
            continue;
        };
        let arms = arm_transmittances(sys, &LinkGeometry::new(l_a, l_b)?)?;
        xs.push((arms.eta_a * arms.eta_b / (sys.eta_d * sys.eta_d)).ln());
        ys.push(row.rate.ln());
        totals.push(row.total_km);
    }
    let n = xs.len();
    if n < MIN_FIT_POINTS {
        return Err(Error::InsufficientStatistics(format!(
            "{n} positive-rate points, need {MIN_FIT_POINTS}"
        )));
    }
    let mean_x = xs.iter().sum::<f64>() / n as f64;
    let mean_y = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mean_x).powi(2)).sum();
    let sxy: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - mean_x) * (y - mean_y))
        .sum();
    if sxx <= 0.0 {
        return Err(Error::InsufficientStatistics(
            "all points share one transmittance".into(),
        ));
    }
    let sigma = sxy / sxx;
    let intercept = mean_y - sigma * mean_x;
    let ss: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - sigma * x).powi(2))
        .sum();
    Ok(SigmaFit {
        sigma,
        intercept,
        residual_rms: (ss / n as f64).sqrt(),
        points: n,
        min_total_km: totals.iter().copied().fold(f64::INFINITY, f64::min),
        max_total_km: totals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Parses `start:stop:step` (inclusive of `stop` up to rounding) or a
/// comma-separated list.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let spec = spec.trim();
    let number = |s: &str| -> Result<f64> {
        let v: f64 = s
            .trim()
            .parse()
            .map_err(|_| invalid("grid", format!("`{s}` is not a number")))?;
        if !v.is_finite() {
            return Err(invalid("grid", format!("`{s}` is not finite")));
        }
        Ok(v)
    };
    if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        let [start, stop, step] = parts[..] else {
            return Err(invalid("grid", format!("`{spec}` is not start:stop:step")));
        };
        let (start, stop, step) = (number(start)?, number(stop)?, number(step)?);
        if step <= 0.0 || stop < start {
            return Err(invalid(
                "grid",
                format!("`{spec}` needs step > 0 and stop >= start"),
            ));
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
        if count > 1_000_000 {
            return Err(invalid("grid", format!("`{spec}` has {count} points")));
        }
        // Computed from the index so errors do not accumulate.
        return Ok((0..count).map(|i| start + i as f64 * step).collect());
    }
    let values = spec
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(number)
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Err(invalid("grid", "empty list"));
    }
    Ok(values)
}
