//! Analytic observables checked against the pulse-level simulation.

use serde::{Deserialize, Serialize};

use crate::channel::{arm_transmittances, Arms, LinkGeometry, SystemParams};
use crate::decoy::{e1_upper, validate_constraints, y1_lower, ObservedRates};
use crate::error::{invalid, Result};
use crate::keyrate::ProtocolParams;
use crate::montecarlo::{
    simulate, single_photon_statistics, Cell, Counters, Estimate, Label, PulseTally,
    PulseTrialConfig, Slice, TrialMode,
};
use crate::parallel::Execution;
use crate::photon::{equivalent_yield_yn, vacuum_yield, IntensityPair};
use crate::xwindow::averaged_observables;
use crate::zwindow::{z_gain_case, z_observables, ZCase};

/// Default agreement threshold in binomial standard deviations.
pub const SIGMA_THRESHOLD: f64 = 4.0;

/// Minimum trials in a photon-number cell before its yield is compared.
const MIN_TAGGED_TRIALS: u64 = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationConfig {
    pub sys: SystemParams,
    pub geom: LinkGeometry,
    pub params: ProtocolParams,
    pub n_trials: u64,
    pub seed: u64,
    /// Multiplies both arm transmittances on the analytic side only.
    /// Anything other than 1 deliberately breaks agreement.
    #[serde(default = "one")]
    pub analytic_eta_scale: f64,
    #[serde(default = "threshold")]
    pub threshold: f64,
    #[serde(skip)]
    pub execution: Execution,
}

fn one() -> f64 {
    1.0
}

fn threshold() -> f64 {
    SIGMA_THRESHOLD
}

/// How a row is judged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    /// `|measured - reference| <= threshold * sigma`.
    Equal,
    /// `measured >= reference - threshold * sigma`.
    AtLeast,
    /// `measured <= reference + threshold * sigma`.
    AtMost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub name: String,
    pub comparison: Comparison,
    pub reference: f64,
    pub measured: f64,
    pub sigma: f64,
    /// Signed `(measured - reference) / sigma`.
    pub distance: f64,
    pub samples: u64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n_trials: u64,
    pub seed: u64,
    pub threshold: f64,
    pub rows: Vec<ValidationRow>,
    /// Checks that could not be run, with the reason.
    pub skipped: Vec<String>,
    pub passed: bool,
}

impl ValidationReport {
    pub fn failures(&self) -> impl Iterator<Item = &ValidationRow> {
        self.rows.iter().filter(|r| !r.pass)
    }

    pub fn row(&self, name: &str) -> Option<&ValidationRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

struct Rows {
    threshold: f64,
    rows: Vec<ValidationRow>,
    skipped: Vec<String>,
}

impl Rows {
    fn push(
        &mut self,
        name: String,
        comparison: Comparison,
        reference: f64,
        measured: f64,
        sigma: f64,
        samples: u64,
    ) {
        let distance = (measured - reference) / sigma;
        let pass = match comparison {
            Comparison::Equal => distance.abs() <= self.threshold,
            Comparison::AtLeast => distance >= -self.threshold,
            Comparison::AtMost => distance <= self.threshold,
        };
        self.rows.push(ValidationRow {
            name,
            comparison,
            reference,
            measured,
            sigma,
            distance,
            samples,
            pass,
        });
    }

    /// Binomial comparison with the spread taken at the predicted value.
    fn binomial(&mut self, name: String, predicted: f64, successes: u64, samples: u64) {
        if samples == 0 {
            self.skipped.push(format!("{name}: no samples"));
            return;
        }
        let n = samples as f64;
        let sigma = (predicted * (1.0 - predicted) / n).sqrt().max(1.0 / n);
        self.push(
            name,
            Comparison::Equal,
            predicted,
            successes as f64 / n,
            sigma,
            samples,
        );
    }
}

fn accepted(tally: &PulseTally, a: Label, b: Label) -> Counters {
    tally.sum([Slice::Zero, Slice::Pi].map(|slice| Cell::X { a, b, slice }))
}

fn all_slices(tally: &PulseTally, a: Label, b: Label, n: u32) -> Counters {
    Slice::ALL
        .iter()
        .map(|&slice| tally.get(Cell::X { a, b, slice }, n))
        .fold(Counters::default(), |acc, c| acc + c)
}

pub fn run_validation(cfg: &ValidationConfig) -> Result<ValidationReport> {
    if !(cfg.analytic_eta_scale > 0.0 && cfg.threshold > 0.0) {
        return Err(invalid(
            "validation",
            "eta scale and threshold must be positive",
        ));
    }
    let tally = simulate(&PulseTrialConfig {
        sys: cfg.sys,
        geom: cfg.geom,
        params: cfg.params,
        n_trials: cfg.n_trials,
        seed: cfg.seed,
        mode: TrialMode::FullProtocol,
        execution: cfg.execution,
    })?;
    let true_arms = arm_transmittances(&cfg.sys, &cfg.geom)?;
    let arms = Arms {
        eta_a: (true_arms.eta_a * cfg.analytic_eta_scale).min(1.0),
        eta_b: (true_arms.eta_b * cfg.analytic_eta_scale).min(1.0),
    };
    let (sys, p) = (&cfg.sys, &cfg.params);
    let m = p.slices(sys);
    let d = &p.decoys;
    let mut out = Rows {
        threshold: cfg.threshold,
        rows: Vec::new(),
        skipped: Vec::new(),
    };

    // Decoy windows: gains and error rates of the matched pairs.
    let pairs = [
        (Label::O, 0.0, 0.0),
        (Label::V, d.v_a, d.v_b),
        (Label::W, d.w_a, d.w_b),
    ];
    for &(label, alpha, beta) in &pairs {
        let x = averaged_observables(alpha, beta, arms, sys.p_d, sys.e_d, m)?;
        let name = label_name(label);
        let c = accepted(&tally, label, label);
        out.binomial(
            format!("x/{name}{name}/gain"),
            x.gain,
            c.effective,
            c.trials,
        );
        out.binomial(format!("x/{name}{name}/qe"), x.qe, c.errors, c.trials);

        let zero = tally.cell(Cell::X {
            a: label,
            b: label,
            slice: Slice::Zero,
        });
        let pi = tally.cell(Cell::X {
            a: label,
            b: label,
            slice: Slice::Pi,
        });
        if zero.trials > 0 && pi.trials > 0 {
            let fz = Estimate::binomial(zero.errors, zero.trials);
            let fp = Estimate::binomial(pi.errors, pi.trials);
            let sigma = (fz.sigma.powi(2) + fp.sigma.powi(2)).sqrt();
            out.push(
                format!("x/{name}{name}/slice_symmetry"),
                Comparison::Equal,
                fz.value,
                fp.value,
                sigma,
                pi.trials,
            );
        }
    }

    // Phase post-selection keeps 2 of every M slice pairs.
    let x_all = tally.sum(
        Cell::all()
            .into_iter()
            .filter(|c| matches!(c, Cell::X { .. })),
    );
    let x_kept = tally.sum(Cell::all().into_iter().filter(|c| {
        matches!(
            c,
            Cell::X {
                slice: Slice::Zero | Slice::Pi,
                ..
            }
        )
    }));
    out.binomial(
        "x/acceptance".into(),
        2.0 / m as f64,
        x_kept.trials,
        x_all.trials,
    );

    // Signal windows.
    let zp = p.z_window();
    for case in ZCase::ALL {
        let c = tally.cell(Cell::Z(case));
        let q = z_gain_case(case, &zp, arms, sys.p_d);
        out.binomial(
            format!("z/{}/gain", case_name(case)),
            q,
            c.effective,
            c.trials,
        );
    }
    let z_cells = tally.sum(ZCase::ALL.map(Cell::Z));
    match z_observables(&zp, arms, sys.p_d) {
        Ok(z) => {
            out.binomial("z/gain".into(), z.gain, z_cells.effective, z_cells.trials);
            out.binomial("z/qber".into(), z.qber, z_cells.errors, z_cells.effective);
        }
        Err(e) => out.skipped.push(format!("z/qber: {e}")),
    }

    // Photon-number tagged yields of the decoy pairs and the both-send case.
    for &(label, alpha, beta) in &pairs[1..] {
        let k = IntensityPair {
            x_a: alpha,
            x_b: beta,
        }
        .ratio();
        for n in 0..=3 {
            let c = all_slices(&tally, label, label, n);
            if c.trials >= MIN_TAGGED_TRIALS {
                let name = label_name(label);
                let y = equivalent_yield_yn(n, k, arms, sys.p_d);
                out.binomial(
                    format!("x/{name}{name}/yield_n{n}"),
                    y,
                    c.any_click,
                    c.trials,
                );
            }
        }
    }
    let k_signal = IntensityPair {
        x_a: p.u_a,
        x_b: p.u_b,
    }
    .ratio();
    for n in 1..=3 {
        let c = tally.get(Cell::Z(ZCase::Both), n);
        if c.trials >= MIN_TAGGED_TRIALS {
            let y = equivalent_yield_yn(n, k_signal, arms, sys.p_d);
            out.binomial(format!("z/both/yield_n{n}"), y, c.any_click, c.trials);
        }
    }

    // Single-photon truth against the decoy bounds.
    let report = validate_constraints(d, p.u_a, p.u_b);
    if !report.passes() {
        out.skipped.push(format!("single-photon bounds: {report}"));
    } else {
        match single_photon_bounds(cfg, arms, m) {
            Err(e) => out.skipped.push(format!("single-photon bounds: {e}")),
            Ok((y1_l, e1_u)) => match single_photon_statistics(&tally) {
                Err(e) => out.skipped.push(format!("single-photon statistics: {e}")),
                Ok(stats) => {
                    out.push(
                        "single_photon/y1_vs_lower_bound".into(),
                        Comparison::AtLeast,
                        y1_l,
                        stats.y1.value,
                        stats.y1.sigma,
                        stats.y1.samples,
                    );
                    if stats.e1.samples > 0 {
                        out.push(
                            "single_photon/e1_vs_upper_bound".into(),
                            Comparison::AtMost,
                            e1_u,
                            stats.e1.value,
                            stats.e1.sigma,
                            stats.e1.samples,
                        );
                    }
                }
            },
        }
    }

    let passed = out.rows.iter().all(|r| r.pass);
    Ok(ValidationReport {
        n_trials: cfg.n_trials,
        seed: cfg.seed,
        threshold: cfg.threshold,
        rows: out.rows,
        skipped: out.skipped,
        passed,
    })
}

/// Asymptotic `(Y1L, e1U)` from the analytic decoy observables.
fn single_photon_bounds(cfg: &ValidationConfig, arms: Arms, m: u32) -> Result<(f64, f64)> {
    let (sys, d) = (&cfg.sys, &cfg.params.decoys);
    let w = averaged_observables(d.w_a, d.w_b, arms, sys.p_d, sys.e_d, m)?;
    let v = averaged_observables(d.v_a, d.v_b, arms, sys.p_d, sys.e_d, m)?;
    let rates = ObservedRates {
        q_mu1: w.gain,
        q_mu2: v.gain,
        qe_mu1: w.qe,
        y_0: vacuum_yield(sys.p_d),
    };
    let y1_l = y1_lower(d.mu1(), d.mu2(), &rates)?;
    let e1 = e1_upper(d.mu1(), &rates, y1_l)?;
    Ok((y1_l, e1.value))
}

fn label_name(label: Label) -> &'static str {
    match label {
        Label::O => "o",
        Label::V => "v",
        Label::W => "w",
    }
}

fn case_name(case: ZCase) -> &'static str {
    match case {
        ZCase::Both => "both",
        ZCase::AliceOnly => "alice_only",
        ZCase::BobOnly => "bob_only",
        ZCase::Neither => "neither",
    }
}
