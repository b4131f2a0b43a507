//! Pulse-level simulation of the protocol.
//!
//! Every trial draws both users' window and intensity choices and random
//! phases, the photon numbers of the two coherent pulses, per-photon fiber
//! survival, per-photon routing at the beam splitter, and independent dark
//! counts. For coherent inputs, routing each surviving photon to `D+` with
//! probability `I+ / (I+ + I-)` reproduces the exact two-detector click
//! statistics, while the launched photon number `n` is kept as a tag so
//! that yields conditioned on `n` can be measured directly.
//!
//! Trials are split into fixed-size blocks, each with its own ChaCha
//! stream, so the tally does not depend on how blocks are scheduled.

use std::f64::consts::PI;
use std::ops::{Add, AddAssign};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::channel::{arm_transmittances, Arms, LinkGeometry, SystemParams};
use crate::error::{invalid, Error, Result};
use crate::keyrate::ProtocolParams;
use crate::parallel::Execution;
use crate::zwindow::ZCase;

/// Trials simulated per RNG stream.
pub const BLOCK_TRIALS: u64 = 1 << 16;

/// Photon-number tags at or above this value share the last bucket.
pub const TAG_CAP: u32 = 15;
const TAGS: usize = TAG_CAP as usize + 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialMode {
    /// Random windows for both users, as in the protocol.
    FullProtocol,
    /// Both users always pick the signal window.
    ZOnly,
    /// Both users always pick the decoy window.
    XOnly,
    /// Both users send the given intensities with the given phases.
    FixedPhase {
        alpha: f64,
        beta: f64,
        delta_a: f64,
        delta_b: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseTrialConfig {
    pub sys: SystemParams,
    pub geom: LinkGeometry,
    pub params: ProtocolParams,
    pub n_trials: u64,
    pub seed: u64,
    pub mode: TrialMode,
    #[serde(skip)]
    pub execution: Execution,
}

/// Decoy-window intensity choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    O,
    V,
    W,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::O, Label::V, Label::W];

    fn index(self) -> usize {
        self as usize
    }

    fn name(self) -> &'static str {
        match self {
            Label::O => "o",
            Label::V => "v",
            Label::W => "w",
        }
    }
}

/// Phase post-selection outcome of a decoy-window trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slice {
    /// Phases in the same slice; `D+` is the correct detector.
    Zero,
    /// Phases in opposite slices; `D-` is the correct detector.
    Pi,
    Rejected,
}

impl Slice {
    pub const ALL: [Slice; 3] = [Slice::Zero, Slice::Pi, Slice::Rejected];

    fn index(self) -> usize {
        self as usize
    }

    fn name(self) -> &'static str {
        match self {
            Slice::Zero => "zero",
            Slice::Pi => "pi",
            Slice::Rejected => "rejected",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cell {
    Z(ZCase),
    X {
        a: Label,
        b: Label,
        slice: Slice,
    },
    /// One user in each window type; counted but never used.
    Mixed,
    Fixed,
}

const N_CELLS: usize = 4 + 27 + 2;

impl Cell {
    fn index(self) -> usize {
        match self {
            Cell::Z(case) => ZCase::ALL
                .iter()
                .position(|&c| c == case)
                .expect("known case"),
            Cell::X { a, b, slice } => 4 + (a.index() * 3 + b.index()) * 3 + slice.index(),
            Cell::Mixed => 31,
            Cell::Fixed => 32,
        }
    }

    pub fn all() -> Vec<Cell> {
        let mut cells: Vec<Cell> = ZCase::ALL.iter().map(|&c| Cell::Z(c)).collect();
        for a in Label::ALL {
            for b in Label::ALL {
                for slice in Slice::ALL {
                    cells.push(Cell::X { a, b, slice });
                }
            }
        }
        cells.push(Cell::Mixed);
        cells.push(Cell::Fixed);
        cells
    }

    /// Stable text key, e.g. `x/w-w/zero` or `z/alice_only`.
    pub fn key(self) -> String {
        match self {
            Cell::Z(case) => {
                let name = match case {
                    ZCase::Both => "both",
                    ZCase::AliceOnly => "alice_only",
                    ZCase::BobOnly => "bob_only",
                    ZCase::Neither => "neither",
                };
                format!("z/{name}")
            }
            Cell::X { a, b, slice } => format!("x/{}-{}/{}", a.name(), b.name(), slice.name()),
            Cell::Mixed => "mixed".into(),
            Cell::Fixed => "fixed".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub trials: u64,
    /// Exactly one detector clicked.
    pub effective: u64,
    /// Effective events with the wrong bit or detector.
    pub errors: u64,
    /// At least one detector clicked.
    pub any_click: u64,
}

impl Add for Counters {
    type Output = Counters;

    fn add(self, o: Counters) -> Counters {
        Counters {
            trials: self.trials + o.trials,
            effective: self.effective + o.effective,
            errors: self.errors + o.errors,
            any_click: self.any_click + o.any_click,
        }
    }
}

impl AddAssign for Counters {
    fn add_assign(&mut self, o: Counters) {
        *self = *self + o;
    }
}

/// Integer counters per (cell, photon-number tag).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PulseTally {
    counts: Vec<Counters>,
    pub m_slices: u32,
}

/// One non-empty tally entry in the JSON export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TallyEntry {
    pub cell: String,
    pub n: u32,
    #[serde(flatten)]
    pub counters: Counters,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TallyExport {
    pub m_slices: u32,
    pub entries: Vec<TallyEntry>,
}

impl PulseTally {
    pub fn new(m_slices: u32) -> Self {
        Self {
            counts: vec![Counters::default(); N_CELLS * TAGS],
            m_slices,
        }
    }

    fn slot(cell: Cell, n: u32) -> usize {
        cell.index() * TAGS + n.min(TAG_CAP) as usize
    }

    pub fn get(&self, cell: Cell, n: u32) -> Counters {
        self.counts[Self::slot(cell, n)]
    }

    /// Counters of a cell summed over all photon numbers.
    pub fn cell(&self, cell: Cell) -> Counters {
        let start = cell.index() * TAGS;
        self.counts[start..start + TAGS]
            .iter()
            .fold(Counters::default(), |acc, &c| acc + c)
    }

    pub fn sum(&self, cells: impl IntoIterator<Item = Cell>) -> Counters {
        cells
            .into_iter()
            .fold(Counters::default(), |acc, c| acc + self.cell(c))
    }

    pub fn total_trials(&self) -> u64 {
        self.counts.iter().map(|c| c.trials).sum()
    }

    pub fn merge(&mut self, other: &PulseTally) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += *b;
        }
    }

    pub fn export(&self) -> TallyExport {
        let mut entries = Vec::new();
        for cell in Cell::all() {
            for n in 0..=TAG_CAP {
                let counters = self.get(cell, n);
                if counters.trials > 0 {
                    entries.push(TallyEntry {
                        cell: cell.key(),
                        n,
                        counters,
                    });
                }
            }
        }
        TallyExport {
            m_slices: self.m_slices,
            entries,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.export())?)
    }

    fn record(&mut self, cell: Cell, n: u32, outcome: Outcome, error: bool) {
        let c = &mut self.counts[Self::slot(cell, n)];
        c.trials += 1;
        c.any_click += u64::from(outcome.plus || outcome.minus);
        let effective = outcome.plus != outcome.minus;
        c.effective += u64::from(effective);
        c.errors += u64::from(effective && error);
    }
}

#[derive(Debug, Clone, Copy)]
struct Outcome {
    plus: bool,
    minus: bool,
}

/// Poisson sampler that also accepts a zero mean.
#[derive(Debug, Clone, Copy)]
struct PhotonSource(Option<Poisson<f64>>);

impl PhotonSource {
    fn new(mean: f64) -> Result<Self> {
        if mean == 0.0 {
            return Ok(Self(None));
        }
        Poisson::new(mean)
            .map(|p| Self(Some(p)))
            .map_err(|e| invalid("intensity", format!("{mean}: {e}")))
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        self.0.map_or(0, |p| p.sample(rng) as u32)
    }
}

/// Precomputed per-run constants.
struct Context {
    arms: Arms,
    p_d: f64,
    e_d: f64,
    p_za: f64,
    p_zb: f64,
    eps_a: f64,
    eps_b: f64,
    m_slices: u32,
    /// Signal, then decoys o, v, w, for each user.
    alice: [(f64, PhotonSource); 4],
    bob: [(f64, PhotonSource); 4],
    mode: TrialMode,
}

impl Context {
    fn new(cfg: &PulseTrialConfig) -> Result<Self> {
        cfg.sys.validate()?;
        cfg.params.validate()?;
        let arms = arm_transmittances(&cfg.sys, &cfg.geom)?;
        let p = &cfg.params;
        let d = &p.decoys;
        let source = |x: f64| PhotonSource::new(x).map(|s| (x, s));
        let (alice, bob) = match cfg.mode {
            TrialMode::FixedPhase { alpha, beta, .. } => {
                let a = source(alpha)?;
                let b = source(beta)?;
                ([a; 4], [b; 4])
            }
            _ => (
                [source(p.u_a)?, source(0.0)?, source(d.v_a)?, source(d.w_a)?],
                [source(p.u_b)?, source(0.0)?, source(d.v_b)?, source(d.w_b)?],
            ),
        };
        Ok(Self {
            arms,
            p_d: cfg.sys.p_d,
            e_d: cfg.sys.e_d,
            p_za: p.p_za,
            p_zb: p.p_zb,
            eps_a: p.eps_a,
            eps_b: p.eps_b,
            m_slices: p.slices(&cfg.sys),
            alice,
            bob,
            mode: cfg.mode,
        })
    }
}

enum Choice {
    Signal(bool),
    Decoy(Label),
}

fn choose<R: Rng>(rng: &mut R, z_window: bool, eps: f64) -> Choice {
    if z_window {
        Choice::Signal(rng.random::<f64>() < eps)
    } else {
        Choice::Decoy(Label::ALL[rng.random_range(0..3)])
    }
}

fn intensity(choice: &Choice, sources: &[(f64, PhotonSource); 4]) -> (f64, PhotonSource) {
    match choice {
        Choice::Signal(true) => sources[0],
        Choice::Signal(false) => sources[1],
        Choice::Decoy(label) => sources[1 + label.index()],
    }
}

fn survivors<R: Rng>(rng: &mut R, photons: u32, eta: f64) -> u32 {
    (0..photons).filter(|_| rng.random::<f64>() < eta).count() as u32
}

/// Detects one pulse pair and returns the photon tag and click outcome.
fn detect<R: Rng>(
    rng: &mut R,
    ctx: &Context,
    (x_a, src_a): (f64, PhotonSource),
    (x_b, src_b): (f64, PhotonSource),
    theta: f64,
    misaligned: bool,
) -> (u32, Outcome) {
    let m = src_a.sample(rng);
    let j = src_b.sample(rng);
    let arriving = survivors(rng, m, ctx.arms.eta_a) + survivors(rng, j, ctx.arms.eta_b);
    let (a, b) = (x_a * ctx.arms.eta_a, x_b * ctx.arms.eta_b);
    let p_plus = if a + b > 0.0 {
        0.5 + (a * b).sqrt() / (a + b) * theta.cos()
    } else {
        0.5
    };
    let to_plus = (0..arriving)
        .filter(|_| rng.random::<f64>() < p_plus)
        .count() as u32;
    let mut plus = to_plus > 0 || rng.random::<f64>() < ctx.p_d;
    let mut minus = arriving > to_plus || rng.random::<f64>() < ctx.p_d;
    if misaligned && rng.random::<f64>() < ctx.e_d {
        std::mem::swap(&mut plus, &mut minus);
    }
    (m + j, Outcome { plus, minus })
}

fn slice_of(phase: f64, m: u32) -> u32 {
    ((phase / (2.0 * PI) * m as f64) as u32).min(m - 1)
}

fn simulate_block(ctx: &Context, seed: u64, block: u64, trials: u64) -> PulseTally {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block);
    let mut tally = PulseTally::new(ctx.m_slices);
    for _ in 0..trials {
        if let TrialMode::FixedPhase {
            delta_a, delta_b, ..
        } = ctx.mode
        {
            let (n, out) = detect(
                &mut rng,
                ctx,
                ctx.alice[0],
                ctx.bob[0],
                delta_a - delta_b,
                true,
            );
            tally.record(Cell::Fixed, n, out, out.minus);
            continue;
        }
        let (za, zb) = match ctx.mode {
            TrialMode::ZOnly => (true, true),
            TrialMode::XOnly => (false, false),
            _ => (
                rng.random::<f64>() < ctx.p_za,
                rng.random::<f64>() < ctx.p_zb,
            ),
        };
        let ca = choose(&mut rng, za, ctx.eps_a);
        let cb = choose(&mut rng, zb, ctx.eps_b);
        let delta_a = rng.random::<f64>() * 2.0 * PI;
        let delta_b = rng.random::<f64>() * 2.0 * PI;
        let both_x = !za && !zb;
        let (n, out) = detect(
            &mut rng,
            ctx,
            intensity(&ca, &ctx.alice),
            intensity(&cb, &ctx.bob),
            delta_a - delta_b,
            both_x,
        );
        match (ca, cb) {
            (Choice::Signal(sa), Choice::Signal(sb)) => {
                let case = match (sa, sb) {
                    (true, true) => ZCase::Both,
                    (true, false) => ZCase::AliceOnly,
                    (false, true) => ZCase::BobOnly,
                    (false, false) => ZCase::Neither,
                };
                tally.record(Cell::Z(case), n, out, case.is_error());
            }
            (Choice::Decoy(a), Choice::Decoy(b)) => {
                let m = ctx.m_slices;
                let sa = slice_of(delta_a, m);
                let slice = if sa == slice_of(delta_b, m) {
                    Slice::Zero
                } else if sa == slice_of((delta_b + PI) % (2.0 * PI), m) {
                    Slice::Pi
                } else {
                    Slice::Rejected
                };
                let error = match slice {
                    Slice::Zero => out.minus,
                    Slice::Pi => out.plus,
                    Slice::Rejected => false,
                };
                tally.record(Cell::X { a, b, slice }, n, out, error);
            }
            _ => tally.record(Cell::Mixed, n, out, false),
        }
    }
    tally
}

pub fn simulate(cfg: &PulseTrialConfig) -> Result<PulseTally> {
    if cfg.n_trials == 0 {
        return Err(invalid("n_trials", "must be >= 1"));
    }
    let ctx = Context::new(cfg)?;
    let blocks = cfg.n_trials.div_ceil(BLOCK_TRIALS);
    let parts = cfg.execution.map_indexed(blocks as usize, |b| {
        let b = b as u64;
        let trials = BLOCK_TRIALS.min(cfg.n_trials - b * BLOCK_TRIALS);
        simulate_block(&ctx, cfg.seed, b, trials)
    });
    let mut tally = PulseTally::new(ctx.m_slices);
    for part in &parts {
        tally.merge(part);
    }
    Ok(tally)
}

/// Binomial estimate with its one-sigma radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub sigma: f64,
    pub successes: u64,
    pub samples: u64,
}

impl Estimate {
    pub fn binomial(successes: u64, samples: u64) -> Self {
        let n = samples.max(1) as f64;
        let p = successes as f64 / n;
        Self {
            value: p,
            sigma: (p * (1.0 - p) / n).sqrt().max(1.0 / n),
            successes,
            samples,
        }
    }
}

/// Measured single-photon yield and error rate of the `mu1` decoy pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinglePhotonStats {
    /// Effective events per trial.
    pub y1: Estimate,
    /// Any-click events per trial.
    pub y1_any_click: Estimate,
    /// Errors per effective event.
    pub e1: Estimate,
}

/// Minimum effective events needed in the single-photon cells.
pub const MIN_SINGLE_PHOTON_EVENTS: u64 = 100;

/// Yield and error rate on the `n = 1` events of the accepted `w`-`w` cells.
pub fn single_photon_statistics(tally: &PulseTally) -> Result<SinglePhotonStats> {
    let c = [Slice::Zero, Slice::Pi]
        .iter()
        .map(|&slice| {
            tally.get(
                Cell::X {
                    a: Label::W,
                    b: Label::W,
                    slice,
                },
                1,
            )
        })
        .fold(Counters::default(), |acc, c| acc + c);
    if c.trials == 0 {
        return Err(Error::InsufficientStatistics(
            "no single-photon trials in the accepted w-w cells".into(),
        ));
    }
    let y1 = Estimate::binomial(c.effective, c.trials);
    if c.effective < MIN_SINGLE_PHOTON_EVENTS {
        // A yield of exactly zero is still a valid measurement.
        if c.any_click == 0 && c.trials >= MIN_SINGLE_PHOTON_EVENTS {
            return Ok(SinglePhotonStats {
                y1,
                y1_any_click: Estimate::binomial(0, c.trials),
                e1: Estimate::binomial(0, 0),
            });
        }
        return Err(Error::InsufficientStatistics(format!(
            "{} single-photon effective events, need {MIN_SINGLE_PHOTON_EVENTS}",
            c.effective
        )));
    }
    Ok(SinglePhotonStats {
        y1,
        y1_any_click: Estimate::binomial(c.any_click, c.trials),
        e1: Estimate::binomial(c.errors, c.effective),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::arm_transmittances;

    fn config(mode: TrialMode, n_trials: u64) -> PulseTrialConfig {
        let sys = SystemParams::default();
        let geom = LinkGeometry::new(50.0, 150.0).unwrap();
        let arms = arm_transmittances(&sys, &geom).unwrap();
        PulseTrialConfig {
            sys,
            geom,
            params: ProtocolParams::matched(0.4, 0.4, 0.2, 0.1, 0.5, arms),
            n_trials,
            seed: 11,
            mode,
            execution: Execution::default(),
        }
    }

    #[test]
    fn cell_indices_are_distinct() {
        let cells = Cell::all();
        assert_eq!(cells.len(), N_CELLS);
        let mut idx: Vec<usize> = cells.iter().map(|c| c.index()).collect();
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), N_CELLS);
        assert_eq!(
            Cell::X {
                a: Label::W,
                b: Label::V,
                slice: Slice::Pi
            }
            .key(),
            "x/w-v/pi"
        );
    }

    #[test]
    fn counts_add_up() {
        let tally = simulate(&config(TrialMode::FullProtocol, 200_000)).unwrap();
        assert_eq!(tally.total_trials(), 200_000);
        for cell in Cell::all() {
            for n in 0..=TAG_CAP {
                let c = tally.get(cell, n);
                assert!(
                    c.errors <= c.effective
                        && c.effective <= c.any_click
                        && c.any_click <= c.trials
                );
            }
        }
        assert_eq!(tally.cell(Cell::Fixed).trials, 0);
    }

    #[test]
    fn deterministic_and_independent_of_execution() {
        let mut cfg = config(TrialMode::FullProtocol, 3 * BLOCK_TRIALS + 17);
        let a = simulate(&cfg).unwrap();
        cfg.execution = Execution::Sequential;
        let b = simulate(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        cfg.seed += 1;
        assert_ne!(simulate(&cfg).unwrap(), a);
    }

    #[test]
    fn z_only_dark_counts() {
        let mut cfg = config(TrialMode::ZOnly, 1_000_000);
        cfg.sys.p_d = 0.01;
        cfg.params.eps_a = 0.0;
        cfg.params.eps_b = 0.0;
        let tally = simulate(&cfg).unwrap();
        let c = tally.cell(Cell::Z(ZCase::Neither));
        assert_eq!(c.trials, 1_000_000);
        let expected = 2.0 * 0.01 * 0.99;
        let est = Estimate::binomial(c.effective, c.trials);
        let sigma = (expected * (1.0 - expected) / c.trials as f64).sqrt();
        assert!((est.value - expected).abs() < 4.0 * sigma, "{est:?}");
        assert_eq!(c.errors, c.effective);
    }

    #[test]
    fn perfect_interference_has_no_errors() {
        let mut cfg = config(
            TrialMode::FixedPhase {
                alpha: 0.1,
                beta: 0.1,
                delta_a: 1.0,
                delta_b: 1.0,
            },
            1_000_000,
        );
        cfg.geom = LinkGeometry::new(20.0, 20.0).unwrap();
        cfg.sys.p_d = 0.0;
        cfg.sys.e_d = 0.0;
        let c = simulate(&cfg).unwrap().cell(Cell::Fixed);
        assert!(c.effective > 1000);
        assert_eq!(c.errors, 0);
    }

    #[test]
    fn acceptance_is_two_over_m() {
        for m in [2, 5, 16] {
            let mut cfg = config(TrialMode::XOnly, 400_000);
            cfg.params.m_slices = Some(m);
            let tally = simulate(&cfg).unwrap();
            let mut accepted = 0;
            for a in Label::ALL {
                for b in Label::ALL {
                    for slice in [Slice::Zero, Slice::Pi] {
                        accepted += tally.cell(Cell::X { a, b, slice }).trials;
                    }
                }
            }
            let p = 2.0 / m as f64;
            let est = accepted as f64 / 400_000.0;
            let sigma = (p * (1.0 - p) / 400_000.0).sqrt();
            assert!((est - p).abs() <= 4.0 * sigma, "m = {m}: {est}");
        }
    }

    #[test]
    fn dark_detectors_see_nothing() {
        let mut cfg = config(TrialMode::XOnly, 2_000_000);
        cfg.sys.p_d = 0.0;
        cfg.sys.eta_d = 0.0;
        let stats = single_photon_statistics(&simulate(&cfg).unwrap()).unwrap();
        assert_eq!(stats.y1.value, 0.0);
    }

    #[test]
    fn sparse_tally_reports_insufficient_statistics() {
        let tally = simulate(&config(TrialMode::FullProtocol, 1000)).unwrap();
        assert!(matches!(
            single_photon_statistics(&tally),
            Err(Error::InsufficientStatistics(_))
        ));
    }

    #[test]
    fn json_export_round_trips() {
        let tally = simulate(&config(TrialMode::FullProtocol, 50_000)).unwrap();
        let export: TallyExport = serde_json::from_str(&tally.to_json().unwrap()).unwrap();
        let total: u64 = export.entries.iter().map(|e| e.counters.trials).sum();
        assert_eq!(total, 50_000);
        assert!(export.entries.iter().any(|e| e.cell == "x/w-w/zero"));
    }
}
