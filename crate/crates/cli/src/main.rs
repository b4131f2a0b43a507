use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use snsqkd::config::RunConfig;
use snsqkd::scan::{self, ScanMode, ScanRequest};
use snsqkd::validate::{run_validation, ValidationConfig, ValidationReport};
use snsqkd::{key_rate, Error, Execution, FluctuationPolicy, LinkGeometry, RateBreakdown};

/// Exit status for bad arguments or an unusable config file.
const EXIT_USAGE: u8 = 2;
/// Exit status when a computation fails or validation does not pass.
const EXIT_FAILURE: u8 = 1;

/// Key rates, parameter optimization and Monte Carlo validation for
/// asymmetric sending-or-not-sending twin-field QKD.
#[derive(Parser, Debug)]
#[command(name = "snsqkd", version)]
struct Cli {
    /// TOML or JSON run configuration. Defaults apply without one.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Seed for the optimizer and the simulation (overrides the config).
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,

    /// Write the result here instead of stdout.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,

    /// Output format; each command has its own default.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Asym,
    Sym,
    LaZero,
}

impl From<Mode> for ScanMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Asym => ScanMode::Asym,
            Mode::Sym => ScanMode::Sym,
            Mode::LaZero => ScanMode::LaZero,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Evaluate the key rate at the configured protocol point.
    Rate,
    /// Optimize the protocol parameters at the configured geometry.
    Optimize {
        /// `sym` attenuates the short arm; `la-zero` moves the whole
        /// distance into Bob's arm.
        #[arg(long, value_enum, default_value = "asym")]
        mode: Mode,
    },
    /// Optimized rate against total distance.
    ScanDistance {
        /// Comma-separated modes.
        #[arg(long, value_enum, value_delimiter = ',', default_value = "asym")]
        mode: Vec<Mode>,
        /// Comma-separated arm differences `l_b - l_a` in km.
        #[arg(long, value_name = "LIST", default_value = "0")]
        delta_l: String,
        /// Total distances in km, `start:stop:step` or a list.
        #[arg(long, value_name = "SPEC", default_value = "0:600:20")]
        grid: String,
    },
    /// Optimized rate against misalignment error at the configured geometry.
    ScanEd {
        /// Misalignment values, `start:stop:step` or a list.
        #[arg(long, value_name = "SPEC", default_value = "0.05:0.45:0.05")]
        grid: String,
    },
    /// Fit the exponent of R against total channel transmittance.
    FitSigma {
        #[arg(long, value_enum, default_value = "asym")]
        mode: Mode,
        /// A single arm difference in km.
        #[arg(long, value_name = "KM", default_value = "0")]
        delta_l: f64,
        #[arg(long, value_name = "SPEC", default_value = "0:600:20")]
        grid: String,
        /// Fit finite-size rates from the config instead of asymptotic ones.
        #[arg(long)]
        finite_size: bool,
    },
    /// Compare analytic observables with the pulse-level simulation.
    Validate {
        /// Simulated pulses (at least 10^6).
        #[arg(long, value_name = "INT")]
        trials: Option<u64>,
    },
}

/// An error with the exit status it should produce.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        let code = match error.downcast_ref::<Error>() {
            Some(
                Error::Config(_)
                | Error::InvalidParameter { .. }
                | Error::GeometryConvention { .. },
            ) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        };
        Self { code, error }
    }
}

fn usage(error: anyhow::Error) -> Failure {
    Failure {
        code: EXIT_USAGE,
        error,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| usage(e.into()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.optimizer.seed = seed;
        cfg.validation.seed = seed;
    }
    Ok(cfg)
}

fn emit(cli: &Cli, body: &str) -> anyhow::Result<()> {
    match &cli.out {
        Some(path) => {
            std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(body.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> anyhow::Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn to_csv<T: serde::Serialize>(rows: &[T]) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn run(cli: &Cli) -> Result<u8, Failure> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Rate => cmd_rate(cli, &cfg),
        Command::Optimize { mode } => cmd_optimize(cli, &cfg, (*mode).into()),
        Command::ScanDistance {
            mode,
            delta_l,
            grid,
        } => {
            let request = ScanRequest {
                modes: mode.iter().map(|&m| m.into()).collect(),
                delta_l_km: scan::parse_grid(delta_l).map_err(|e| usage(e.into()))?,
                totals_km: scan::parse_grid(grid).map_err(|e| usage(e.into()))?,
            };
            cmd_scan_distance(cli, &cfg, &request)
        }
        Command::ScanEd { grid } => {
            let grid = scan::parse_grid(grid).map_err(|e| usage(e.into()))?;
            cmd_scan_ed(cli, &cfg, &grid)
        }
        Command::FitSigma {
            mode,
            delta_l,
            grid,
            finite_size,
        } => {
            let grid = scan::parse_grid(grid).map_err(|e| usage(e.into()))?;
            cmd_fit_sigma(cli, &cfg, (*mode).into(), *delta_l, &grid, *finite_size)
        }
        Command::Validate { trials } => cmd_validate(cli, &cfg, *trials),
    }
}

#[derive(serde::Serialize)]
struct RateRow {
    l_a_km: f64,
    l_b_km: f64,
    rate: f64,
    rate_raw: f64,
    y1_lower: f64,
    e1_upper: f64,
    z_gain: f64,
    z_qber: f64,
    m: u32,
    fluctuated: bool,
}

fn rate_row(geom: &LinkGeometry, b: &RateBreakdown) -> RateRow {
    RateRow {
        l_a_km: geom.l_a,
        l_b_km: geom.l_b,
        rate: b.r,
        rate_raw: b.r_raw,
        y1_lower: b.y1_l,
        e1_upper: b.e1_u,
        z_gain: b.z_gain,
        z_qber: b.z_qber,
        m: b.m_slices,
        fluctuated: b.fluctuated,
    }
}

fn cmd_rate(cli: &Cli, cfg: &RunConfig) -> Result<u8, Failure> {
    let params = cfg.protocol_params().map_err(|e| usage(e.into()))?;
    let b = key_rate(&cfg.system, &cfg.geometry, &params, &cfg.fluctuation)?;
    eprintln!(
        "R = {:.6e} per pulse at L_a = {} km, L_b = {} km (Y1L = {:.4e}, e1U = {:.4}, E_z = {:.4})",
        b.r, cfg.geometry.l_a, cfg.geometry.l_b, b.y1_l, b.e1_u, b.z_qber
    );
    let body = match cli.format.unwrap_or(Format::Json) {
        Format::Json => {
            to_json(&json!({ "geometry": cfg.geometry, "params": params, "breakdown": b }))?
        }
        Format::Csv => to_csv(&[rate_row(&cfg.geometry, &b)])?,
    };
    emit(cli, &body)?;
    Ok(0)
}

fn cmd_optimize(cli: &Cli, cfg: &RunConfig, mode: ScanMode) -> Result<u8, Failure> {
    let geom = match mode {
        ScanMode::LaZero => LinkGeometry::new(0.0, cfg.geometry.total())?,
        _ => cfg.geometry,
    };
    let res = mode.run(&cfg.system, &geom, &cfg.optimizer, &cfg.fluctuation)?;
    eprintln!(
        "{}: R = {:.6e} per pulse after {} evaluations (M = {})",
        mode.name(),
        res.breakdown.r,
        res.evaluations,
        res.m_slices
    );
    let body = match cli.format.unwrap_or(Format::Json) {
        Format::Json => to_json(&json!({ "mode": mode, "geometry": geom, "result": res }))?,
        Format::Csv => {
            let row = scan::scan_point(
                &cfg.system,
                &cfg.optimizer,
                &cfg.fluctuation,
                mode,
                geom.l_b - geom.l_a,
                geom.total(),
            );
            to_csv(&[row])?
        }
    };
    emit(cli, &body)?;
    Ok(0)
}

fn scan_csv(rows: &[scan::ScanRow]) -> anyhow::Result<String> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    // Written by hand so the header exists even for an empty scan.
    w.write_record(scan::SCAN_COLUMNS)?;
    for row in rows {
        w.serialize(row)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn cmd_scan_distance(cli: &Cli, cfg: &RunConfig, request: &ScanRequest) -> Result<u8, Failure> {
    let rows = scan::scan_distance(
        &cfg.system,
        &cfg.optimizer,
        &cfg.fluctuation,
        request,
        Execution::default(),
    )
    .map_err(|e| usage(e.into()))?;
    let body = match cli.format.unwrap_or(Format::Csv) {
        Format::Csv => scan_csv(&rows)?,
        Format::Json => to_json(&rows)?,
    };
    emit(cli, &body)?;
    Ok(report_failures(
        rows.iter().filter(|r| r.is_error()).map(|r| &r.status),
    ))
}

fn report_failures<'a>(statuses: impl Iterator<Item = &'a String>) -> u8 {
    let failures: Vec<_> = statuses.collect();
    for s in &failures {
        eprintln!("{s}");
    }
    if failures.is_empty() {
        0
    } else {
        eprintln!("{} point(s) failed", failures.len());
        EXIT_FAILURE
    }
}

fn cmd_scan_ed(cli: &Cli, cfg: &RunConfig, grid: &[f64]) -> Result<u8, Failure> {
    let rows = scan::scan_ed(
        &cfg.system,
        &cfg.geometry,
        &cfg.optimizer,
        &cfg.fluctuation,
        grid,
        Execution::default(),
    )
    .map_err(|e| usage(e.into()))?;
    let body = match cli.format.unwrap_or(Format::Csv) {
        Format::Csv => to_csv(&rows)?,
        Format::Json => to_json(&rows)?,
    };
    emit(cli, &body)?;
    Ok(report_failures(
        rows.iter().filter(|r| r.is_error()).map(|r| &r.status),
    ))
}

fn cmd_fit_sigma(
    cli: &Cli,
    cfg: &RunConfig,
    mode: ScanMode,
    delta_l: f64,
    grid: &[f64],
    finite_size: bool,
) -> Result<u8, Failure> {
    let policy = if finite_size {
        cfg.fluctuation
    } else {
        FluctuationPolicy::asymptotic()
    };
    let request = ScanRequest {
        modes: vec![mode],
        delta_l_km: vec![delta_l],
        totals_km: grid.to_vec(),
    };
    let rows = scan::scan_distance(
        &cfg.system,
        &cfg.optimizer,
        &policy,
        &request,
        Execution::default(),
    )
    .map_err(|e| usage(e.into()))?;
    let fit = scan::fit_sigma(&cfg.system, &rows)?;
    eprintln!(
        "sigma = {:.4} from {} points between {} and {} km (rms residual {:.3})",
        fit.sigma, fit.points, fit.min_total_km, fit.max_total_km, fit.residual_rms
    );
    let body = match cli.format.unwrap_or(Format::Json) {
        Format::Json => to_json(&json!({
            "mode": mode,
            "delta_l_km": delta_l,
            "fluctuation": policy,
            "fit": fit,
            "rows": rows,
        }))?,
        Format::Csv => to_csv(&[fit])?,
    };
    emit(cli, &body)?;
    Ok(report_failures(
        rows.iter().filter(|r| r.is_error()).map(|r| &r.status),
    ))
}

/// Smallest run the validation command accepts.
const MIN_VALIDATION_TRIALS: u64 = 1_000_000;

fn cmd_validate(cli: &Cli, cfg: &RunConfig, trials: Option<u64>) -> Result<u8, Failure> {
    let n_trials = trials.unwrap_or(cfg.validation.trials);
    if n_trials < MIN_VALIDATION_TRIALS {
        return Err(usage(anyhow::anyhow!(
            "--trials {n_trials} is below the minimum of {MIN_VALIDATION_TRIALS}"
        )));
    }
    let vc = ValidationConfig {
        sys: cfg.system,
        geom: cfg.geometry,
        params: cfg.protocol_params().map_err(|e| usage(e.into()))?,
        n_trials,
        seed: cfg.validation.seed,
        analytic_eta_scale: cfg.validation.analytic_eta_scale,
        threshold: cfg.validation.threshold,
        execution: Execution::default(),
    };
    let report = run_validation(&vc)?;
    print_table(&report);
    let body = match cli.format.unwrap_or(Format::Json) {
        Format::Json => to_json(&report)?,
        Format::Csv => to_csv(&report.rows)?,
    };
    emit(cli, &body)?;
    if report.passed {
        Ok(0)
    } else {
        eprintln!(
            "validation failed: {} row(s) beyond {} sigma",
            report.failures().count(),
            report.threshold
        );
        Ok(EXIT_FAILURE)
    }
}

fn print_table(report: &ValidationReport) {
    eprintln!(
        "{:<36} {:>13} {:>13} {:>8}  result",
        "check", "analytic", "simulated", "sigmas"
    );
    for r in &report.rows {
        eprintln!(
            "{:<36} {:>13.5e} {:>13.5e} {:>8.2}  {}",
            r.name,
            r.reference,
            r.measured,
            r.distance,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    for s in &report.skipped {
        eprintln!("skipped: {s}");
    }
}
