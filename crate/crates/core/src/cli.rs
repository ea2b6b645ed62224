//! Command-line front end: flat key-value configuration, CSV ingestion and
//! emission, metadata sidecars, run manifests and generated plot scripts.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    monte_carlo, residual_sets, spatial_covariance, spatial_spectrum, CovarianceCurve,
    MonteCarloOptions, ResidualSet,
};
use crate::bounds::{bound_sweep, TraceMode};
use crate::correlation::{CorrelationKernel, KernelKind};
use crate::error::{Error, Result};
use crate::estimator::{calibrate, locate, LocateOptions};
use crate::geometry::{Point, SetupConfig};
use crate::noisegen::{MeasurementSet, Synthesizer};
use crate::propagation::PropagationParams;

pub const SCHEMA_VERSION: u32 = 1;
pub const MEASUREMENT_HEADER: [&str; 4] = ["x_m", "y_m", "repeat", "power_dbm"];
/// Powers beyond this magnitude are taken as a unit mistake (e.g. mW or W).
pub const POWER_SANITY_DBM: f64 = 200.0;

const DEFAULT_DENSITIES: [f64; 10] = [0.1, 0.2, 0.5, 1.0, 2.0, 4.0, 8.0, 12.5, 16.0, 25.0];

/// Fully resolved experiment configuration.
///
/// Every key of the configuration file maps to one field; `None` means
/// "derived from the other fields".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub side_length_m: f64,
    pub spacing_m: f64,
    pub wavelength_m: f64,
    pub blind_x_m: f64,
    pub blind_y_m: f64,
    pub seed: u64,
    pub p_r0_dbm: f64,
    pub eta: f64,
    pub sigma_db: f64,
    pub r0_m: f64,
    pub correlation: KernelKind,
    pub chi_m: Option<f64>,
    pub density: Option<f64>,
    pub densities: Vec<f64>,
    pub runs: usize,
    pub repeats: usize,
    pub temporal_sigma_db: f64,
    pub sets: usize,
    pub bin_width_m: Option<f64>,
    pub max_sep_m: Option<f64>,
    pub trace: TraceMode,
}

impl Default for Config {
    fn default() -> Self {
        let setup = SetupConfig::default();
        let params = PropagationParams::calibrated();
        Self {
            side_length_m: setup.side_length,
            spacing_m: setup.spacing,
            wavelength_m: setup.wavelength,
            blind_x_m: setup.blind_position.x,
            blind_y_m: setup.blind_position.y,
            seed: 0,
            p_r0_dbm: params.p_r0,
            eta: params.eta,
            sigma_db: params.sigma_db,
            r0_m: params.r0,
            correlation: KernelKind::DiffractionSinc2,
            chi_m: None,
            density: None,
            densities: DEFAULT_DENSITIES.to_vec(),
            runs: 1000,
            repeats: 1,
            temporal_sigma_db: 0.0,
            sets: 200,
            bin_width_m: None,
            max_sep_m: None,
            trace: TraceMode::Position,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str, line: usize) -> Result<T>
where
    T::Err: Display,
{
    raw.parse::<T>().map_err(|e| Error::Parse {
        line,
        column: 0,
        message: format!("bad value `{raw}` for `{key}`: {e}"),
    })
}

impl Config {
    /// Parses `key = value` lines; `#` starts a comment. Unknown and
    /// repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw_line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
                line,
                column: 0,
                message: format!("expected `key = value`, got `{content}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(first) = seen.insert(key.to_string(), line) {
                return Err(Error::InvalidConfig(format!(
                    "key `{key}` at line {line} already set at line {first}"
                )));
            }
            cfg.set(key, value, line)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, v: &str, line: usize) -> Result<()> {
        match key {
            "side_length_m" => self.side_length_m = parse_value(key, v, line)?,
            "spacing_m" => self.spacing_m = parse_value(key, v, line)?,
            "wavelength_m" => self.wavelength_m = parse_value(key, v, line)?,
            "blind_x_m" => self.blind_x_m = parse_value(key, v, line)?,
            "blind_y_m" => self.blind_y_m = parse_value(key, v, line)?,
            "seed" => self.seed = parse_value(key, v, line)?,
            "p_r0_dbm" => self.p_r0_dbm = parse_value(key, v, line)?,
            "eta" => self.eta = parse_value(key, v, line)?,
            "sigma_db" => self.sigma_db = parse_value(key, v, line)?,
            "r0_m" => self.r0_m = parse_value(key, v, line)?,
            "correlation" => self.correlation = parse_value(key, v, line)?,
            "chi_m" => self.chi_m = Some(parse_value(key, v, line)?),
            "density" => self.density = Some(parse_value(key, v, line)?),
            "densities" => {
                self.densities = v
                    .split(',')
                    .map(|d| parse_value(key, d.trim(), line))
                    .collect::<Result<_>>()?
            }
            "runs" => self.runs = parse_value(key, v, line)?,
            "repeats" => self.repeats = parse_value(key, v, line)?,
            "temporal_sigma_db" => self.temporal_sigma_db = parse_value(key, v, line)?,
            "sets" => self.sets = parse_value(key, v, line)?,
            "bin_width_m" => self.bin_width_m = Some(parse_value(key, v, line)?),
            "max_sep_m" => self.max_sep_m = Some(parse_value(key, v, line)?),
            "trace" => {
                self.trace = match v {
                    "position" => TraceMode::Position,
                    "full" => TraceMode::Full,
                    _ => {
                        return Err(Error::Parse {
                            line,
                            column: 0,
                            message: format!(
                                "bad value `{v}` for `trace`: expected position or full"
                            ),
                        })
                    }
                }
            }
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "unknown key `{key}` at line {line}"
                )));
            }
        }
        Ok(())
    }

    fn apply(&mut self, flags: &CommonArgs) {
        if let Some(seed) = flags.seed {
            self.seed = seed;
        }
        if let Some(d) = flags.density {
            self.density = Some(d);
        }
        if let Some(k) = flags.kernel {
            self.correlation = k;
        }
        if let Some(chi) = flags.chi {
            self.chi_m = Some(chi);
        }
        if let Some(runs) = flags.runs {
            self.runs = runs;
        }
        if let Some(r) = flags.repeats {
            self.repeats = r;
        }
    }

    /// Geometry at the configured spacing, or at `density` when set.
    pub fn setup(&self) -> Result<SetupConfig> {
        let base = SetupConfig::square(
            self.side_length_m,
            self.spacing_m,
            self.wavelength_m,
            Point::new(self.blind_x_m, self.blind_y_m),
        );
        base.validate()?;
        match self.density {
            Some(d) => base.with_density(d),
            None => Ok(base),
        }
    }

    pub fn params(&self) -> PropagationParams {
        PropagationParams {
            r0: self.r0_m,
            ..PropagationParams::new(self.p_r0_dbm, self.eta, self.sigma_db)
        }
    }

    pub fn kernel(&self) -> CorrelationKernel {
        let k = CorrelationKernel::new(self.correlation, self.wavelength_m);
        match self.chi_m {
            Some(chi) => k.with_correlation_length(chi),
            None => k,
        }
    }

    /// SHA-256 of the canonical JSON form of the resolved configuration.
    pub fn hash(&self) -> Result<String> {
        let canonical = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&canonical)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
    pub outputs: Vec<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Sidecar<'a> {
    schema_version: u32,
    command: &'a str,
    columns: &'a [&'a str],
    kernel: &'a CorrelationKernel,
    seed: u64,
    config: &'a Config,
}

#[derive(Debug, Parser)]
#[command(
    name = "rss-bounds",
    version,
    about = "Simulation, localization and Cramér-Rao bounds for RSS measurements"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Reference positions per wavelength along the perimeter.
    #[arg(long, global = true, value_name = "F")]
    pub density: Option<f64>,
    #[arg(long, global = true, value_name = "KIND")]
    pub kernel: Option<KernelKind>,
    /// Exponential-kernel correlation length, meters.
    #[arg(long, global = true, value_name = "M")]
    pub chi: Option<f64>,
    #[arg(long, global = true, value_name = "N")]
    pub runs: Option<usize>,
    #[arg(long, global = true, value_name = "N")]
    pub repeats: Option<usize>,
    /// Measurement CSV (`x_m,y_m,repeat,power_dbm`).
    #[arg(long, global = true, value_name = "PATH")]
    pub input: Option<PathBuf>,
    /// Also write per-run records where a command has them.
    #[arg(long, short, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Synthesize one measurement set.
    Simulate,
    /// Fit p_r0, eta and sigma to a measurement CSV at the known blind position.
    Calibrate,
    /// Maximum-likelihood transmitter position from a measurement CSV.
    Locate,
    /// Independent, correlated and Bienaymé bounds over a density sweep.
    CrlbCurve,
    /// Monte Carlo bias, RMSE and efficiency gap of the localizer.
    McStudy,
    /// Binned spatial covariance of shadowing residuals.
    CorrAnalyze,
    /// Spatial power spectrum of the residual covariance.
    Spectrum,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Calibrate => "calibrate",
            Command::Locate => "locate",
            Command::CrlbCurve => "crlb-curve",
            Command::McStudy => "mc-study",
            Command::CorrAnalyze => "corr-analyze",
            Command::Spectrum => "spectrum",
        }
    }
}

/// Collects a command's artifacts; every file written goes into the manifest.
struct Outputs<'a> {
    dir: &'a Path,
    command: Command,
    cfg: &'a Config,
    kernel: CorrelationKernel,
    written: Vec<PathBuf>,
}

impl<'a> Outputs<'a> {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes)?;
        self.written.push(path);
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        self.write(name, &csv_bytes(header, rows)?)?;
        let sidecar = Sidecar {
            schema_version: SCHEMA_VERSION,
            command: self.command.name(),
            columns: header,
            kernel: &self.kernel,
            seed: self.cfg.seed,
            config: self.cfg,
        };
        let meta = Path::new(name).with_extension("meta.json");
        let mut json = serde_json::to_vec_pretty(&sidecar)?;
        json.push(b'\n');
        self.write(&meta.to_string_lossy(), &json)
    }
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn fmt<T: Display>(v: T) -> String {
    v.to_string()
}

fn measurement_rows(meas: &MeasurementSet) -> Vec<Vec<String>> {
    meas.measurements()
        .enumerate()
        .map(|(k, (p, power))| vec![fmt(p.x), fmt(p.y), fmt(k % meas.repeats), fmt(power)])
        .collect()
}

/// Writes a measurement set as CSV with header `x_m,y_m,repeat,power_dbm`.
pub fn emit_measurements(meas: &MeasurementSet, path: &Path) -> Result<()> {
    fs::write(
        path,
        csv_bytes(&MEASUREMENT_HEADER, &measurement_rows(meas))?,
    )?;
    Ok(())
}

fn parse_cell(field: &str, line: usize, column: usize) -> Result<f64> {
    match field.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(v) => Err(Error::Parse {
            line,
            column,
            message: format!("non-finite value {v}"),
        }),
        Err(_) => Err(Error::Parse {
            line,
            column,
            message: format!("`{field}` is not a number"),
        }),
    }
}

/// Reads a measurement CSV. Positions are deduplicated in file order; every
/// position must carry repeats `0..R` for a common `R`. The seed is taken from
/// the `.meta.json` sidecar when present, else 0.
pub fn ingest_measurements(path: &Path) -> Result<MeasurementSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;
    let mut records = reader.records();

    let header = match records.next() {
        Some(r) => r?,
        None => return Err(Error::Empty(format!("{} has no header", path.display()))),
    };
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != MEASUREMENT_HEADER {
        return Err(Error::Parse {
            line: 1,
            column: 1,
            message: format!(
                "header must be `{}`, got `{}`",
                MEASUREMENT_HEADER.join(","),
                got.join(",")
            ),
        });
    }

    let mut positions: Vec<Point> = Vec::new();
    let mut rows: Vec<(usize, usize, f64)> = Vec::new();
    for (idx, record) in records.enumerate() {
        let line = idx + 2;
        let record = record?;
        if record.len() != 4 {
            return Err(Error::Parse {
                line,
                column: record.len().min(4) + 1,
                message: format!("expected 4 fields, got {}", record.len()),
            });
        }
        let x = parse_cell(&record[0], line, 1)?;
        let y = parse_cell(&record[1], line, 2)?;
        let repeat = record[2]
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Parse {
                line,
                column: 3,
                message: format!("`{}` is not a repeat index", &record[2]),
            })?;
        let power = parse_cell(&record[3], line, 4)?;
        if power.abs() > POWER_SANITY_DBM {
            return Err(Error::UnitSanity { line, value: power });
        }
        let p = Point::new(x, y);
        let pos = match positions.iter().position(|q| *q == p) {
            Some(i) => i,
            None => {
                positions.push(p);
                positions.len() - 1
            }
        };
        rows.push((pos, repeat, power));
    }
    if rows.is_empty() {
        return Err(Error::Empty(format!(
            "{} has a header but no measurements",
            path.display()
        )));
    }
    if !rows.len().is_multiple_of(positions.len()) {
        return Err(Error::InvalidConfig(format!(
            "{} rows do not split evenly over {} positions",
            rows.len(),
            positions.len()
        )));
    }

    let repeats = rows.len() / positions.len();
    let mut powers = vec![f64::NAN; rows.len()];
    for (k, &(pos, repeat, power)) in rows.iter().enumerate() {
        let slot = pos * repeats + repeat;
        if repeat >= repeats || !powers[slot].is_nan() {
            return Err(Error::Parse {
                line: k + 2,
                column: 3,
                message: format!(
                    "repeat {repeat} duplicated or out of range 0..{repeats} for its position"
                ),
            });
        }
        powers[slot] = power;
    }

    let seed = read_sidecar_seed(&path.with_extension("meta.json"))?.unwrap_or(0);
    MeasurementSet::new(positions, powers, repeats, seed)
}

fn read_sidecar_seed(path: &Path) -> Result<Option<u64>> {
    if !path.exists() {
        return Ok(None);
    }
    let value: serde_json::Value = serde_json::from_slice(&fs::read(path)?)?;
    Ok(value.get("seed").and_then(|s| s.as_u64()))
}

fn require_input(flags: &CommonArgs) -> Result<&Path> {
    flags
        .input
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("this command needs --input PATH".into()))
}

/// Residual sets either from `--input` (parameters calibrated from the data)
/// or synthesized: `sets` independent draws under the configured kernel.
fn collect_residuals(cfg: &Config, flags: &CommonArgs) -> Result<(Vec<ResidualSet>, f64)> {
    let setup = cfg.setup()?;
    if let Some(path) = flags.input.as_deref() {
        let meas = ingest_measurements(path)?;
        let params = calibrate(&meas, &setup.blind_position)?;
        let spacing = nearest_spacing(&meas.positions);
        return Ok((
            residual_sets(&meas, &params, &setup.blind_position)?,
            spacing,
        ));
    }
    if cfg.sets == 0 {
        return Err(Error::InvalidConfig("sets must be >= 1".into()));
    }
    let params = cfg.params();
    let synth = Synthesizer::new(&setup, &params, &cfg.kernel())?
        .with_temporal_noise(cfg.temporal_sigma_db)?;
    let mut sets = Vec::with_capacity(cfg.sets * cfg.repeats);
    for i in 0..cfg.sets {
        let meas = synth.draw(cfg.seed, i as u64, cfg.repeats)?;
        sets.extend(residual_sets(&meas, &params, &setup.blind_position)?);
    }
    Ok((sets, setup.spacing))
}

fn nearest_spacing(positions: &[Point]) -> f64 {
    positions
        .windows(2)
        .map(|w| (w[1] - w[0]).norm())
        .filter(|d| *d > 0.0)
        .fold(f64::INFINITY, f64::min)
}

fn covariance_curve(cfg: &Config, flags: &CommonArgs) -> Result<CovarianceCurve> {
    let (sets, spacing) = collect_residuals(cfg, flags)?;
    let bin_width = cfg.bin_width_m.unwrap_or(spacing);
    let max_sep = cfg.max_sep_m.unwrap_or(4.0 * cfg.wavelength_m);
    spatial_covariance(&sets, bin_width, max_sep)
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

/// Runs one command and writes its outputs plus `manifest.json` into `--out`.
pub fn run(command: Command, flags: &CommonArgs) -> Result<RunManifest> {
    let mut cfg = match &flags.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    cfg.apply(flags);
    let kernel = cfg.kernel();
    kernel.validate()?;
    cfg.params().validate()?;
    if cfg.repeats == 0 {
        return Err(Error::InvalidConfig("repeats must be >= 1".into()));
    }

    fs::create_dir_all(&flags.out)?;
    let mut out = Outputs {
        dir: &flags.out,
        command,
        cfg: &cfg,
        kernel,
        written: Vec::new(),
    };

    match command {
        Command::Simulate => {
            let synth = Synthesizer::new(&cfg.setup()?, &cfg.params(), &kernel)?
                .with_temporal_noise(cfg.temporal_sigma_db)?;
            let meas = synth.draw(cfg.seed, 0, cfg.repeats)?;
            out.csv(
                "measurements.csv",
                &MEASUREMENT_HEADER,
                &measurement_rows(&meas),
            )?;
        }
        Command::Calibrate => {
            let meas = ingest_measurements(require_input(flags)?)?;
            let p = calibrate(&meas, &cfg.setup()?.blind_position)?;
            out.csv(
                "calibration.csv",
                &["p_r0_dbm", "eta", "sigma_db"],
                &[vec![fmt(p.p_r0), fmt(p.eta), fmt(p.sigma_db)]],
            )?;
        }
        Command::Locate => {
            let meas = ingest_measurements(require_input(flags)?)?;
            let opts = LocateOptions {
                r0: cfg.r0_m,
                ..LocateOptions::from_config(&cfg.setup()?)
            };
            let est = match locate(&meas, &opts, None) {
                Ok(e) => e,
                Err(Error::NotConverged(e)) => *e,
                Err(e) => return Err(e),
            };
            out.csv(
                "locate.csv",
                &[
                    "x_mle_m",
                    "y_mle_m",
                    "p_r0_dbm",
                    "eta",
                    "objective",
                    "converged",
                ],
                &[vec![
                    fmt(est.x_mle),
                    fmt(est.y_mle),
                    fmt(est.p_r0_mle),
                    fmt(est.eta_mle),
                    fmt(est.objective_value),
                    fmt(est.converged),
                ]],
            )?;
        }
        Command::CrlbCurve => {
            let base = SetupConfig {
                spacing: cfg.spacing_m,
                ..cfg.setup()?
            };
            let reports = bound_sweep(&base, &cfg.params(), &kernel, &cfg.densities, cfg.trace)?;
            let rows: Vec<Vec<String>> = reports
                .iter()
                .map(|r| {
                    vec![
                        fmt(r.density_per_lambda),
                        fmt(r.n),
                        fmt(r.n_eff),
                        fmt(r.rmse_crlb_indep),
                        opt(r.rmse_crlb_correlated),
                        fmt(r.rmse_bienayme),
                        fmt(r.degenerate),
                    ]
                })
                .collect();
            out.csv(
                "crlb_curve.csv",
                &[
                    "density_per_lambda",
                    "n",
                    "n_eff",
                    "rmse_indep_m",
                    "rmse_corr_m",
                    "rmse_bienayme_m",
                    "degenerate",
                ],
                &rows,
            )?;
            out.write(
                "plot_crlb_curve.py",
                plot_crlb_curve(cfg.wavelength_m).as_bytes(),
            )?;
        }
        Command::McStudy => {
            let setup = cfg.setup()?;
            let density = setup.density();
            let opts = MonteCarloOptions {
                repeats: cfg.repeats,
                temporal_sigma_db: cfg.temporal_sigma_db,
                trace: cfg.trace,
            };
            let report = monte_carlo(
                &setup,
                &cfg.params(),
                &kernel,
                cfg.runs,
                density,
                cfg.seed,
                &opts,
            )?;
            out.csv(
                "mc_study.csv",
                &["runs", "bias_m", "rmse_m", "efficiency_gap_m", "crlb_m"],
                &[vec![
                    fmt(report.runs),
                    fmt(report.bias_m),
                    fmt(report.rmse_m),
                    fmt(report.efficiency_gap_m),
                    fmt(report.crlb_reference_m),
                ]],
            )?;
            if flags.verbose {
                let rows: Vec<Vec<String>> = report
                    .records
                    .iter()
                    .map(|r| {
                        vec![
                            fmt(r.run),
                            fmt(r.x_mle),
                            fmt(r.y_mle),
                            fmt(r.p_r0_mle),
                            fmt(r.eta_mle),
                            fmt(r.converged),
                        ]
                    })
                    .collect();
                out.csv(
                    "mc_runs.csv",
                    &["run", "x_mle_m", "y_mle_m", "p_r0_dbm", "eta", "converged"],
                    &rows,
                )?;
            }
            out.write(
                "plot_mc_study.py",
                plot_mc_study(
                    cfg.wavelength_m,
                    density,
                    setup.blind_position,
                    flags.verbose,
                )
                .as_bytes(),
            )?;
        }
        Command::CorrAnalyze => {
            let curve = covariance_curve(&cfg, flags)?;
            let rows: Vec<Vec<String>> = curve
                .bin_centers
                .iter()
                .zip(&curve.covariance)
                .zip(curve.correlation())
                .zip(&curve.counts)
                .map(|(((sep, cov), corr), count)| vec![fmt(sep), opt(*cov), opt(corr), fmt(count)])
                .collect();
            out.csv(
                "covariance.csv",
                &["sep_m", "covariance_db2", "correlation", "count"],
                &rows,
            )?;
            out.write(
                "plot_covariance.py",
                plot_covariance(cfg.wavelength_m).as_bytes(),
            )?;
        }
        Command::Spectrum => {
            let curve = covariance_curve(&cfg, flags)?;
            let s = spatial_spectrum(&curve, cfg.wavelength_m)?;
            let rows: Vec<Vec<String>> = s
                .k_values
                .iter()
                .zip(&s.power)
                .map(|(k, p)| vec![fmt(k), fmt(p)])
                .collect();
            out.csv("spectrum.csv", &["k_rad_per_m", "power_norm"], &rows)?;
            out.write(
                "plot_spectrum.py",
                plot_spectrum(cfg.wavelength_m).as_bytes(),
            )?;
        }
    }

    let mut manifest = RunManifest {
        command: command.name().to_string(),
        config_hash: cfg.hash()?,
        seed: cfg.seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        outputs: out.written,
    };
    let manifest_path = flags.out.join("manifest.json");
    manifest.outputs.push(manifest_path.clone());
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(&manifest_path, json)?;
    Ok(manifest)
}

/// One JSON line describing a failure, for stderr.
pub fn error_line(e: &Error) -> String {
    serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } }).to_string()
}

const PLOT_PRELUDE: &str = "import csv\nimport os\n\nimport matplotlib.pyplot as plt\n\nHERE = os.path.dirname(os.path.abspath(__file__))\n\n\ndef load(name):\n    with open(os.path.join(HERE, name)) as f:\n        return list(csv.DictReader(f))\n\n\ndef num(v):\n    return float(v) if v not in (\"\", None) else float(\"nan\")\n\n\n";

fn plot_crlb_curve(wavelength: f64) -> String {
    format!(
        "{PLOT_PRELUDE}LAMBDA = {wavelength}\nrows = load(\"crlb_curve.csv\")\nd = [num(r[\"density_per_lambda\"]) for r in rows]\n\
plt.loglog(d, [num(r[\"rmse_indep_m\"]) for r in rows], \"g-o\", label=\"CRLB, independent noise\")\n\
plt.loglog(d, [num(r[\"rmse_corr_m\"]) for r in rows], \"b-s\", label=\"CRLB, correlated noise\")\n\
plt.loglog(d, [num(r[\"rmse_bienayme_m\"]) for r in rows], \"r-^\", label=\"Bienaym\\u00e9 bound\")\n\
plt.axhline(LAMBDA / 2, color=\"k\", ls=\"--\", label=\"\\u03bb/2\")\n\
plt.xlabel(\"reference positions per wavelength\")\nplt.ylabel(\"RMSE bound (m)\")\nplt.legend()\nplt.grid(True, which=\"both\", alpha=0.3)\n\
plt.savefig(os.path.join(HERE, \"crlb_curve.png\"), dpi=150)\n"
    )
}

fn plot_mc_study(wavelength: f64, density: f64, blind: Point, per_run: bool) -> String {
    let scatter = if per_run {
        "runs = load(\"mc_runs.csv\")\nfig, (ax, ax2) = plt.subplots(1, 2, figsize=(10, 4))\n\
ax2.scatter([num(r[\"x_mle_m\"]) for r in runs], [num(r[\"y_mle_m\"]) for r in runs], s=4)\n\
ax2.plot([BLIND[0]], [BLIND[1]], \"r+\", ms=12)\nax2.set_xlabel(\"x (m)\")\nax2.set_ylabel(\"y (m)\")\nax2.set_aspect(\"equal\")\n"
    } else {
        "fig, ax = plt.subplots()\n"
    };
    format!(
        "{PLOT_PRELUDE}LAMBDA = {wavelength}\nDENSITY = {density}\nBLIND = ({}, {})\nrow = load(\"mc_study.csv\")[0]\n{scatter}\
ax.semilogy([DENSITY], [num(row[\"rmse_m\"])], \"ko\", label=\"Monte Carlo RMSE\")\n\
ax.semilogy([DENSITY], [num(row[\"crlb_m\"])], \"r^\", label=\"reference bound\")\n\
ax.axhline(LAMBDA / 2, color=\"k\", ls=\"--\", label=\"\\u03bb/2\")\n\
ax.set_xlabel(\"reference positions per wavelength\")\nax.set_ylabel(\"RMSE (m)\")\nax.legend()\n\
fig.savefig(os.path.join(HERE, \"mc_study.png\"), dpi=150)\n",
        blind.x, blind.y
    )
}

fn plot_covariance(wavelength: f64) -> String {
    format!(
        "{PLOT_PRELUDE}LAMBDA = {wavelength}\nrows = load(\"covariance.csv\")\n\
plt.plot([num(r[\"sep_m\"]) for r in rows], [num(r[\"correlation\"]) for r in rows], \"b-\")\n\
plt.axvline(LAMBDA / 2, color=\"k\", ls=\"--\", label=\"\\u03bb/2\")\n\
plt.xlabel(\"separation (m)\")\nplt.ylabel(\"normalized cross-covariance\")\nplt.legend()\n\
plt.savefig(os.path.join(HERE, \"covariance.png\"), dpi=150)\n"
    )
}

fn plot_spectrum(wavelength: f64) -> String {
    format!(
        "{PLOT_PRELUDE}import math\n\nLAMBDA = {wavelength}\nrows = load(\"spectrum.csv\")\n\
plt.plot([num(r[\"k_rad_per_m\"]) for r in rows], [num(r[\"power_norm\"]) for r in rows], \"b-\")\n\
plt.axvline(2 * math.pi / (LAMBDA / 2), color=\"k\", ls=\"--\", label=\"2\\u03c0/(\\u03bb/2)\")\n\
plt.xlabel(\"k (rad/m)\")\nplt.ylabel(\"normalized power\")\nplt.legend()\n\
plt.savefig(os.path.join(HERE, \"spectrum.png\"), dpi=150)\n"
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_reproduces_the_setup() {
        let cfg = Config::parse("").unwrap();
        assert_eq!(cfg.setup().unwrap(), SetupConfig::default());
        assert_eq!(cfg.params(), PropagationParams::calibrated());
    }

    #[test]
    fn parses_comments_and_lists() {
        let cfg = Config::parse(
            "# geometry\nside_length_m = 3.0  # meters\ncorrelation = exponential\nchi_m=0.05\ndensities = 1, 2,4\n",
        )
        .unwrap();
        assert_eq!(cfg.correlation, KernelKind::Exponential);
        assert_eq!(cfg.kernel().correlation_length, 0.05);
        assert_eq!(cfg.densities, vec![1.0, 2.0, 4.0]);
    }

    #[test]
    fn unknown_keys_are_fatal() {
        let err = Config::parse("seed = 1\nsigma_bd = 2\n").unwrap_err();
        assert!(
            matches!(&err, Error::InvalidConfig(m) if m.contains("sigma_bd") && m.contains("line 2"))
        );
    }

    #[test]
    fn repeated_keys_are_fatal() {
        assert!(Config::parse("seed = 1\nseed = 2\n").is_err());
    }

    #[test]
    fn bad_values_name_their_line() {
        let err = Config::parse("\n\neta = fast\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::default();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed = 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }

    #[test]
    fn flags_override_the_file() {
        let mut cfg = Config::parse("seed = 3\nruns = 200\n").unwrap();
        cfg.apply(&CommonArgs {
            seed: Some(9),
            kernel: Some(KernelKind::Independent),
            ..CommonArgs::default()
        });
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.runs, 200);
        assert_eq!(cfg.correlation, KernelKind::Independent);
    }
}
