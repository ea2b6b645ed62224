//! Empirical studies on measurement sets: residuals, binned spatial
//! covariance, its spatial power spectrum, and Monte Carlo bias/RMSE of the
//! localizer against the bounds.

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::bounds::{reference_bounds, TraceMode};
use crate::correlation::{CorrelationKernel, KernelKind};
use crate::error::{Error, Result};
use crate::estimator::{locate, LocateOptions};
use crate::geometry::{distance, Point, SetupConfig};
use crate::noisegen::{MeasurementSet, Synthesizer};
use crate::propagation::PropagationParams;

/// `P_i - Pbar(r_i)` for every measurement, in measurement order.
pub fn residuals(
    meas: &MeasurementSet,
    params: &PropagationParams,
    blind: &Point,
) -> Result<Vec<f64>> {
    meas.measurements()
        .enumerate()
        .map(|(k, (p, power))| {
            params
                .mean_power(distance(p, blind))
                .map(|m| power - m)
                .map_err(|e| Error::Domain(format!("measurement {k}: {e}")))
        })
        .collect()
}

/// One residual per position.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSet {
    pub positions: Vec<Point>,
    pub residuals: Vec<f64>,
}

/// Splits a measurement set into one residual set per repeat.
pub fn residual_sets(
    meas: &MeasurementSet,
    params: &PropagationParams,
    blind: &Point,
) -> Result<Vec<ResidualSet>> {
    let all = residuals(meas, params, blind)?;
    Ok((0..meas.repeats)
        .map(|r| ResidualSet {
            positions: meas.positions.clone(),
            residuals: (0..meas.positions.len())
                .map(|i| all[i * meas.repeats + r])
                .collect(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceCurve {
    /// Bin `k` is centered at `k * bin_width` and collects separations in
    /// `[(k - 1/2) w, (k + 1/2) w)`.
    pub bin_centers: Vec<f64>,
    /// Mean residual product per bin, `None` where the bin is empty.
    pub covariance: Vec<Option<f64>>,
    pub counts: Vec<u64>,
}

impl CovarianceCurve {
    pub fn bin_width(&self) -> f64 {
        if self.bin_centers.len() > 1 {
            self.bin_centers[1] - self.bin_centers[0]
        } else {
            0.0
        }
    }

    /// Covariance divided by the bin-0 variance.
    pub fn correlation(&self) -> Vec<Option<f64>> {
        let var = self.covariance.first().copied().flatten();
        self.covariance
            .iter()
            .map(|c| match (c, var) {
                (Some(c), Some(v)) if v > 0.0 => Some(c / v),
                _ => None,
            })
            .collect()
    }

    /// Index of the first local minimum of the covariance after bin 0,
    /// skipping empty bins.
    pub fn first_minimum(&self) -> Option<usize> {
        let filled: Vec<(usize, f64)> = self
            .covariance
            .iter()
            .enumerate()
            .skip(1)
            .filter_map(|(k, c)| c.map(|c| (k, c)))
            .collect();
        filled.windows(2).find(|w| w[0].1 <= w[1].1).map(|w| w[0].0)
    }
}

struct PairBins {
    /// `(i, j, bin)` for every pair with `i <= j` inside the cutoff.
    pairs: Vec<(u32, u32, u32)>,
}

impl PairBins {
    fn new(positions: &[Point], bin_width: f64, nbins: usize) -> Self {
        let n = positions.len();
        let rows: Vec<Vec<(u32, u32, u32)>> = (0..n)
            .into_par_iter()
            .map(|i| {
                (i..n)
                    .filter_map(|j| {
                        let bin = (distance(&positions[i], &positions[j]) / bin_width).round();
                        (bin < nbins as f64).then_some((i as u32, j as u32, bin as u32))
                    })
                    .collect()
            })
            .collect();
        Self {
            pairs: rows.concat(),
        }
    }
}

/// Binned mean of residual products over all position pairs up to `max_sep`,
/// pooled across the residual sets.
pub fn spatial_covariance(
    sets: &[ResidualSet],
    bin_width: f64,
    max_sep: f64,
) -> Result<CovarianceCurve> {
    if !(bin_width > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "bin width must be > 0, got {bin_width}"
        )));
    }
    if !(max_sep >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "max separation must be >= 0, got {max_sep}"
        )));
    }
    if sets.is_empty() {
        return Err(Error::Empty("no residual sets".into()));
    }
    for (s, set) in sets.iter().enumerate() {
        if set.positions.len() < 2 {
            return Err(Error::Degenerate(format!(
                "residual set {s} has fewer than 2 positions"
            )));
        }
        if set.positions.len() != set.residuals.len() {
            return Err(Error::InvalidConfig(format!(
                "residual set {s} has {} positions and {} residuals",
                set.positions.len(),
                set.residuals.len()
            )));
        }
    }
    let nbins = (max_sep / bin_width).round() as usize + 1;

    // Sets sharing a position list share one pair table.
    let mut tables: Vec<(usize, PairBins)> = Vec::new();
    let mut table_of = Vec::with_capacity(sets.len());
    for (s, set) in sets.iter().enumerate() {
        let hit = tables
            .iter()
            .position(|(owner, _)| sets[*owner].positions == set.positions);
        let t = match hit {
            Some(t) => t,
            None => {
                tables.push((s, PairBins::new(&set.positions, bin_width, nbins)));
                tables.len() - 1
            }
        };
        table_of.push(t);
    }

    let partials: Vec<(Vec<f64>, Vec<u64>)> = sets
        .par_iter()
        .zip(table_of.par_iter())
        .map(|(set, &t)| {
            let mut sums = vec![0.0; nbins];
            let mut counts = vec![0u64; nbins];
            for &(i, j, bin) in &tables[t].1.pairs {
                sums[bin as usize] += set.residuals[i as usize] * set.residuals[j as usize];
                counts[bin as usize] += 1;
            }
            (sums, counts)
        })
        .collect();

    let mut sums = vec![0.0; nbins];
    let mut counts = vec![0u64; nbins];
    for (s, c) in &partials {
        for k in 0..nbins {
            sums[k] += s[k];
            counts[k] += c[k];
        }
    }
    Ok(CovarianceCurve {
        bin_centers: (0..nbins).map(|k| k as f64 * bin_width).collect(),
        covariance: sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect(),
        counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumCurve {
    /// Nonnegative spatial frequencies, rad/m.
    pub k_values: Vec<f64>,
    /// Normalized so the values sum to one.
    pub power: Vec<f64>,
}

impl SpectrumCurve {
    /// Share of the spectral power at `k <= k_max`.
    pub fn fraction_below(&self, k_max: f64) -> f64 {
        self.k_values
            .iter()
            .zip(&self.power)
            .filter(|(k, _)| **k <= k_max)
            .map(|(_, p)| p)
            .sum()
    }
}

/// Blackman-Tukey spectrum of a binned covariance: the sequence is mirrored
/// to negative lags, tapered with a Hann lag window and Fourier transformed.
/// Empty bins count as zero covariance.
pub fn spatial_spectrum(curve: &CovarianceCurve, wavelength: f64) -> Result<SpectrumCurve> {
    let nbins = curve.bin_centers.len();
    if nbins < 2 {
        return Err(Error::InsufficientSpan(
            "covariance curve needs at least two bins".into(),
        ));
    }
    let w = curve.bin_width();
    for (k, c) in curve.bin_centers.iter().enumerate() {
        if (c - k as f64 * w).abs() > 1e-9 * w.max(1.0) * (k as f64 + 1.0) {
            return Err(Error::InvalidConfig(
                "covariance bins are not uniform".into(),
            ));
        }
    }
    let span = curve.bin_centers[nbins - 1];
    if span < wavelength {
        return Err(Error::InsufficientSpan(format!(
            "covariance spans {span} m, less than one wavelength ({wavelength} m)"
        )));
    }

    let len = 2 * nbins - 1;
    let mut seq = vec![Complex::new(0.0, 0.0); len];
    for (lag, c) in curve.covariance.iter().enumerate() {
        let taper = 0.5 * (1.0 + (std::f64::consts::PI * lag as f64 / nbins as f64).cos());
        let v = c.unwrap_or(0.0) * taper;
        seq[lag] = Complex::new(v, 0.0);
        if lag > 0 {
            seq[len - lag] = Complex::new(v, 0.0);
        }
    }
    FftPlanner::new().plan_fft_forward(len).process(&mut seq);

    let half = len / 2 + 1;
    let raw: Vec<f64> = seq[..half].iter().map(|z| z.norm()).collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate(
            "covariance curve carries no power".into(),
        ));
    }
    let dk = std::f64::consts::TAU / (len as f64 * w);
    Ok(SpectrumCurve {
        k_values: (0..half).map(|m| m as f64 * dk).collect(),
        power: raw.iter().map(|p| p / total).collect(),
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MonteCarloOptions {
    pub repeats: usize,
    pub temporal_sigma_db: f64,
    pub trace: TraceMode,
}

impl MonteCarloOptions {
    pub fn new() -> Self {
        Self {
            repeats: 1,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub x_mle: f64,
    pub y_mle: f64,
    pub p_r0_mle: f64,
    pub eta_mle: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub runs: usize,
    pub non_converged: usize,
    pub n: usize,
    pub density_per_lambda: f64,
    /// Distance from the mean estimate to the truth.
    pub bias_m: f64,
    pub rmse_m: f64,
    /// `|rmse - crlb_reference|`.
    pub efficiency_gap_m: f64,
    /// Independent CRLB for the independent kernel, Bienaymé bound otherwise.
    pub crlb_reference_m: f64,
    pub records: Vec<RunRecord>,
}

/// Localizes `runs` independent synthetic sets; run `r` uses noise stream `r`
/// of `seed`. Statistics are taken over converged runs, and the study fails
/// when more than 1% of the runs do not converge.
pub fn monte_carlo(
    cfg: &SetupConfig,
    params: &PropagationParams,
    kernel: &CorrelationKernel,
    runs: usize,
    density: f64,
    seed: u64,
    opts: &MonteCarloOptions,
) -> Result<MonteCarloReport> {
    if runs < 100 {
        return Err(Error::Precondition(format!(
            "Monte Carlo study needs at least 100 runs, got {runs}"
        )));
    }
    let cfg = cfg.with_density(density)?;
    let synth =
        Synthesizer::new(&cfg, params, kernel)?.with_temporal_noise(opts.temporal_sigma_db)?;
    let locate_opts = LocateOptions::from_config(&cfg);
    let truth = cfg.blind_position;

    let outcomes: Vec<Result<RunRecord>> = (0..runs)
        .into_par_iter()
        .map(|run| {
            let meas = synth.draw(seed, run as u64, opts.repeats.max(1))?;
            let est = match locate(&meas, &locate_opts, None) {
                Ok(e) => e,
                Err(Error::NotConverged(e)) => *e,
                Err(e) => return Err(e),
            };
            Ok(RunRecord {
                run,
                x_mle: est.x_mle,
                y_mle: est.y_mle,
                p_r0_mle: est.p_r0_mle,
                eta_mle: est.eta_mle,
                converged: est.converged,
            })
        })
        .collect();
    let records = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let non_converged = records.iter().filter(|r| !r.converged).count();
    if non_converged * 100 > runs {
        return Err(Error::ConvergenceRate {
            failed: non_converged,
            runs,
        });
    }

    let good: Vec<&RunRecord> = records.iter().filter(|r| r.converged).collect();
    let m = good.len() as f64;
    let mean_x = good.iter().map(|r| r.x_mle).sum::<f64>() / m;
    let mean_y = good.iter().map(|r| r.y_mle).sum::<f64>() / m;
    let bias_m = (mean_x - truth.x).hypot(mean_y - truth.y);
    let rmse_m = (good
        .iter()
        .map(|r| (r.x_mle - truth.x).powi(2) + (r.y_mle - truth.y).powi(2))
        .sum::<f64>()
        / m)
        .sqrt();

    let crlb_reference_m = if params.sigma_db > 0.0 {
        let b = reference_bounds(params, kernel, synth.positions(), &truth, opts.trace)?;
        if kernel.kind == KernelKind::Independent {
            b.crlb_indep
        } else {
            b.bienayme
        }
    } else {
        0.0
    };

    Ok(MonteCarloReport {
        runs,
        non_converged,
        n: synth.positions().len(),
        density_per_lambda: density,
        bias_m,
        rmse_m,
        efficiency_gap_m: (rmse_m - crlb_reference_m).abs(),
        crlb_reference_m,
        records,
    })
}
