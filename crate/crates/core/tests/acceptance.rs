//! Acceptance criteria, one line each. Run with
//! `cargo test --release --test acceptance`; exits nonzero if any fail.

use std::fs;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use proptest::strategy::{Strategy, ValueTree};
use proptest::test_runner::TestRunner;
use rss_bounds::analysis::{
    monte_carlo, residual_sets, spatial_covariance, spatial_spectrum, MonteCarloOptions,
};
use rss_bounds::bounds::{bound_at_density, mean_jacobian, TraceMode};
use rss_bounds::correlation::{effective_count, mean_correlation, CorrelationKernel};
use rss_bounds::geometry::{distance, perimeter_positions, Point, SetupConfig};
use rss_bounds::noisegen::Synthesizer;
use rss_bounds::PropagationParams;

const LAMBDA: f64 = 0.125;

struct Outcome {
    pass: bool,
    detail: String,
}

fn criterion(id: u32, name: &str, limit: Option<Duration>, body: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = body();
    let elapsed = start.elapsed();
    let in_time = limit.is_none_or(|l| elapsed <= l);
    let pass = outcome.pass && in_time;
    let budget = match limit {
        Some(l) if in_time => format!(", limit {} s", l.as_secs()),
        Some(l) => format!(", over the {} s limit", l.as_secs()),
        None => String::new(),
    };
    println!(
        "criterion {id:>2} {} {name}: {} [{:.1} s{budget}]",
        if pass { "PASS" } else { "FAIL" },
        outcome.detail,
        elapsed.as_secs_f64(),
    );
    pass
}

fn effective_measurement_count() -> Outcome {
    let cfg = SetupConfig::default();
    let positions = perimeter_positions(&cfg).unwrap();
    let rho = mean_correlation(&CorrelationKernel::sinc2(LAMBDA), &positions).unwrap();
    let n_eff = effective_count(positions.len(), rho).unwrap();
    Outcome {
        pass: (rho / 0.0048 - 1.0).abs() <= 0.05 && (n_eff - 191.0).abs() <= 5.0,
        detail: format!(
            "n = {}, rho_bar = {rho:.5} (0.0048 ± 5%), n_eff = {n_eff:.1} (191 ± 5)",
            positions.len()
        ),
    }
}

fn bienayme_matches_correlated_crlb() -> Outcome {
    let cfg = SetupConfig::default();
    let params = PropagationParams::calibrated();
    let kernel = CorrelationKernel::sinc2(LAMBDA);
    let mut worst: f64 = 0.0;
    let mut missing = Vec::new();
    for density in [0.1, 0.2, 0.3, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0] {
        let r = bound_at_density(&cfg, &params, &kernel, density, TraceMode::Position).unwrap();
        match r.rmse_crlb_correlated {
            Some(c) => worst = worst.max((r.rmse_bienayme - c).abs()),
            None => missing.push(density),
        }
    }
    Outcome {
        pass: worst < 1e-3 && missing.is_empty(),
        detail: format!(
            "max |Bienaymé - correlated CRLB| over 0.1-2 /lambda = {:.4} mm (< 1 mm){}",
            worst * 1e3,
            if missing.is_empty() {
                String::new()
            } else {
                format!(", singular at {missing:?}")
            }
        ),
    }
}

fn plateau_at_diffraction_limit() -> Outcome {
    let cfg = SetupConfig::default();
    let params = PropagationParams::calibrated();
    let sinc = bound_at_density(
        &cfg,
        &params,
        &CorrelationKernel::sinc2(LAMBDA),
        25.0,
        TraceMode::Position,
    )
    .unwrap()
    .rmse_bienayme;
    let exp = bound_at_density(
        &cfg,
        &params,
        &CorrelationKernel::exponential(LAMBDA, LAMBDA / 2.0),
        25.0,
        TraceMode::Position,
    )
    .unwrap()
    .rmse_bienayme;
    let band = |b: f64| (0.053..=0.072).contains(&b);
    let agree = (sinc - exp).abs() / sinc.min(exp) <= 0.10;
    Outcome {
        pass: band(sinc) && band(exp) && agree,
        detail: format!(
            "Bienaymé at 25 /lambda: sinc2 {sinc:.5} m, exponential {exp:.5} m (band [0.053, 0.072]: {}/{}), kernels agree to {:.2}% (<= 10%)",
            band(sinc),
            band(exp),
            100.0 * (sinc - exp).abs() / sinc.min(exp)
        ),
    }
}

fn independent_bound_has_no_plateau() -> Outcome {
    let cfg = SetupConfig::default();
    let params = PropagationParams::calibrated();
    let kernel = CorrelationKernel::independent();
    let at = |d: f64| bound_at_density(&cfg, &params, &kernel, d, TraceMode::Position).unwrap();
    let (a, b) = (at(6.25), at(25.0));
    let ratio = b.rmse_crlb_indep / a.rmse_crlb_indep;
    Outcome {
        pass: (ratio - 0.5).abs() <= 0.005,
        detail: format!(
            "CRLB(n = {}) / CRLB(n = {}) = {ratio:.5} (0.5 ± 1%)",
            b.n, a.n
        ),
    }
}

fn estimator_quality() -> Outcome {
    let report = monte_carlo(
        &SetupConfig::default(),
        &PropagationParams::calibrated(),
        &CorrelationKernel::independent(),
        1000,
        25.0,
        2024,
        &MonteCarloOptions::new(),
    )
    .unwrap();
    Outcome {
        pass: report.bias_m < 1e-3 && report.efficiency_gap_m <= 1.5e-3,
        detail: format!(
            "1000 runs: bias = {:.4} mm (< 1 mm), RMSE = {:.4} mm, CRLB = {:.4} mm, |RMSE - CRLB| = {:.4} mm (<= 1.5 mm), {} not converged",
            report.bias_m * 1e3,
            report.rmse_m * 1e3,
            report.crlb_reference_m * 1e3,
            report.efficiency_gap_m * 1e3,
            report.non_converged
        ),
    }
}

fn correlated_rmse_matches_bienayme() -> Outcome {
    let report = monte_carlo(
        &SetupConfig::default(),
        &PropagationParams::calibrated(),
        &CorrelationKernel::exponential(LAMBDA, LAMBDA / 2.0),
        1000,
        25.0,
        2025,
        &MonteCarloOptions::new(),
    )
    .unwrap();
    let rel = report.rmse_m / report.crlb_reference_m - 1.0;
    Outcome {
        pass: rel.abs() <= 0.10,
        detail: format!(
            "1000 runs, exponential chi = lambda/2, 25 /lambda: RMSE = {:.5} m vs Bienaymé {:.5} m ({:+.2}%, within 10%), {} not converged",
            report.rmse_m,
            report.crlb_reference_m,
            100.0 * rel,
            report.non_converged
        ),
    }
}

/// Residual covariance of 400 sinc2-kernel draws at the default geometry.
fn sinc2_covariance() -> rss_bounds::analysis::CovarianceCurve {
    let cfg = SetupConfig::default();
    let params = PropagationParams::calibrated();
    let synth = Synthesizer::new(&cfg, &params, &CorrelationKernel::sinc2(LAMBDA)).unwrap();
    let mut sets = Vec::new();
    for i in 0..400 {
        let meas = synth.draw(77, i, 1).unwrap();
        sets.extend(residual_sets(&meas, &params, &cfg.blind_position).unwrap());
    }
    spatial_covariance(&sets, cfg.spacing, 4.0 * LAMBDA).unwrap()
}

fn correlation_length_recovery(curve: &rss_bounds::analysis::CovarianceCurve) -> Outcome {
    let bin = curve.bin_width();
    match curve.first_minimum() {
        Some(k) => {
            let at = curve.bin_centers[k];
            Outcome {
                pass: (at - LAMBDA / 2.0).abs() <= bin + 1e-12,
                detail: format!(
                    "first minimum at {at:.4} m vs lambda/2 = {:.4} m (± {bin} m)",
                    LAMBDA / 2.0
                ),
            }
        }
        None => Outcome {
            pass: false,
            detail: "covariance curve has no local minimum".into(),
        },
    }
}

fn spectral_cutoff(curve: &rss_bounds::analysis::CovarianceCurve) -> Outcome {
    let s = spatial_spectrum(curve, LAMBDA).unwrap();
    let cutoff = std::f64::consts::TAU / (LAMBDA / 2.0);
    let share = s.fraction_below(cutoff);
    Outcome {
        pass: share >= 0.90,
        detail: format!(
            "{:.2}% of spectral power at |k| <= {cutoff:.2} rad/m (>= 90%)",
            100.0 * share
        ),
    }
}

fn gradient_correctness() -> Outcome {
    let strategy = (
        -0.8f64..1.8,
        -1.8f64..0.8,
        -60.0f64..0.0,
        1.0f64..5.0,
        24usize..120,
        0usize..1000,
    );
    let mut runner = TestRunner::deterministic();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (bx, by, p_r0, eta, count, shift) = strategy.new_tree(&mut runner).unwrap().current();
        let params = PropagationParams::new(p_r0, eta, 1.68);
        let blind = Point::new(bx, by);
        let cfg = SetupConfig {
            min_far_field_distance: 0.0,
            ..SetupConfig::square(3.0, 12.0 / count as f64, LAMBDA, blind)
        };
        let mut pts = perimeter_positions(&cfg).unwrap();
        let shift = shift % pts.len();
        pts.rotate_left(shift);
        pts.retain(|p| distance(p, &blind) > 0.05);
        let j = mean_jacobian(&params, &pts, &blind).unwrap();
        for (i, p) in pts.iter().enumerate() {
            for col in 0..4 {
                let base = [bx, by, p_r0, eta];
                let h = 1e-6 * base[col].abs().max(1.0);
                let eval = |delta: f64| {
                    let mut t = base;
                    t[col] += delta;
                    PropagationParams {
                        p_r0: t[2],
                        eta: t[3],
                        ..params
                    }
                    .mean_power(distance(p, &Point::new(t[0], t[1])))
                    .unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = j[(i, col)];
                worst = worst.max((fd - an).abs() / an.abs().max(1.0));
            }
        }
    }
    Outcome {
        pass: worst <= 1e-6,
        detail: format!("max relative error over 100 random draws = {worst:.3e} (<= 1e-6)"),
    }
}

fn determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_rss-bounds");
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.cfg");
    fs::write(
        &config,
        "density = 2\nseed = 31\nruns = 100\nsets = 20\nrepeats = 2\ndensities = 0.5, 1, 2\ncorrelation = exponential\n",
    )
    .unwrap();
    let config = config.to_str().unwrap();
    let sim = dir.path().join("sim-0");
    let input = sim.join("measurements.csv");
    let input = input.to_str().unwrap().to_string();

    let commands = [
        ("simulate", "measurements.csv"),
        ("calibrate", "calibration.csv"),
        ("locate", "locate.csv"),
        ("crlb-curve", "crlb_curve.csv"),
        ("mc-study", "mc_study.csv"),
        ("corr-analyze", "covariance.csv"),
        ("spectrum", "spectrum.csv"),
    ];
    let mut differing = Vec::new();
    for (command, csv) in commands {
        let mut bytes = Vec::new();
        for rep in 0..2 {
            let out = dir.path().join(format!(
                "{}-{rep}",
                if command == "simulate" {
                    "sim"
                } else {
                    command
                }
            ));
            let mut args = vec![command, "--config", config, "--out", out.to_str().unwrap()];
            if matches!(command, "calibrate" | "locate") {
                args.extend(["--input", &input]);
            }
            let status = Command::new(bin).args(&args).output().unwrap();
            if !status.status.success() {
                return Outcome {
                    pass: false,
                    detail: format!(
                        "{command} failed: {}",
                        String::from_utf8_lossy(&status.stderr).trim()
                    ),
                };
            }
            bytes.push(fs::read(out.join(csv)).unwrap());
        }
        if bytes[0] != bytes[1] {
            differing.push(command);
        }
    }
    Outcome {
        pass: differing.is_empty(),
        detail: if differing.is_empty() {
            format!("all {} commands byte-identical on re-run", commands.len())
        } else {
            format!("outputs differ for {differing:?}")
        },
    }
}

fn main() -> ExitCode {
    let secs = |s| Some(Duration::from_secs(s));
    let mut results = vec![
        criterion(
            1,
            "effective measurement count",
            secs(10),
            effective_measurement_count,
        ),
        criterion(
            2,
            "Bienaymé vs exact correlated CRLB",
            secs(60),
            bienayme_matches_correlated_crlb,
        ),
        criterion(
            3,
            "plateau at the diffraction limit",
            None,
            plateau_at_diffraction_limit,
        ),
        criterion(
            4,
            "no-plateau control",
            None,
            independent_bound_has_no_plateau,
        ),
        criterion(5, "estimator quality", secs(600), estimator_quality),
        criterion(
            6,
            "correlated-noise RMSE matches the corrected bound",
            secs(900),
            correlated_rmse_matches_bienayme,
        ),
    ];
    let curve = sinc2_covariance();
    results.push(criterion(7, "correlation-length recovery", None, || {
        correlation_length_recovery(&curve)
    }));
    results.push(criterion(8, "spectral cutoff", None, || {
        spectral_cutoff(&curve)
    }));
    results.push(criterion(
        9,
        "gradient correctness",
        None,
        gradient_correctness,
    ));
    results.push(criterion(10, "determinism", None, determinism));

    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
