use rss_bounds::analysis::{monte_carlo, residual_sets, spatial_covariance, MonteCarloOptions};
use rss_bounds::bounds::{bound_at_density, reference_bounds, TraceMode};
use rss_bounds::correlation::CorrelationKernel;
use rss_bounds::geometry::{perimeter_positions, SetupConfig};
use rss_bounds::noisegen::Synthesizer;
use rss_bounds::PropagationParams;

const LAMBDA: f64 = 0.125;

#[test]
fn effective_count_positions_reproduce_the_bienayme_bound() {
    let cfg = SetupConfig::default();
    let params = PropagationParams::calibrated();
    let kernel = CorrelationKernel::sinc2(LAMBDA);
    let full = bound_at_density(&cfg, &params, &kernel, 25.0, TraceMode::Position).unwrap();

    // n_eff positions spread evenly over the same perimeter, treated as independent.
    let sparse = cfg
        .with_density(full.n_eff.round() * LAMBDA / cfg.perimeter())
        .unwrap();
    let positions = perimeter_positions(&sparse).unwrap();
    assert_eq!(positions.len(), full.n_eff.round() as usize);
    let b = reference_bounds(
        &params,
        &CorrelationKernel::independent(),
        &positions,
        &cfg.blind_position,
        TraceMode::Position,
    )
    .unwrap();
    assert!(
        (b.crlb_indep - full.rmse_bienayme).abs() < 2e-3,
        "{} vs {}",
        b.crlb_indep,
        full.rmse_bienayme
    );
}

#[test]
fn diffraction_bound_sits_near_half_a_wavelength() {
    let r = bound_at_density(
        &SetupConfig::default(),
        &PropagationParams::calibrated(),
        &CorrelationKernel::sinc2(LAMBDA),
        25.0,
        TraceMode::Position,
    )
    .unwrap();
    assert!(
        (r.rmse_bienayme / (LAMBDA / 2.0) - 1.0).abs() <= 0.15,
        "Bienaymé bound {} m vs lambda/2 = {} m",
        r.rmse_bienayme,
        LAMBDA / 2.0
    );
}

#[test]
fn recovered_covariance_follows_sinc2() {
    let cfg = SetupConfig::default();
    let params = PropagationParams::calibrated();
    let kernel = CorrelationKernel::sinc2(LAMBDA);
    let synth = Synthesizer::new(&cfg, &params, &kernel).unwrap();
    let mut sets = Vec::new();
    for i in 0..200 {
        let meas = synth.draw(11, i, 1).unwrap();
        sets.extend(residual_sets(&meas, &params, &cfg.blind_position).unwrap());
    }
    let curve = spatial_covariance(&sets, cfg.spacing, 4.0 * LAMBDA).unwrap();
    let worst = curve
        .correlation()
        .iter()
        .zip(&curve.bin_centers)
        .map(|(c, d)| (c.unwrap() - kernel.eval(*d).unwrap()).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 0.05, "max pointwise deviation {worst}");
}

#[test]
fn correlated_rmse_falls_then_flattens() {
    let cfg = SetupConfig::default();
    let params = PropagationParams::calibrated();
    let kernel = CorrelationKernel::exponential(LAMBDA, LAMBDA / 2.0);
    let rmse: Vec<f64> = [0.5, 2.0, 8.0]
        .iter()
        .map(|&d| {
            monte_carlo(&cfg, &params, &kernel, 300, d, 5, &MonteCarloOptions::new())
                .unwrap()
                .rmse_m
        })
        .collect();
    assert!(rmse[1] < rmse[0], "{rmse:?}");
    assert!((rmse[2] / rmse[1] - 1.0).abs() < 0.15, "{rmse:?}");
}
