//! Monte-Carlo oracles on sampled martingale ensembles.

use pathwise_core::hedging::{PayoffSpec, VerifyOptions};
use pathwise_core::ito_limit::integrate_hinf;
use pathwise_core::outer_measure::{certify_sup_integral_sq, duality_gap, mc_lower_bound, norm_h2, HedgingCertificate};
use pathwise_core::path_space::{
    sample_ensemble, ss_process, uniform_grid, MeasureTag, PathEnsemble, PredictionSetSpec, QvEnsemble, QvOptions,
    RateProfile,
};
use pathwise_core::sde::{solve_sde, SdeConfig};
use pathwise_core::simple_integration::{integrate_simple, IntegrandSpec};
use pathwise_core::stats::MeanEstimate;

fn ensemble(tag: &MeasureTag, steps: usize, paths: usize, seed: u64) -> PathEnsemble {
    let grid = uniform_grid(steps, 1.0).unwrap();
    let spec = PredictionSetSpec::new(1.0, 1.0, 1).unwrap();
    sample_ensemble(tag, &grid, 1, paths, seed, Some(&spec)).unwrap()
}

fn within(est: &MeanEstimate, target: f64, k: f64) -> bool {
    (est.mean - target).abs() <= k * est.se
}

#[test]
fn regeneration_is_bit_identical() {
    let tag = MeasureTag::TimeChangedBrownian {
        rate: RateProfile::Sinusoid { mean: 0.5, amplitude: 0.3, period: 0.5 },
        offset: 1.0,
    };
    let a = ensemble(&tag, 256, 20, 42);
    let b = ensemble(&tag, 256, 20, 42);
    assert_eq!(a.paths(), b.paths());
    assert_ne!(a.paths(), ensemble(&tag, 256, 20, 43).paths());
}

#[test]
fn martingale_transform_has_zero_mean() {
    let ens = ensemble(&MeasureTag::bm(1.0), 512, 4000, 7);
    let spec = IntegrandSpec::Cosine { matrix: vec![vec![0.8]], frequency: 2.0 };
    let terminal: Vec<f64> = ens
        .paths()
        .iter()
        .map(|p| integrate_simple(&spec.resolve(p).unwrap(), p).unwrap().scalar_at(p.last_index()))
        .collect();
    assert!(within(&MeanEstimate::from_samples(&terminal), 0.0, 3.0));
}

#[test]
fn second_order_process_has_zero_mean() {
    let data = QvEnsemble::analyze(ensemble(&MeasureTag::Brownian { vol: 1.0, offset: 5.0 }, 4096, 2000, 8), &QvOptions::default()).unwrap();
    let terminal: Vec<f64> = data
        .iter()
        .map(|(p, q)| {
            let ss = ss_process(p, q).unwrap();
            ss.scalar_at(p.last_index()) - ss.scalar_at(0)
        })
        .collect();
    assert!(within(&MeanEstimate::from_samples(&terminal), 0.0, 3.0));
}

#[test]
fn terminal_position_has_the_start_as_mean() {
    let ens = ensemble(&MeasureTag::Brownian { vol: 0.7, offset: 2.0 }, 128, 5000, 9);
    let t: Vec<f64> = ens.paths().iter().map(|p| p.scalar_at(p.last_index())).collect();
    assert!(within(&MeanEstimate::from_samples(&t), 2.0, 3.0));
}

#[test]
fn expected_quadratic_variation_is_ct() {
    let data = QvEnsemble::analyze(ensemble(&MeasureTag::Brownian { vol: 1.0, offset: 5.0 }, 4096, 2000, 10), &QvOptions::default()).unwrap();
    let lb = mc_lower_bound(&PayoffSpec::TerminalQv, &[data]).unwrap();
    assert!((lb.estimate - 1.0).abs() <= 3.0 * lb.se + 0.01, "{lb:?}");
}

#[test]
fn h2_norm_of_the_state_is_one_over_root_two() {
    let ens = ensemble(&MeasureTag::bm(1.0), 256, 4000, 11);
    let f = IntegrandSpec::StateFeedback { scale: 1.0 }.to_functional(1).unwrap();
    let est = norm_h2(&f, &[ens]).unwrap();
    // Left-point Riemann sum of ∫t dt on 256 steps is 0.5 − 1/512.
    let target = (0.5f64 - 1.0 / 512.0).sqrt();
    assert!((est.value - target).abs() <= 3.0 * est.se, "{est:?}");
    assert!((est.value - 0.5f64.sqrt()).abs() < 0.02);
}

#[test]
fn sup_square_sandwich_is_consistent() {
    let data = QvEnsemble::analyze(ensemble(&MeasureTag::bm(1.0), 1024, 1000, 12), &QvOptions::default()).unwrap();
    let (cert, report) = certify_sup_integral_sq(&IntegrandSpec::unit(), &data, 4).unwrap();
    assert!(report.passed);
    let b = duality_gap(&PayoffSpec::SupIntegralSq { integrand: IntegrandSpec::unit() }, &cert, &[data]).unwrap();
    assert!(!b.inconsistent);
    // E sup_t B_t² on [0, 1] is about 1.83; the factor-4 certificate is loose.
    assert!((b.lower - 1.83).abs() < 0.15, "{b:?}");
    assert!(b.upper >= 4.0 * 0.9);
}

#[test]
fn weak_duality_over_several_samplers() {
    let samplers: Vec<QvEnsemble> = [MeasureTag::bm(1.0), MeasureTag::bm(0.5)]
        .iter()
        .enumerate()
        .map(|(k, t)| QvEnsemble::analyze(ensemble(t, 1024, 500, 20 + k as u64), &QvOptions::default()).unwrap())
        .collect();
    let mut cert = HedgingCertificate::cash(1.5, PayoffSpec::TerminalQv).unwrap();
    cert.verify_and_record(&samplers[0], &VerifyOptions::default()).unwrap();
    for x in [PayoffSpec::TerminalQv, PayoffSpec::Zero, PayoffSpec::Constant { value: 1.5 }] {
        let b = duality_gap(&x, &cert, &samplers).unwrap();
        assert!(!b.inconsistent, "{x}: {b:?}");
    }
}

#[test]
fn hinf_error_estimates_shrink_along_the_schedule() {
    let data = QvEnsemble::analyze(ensemble(&MeasureTag::bm(1.0), 1024, 50, 13), &QvOptions::default()).unwrap();
    let f = IntegrandSpec::Cosine { matrix: vec![vec![1.0]], frequency: 1.0 }.to_functional(1).unwrap();
    let r = integrate_hinf(&f, data.path(0), &data, &[4, 16, 64, 256]).unwrap();
    assert!(r.error_estimate.is_finite());
    assert!(r.differences.windows(2).all(|w| w[1] <= w[0]), "{:?}", r.differences);
    assert!(!r.non_cauchy);
}

#[test]
fn affine_ode_matches_explicit_solution() {
    let config = SdeConfig::from_json(r#"{"x0": [0.5], "drift": {"kind": "affine", "a": [2.0], "b": [[-1.0]]}, "diffusion": {"kind": "zero"}}"#).unwrap();
    let spec = config.build(1.0, 1.0).unwrap();
    let data = QvEnsemble::analyze(ensemble(&MeasureTag::bm(1.0), 1024, 4, 14), &QvOptions::default()).unwrap();
    let sol = solve_sde(&spec, &data, 1e-10, 40).unwrap();
    assert!(sol.report.converged);
    let x = &sol.paths[0];
    let worst = (0..x.len())
        .map(|i| {
            let t = x.time(i);
            (x.scalar_at(i) - (0.5 * (-t).exp() + 2.0 * (1.0 - (-t).exp()))).abs()
        })
        .fold(0.0, f64::max);
    // Euler error is O(Δt) with constant below one here.
    assert!(worst < 1.0 / 1024.0, "{worst}");
    assert!(worst > 0.0);
}

#[test]
fn unit_certificate_constant_with_exact_clock() {
    // With ⟨ω⟩_t = t every path is in Ξ_1 exactly, so λ = 4cT.
    let ens = ensemble(&MeasureTag::bm(1.0), 1024, 200, 15);
    let clocks = ens
        .paths()
        .iter()
        .map(|p| pathwise_core::QvPath::new(p.times().clone(), p.times().to_vec(), 0).unwrap())
        .collect();
    let data = QvEnsemble::with_qv(ens, clocks).unwrap();
    let h = pathwise_core::outer_measure::norm_h_inf_spec(&IntegrandSpec::unit(), &data).unwrap();
    assert!(h <= 1.05);
    let (cert, report) = certify_sup_integral_sq(&IntegrandSpec::unit(), &data, 4).unwrap();
    assert!(cert.lambda <= 4.0 * 1.05, "{}", cert.lambda);
    assert!(report.passed, "{:?}", report.diagnostic);
}
