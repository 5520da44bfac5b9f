use pathwise_core::hedging::{
    bdg_strategy, pathwise_bdg_check, ito_decomposition, PartitionLevel, PayoffSpec, StrategySource, VerifyOptions,
};
use pathwise_core::hedging::{verify_superhedge, FnPayoff};
use pathwise_core::io::{read_path_csv, write_path_csv};
use pathwise_core::outer_measure::{empirical_cauchy_schwarz, scale_certificate, HedgingCertificate};
use pathwise_core::path_space::{
    crossing_partition, qv_at_level, uniform_grid, MeasureTag, PathEnsemble, QvEnsemble, QvMode, QvPath, SamplePath,
};
use pathwise_core::sde::{picard_bound, picard_constant};
use pathwise_core::simple_integration::{integrate_simple, OperatorValue, SimpleIntegrand};
use proptest::prelude::*;

fn path_from(increments: &[f64], dim: usize) -> SamplePath {
    let steps = increments.len() / dim;
    let grid = uniform_grid(steps, 1.0).unwrap();
    let mut values = vec![0.0; dim];
    for k in 0..steps {
        for j in 0..dim {
            let prev = values[k * dim + j];
            values.push(prev + increments[k * dim + j]);
        }
    }
    SamplePath::new(grid, values, dim).unwrap()
}

fn paths(dim: usize) -> impl Strategy<Value = SamplePath> {
    (1usize..48).prop_flat_map(move |steps| {
        prop::collection::vec(-0.5f64..0.5, steps * dim).prop_map(move |inc| path_from(&inc, dim))
    })
}

fn integrand_on(last: usize, rows: usize, cols: usize) -> impl Strategy<Value = SimpleIntegrand> {
    (prop::collection::vec(0..=last, 0..6), prop::collection::vec(-2.0f64..2.0, 7 * rows * cols)).prop_map(
        move |(mut stops, entries)| {
            stops.push(0);
            stops.push(last);
            stops.sort_unstable();
            stops.dedup();
            let coeffs = (1..stops.len())
                .map(|n| {
                    let block = entries[(n - 1) * rows * cols..n * rows * cols].to_vec();
                    OperatorValue::new(rows, cols, block).unwrap()
                })
                .collect();
            SimpleIntegrand::new(stops, coeffs).unwrap()
        },
    )
}

fn path_and_integrand(dim: usize, rows: usize) -> impl Strategy<Value = (SamplePath, SimpleIntegrand)> {
    paths(dim).prop_flat_map(move |p| {
        let last = p.last_index();
        (Just(p), integrand_on(last, rows, dim))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn crossing_partitions_are_well_formed(p in paths(2), m in 0u32..8) {
        let cp = crossing_partition(&p, m);
        let s = &cp.stop_indices;
        prop_assert_eq!(s[0], 0);
        prop_assert_eq!(*s.last().unwrap(), p.last_index());
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(cp.crossings + 1 >= s.len() - 1);
        prop_assert!(cp.crossings < s.len());
    }

    #[test]
    fn qv_is_nondecreasing_from_zero(p in paths(1), m in 0u32..8) {
        let (qv, _) = qv_at_level(&p, m, QvMode::NormDifference);
        prop_assert_eq!(qv.at(0), 0.0);
        prop_assert!(qv.values().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn integral_is_linear((p, f) in path_and_integrand(2, 2), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let g = f.scaled(0.5).refine(&[p.last_index() / 2]).unwrap();
        let lhs = integrate_simple(&f.linear_combination(a, &g, b).unwrap(), &p).unwrap();
        let xf = integrate_simple(&f, &p).unwrap();
        let xg = integrate_simple(&g, &p).unwrap();
        for i in 0..p.len() {
            for k in 0..2 {
                let rhs = a * xf.value(i)[k] + b * xg.value(i)[k];
                let scale = 1.0 + xf.value(i)[k].abs() + xg.value(i)[k].abs();
                prop_assert!((lhs.value(i)[k] - rhs).abs() <= 1e-12 * scale * (1.0 + a.abs() + b.abs()));
            }
        }
    }

    #[test]
    fn refinement_leaves_integral_unchanged((p, f) in path_and_integrand(1, 1), extra in prop::collection::vec(0usize..48, 0..10)) {
        let extra: Vec<usize> = extra.into_iter().filter(|&s| s <= p.last_index()).collect();
        let refined = f.refine(&extra).unwrap();
        prop_assert_eq!(integrate_simple(&f, &p).unwrap(), integrate_simple(&refined, &p).unwrap());
    }

    #[test]
    fn rule_integrands_are_nonanticipating(p in paths(1), cut in 0usize..48, bump in 0.1f64..2.0) {
        let last = p.last_index();
        let cut = cut.min(last);
        let spec = pathwise_core::simple_integration::IntegrandSpec::StateFeedback { scale: 1.5 };
        let mut values = p.values().to_vec();
        for v in values.iter_mut().skip(cut + 1) {
            *v += bump;
        }
        let q = p.with_values(values, 1).unwrap();
        let f = spec.resolve(&p).unwrap();
        let g = spec.resolve(&q).unwrap();
        for j in 0..cut.min(last) {
            prop_assert_eq!(f.coefficient_for_step(j), g.coefficient_for_step(j));
        }
    }

    #[test]
    fn bdg_inequality_holds(x in prop::collection::vec(-10.0f64..10.0, 1..200)) {
        prop_assert!(pathwise_bdg_check(&x).unwrap().holds(1e-9));
    }

    #[test]
    fn ito_residual_nonnegative((p, f) in path_and_integrand(3, 2), rates in prop::collection::vec(0.0f64..0.2, 48)) {
        let mut acc = 0.0;
        let mut qv = vec![0.0];
        for r in rates.iter().take(p.last_index()) {
            acc += r;
            qv.push(acc);
        }
        let qv = QvPath::new(p.times().clone(), qv, 0).unwrap();
        let d = ito_decomposition(&f, &p, &qv).unwrap();
        let scale = d.scale().max(1.0);
        prop_assert!(d.residual().iter().all(|r| *r >= -1e-10 * scale));
    }

    #[test]
    fn bdg_strategy_superhedges_its_own_path((p, f) in path_and_integrand(1, 1), m in 0u32..6) {
        let (qv, _) = qv_at_level(&p, 6, QvMode::NormDifference);
        let s = bdg_strategy(&f, &p, &qv, PartitionLevel::Crossing(m)).unwrap();
        let ens = PathEnsemble::deterministic(vec![p.clone()], "fixture").unwrap();
        let data = QvEnsemble::with_qv(ens, vec![qv]).unwrap();
        let stops = s.stops.clone();
        let x = integrate_simple(&f, &p).unwrap();
        let payoff = FnPayoff(move |_: &SamplePath, _: &QvPath| {
            stops.iter().map(|&i| x.scalar_at(i).powi(2)).fold(0.0, f64::max)
        });
        let strategies: Vec<_> = vec![s.pair.clone()];
        let report = verify_superhedge(s.lambda_core, &strategies as &dyn StrategySource, &data, &payoff, &VerifyOptions::default()).unwrap();
        prop_assert!(report.passed, "{:?}", report.diagnostic);
    }

    #[test]
    fn cauchy_schwarz_on_empirical_measures(xy in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..100)) {
        let (x, y): (Vec<f64>, Vec<f64>) = xy.into_iter().unzip();
        let (lhs, rhs) = empirical_cauchy_schwarz(&x, &y).unwrap();
        prop_assert!(lhs <= rhs * (1.0 + 1e-12) + 1e-300);
    }

    #[test]
    fn scaling_is_exact(lambda in 0.0f64..10.0, a in 0.0f64..5.0) {
        let cert = HedgingCertificate::cash(lambda, PayoffSpec::Constant { value: lambda }).unwrap();
        let scaled = scale_certificate(&cert, a).unwrap();
        prop_assert_eq!(scaled.lambda, a * lambda);
    }

    #[test]
    fn operator_norm_bounds(entries in prop::collection::vec(-3.0f64..3.0, 6)) {
        let f = OperatorValue::new(2, 3, entries.clone()).unwrap();
        let op = f.operator_norm();
        let max_entry = entries.iter().map(|e| e.abs()).fold(0.0, f64::max);
        prop_assert!(op <= f.frobenius_norm() * (1.0 + 1e-12));
        prop_assert!(op >= max_entry * (1.0 - 1e-12));
        prop_assert!((f.transpose().operator_norm() - op).abs() <= 1e-10 * op.max(1.0));
    }

    #[test]
    fn picard_envelope_recursion(n in 1u32..20, t in 0.0f64..2.0, c in 0.0f64..20.0) {
        let prev = picard_bound(n - 1, t, 1.0, c);
        let next = picard_bound(n, t, 1.0, c);
        prop_assert!((next - prev * c * t / f64::from(n)).abs() <= 1e-12 * next.max(1e-300));
        prop_assert!(picard_constant(1.0, t.max(1e-3), 0.0) == 0.0);
    }

    #[test]
    fn path_csv_round_trip(p in paths(2)) {
        let mut buf = Vec::new();
        write_path_csv(&p, &mut buf).unwrap();
        prop_assert_eq!(read_path_csv(buf.as_slice()).unwrap(), p);
    }

    #[test]
    fn measure_tags_round_trip(vol in 0.01f64..3.0, offset in -5.0f64..5.0) {
        let tag = MeasureTag::Brownian { vol, offset };
        let parsed: MeasureTag = tag.to_string().parse().unwrap();
        prop_assert_eq!(parsed, tag);
    }
}
