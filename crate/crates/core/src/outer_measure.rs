//! Integrand norms, certified upper bounds and Monte-Carlo lower bounds for
//! the outer measure, certificate algebra and duality-gap reports.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::hedging::{verify_superhedge, Payoff, PayoffSpec, StrategyRule, SuperhedgeReport, VerifyOptions};
use crate::path_space::{PathEnsemble, QvEnsemble};
use crate::simple_integration::{
    coerce_at_grid, integrate_stieltjes, norm_sq_against_qv, IntegrandSpec, OperatorPathFunctional,
};
use crate::stats::{pairwise_sum, MeanEstimate};

/// `max over paths of (‖F‖²·⟨S⟩)_T^{1/2}`, with `F` evaluated at every grid point.
pub fn norm_h_inf(f: &OperatorPathFunctional, data: &QvEnsemble) -> Result<f64> {
    let per_path = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let path = data.path(i);
            let simple = coerce_at_grid(f, path)?;
            let steps = simple.step_pieces();
            let mut g: Vec<f64> = steps.iter().map(|&n| simple.coeff(n).operator_norm_sq()).collect();
            g.push(0.0);
            let g = path.with_values(g, 1)?;
            Ok(integrate_stieltjes(&g, data.qv(i))?.scalar_at(path.last_index()))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per_path.into_iter().fold(0.0, f64::max).sqrt())
}

/// The same norm for an integrand spec resolved on each path.
pub fn norm_h_inf_spec(spec: &IntegrandSpec, data: &QvEnsemble) -> Result<f64> {
    let per_path = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let f = spec.resolve(data.path(i))?;
            Ok(norm_sq_against_qv(&f, data.qv(i))?.scalar_at(data.path(i).last_index()))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per_path.into_iter().fold(0.0, f64::max).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormEstimate {
    pub value: f64,
    pub se: f64,
}

/// `(Σ_i Δt_i · max_samplers mean ‖F_{t_i}‖²)^{1/2}` on the samplers' shared
/// grid. A lower-biased surrogate: the supremum over all martingale measures
/// is replaced by a maximum over the samplers given.
pub fn norm_h2(f: &OperatorPathFunctional, samplers: &[PathEnsemble]) -> Result<NormEstimate> {
    let first = samplers.first().ok_or_else(|| invalid("norm_h2 needs at least one sampler"))?;
    let grid = first.grid().clone();
    for s in samplers {
        if s.grid() != &grid {
            return Err(Error::GridMismatch("samplers must share a grid".into()));
        }
    }
    let steps = grid.len() - 1;
    let dt: Vec<f64> = grid.windows(2).map(|w| w[1] - w[0]).collect();
    // per sampler, per path: ‖F_{t_i}‖² at each left point
    let tables = samplers
        .iter()
        .map(|s| {
            s.paths()
                .par_iter()
                .map(|p| {
                    let simple = coerce_at_grid(f, p)?;
                    Ok(simple
                        .step_pieces()
                        .iter()
                        .map(|&n| simple.coeff(n).operator_norm_sq())
                        .collect::<Vec<f64>>())
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let means: Vec<Vec<f64>> = tables
        .iter()
        .map(|rows| {
            (0..steps)
                .map(|i| pairwise_sum(&rows.iter().map(|r| r[i]).collect::<Vec<_>>()) / rows.len() as f64)
                .collect()
        })
        .collect();
    let chosen: Vec<usize> = (0..steps)
        .map(|i| {
            (0..samplers.len())
                .max_by(|&a, &b| means[a][i].total_cmp(&means[b][i]))
                .expect("nonempty")
        })
        .collect();
    let sq = pairwise_sum(&(0..steps).map(|i| dt[i] * means[chosen[i]][i]).collect::<Vec<_>>());
    // the selected pieces of different samplers are independent
    let var: f64 = (0..samplers.len())
        .map(|s| {
            let contrib: Vec<f64> = tables[s]
                .iter()
                .map(|r| (0..steps).filter(|&i| chosen[i] == s).map(|i| dt[i] * r[i]).sum())
                .collect();
            let e = MeanEstimate::from_samples(&contrib);
            e.se * e.se
        })
        .sum();
    let value = sq.max(0.0).sqrt();
    let se = if value > 0.0 { var.sqrt() / (2.0 * value) } else { 0.0 };
    Ok(NormEstimate { value, se })
}

/// Where and how a certificate was checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationRecord {
    pub ensemble: String,
    pub paths: usize,
    pub tol: f64,
    pub worst_admissibility_margin: f64,
    pub worst_domination_margin: f64,
    pub truncation_index: Option<usize>,
}

/// `λ` with a strategy recipe claiming `λ ≥ 𝓔(target)` on the paths it was
/// verified on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HedgingCertificate {
    pub lambda: f64,
    pub strategies: StrategyRule,
    pub target: PayoffSpec,
    pub verified_on: Option<VerificationRecord>,
}

impl HedgingCertificate {
    pub fn new(lambda: f64, strategies: StrategyRule, target: PayoffSpec) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(invalid(format!("lambda must be nonnegative, got {lambda}")));
        }
        Ok(Self { lambda, strategies, target, verified_on: None })
    }

    /// Strategy-free certificate.
    pub fn cash(lambda: f64, target: PayoffSpec) -> Result<Self> {
        Self::new(lambda, StrategyRule::Cash, target)
    }

    pub fn verify(&self, data: &QvEnsemble, opts: &VerifyOptions) -> Result<SuperhedgeReport> {
        verify_superhedge(self.lambda, &self.strategies, data, &self.target, opts)
    }

    /// Verify and, on success, record the ensemble and margins.
    pub fn verify_and_record(&mut self, data: &QvEnsemble, opts: &VerifyOptions) -> Result<SuperhedgeReport> {
        let report = self.verify(data, opts)?;
        self.verified_on = report.passed.then(|| VerificationRecord {
            ensemble: data.ensemble.descriptor(),
            paths: report.paths,
            tol: report.tol,
            worst_admissibility_margin: report.worst_admissibility_margin,
            worst_domination_margin: report.worst_domination_margin,
            truncation_index: report.truncation_index,
        });
        Ok(report)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// BDG certificate for `sup_t ‖(F·S)_t‖²`: `λ = 4·max_paths Σ_i (‖F^i‖²·⟨S⟩)_T`
/// (which is `4‖F‖²_{𝓗^∞}` when `F` is scalar-valued) with the BDG
/// strategies of crossing levels `0..=m` and the full grid.
pub fn certify_sup_integral_sq(spec: &IntegrandSpec, data: &QvEnsemble, m: u32) -> Result<(HedgingCertificate, SuperhedgeReport)> {
    let per_path = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let f = spec.resolve(data.path(i))?;
            let last = data.path(i).last_index();
            let mut total = 0.0;
            for r in 0..f.rows() {
                total += norm_sq_against_qv(&f.output_row(r), data.qv(i))?.scalar_at(last);
            }
            Ok(4.0 * total)
        })
        .collect::<Result<Vec<f64>>>()?;
    let lambda = per_path.into_iter().fold(0.0, f64::max);
    let mut cert = HedgingCertificate::new(
        lambda,
        StrategyRule::bdg(spec.clone(), m),
        PayoffSpec::SupIntegralSq { integrand: spec.clone() },
    )?;
    let report = cert.verify_and_record(data, &VerifyOptions::default())?;
    Ok((cert, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerBound {
    pub estimate: f64,
    pub se: f64,
    pub sampler: usize,
    pub per_sampler: Vec<MeanEstimate>,
}

/// `max over samplers` of the Monte-Carlo mean of `X`; weak duality makes
/// each mean a lower bound for `𝓔(X)` up to sampling error.
pub fn mc_lower_bound(x: &dyn Payoff, samplers: &[QvEnsemble]) -> Result<LowerBound> {
    if samplers.is_empty() {
        return Err(invalid("mc_lower_bound needs at least one sampler"));
    }
    let per_sampler = samplers
        .iter()
        .map(|s| {
            let vals = (0..s.len())
                .into_par_iter()
                .map(|i| x.evaluate(s.path(i), s.qv(i)))
                .collect::<Result<Vec<f64>>>()?;
            Ok(MeanEstimate::from_samples(&vals))
        })
        .collect::<Result<Vec<_>>>()?;
    let sampler = (0..per_sampler.len())
        .max_by(|&a, &b| per_sampler[a].mean.total_cmp(&per_sampler[b].mean))
        .expect("nonempty");
    Ok(LowerBound {
        estimate: per_sampler[sampler].mean,
        se: per_sampler[sampler].se,
        sampler,
        per_sampler,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInterval {
    pub lower: f64,
    pub se: f64,
    pub upper: f64,
    pub samples: usize,
    /// `(upper − lower)/upper`, 0 when both vanish.
    pub relative_gap: f64,
    /// `lower − 3·SE > upper`: a violated weak duality means a bug.
    pub inconsistent: bool,
    /// The duality theorem needs `X` to be an increasing limit of upper
    /// semicontinuous functions; this is not checked for general payoffs.
    pub hypothesis_unchecked: bool,
    pub certificate_verified: bool,
}

pub fn duality_gap(x: &PayoffSpec, cert: &HedgingCertificate, samplers: &[QvEnsemble]) -> Result<BoundInterval> {
    let lb = mc_lower_bound(x, samplers)?;
    let upper = cert.lambda;
    let relative_gap = if upper == 0.0 && lb.estimate == 0.0 {
        0.0
    } else {
        (upper - lb.estimate) / upper.abs().max(f64::MIN_POSITIVE)
    };
    Ok(BoundInterval {
        lower: lb.estimate,
        se: lb.se,
        upper,
        samples: samplers[lb.sampler].len(),
        relative_gap,
        inconsistent: lb.estimate - 3.0 * lb.se > upper,
        hypothesis_unchecked: !is_continuous(x),
        certificate_verified: cert.verified_on.is_some(),
    })
}

fn is_continuous(x: &PayoffSpec) -> bool {
    match x {
        PayoffSpec::Zero | PayoffSpec::Constant { .. } | PayoffSpec::SupSq => true,
        PayoffSpec::Scaled { inner, .. } => is_continuous(inner),
        PayoffSpec::Sum { parts } => parts.iter().all(is_continuous),
        _ => false,
    }
}

/// `λ = Σλ_k` with the partial-sum strategy sequence; certifies `Σ X_k`.
pub fn combine_certificates(certs: &[HedgingCertificate]) -> Result<HedgingCertificate> {
    if certs.is_empty() {
        return Err(invalid("nothing to combine"));
    }
    let refs: Vec<&str> = certs
        .iter()
        .filter_map(|c| c.verified_on.as_ref().map(|v| v.ensemble.as_str()))
        .collect();
    if refs.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::GridMismatch("certificates were verified on different ensembles".into()));
    }
    let lambda = certs.iter().map(|c| c.lambda).sum();
    HedgingCertificate::new(
        lambda,
        StrategyRule::PartialSums { parts: certs.iter().map(|c| c.strategies.clone()).collect() },
        PayoffSpec::Sum { parts: certs.iter().map(|c| c.target.clone()).collect() },
    )
}

/// Positive homogeneity: `a·λ` with strategies scaled by `a`, certifying `a·X`.
pub fn scale_certificate(cert: &HedgingCertificate, a: f64) -> Result<HedgingCertificate> {
    if !(a >= 0.0 && a.is_finite()) {
        return Err(invalid(format!("scale must be nonnegative, got {a}")));
    }
    HedgingCertificate::new(
        a * cert.lambda,
        StrategyRule::Scaled { factor: a, inner: Box::new(cert.strategies.clone()) },
        PayoffSpec::Scaled { factor: a, inner: Box::new(cert.target.clone()) },
    )
}

/// Both sides of `mean(|X||Y|) ≤ mean(X²)^{1/2} mean(Y²)^{1/2}`.
pub fn empirical_cauchy_schwarz(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.is_empty() {
        return Err(invalid("samples must be nonempty and of equal length"));
    }
    let n = x.len() as f64;
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a * b).abs()).collect();
    let xx: Vec<f64> = x.iter().map(|a| a * a).collect();
    let yy: Vec<f64> = y.iter().map(|b| b * b).collect();
    Ok((
        pairwise_sum(&xy) / n,
        (pairwise_sum(&xx) / n).sqrt() * (pairwise_sum(&yy) / n).sqrt(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hedging::FnPayoff;
    use crate::path_space::{QvOptions, QvPath, SamplePath};
    use crate::simple_integration::OperatorValue;

    fn three_point_data() -> QvEnsemble {
        let s = SamplePath::scalar(vec![0.0, 0.5, 1.0], vec![0.0, 1.0, 0.0]).unwrap();
        let qv = QvPath::new(s.times().clone(), vec![0.0, 1.0, 2.0], 0).unwrap();
        QvEnsemble::with_qv(PathEnsemble::deterministic(vec![s], "three").unwrap(), vec![qv]).unwrap()
    }

    #[test]
    fn h_inf_examples() {
        let data = three_point_data();
        let one = OperatorPathFunctional::constant(OperatorValue::scalar(1.0));
        assert!((norm_h_inf(&one, &data).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        let zero = OperatorPathFunctional::constant(OperatorValue::scalar(0.0));
        assert_eq!(norm_h_inf(&zero, &data).unwrap(), 0.0);
        assert!((norm_h_inf_spec(&IntegrandSpec::unit(), &data).unwrap() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn h2_of_constant_norm() {
        let data = three_point_data();
        let f = OperatorPathFunctional::constant(OperatorValue::scalar(-3.0));
        let est = norm_h2(&f, std::slice::from_ref(&data.ensemble)).unwrap();
        assert!((est.value - 3.0).abs() < 1e-14);
        assert_eq!(est.se, 0.0);
        assert!(norm_h2(&f, &[]).is_err());
    }

    #[test]
    fn sup_integral_certificate_on_three_points() {
        let data = three_point_data();
        let (cert, report) = certify_sup_integral_sq(&IntegrandSpec::unit(), &data, 0).unwrap();
        assert_eq!(cert.lambda, 8.0);
        assert!(report.passed);
        assert_eq!(report.per_path[0].payoff, 1.0);
        let back = HedgingCertificate::from_json(&cert.to_json().unwrap()).unwrap();
        assert_eq!(back, cert);
    }

    #[test]
    fn zero_integrand_certificate_is_free() {
        let data = three_point_data();
        let spec = IntegrandSpec::Constant { matrix: vec![vec![0.0]] };
        let (cert, report) = certify_sup_integral_sq(&spec, &data, 0).unwrap();
        assert_eq!(cert.lambda, 0.0);
        assert!(report.passed);
    }

    #[test]
    fn constant_lower_bound() {
        let data = three_point_data();
        let lb = mc_lower_bound(&PayoffSpec::Constant { value: 1.0 }, std::slice::from_ref(&data)).unwrap();
        assert_eq!((lb.estimate, lb.se), (1.0, 0.0));
        let empty = FnPayoff(|_: &SamplePath, _: &QvPath| 0.0);
        let lb = mc_lower_bound(&empty, &[data]).unwrap();
        assert_eq!((lb.estimate, lb.se), (0.0, 0.0));
    }

    #[test]
    fn zero_payoff_interval() {
        let data = three_point_data();
        let cert = HedgingCertificate::cash(0.0, PayoffSpec::Zero).unwrap();
        let b = duality_gap(&PayoffSpec::Zero, &cert, &[data]).unwrap();
        assert_eq!((b.lower, b.upper, b.relative_gap), (0.0, 0.0, 0.0));
        assert!(!b.inconsistent);
    }

    #[test]
    fn combination_adds_lambdas() {
        let a = HedgingCertificate::cash(0.75, PayoffSpec::Constant { value: 0.75 }).unwrap();
        let b = HedgingCertificate::cash(1.5, PayoffSpec::Constant { value: 1.5 }).unwrap();
        let c = combine_certificates(&[a, b]).unwrap();
        assert_eq!(c.lambda, 2.25);
        let data = three_point_data();
        assert!(c.verify(&data, &VerifyOptions::default()).unwrap().passed);
    }

    #[test]
    fn combining_across_ensembles_is_rejected() {
        let data = three_point_data();
        let mut a = HedgingCertificate::cash(2.0, PayoffSpec::TerminalQv).unwrap();
        a.verify_and_record(&data, &VerifyOptions::default()).unwrap();
        let grid = crate::path_space::uniform_grid(4, 1.0).unwrap();
        let other = PathEnsemble::deterministic(vec![SamplePath::constant(grid, &[0.0]).unwrap()], "flat").unwrap();
        let other = QvEnsemble::analyze(other, &QvOptions::default()).unwrap();
        let mut b = HedgingCertificate::cash(2.0, PayoffSpec::TerminalQv).unwrap();
        b.verify_and_record(&other, &VerifyOptions::default()).unwrap();
        assert!(matches!(combine_certificates(&[a, b]), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn cauchy_schwarz_sides() {
        let (l, r) = empirical_cauchy_schwarz(&[1.0, -2.0], &[3.0, 0.5]).unwrap();
        assert!(l <= r);
        assert!(empirical_cauchy_schwarz(&[1.0], &[]).is_err());
    }
}
