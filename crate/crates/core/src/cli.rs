//! Batch experiment driver: settings from a flat `key = value` config file
//! overridden by command-line flags, JSON reports and CSV tables.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use crate::error::{invalid, Error, Result};
use crate::hedging::{PayoffSpec, StrategyRule, VerifyOptions};
use crate::io::{fmt_real, read_ensemble_csv, read_path_csv, write_ensemble_csv, write_path_csv};
use crate::ito_limit::{default_schedule, integrate_h2, integrate_hinf};
use crate::outer_measure::{certify_sup_integral_sq, duality_gap, norm_h_inf_spec, HedgingCertificate};
use crate::path_space::{
    sample_ensemble, uniform_grid, MeasureTag, PathEnsemble, PredictionSetSpec, QvEnsemble, QvOptions,
};
use crate::sde::{picard_bound, picard_constant, solve_sde, SdeConfig};
use crate::selfcheck::{bdg_inequality_suite, certificate_suite, ito_residual_suite, total_violations, CheckSummary};
use crate::simple_integration::IntegrandSpec;

pub const SCHEMA: &str = "pathwise-calc/1";

#[derive(Debug, Parser)]
#[command(name = "pathwise", version, about = "Pathwise stochastic calculus experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quadratic variation along crossing partitions.
    Qv,
    /// Limit integral of a non-simple integrand.
    Integrate,
    /// Pathwise BDG inequality and certificate self-checks.
    Bdg,
    /// Certified upper and Monte-Carlo lower bounds for the outer measure.
    Outer,
    /// Picard iteration for a pathwise SDE.
    Sde,
    /// Duality sandwich over several martingale-measure samplers.
    Duality,
    /// Fast run of every property suite.
    Selftest,
    /// Write a sampled ensemble as CSV.
    Sample,
    /// Run the experiment named in a config file.
    Run { config: PathBuf },
}

impl Command {
    fn name(&self) -> Option<&'static str> {
        Some(match self {
            Command::Qv => "qv",
            Command::Integrate => "integrate",
            Command::Bdg => "bdg",
            Command::Outer => "outer",
            Command::Sde => "sde",
            Command::Duality => "duality",
            Command::Selftest => "selftest",
            Command::Sample => "sample",
            Command::Run { .. } => return None,
        })
    }
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct Flags {
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Number of grid steps, `2^k` or a power of two.
    #[arg(long, global = true)]
    pub grid: Option<String>,
    #[arg(long, global = true)]
    pub c: Option<f64>,
    #[arg(long = "T", global = true)]
    pub horizon: Option<f64>,
    #[arg(long, global = true)]
    pub paths: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    #[arg(long, global = true)]
    pub measure: Option<String>,
    #[arg(long, global = true)]
    pub payoff: Option<String>,
    /// Integrand JSON file, or `unit`.
    #[arg(long, global = true)]
    pub integrand: Option<String>,
    /// Path or ensemble CSV used instead of sampling.
    #[arg(long, global = true)]
    pub path: Option<PathBuf>,
    /// `h2` or `hinf`.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    /// Comma-separated piece counts.
    #[arg(long, global = true)]
    pub schedule: Option<String>,
    /// SDE spec JSON file.
    #[arg(long, global = true)]
    pub spec: Option<PathBuf>,
    #[arg(long, global = true)]
    pub nmax: Option<usize>,
    /// Highest crossing level used by certificates.
    #[arg(long, global = true)]
    pub level: Option<u32>,
    #[arg(long, global = true)]
    pub dim: Option<usize>,
}

impl Flags {
    fn to_map(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                m.insert(k, v);
            }
        };
        put("seed", self.seed.map(|v| v.to_string()));
        put("grid", self.grid.clone());
        put("c", self.c.map(|v| v.to_string()));
        put("T", self.horizon.map(|v| v.to_string()));
        put("paths", self.paths.map(|v| v.to_string()));
        put("out", self.out.as_ref().map(|p| p.display().to_string()));
        put("report", self.report.as_ref().map(|p| p.display().to_string()));
        put("tol", self.tol.map(|v| v.to_string()));
        put("measure", self.measure.clone());
        put("payoff", self.payoff.clone());
        put("integrand", self.integrand.clone());
        put("path", self.path.as_ref().map(|p| p.display().to_string()));
        put("mode", self.mode.clone());
        put("schedule", self.schedule.clone());
        put("spec", self.spec.as_ref().map(|p| p.display().to_string()));
        put("nmax", self.nmax.map(|v| v.to_string()));
        put("level", self.level.map(|v| v.to_string()));
        put("dim", self.dim.map(|v| v.to_string()));
        m
    }
}

const KEYS: &[&str] = &[
    "experiment", "seed", "grid", "c", "T", "paths", "out", "report", "tol", "measure", "payoff",
    "integrand", "path", "mode", "schedule", "spec", "nmax", "level", "dim",
];

/// Flat `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("config line {}: expected key = value", n + 1)))?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(Error::Parse(format!("config line {}: unknown key {k:?}", n + 1)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// `2^k` or a power-of-two integer.
pub fn parse_grid(s: &str) -> Result<usize> {
    let s = s.trim();
    let steps = if let Some(exp) = s.strip_prefix("2^") {
        let k: u32 = exp.parse().map_err(|_| Error::Parse(format!("bad grid {s:?}")))?;
        if k > 30 {
            return Err(invalid(format!("grid 2^{k} is too large")));
        }
        1usize << k
    } else {
        s.parse().map_err(|_| Error::Parse(format!("bad grid {s:?}")))?
    };
    if steps == 0 || !steps.is_power_of_two() {
        return Err(invalid(format!("grid must be a power of two, got {s}")));
    }
    Ok(steps)
}

/// Fully resolved experiment settings.
#[derive(Debug, Clone)]
pub struct Settings {
    pub experiment: String,
    pub seed: u64,
    pub steps: usize,
    pub grid_text: String,
    pub c: f64,
    pub horizon: f64,
    pub paths: usize,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub tol: Option<f64>,
    pub measure: Option<String>,
    pub payoff: String,
    pub integrand: String,
    pub path: Option<PathBuf>,
    pub mode: String,
    pub schedule: Option<String>,
    pub spec: Option<PathBuf>,
    pub nmax: usize,
    pub level: u32,
    pub dim: usize,
}

fn parse_num<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<Option<T>> {
    map.get(key)
        .map(|v| v.parse::<T>().map_err(|_| Error::Parse(format!("bad value for {key}: {v:?}"))))
        .transpose()
}

impl Settings {
    pub fn resolve(map: &BTreeMap<String, String>) -> Result<Self> {
        let experiment = map
            .get("experiment")
            .cloned()
            .ok_or_else(|| invalid("no experiment given"))?;
        let seed = parse_num::<u64>(map, "seed")?.ok_or_else(|| invalid("--seed is required"))?;
        let grid_text = map.get("grid").cloned().unwrap_or_else(|| "2^10".into());
        let steps = parse_grid(&grid_text)?;
        let c = parse_num::<f64>(map, "c")?.unwrap_or(1.0);
        if !(c > 0.0 && c.is_finite()) {
            return Err(invalid(format!("c must be positive, got {c}")));
        }
        let horizon = parse_num::<f64>(map, "T")?.unwrap_or(1.0);
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(invalid(format!("T must be positive, got {horizon}")));
        }
        let paths = parse_num::<usize>(map, "paths")?.unwrap_or(100);
        if paths == 0 {
            return Err(invalid("paths must be at least 1"));
        }
        let tol = parse_num::<f64>(map, "tol")?;
        if let Some(t) = tol {
            if !(t > 0.0) {
                return Err(invalid("tol must be positive"));
            }
        }
        Ok(Self {
            experiment,
            seed,
            steps,
            grid_text,
            c,
            horizon,
            paths,
            out: map.get("out").map(PathBuf::from),
            report: map.get("report").map(PathBuf::from),
            tol,
            measure: map.get("measure").cloned(),
            payoff: map.get("payoff").cloned().unwrap_or_else(|| "qv_T".into()),
            integrand: map.get("integrand").cloned().unwrap_or_else(|| "unit".into()),
            path: map.get("path").map(PathBuf::from),
            mode: map.get("mode").cloned().unwrap_or_else(|| "h2".into()),
            schedule: map.get("schedule").cloned(),
            spec: map.get("spec").map(PathBuf::from),
            nmax: parse_num::<usize>(map, "nmax")?.unwrap_or(30),
            level: parse_num::<u32>(map, "level")?.unwrap_or(4),
            dim: parse_num::<usize>(map, "dim")?.unwrap_or(1),
        })
    }

    fn echo(&self) -> Value {
        json!({
            "experiment": self.experiment,
            "seed": self.seed,
            "grid": self.steps,
            "c": self.c,
            "T": self.horizon,
            "paths": self.paths,
            "tol": self.tol,
            "measure": self.measure,
            "dim": self.dim,
            "path": self.path.as_ref().map(|p| p.display().to_string()),
        })
    }

    fn spec(&self) -> Result<PredictionSetSpec> {
        PredictionSetSpec::new(self.c, self.horizon, self.dim)
    }

    fn measure_or(&self, default: MeasureTag) -> Result<MeasureTag> {
        match &self.measure {
            Some(m) => m.parse(),
            None => Ok(default),
        }
    }

    fn integrand_spec(&self) -> Result<IntegrandSpec> {
        if self.integrand == "unit" {
            return Ok(IntegrandSpec::Identity { dim: self.dim });
        }
        IntegrandSpec::from_json(&fs::read_to_string(&self.integrand)?)
    }

    fn sample(&self, measure: &MeasureTag) -> Result<PathEnsemble> {
        let grid = uniform_grid(self.steps, self.horizon)?;
        sample_ensemble(measure, &grid, self.dim, self.paths, self.seed, Some(&self.spec()?))
    }

    /// Paths from `--path` (single path or ensemble CSV), otherwise sampled.
    fn ensemble(&self, default: MeasureTag) -> Result<PathEnsemble> {
        match &self.path {
            Some(p) => {
                let text = fs::read_to_string(p)?;
                let paths = if text.starts_with("path_id") {
                    read_ensemble_csv(text.as_bytes())?
                } else {
                    vec![read_path_csv(text.as_bytes())?]
                };
                PathEnsemble::deterministic(paths, &p.display().to_string())
            }
            None => self.sample(&self.measure_or(default)?),
        }
    }

    fn qv_options(&self) -> QvOptions {
        QvOptions { tol: self.tol.unwrap_or(QvOptions::default().tol), ..QvOptions::default() }
    }
}

/// Result of an experiment: JSON body, CSV table and property violations.
pub struct Outcome {
    pub results: Value,
    pub csv: Vec<u8>,
    pub violations: usize,
}

fn csv_table(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush()?;
    }
    Ok(buf)
}

fn summaries_csv(s: &[CheckSummary]) -> Result<Vec<u8>> {
    csv_table(
        &["check", "cases", "violations", "worst_margin"],
        s.iter().map(|c| vec![c.name.clone(), c.cases.to_string(), c.violations.to_string(), fmt_real(c.worst_margin)]),
    )
}

fn run_qv(s: &Settings) -> Result<Outcome> {
    let data = QvEnsemble::analyze(s.ensemble(MeasureTag::bm(s.c.sqrt()))?, &s.qv_options())?;
    let terminal: Vec<f64> = data.estimates.iter().map(|e| e.qv.terminal()).collect();
    let est = crate::stats::MeanEstimate::from_samples(&terminal);
    let rows = data.estimates.iter().enumerate().map(|(i, e)| {
        vec![i.to_string(), fmt_real(e.qv.terminal()), e.level.to_string(), e.converged.to_string(), e.exhausted.to_string()]
    });
    let csv = csv_table(&["path_id", "qv_T", "level", "converged", "exhausted"], rows)?;
    Ok(Outcome {
        results: json!({
            "ensemble": data.ensemble.descriptor(),
            "qv_T_mean": est.mean,
            "qv_T_se": est.se,
            "converged_fraction": data.converged_fraction(),
            "paths": data.len(),
            "single": if data.len() == 1 { json!({
                "qv_T": terminal[0],
                "level": data.estimates[0].level,
                "converged": data.estimates[0].converged,
            }) } else { Value::Null },
        }),
        csv,
        violations: 0,
    })
}

fn parse_schedule(s: &Settings) -> Result<Vec<usize>> {
    match &s.schedule {
        None => Ok(default_schedule(s.steps)),
        Some(text) => text
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|_| Error::Parse(format!("bad schedule entry {p:?}"))))
            .collect(),
    }
}

fn run_integrate(s: &Settings) -> Result<Outcome> {
    let spec = s.integrand_spec()?;
    let schedule = parse_schedule(s)?;
    let data = QvEnsemble::analyze(s.ensemble(MeasureTag::bm(s.c.sqrt()))?, &s.qv_options())?;
    let f = spec.to_functional(data.ensemble.dim())?;
    let result = match s.mode.as_str() {
        "h2" => integrate_h2(&f, data.path(0), data.qv(0), s.c, &schedule)?,
        "hinf" => integrate_hinf(&f, data.path(0), &data, &schedule)?,
        other => return Err(invalid(format!("unknown mode {other:?}"))),
    };
    let mut csv = Vec::new();
    write_path_csv(&result.integral, &mut csv)?;
    let last = result.integral.last_index();
    Ok(Outcome {
        results: json!({
            "mode": s.mode,
            "schedule": schedule,
            "terminal": result.integral.value(last),
            "error_estimate": if result.error_estimate.is_finite() { json!(result.error_estimate) } else { json!("inf") },
            "differences": result.differences,
            "non_cauchy": result.non_cauchy,
            "xi_verdict": result.xi_verdict,
        }),
        csv,
        violations: usize::from(result.non_cauchy),
    })
}

fn run_bdg(s: &Settings) -> Result<Outcome> {
    let cases = s.paths.max(1);
    let mut summaries = vec![
        bdg_inequality_suite(cases * 10, 512, s.seed),
        ito_residual_suite(cases, false, s.seed.wrapping_add(1)),
        ito_residual_suite(cases, true, s.seed.wrapping_add(2)),
    ];
    let data = QvEnsemble::analyze(s.sample(&s.measure_or(MeasureTag::bm(s.c.sqrt()))?)?, &s.qv_options())?;
    summaries.push(certificate_suite(&data, s.level)?);
    Ok(Outcome {
        results: json!({ "checks": summaries }),
        csv: summaries_csv(&summaries)?,
        violations: total_violations(&summaries),
    })
}

fn payoff_and_certificate(s: &Settings, data: &QvEnsemble) -> Result<(PayoffSpec, HedgingCertificate)> {
    let unit = s.integrand_spec()?;
    let ct = s.c * s.horizon * s.dim as f64;
    Ok(match s.payoff.as_str() {
        "zero" => (PayoffSpec::Zero, HedgingCertificate::cash(0.0, PayoffSpec::Zero)?),
        "qv_T" => (PayoffSpec::TerminalQv, HedgingCertificate::cash(ct, PayoffSpec::TerminalQv)?),
        "sup_integral_sq" => {
            let (cert, _) = certify_sup_integral_sq(&unit, data, s.level)?;
            (cert.target.clone(), cert)
        }
        "terminal_integral_sq" => {
            let h = norm_h_inf_spec(&unit, data)?;
            let target = PayoffSpec::TerminalIntegralSq { integrand: unit.clone() };
            let cert = HedgingCertificate::new(h * h, StrategyRule::ItoIsometry { integrand: unit }, target.clone())?;
            (target, cert)
        }
        other => {
            if let Some(v) = other.strip_prefix("constant:") {
                let value: f64 = v.parse().map_err(|_| Error::Parse(format!("bad constant {v:?}")))?;
                let target = PayoffSpec::Constant { value };
                (target.clone(), HedgingCertificate::cash(value.max(0.0), target)?)
            } else {
                return Err(invalid(format!("unknown payoff {other:?}")));
            }
        }
    })
}

fn run_bounds(s: &Settings, several: bool) -> Result<Outcome> {
    let base = s.measure_or(MeasureTag::bm(s.c.sqrt()))?;
    let mut tags = vec![base];
    if several {
        let v = s.c.sqrt();
        tags.push(MeasureTag::bm(0.5 * v));
        tags.push(MeasureTag::TimeChangedBrownian {
            rate: crate::path_space::RateProfile::Sinusoid { mean: 0.5 * s.c, amplitude: 0.5 * s.c, period: s.horizon },
            offset: 0.0,
        });
    }
    let samplers = tags
        .iter()
        .enumerate()
        .map(|(k, tag)| {
            let grid = uniform_grid(s.steps, s.horizon)?;
            let ens = sample_ensemble(tag, &grid, s.dim, s.paths, s.seed.wrapping_add(k as u64), Some(&s.spec()?))?;
            QvEnsemble::analyze(ens, &s.qv_options())
        })
        .collect::<Result<Vec<_>>>()?;
    let (target, mut cert) = payoff_and_certificate(s, &samplers[0])?;
    let report = cert.verify_and_record(&samplers[0], &VerifyOptions::default())?;
    let interval = duality_gap(&target, &cert, &samplers)?;
    let rows = report.per_path.iter().enumerate().map(|(i, m)| {
        vec![i.to_string(), fmt_real(m.payoff), fmt_real(m.admissibility), fmt_real(m.domination)]
    });
    let csv = csv_table(&["path_id", "payoff", "admissibility_margin", "domination_margin"], rows)?;
    Ok(Outcome {
        results: json!({
            "payoff": target.to_string(),
            "lower": interval.lower,
            "SE": interval.se,
            "upper": interval.upper,
            "gap": interval.relative_gap,
            "inconsistent": interval.inconsistent,
            "hypothesis_unchecked": interval.hypothesis_unchecked,
            "samplers": tags.iter().map(|t| t.to_string()).collect::<Vec<_>>(),
            "certificate": cert,
            "verification": {
                "passed": report.passed,
                "admissibility_failures": report.admissibility_failures,
                "domination_failures": report.domination_failures,
                "worst_admissibility_margin": report.worst_admissibility_margin,
                "worst_domination_margin": report.worst_domination_margin,
                "truncation_index": report.truncation_index,
                "diagnostic": report.diagnostic,
            },
        }),
        csv,
        violations: usize::from(interval.inconsistent),
    })
}

fn run_sde(s: &Settings) -> Result<Outcome> {
    let spec_path = s.spec.as_ref().ok_or_else(|| invalid("--spec is required for sde"))?;
    let config = SdeConfig::from_json(&fs::read_to_string(spec_path)?)?;
    let spec = config.build(s.c, s.horizon)?;
    let probe = spec.probe_lipschitz(1000, 1.0, s.seed)?;
    let mut settings = s.clone();
    settings.dim = spec.dim_h;
    let data = QvEnsemble::analyze(settings.ensemble(MeasureTag::bm(s.c.sqrt()))?, &s.qv_options())?;
    let tol = s.tol.unwrap_or(1e-4);
    let sol = solve_sde(&spec, &data, tol, s.nmax)?;
    let mut csv = Vec::new();
    write_ensemble_csv(&sol.paths, &mut csv)?;
    let unique = sol.report.uniqueness.as_ref().is_some_and(|u| u.passed);
    let violations = usize::from(!sol.report.converged) + usize::from(!unique);
    Ok(Outcome {
        results: json!({ "picard": sol.report, "lipschitz_probe": probe }),
        csv,
        violations,
    })
}

fn run_selftest(s: &Settings) -> Result<Outcome> {
    let mut summaries = vec![
        bdg_inequality_suite(10_000, 512, s.seed),
        ito_residual_suite(1_000, false, s.seed.wrapping_add(1)),
        ito_residual_suite(200, true, s.seed.wrapping_add(2)),
    ];
    let grid = uniform_grid(s.steps.min(1 << 10), s.horizon)?;
    let ens = sample_ensemble(&MeasureTag::bm(s.c.sqrt()), &grid, 1, s.paths.min(50), s.seed, None)?;
    summaries.push(certificate_suite(&QvEnsemble::analyze(ens, &s.qv_options())?, s.level)?);
    let exact = picard_constant(1.0, 1.0, 1.0) == 10.0;
    let bound_ok = (0..=20).all(|n| {
        let direct = (10.0f64 * 0.7).powi(n as i32) / (1..=n).map(|j| j as f64).product::<f64>();
        (picard_bound(n, 0.7, 1.0, 10.0) - direct).abs() <= 1e-12 * direct
    });
    summaries.push(CheckSummary {
        name: "picard_constants".into(),
        cases: 22,
        violations: usize::from(!exact) + usize::from(!bound_ok),
        worst_margin: 0.0,
    });
    Ok(Outcome {
        results: json!({ "checks": summaries }),
        csv: summaries_csv(&summaries)?,
        violations: total_violations(&summaries),
    })
}

fn run_sample(s: &Settings) -> Result<Outcome> {
    let ens = s.sample(&s.measure_or(MeasureTag::bm(s.c.sqrt()))?)?;
    let mut csv = Vec::new();
    if ens.len() == 1 {
        write_path_csv(ens.path(0), &mut csv)?;
    } else {
        write_ensemble_csv(ens.paths(), &mut csv)?;
    }
    Ok(Outcome { results: json!({ "ensemble": ens.descriptor() }), csv, violations: 0 })
}

pub fn run_settings(s: &Settings) -> Result<Outcome> {
    match s.experiment.as_str() {
        "qv" => run_qv(s),
        "integrate" => run_integrate(s),
        "bdg" => run_bdg(s),
        "outer" => run_bounds(s, false),
        "duality" => run_bounds(s, true),
        "sde" => run_sde(s),
        "selftest" => run_selftest(s),
        "sample" => run_sample(s),
        other => Err(invalid(format!("unknown experiment {other:?}"))),
    }
}

fn with_extension(p: &Path, ext: &str) -> PathBuf {
    p.with_extension(ext)
}

/// Writes the JSON report and CSV table; returns the report.
pub fn emit(s: &Settings, outcome: &Outcome) -> Result<Value> {
    let report = json!({
        "schema": SCHEMA,
        "experiment": s.experiment,
        "config": s.echo(),
        "violations": outcome.violations,
        "results": outcome.results,
    });
    let text = serde_json::to_string_pretty(&report)?;
    let (json_path, csv_path) = match (&s.out, &s.report) {
        (Some(out), rep) if out.extension().is_some_and(|e| e == "json") => {
            (Some(out.clone()), Some(rep.clone().unwrap_or_else(|| with_extension(out, "csv"))))
        }
        (Some(out), rep) => (Some(rep.clone().unwrap_or_else(|| with_extension(out, "json"))), Some(out.clone())),
        (None, rep) => (rep.clone(), None),
    };
    match json_path {
        Some(p) => fs::write(p, text.as_bytes())?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.write_all(b"\n")?;
        }
    }
    if let Some(p) = csv_path {
        fs::write(p, &outcome.csv)?;
    }
    Ok(report)
}

/// Merge config file and flags (flags win).
pub fn settings_from(cli: &Cli) -> Result<Settings> {
    let mut map: BTreeMap<String, String> = match &cli.command {
        Command::Run { config } => parse_config(&fs::read_to_string(config)?)?,
        _ => BTreeMap::new(),
    };
    if let Some(name) = cli.command.name() {
        map.insert("experiment".into(), name.into());
    }
    for (k, v) in cli.flags.to_map() {
        map.insert(k.to_string(), v);
    }
    let mut s = Settings::resolve(&map)?;
    if s.grid_text.is_empty() {
        s.grid_text = s.steps.to_string();
    }
    Ok(s)
}

/// Process exit code: 0 success, 2 property violation, 1 usage error.
pub fn main_with(cli: Cli) -> i32 {
    let result = settings_from(&cli).and_then(|s| {
        let outcome = run_settings(&s)?;
        emit(&s, &outcome)?;
        Ok(outcome.violations)
    });
    match result {
        Ok(0) => 0,
        Ok(n) => {
            eprintln!("pathwise: {n} property violation(s)");
            2
        }
        Err(e) => {
            eprintln!("pathwise: {e}");
            1
        }
    }
}
