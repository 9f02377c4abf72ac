//! One function per experiment. Each fills an [`Output`] and returns the
//! summary document.

use std::sync::Arc;

use jhol_core::almost_complex::{validate, AlmostComplexStructure, Component};
use jhol_core::beltrami::{neumann_solve, solve_coupled, DiskMap, Jet};
use jhol_core::grid::{DiskGrid, GridFunction};
use jhol_core::hyperbolic::{
    calibrate, lower_bound_bidisk, lower_bound_punctured, radial_partial_lengths, standard_metric, Constants, Domain,
    MetricConfig, MetricSample, PathMetric, RoydenEstimator,
};
use jhol_core::integral_ops::{identity_checks, IntegralOperators};
use jhol_core::linking::{sphere_slice, verify_linking_identity};
use jhol_core::schwarz::{brody_reparametrize, gauge_scan, gromov_scan, ScanConfig};
use jhol_core::{Error, Result};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Config, DiskSpec, PathMetricKind, SelftestSection};
use crate::output::{num, Output};

/// Everything a command needs besides its own section.
pub struct Context<'a> {
    pub cfg: &'a Config,
    pub structure: Arc<AlmostComplexStructure>,
    pub ops: Arc<IntegralOperators>,
}

impl<'a> Context<'a> {
    pub fn new(cfg: &'a Config, structure: Arc<AlmostComplexStructure>) -> Result<Self> {
        let ops = Arc::new(IntegralOperators::new(DiskGrid::new(cfg.resolution(), 1.0)?));
        Ok(Context { cfg, structure, ops })
    }
}

/// `sup |μ¹| + |μ²|` over both equations, if the structure admits coefficients.
pub fn mu_bound(j: &Arc<AlmostComplexStructure>) -> Option<f64> {
    let a = j.coefficients(Component::First).ok()?.bound();
    let b = j.coefficients(Component::Second).ok()?.bound();
    Some(a.max(b))
}

fn section<'s, T>(s: &'s Option<T>, name: &str) -> Result<&'s T> {
    s.as_ref().ok_or_else(|| Error::InvalidInput(format!("config has no [{name}] section")))
}

fn summary<T: Serialize>(value: &T) -> Result<Value> {
    serde_json::to_value(value).map_err(|e| Error::Numerical(format!("serialization: {e}")))
}

pub fn validate_structure(ctx: &Context, out: &mut Output) -> Result<Value> {
    let grid = ctx.ops.grid();
    let report = validate(&ctx.structure, grid, grid);
    out.record("validation", &report)?;
    let s = json!({
        "accepted": report.accepted,
        "description": ctx.structure.description(),
        "reason": report.reason,
    });
    if !report.accepted {
        return Err(Error::StructureRejected(report.reason.clone().unwrap_or_default()));
    }
    Ok(s)
}

#[derive(Serialize)]
struct DiskRecord {
    first_origin: Jet,
    second_origin: Option<Jet>,
    derivative_norm_at_origin: f64,
    residual: f64,
    relative_residual: f64,
    iterations: usize,
    contraction: f64,
    mu_bound: f64,
    sup_modulus: f64,
}

fn disk_record(m: &DiskMap) -> Result<DiskRecord> {
    let sup = match m.second() {
        Some(s) => m.first().sup_modulus()?.max(s.sup_modulus()?),
        None => m.first().sup_modulus()?,
    };
    Ok(DiskRecord {
        first_origin: m.first().origin(),
        second_origin: m.second().map(|s| s.origin()),
        derivative_norm_at_origin: m.derivative_norm_at_origin(),
        residual: m.residual(),
        relative_residual: m.relative_residual(),
        iterations: m.iterations(),
        contraction: m.contraction(),
        mu_bound: m.mu_bound(),
        sup_modulus: sup,
    })
}

pub fn solve_disk(ctx: &Context, out: &mut Output) -> Result<Value> {
    let sec = section(&ctx.cfg.solve_disk, "solve_disk")?;
    let seed = DiskMap::from_seeds(&ctx.ops, sec.first.clone(), sec.second.clone())?;
    let map = if sec.second.is_some() {
        solve_coupled(&seed, &ctx.structure, &ctx.cfg.solve)?
    } else {
        let mu = ctx.structure.coefficients(Component::First)?;
        neumann_solve(&seed, &mu, &GridFunction::zeros(ctx.ops.grid().clone()), &ctx.cfg.solve)?
    };
    out.table("residuals", &["iteration", "relative_residual"]);
    for (k, r) in map.history().iter().enumerate() {
        out.row("residuals", vec![k.to_string(), num(*r)]);
    }
    let rec = disk_record(&map)?;
    out.record("disk", &rec)?;
    let mut s = json!({ "disk": summary(&rec)? });
    if let Some(c) = sec.brody {
        let b = brody_reparametrize(&map, c, &sec.brody_config)?;
        let brody = json!({
            "target": c,
            "converged": b.converged,
            "relocations": b.relocations,
            "weighted_max": b.weighted_max,
            "origin_value": b.origin_value,
            "argmax": b.argmax,
            "transform": b.transform,
        });
        out.record("brody", &brody)?;
        s["brody"] = brody;
    }
    Ok(s)
}

#[derive(Serialize)]
struct Rejected {
    point: [Complex64; 2],
    direction: [Complex64; 2],
    error: String,
}

fn with_constants(sample: &mut MetricSample, k: &Constants, cfg: &MetricConfig) {
    sample.lower_bound = match sample.domain {
        Domain::Bidisk => lower_bound_bidisk(sample.point, sample.direction, k.c1, k.c2).ok(),
        Domain::PuncturedBidisk => {
            lower_bound_punctured(sample.point, sample.direction, k.k1, k.c2, cfg.validity_radius).ok()
        }
    };
    sample.accepted = sample.lower_bound.is_none_or(|l| l <= sample.upper_estimate * (1.0 + cfg.slack));
}

pub fn metric(ctx: &Context, out: &mut Output) -> Result<Value> {
    let sec = section(&ctx.cfg.metric, "metric")?;
    let defaults = MetricConfig::default();
    let mcfg = MetricConfig {
        solve: ctx.cfg.solve.clone(),
        bisection_steps: sec.bisection_steps.unwrap_or(defaults.bisection_steps),
        validity_radius: sec.validity_radius.unwrap_or(defaults.validity_radius),
        slack: sec.slack.unwrap_or(defaults.slack),
        constants: sec.constants.unwrap_or(defaults.constants),
        ..defaults
    };
    let est = RoydenEstimator::new(ctx.ops.clone(), ctx.structure.clone(), sec.domain, mcfg.clone())?;
    let results: Vec<Result<MetricSample>> = sec.points.par_iter().map(|p| est.estimate(p.point, p.direction)).collect();
    let mut samples = Vec::new();
    let mut rejected = Vec::new();
    for (p, r) in sec.points.iter().zip(results) {
        match r {
            Ok(s) => samples.push(s),
            Err(e) if e.is_input_error() => return Err(e),
            Err(e) => rejected.push(Rejected { point: p.point, direction: p.direction, error: e.to_string() }),
        }
    }
    let calibration = calibrate(&samples, mcfg.validity_radius);
    let constants = if sec.calibrate {
        Constants {
            c1: calibration.c1.unwrap_or(mcfg.constants.c1),
            c2: calibration.c2.unwrap_or(mcfg.constants.c2),
            k1: calibration.k1.unwrap_or(mcfg.constants.k1),
        }
    } else {
        mcfg.constants
    };
    out.table("metric", &["domain", "abs_a", "abs_b", "abs_xi", "abs_eta", "lower", "upper", "standard"]);
    let mut worst = 0.0f64;
    for s in &mut samples {
        with_constants(s, &constants, &mcfg);
        let standard = standard_metric(s.domain, s.point, s.direction)?;
        worst = worst.max((s.upper_estimate / standard - 1.0).abs());
        out.record("metric_sample", s)?;
        out.row(
            "metric",
            vec![
                format!("{:?}", s.domain).to_lowercase(),
                num(s.point[0].norm()),
                num(s.point[1].norm()),
                num(s.direction[0].norm()),
                num(s.direction[1].norm()),
                s.lower_bound.map_or(String::new(), num),
                num(s.upper_estimate),
                num(standard),
            ],
        );
    }
    for r in &rejected {
        out.record("rejected_sample", r)?;
    }
    Ok(json!({
        "samples": samples.len(),
        "rejected": rejected.len(),
        "accepted": samples.iter().filter(|s| s.accepted).count(),
        "constants": constants,
        "calibration": calibration,
        "max_relative_deviation_from_standard": worst,
    }))
}

pub fn completeness(ctx: &Context, out: &mut Output) -> Result<Value> {
    let sec = section(&ctx.cfg.completeness, "completeness")?;
    let mcfg = MetricConfig { solve: ctx.cfg.solve.clone(), ..MetricConfig::default() };
    let est = RoydenEstimator::new(ctx.ops.clone(), ctx.structure.clone(), Domain::PuncturedBidisk, mcfg.clone())?;
    let (k1, calibration) = match sec.k1 {
        Some(k) => (k, None),
        None => {
            let samples: Vec<MetricSample> = sec
                .calibration_moduli
                .par_iter()
                .map(|&r| est.estimate([Complex64::new(r, 0.0), sec.second], [Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)]))
                .collect::<Result<_>>()?;
            let cal = calibrate(&samples, mcfg.validity_radius);
            let k = cal.k1.ok_or_else(|| Error::InvalidInput("no calibration modulus below the validity radius".into()))?;
            (k, Some(cal))
        }
    };
    let constants = Constants { k1, ..mcfg.constants };
    let lengths = match sec.metric {
        PathMetricKind::Lower => {
            let m = PathMetric::Lower { domain: Domain::PuncturedBidisk, constants, validity_radius: mcfg.validity_radius };
            radial_partial_lengths(&m, sec.start, sec.second, &sec.deltas, sec.per_decade)?
        }
        PathMetricKind::Estimate => {
            radial_partial_lengths(&PathMetric::Estimate(&est), sec.start, sec.second, &sec.deltas, sec.per_decade)?
        }
    };
    out.table("completeness", &["delta", "length", "reference", "ratio"]);
    let reference = |d: f64| k1 * ((1.0 / d).ln().ln() - (1.0 / sec.start).ln().ln());
    let mut rows = Vec::new();
    for p in &lengths {
        let r = reference(p.delta);
        let rec = json!({ "delta": p.delta, "length": p.length, "reference": r, "ratio": p.length / r });
        out.record("partial_length", &rec)?;
        out.row("completeness", vec![num(p.delta), num(p.length), num(r), num(p.length / r)]);
        rows.push(rec);
    }
    Ok(json!({
        "k1": k1,
        "calibration": calibration,
        "metric": format!("{:?}", sec.metric).to_lowercase(),
        "partial_lengths": rows,
    }))
}

fn scan_config(ctx: &Context, base_radius: Option<f64>) -> Result<ScanConfig> {
    let d = ScanConfig::default();
    Ok(ScanConfig {
        solve: ctx.cfg.solve.clone(),
        seed: ctx.cfg.seed()?,
        base_radius: base_radius.unwrap_or(d.base_radius),
        ..d
    })
}

pub fn schwarz_scan(ctx: &Context, out: &mut Output) -> Result<Value> {
    let sec = section(&ctx.cfg.schwarz_scan, "schwarz_scan")?;
    let cfg = scan_config(ctx, sec.base_radius)?;
    let report = gromov_scan(&ctx.structure, &ctx.ops, sec.samples, sec.restrict_eta, &cfg)?;
    for s in &report.samples {
        out.record("schwarz_sample", s)?;
    }
    Ok(json!({
        "value": report.value,
        "requested": report.requested,
        "feasible": report.feasible,
        "seed": report.seed,
        "restrict_eta": report.restrict_eta,
    }))
}

pub fn gauge(ctx: &Context, out: &mut Output) -> Result<Value> {
    let sec = section(&ctx.cfg.gauge_scan, "gauge_scan")?;
    let cfg = scan_config(ctx, sec.base_radius)?;
    let report = gauge_scan(&ctx.structure, &ctx.ops, sec.cover, sec.samples, &cfg)?;
    for s in &report.samples {
        out.record("gauge_sample", s)?;
    }
    let max_chain = report.samples.iter().filter_map(|s| s.chain_rule_deviation).reduce(f64::max);
    Ok(json!({
        "cover": report.cover,
        "k": report.k,
        "max_normalized": report.max_normalized,
        "max_chain_rule_deviation": max_chain,
        "requested": report.requested,
        "feasible": report.feasible,
        "partial": report.partial,
        "seed": report.seed,
    }))
}

fn build_disk(ctx: &Context, spec: &DiskSpec) -> Result<DiskMap> {
    let seed = DiskMap::from_seeds(&ctx.ops, spec.first.clone(), Some(spec.second.clone()))?;
    if spec.solve {
        solve_coupled(&seed, &ctx.structure, &ctx.cfg.solve)
    } else {
        Ok(seed)
    }
}

pub fn linking(ctx: &Context, out: &mut Output) -> Result<Value> {
    let sec = section(&ctx.cfg.linking, "linking")?;
    let mut pairs = Vec::new();
    for pair in &sec.pairs {
        let m1 = build_disk(ctx, &pair.first)?;
        let m2 = build_disk(ctx, &pair.second)?;
        let report = verify_linking_identity(&m1, &m2, &sec.radii, &ctx.structure, &sec.options)?;
        out.record("linking", &json!({ "pair": pair.name, "report": report }))?;
        if sec.export_slices {
            for check in report.radii.iter().filter(|c| c.admissible) {
                for (tag, m) in [("first", &m1), ("second", &m2)] {
                    let slice = sphere_slice(m, check.radius, &ctx.structure, tag, &sec.options)?;
                    out.file(format!("slices/{}_r{}_{tag}.json", pair.name, check.radius), &slice)?;
                }
            }
        }
        pairs.push(json!({
            "pair": pair.name,
            "all_equal": report.all_equal,
            "positivity": report.positivity,
            "indices": report.intersections.iter().map(|p| p.index).collect::<Vec<_>>(),
            "linking": report.radii.iter().map(|c| c.linking).collect::<Vec<_>>(),
        }));
    }
    let ok = pairs.iter().all(|p| p["all_equal"] == true && p["positivity"] == true);
    Ok(json!({ "pairs": pairs, "all_equal": ok }))
}

pub fn operators_selftest(ctx: &Context, out: &mut Output) -> Result<Value> {
    let default = SelftestSection::default();
    let sec = ctx.cfg.operators_selftest.as_ref().unwrap_or(&default);
    if sec.resolutions.is_empty() {
        return Err(Error::InvalidInput("operators_selftest needs at least one resolution".into()));
    }
    let mut all = Vec::new();
    for &n in &sec.resolutions {
        let checks = identity_checks(n)?;
        for c in &checks {
            out.record("identity", c)?;
        }
        all.push(checks);
    }
    let first = &all[0];
    let inverse_ok = first.iter().all(|c| c.inverse_error <= sec.inverse_tolerance);
    let composition_ok = all.iter().flatten().all(|c| c.composition_error <= sec.composition_tolerance);
    let shrink_ok = all.windows(2).all(|w| {
        w[0].iter().zip(&w[1]).all(|(a, b)| a.inverse_error <= 1e-12 || a.inverse_error >= sec.min_shrink * b.inverse_error)
    });
    let worst = |f: fn(&jhol_core::integral_ops::IdentityCheck) -> f64| {
        all.iter().map(|v| v.iter().map(f).fold(0.0, f64::max)).collect::<Vec<_>>()
    };
    let s = json!({
        "resolutions": sec.resolutions,
        "max_inverse_error": worst(|c| c.inverse_error),
        "max_composition_error": worst(|c| c.composition_error),
        "inverse_within_tolerance": inverse_ok,
        "composition_within_tolerance": composition_ok,
        "error_shrinks": shrink_ok,
        "pass": inverse_ok && composition_ok && shrink_ok,
    });
    if !(inverse_ok && composition_ok && shrink_ok) {
        return Err(Error::Numerical(format!("operator identities outside tolerance: {s}")));
    }
    Ok(s)
}
