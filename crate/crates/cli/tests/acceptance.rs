//! Acceptance checks. Each test prints one `PASS`/`FAIL` line to stdout
//! (bypassing the test harness capture) and then asserts.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use jhol_core::almost_complex::{AlmostComplexStructure, BeltramiCoefficients, Component};
use jhol_core::beltrami::{neumann_solve, solve_coupled, DiskMap, Seed, SolveConfig};
use jhol_core::grid::{DiskGrid, GridFunction};
use jhol_core::hyperbolic::{
    chain_rule_factor, chain_rule_factor_plus, lifted_derivative_at_origin, royden_estimate, Cover, Domain,
    MetricConfig,
};
use jhol_core::integral_ops::{identity_checks, IntegralOperators};
use jhol_core::linking::{verify_linking_identity, LinkingConfig};
use jhol_core::schwarz::{gauge_scan, ScanConfig};
use num_complex::Complex64;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!("criterion {n} {}: {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn ops(n: usize) -> Arc<IntegralOperators> {
    Arc::new(IntegralOperators::new(DiskGrid::new(n, 1.0).unwrap()))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn perturbation(eps: f64) -> Arc<AlmostComplexStructure> {
    let text = std::fs::read_to_string(configs().join("perturbation.toml")).unwrap();
    let j = AlmostComplexStructure::from_toml(&text).unwrap();
    Arc::new(j.rescale(eps / j.epsilon()).unwrap())
}

fn mu_bound(j: &Arc<AlmostComplexStructure>) -> f64 {
    let a = j.coefficients(Component::First).unwrap().bound();
    let b = j.coefficients(Component::Second).unwrap().bound();
    a.max(b)
}

fn jhol(command: &str, config: &Path, out: &Path) {
    let status = Command::new(env!("CARGO_BIN_EXE_jhol"))
        .args([command, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(status.success(), "{command} failed: {status}");
}

#[test]
fn criterion_1_operator_identities() {
    let mut failures = Vec::new();
    let t = Instant::now();
    let coarse = identity_checks(64).unwrap();
    let t64 = t.elapsed();
    let t = Instant::now();
    let fine = identity_checks(128).unwrap();
    let t128 = t.elapsed();
    let (mut worst_inv, mut worst_comp, mut min_shrink) = (0.0f64, 0.0f64, f64::INFINITY);
    for (a, b) in coarse.iter().zip(&fine) {
        worst_inv = worst_inv.max(a.inverse_error);
        worst_comp = worst_comp.max(a.composition_error).max(b.composition_error);
        if a.inverse_error > 1e-2 {
            failures.push(format!("{} inverse {:.2e} at 64", a.name, a.inverse_error));
        }
        if a.composition_error > 2e-2 || b.composition_error > 2e-2 {
            failures.push(format!("{} composition {:.2e}/{:.2e}", a.name, a.composition_error, b.composition_error));
        }
        // Functions the quadrature reproduces to round-off cannot shrink further.
        if a.inverse_error > 1e-10 {
            let shrink = a.inverse_error / b.inverse_error;
            min_shrink = min_shrink.min(shrink);
            if shrink < 1.5 {
                failures.push(format!("{} shrinks only {shrink:.2}x", a.name));
            }
        }
    }
    // Timing is for the whole suite, an upper bound for any single identity.
    if t128 > Duration::from_secs(60) {
        failures.push(format!("resolution 128 took {t128:?}"));
    }
    let pass = failures.is_empty();
    report(
        1,
        "operator identities",
        pass,
        &format!(
            "max inverse {worst_inv:.2e} at 64, min shrink {min_shrink:.2}x, max composition {worst_comp:.2e}, \
             {} functions in {t64:.2?} / {t128:.2?} {}",
            coarse.len(),
            failures.join("; ")
        ),
    );
    assert!(pass, "{failures:?}");
}

#[test]
fn criterion_2_solver_regime() {
    let o = ops(32);
    let cfg = SolveConfig { max_iterations: 30, tolerance: 1e-10, ..SolveConfig::default() };
    let mut failures = Vec::new();
    let mut outcomes: Vec<(String, f64, f64, usize)> = Vec::new();
    let mut check = |name: String, out: &DiskMap| {
        outcomes.push((name, out.contraction(), out.relative_residual(), out.iterations()));
    };

    // Constant coefficients.
    let zero = GridFunction::zeros(o.grid().clone());
    let seed = DiskMap::from_seeds(&o, Seed::affine(c(0.0, 0.0), c(0.5, 0.0)), None).unwrap();
    for (m1, m2) in [(c(0.0, 0.0), c(0.1, 0.0)), (c(0.05, 0.0), c(0.0, 0.05)), (c(0.0, 0.07), c(-0.03, 0.0))] {
        let mu = BeltramiCoefficients::constant(m1, m2);
        let out = neumann_solve(&seed, &mu, &zero, &cfg).unwrap();
        check(format!("constant ({m1}, {m2})"), &out);
    }

    // The polynomial perturbation, scaled up to the edge of the regime.
    let seeds = [
        (Seed::affine(c(0.1, 0.0), c(0.5, 0.1)), Seed::affine(c(0.0, 0.2), c(0.3, 0.0))),
        (Seed::with_jet(c(0.3, -0.1), c(0.4, 0.2)).unwrap(), Seed::with_jet(c(-0.2, 0.1), c(0.0, 0.5)).unwrap()),
    ];
    let mut scales = Vec::new();
    for eps in [0.05, 0.1, 0.2, 0.4, 0.6, 0.7, 0.8] {
        let j = perturbation(eps);
        let bound = mu_bound(&j);
        if bound > 0.1 {
            continue;
        }
        scales.push(format!("{eps}:{bound:.3}"));
        for (s1, s2) in &seeds {
            let seed = DiskMap::from_seeds(&o, s1.clone(), Some(s2.clone())).unwrap();
            match solve_coupled(&seed, &j, &cfg) {
                Ok(out) => check(format!("eps {eps}"), &out),
                Err(e) => failures.push(format!("eps {eps}: {e}")),
            }
        }
    }
    if scales.len() < 3 {
        failures.push(format!("too few structures in regime: {scales:?}"));
    }

    let (mut worst_contraction, mut worst_residual, mut worst_iterations) = (0.0f64, 0.0f64, 0usize);
    for (name, contraction, residual, iterations) in &outcomes {
        worst_contraction = worst_contraction.max(*contraction);
        worst_residual = worst_residual.max(*residual);
        worst_iterations = worst_iterations.max(*iterations);
        if *contraction > 0.15 || *residual > 1e-6 || *iterations > 30 {
            failures.push(format!("{name}: contraction {contraction:.3}, residual {residual:.2e}, {iterations} iterations"));
        }
    }
    let cases = outcomes.len();

    // Closed-form solution for μ¹ = 0, μ² = κ: u = z + κz̄.
    let kappa = c(0.1, 0.0);
    let seed = DiskMap::from_seeds(&o, Seed::affine(c(0.0, 0.0), c(1.0, 0.0)), None).unwrap();
    let out = neumann_solve(&seed, &BeltramiCoefficients::constant(c(0.0, 0.0), kappa), &zero, &cfg).unwrap();
    let exact = GridFunction::sample(o.grid(), |z| z + kappa * z.conj()).unwrap();
    let affine_err = (out.u() - &exact).sup_norm();
    if affine_err > 1e-8 {
        failures.push(format!("affine error {affine_err:.2e}"));
    }

    let pass = failures.is_empty();
    report(
        2,
        "solver regime",
        pass,
        &format!(
            "{cases} solves (structures eps:bound {}), max contraction {worst_contraction:.3}, max residual \
             {worst_residual:.2e}, max iterations {worst_iterations}, affine error {affine_err:.2e} {}",
            scales.join(" "),
            failures.join("; ")
        ),
    );
    assert!(pass, "{failures:?}");
}

#[test]
fn criterion_3_standard_metric() {
    let t = Instant::now();
    let j = Arc::new(AlmostComplexStructure::standard());
    let mut worst = 0.0f64;
    let mut values = Vec::new();
    for a in [0.0, 0.3, 0.5, 0.7] {
        let s = royden_estimate(
            ops(16),
            j.clone(),
            Domain::Bidisk,
            [c(a, 0.0), c(0.0, 0.0)],
            [c(1.0, 0.0), c(0.0, 0.0)],
            &MetricConfig::default(),
        )
        .unwrap();
        let exact = 1.0 / (1.0 - a * a);
        worst = worst.max((s.upper_estimate / exact - 1.0).abs());
        values.push(format!("{a}:{:.4}/{exact:.4}", s.upper_estimate));
    }
    let elapsed = t.elapsed();
    let pass = worst <= 0.05 && elapsed <= Duration::from_secs(300);
    report(
        3,
        "standard-structure metric",
        pass,
        &format!("{}, max relative deviation {:.3}%, {elapsed:.2?}", values.join(" "), 100.0 * worst),
    );
    assert!(pass);
}

#[test]
fn criterion_4_gauge_invariant_schwarz() {
    let j = Arc::new(AlmostComplexStructure::standard());
    let cfg = ScanConfig { seed: 20240501, ..ScanConfig::default() };
    let r = gauge_scan(&j, &ops(16), Cover::Identity, 500, &cfg).unwrap();
    let normalized: Vec<f64> = r.samples.iter().filter_map(|s| s.normalized).collect();
    let max = normalized.iter().cloned().fold(0.0f64, f64::max);
    let pass = normalized.len() >= 500 && (0.99..=1.0 + 1e-3).contains(&max);
    report(
        4,
        "gauge-invariant Schwarz bound",
        pass,
        &format!("{} of {} samples evaluated, max |du(0)|/(1-|u(0)|^2) = {max:.6}", normalized.len(), r.requested),
    );
    assert!(pass);
}

#[test]
fn criterion_5_perturbation_stability() {
    let cfg = ScanConfig { seed: 7, ..ScanConfig::default() };
    let o = ops(16);
    let k = |eps: f64, n: usize| {
        let r = gauge_scan(&perturbation(eps), &o, Cover::Identity, n, &cfg).unwrap();
        assert!(!r.partial);
        r.k
    };
    let (k10, k10d, k05, k05d) = (k(0.1, 200), k(0.1, 400), k(0.05, 200), k(0.05, 400));
    let rel = |a: f64, b: f64| (a - b).abs() / a.min(b);
    let finite = [k10, k10d, k05, k05d].iter().all(|v| v.is_finite() && *v > 0.0);
    let across = rel(k10, k05);
    let doubling = rel(k10, k10d).max(rel(k05, k05d));
    let pass = finite && across <= 0.25 && doubling <= 0.10;
    report(
        5,
        "perturbation stability",
        pass,
        &format!(
            "K(0.1) = {k10:.4} ({k10d:.4} with 400), K(0.05) = {k05:.4} ({k05d:.4} with 400), \
             across eps {:.2}%, doubling {:.2}%",
            100.0 * across,
            100.0 * doubling
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_completeness() {
    let tmp = tempfile::tempdir().unwrap();
    jhol("completeness", &configs().join("completeness.toml"), tmp.path());
    let mut rdr = csv::Reader::from_path(tmp.path().join("completeness.csv")).unwrap();
    let rows: Vec<(f64, f64, f64)> = rdr
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].parse().unwrap(), r[1].parse().unwrap(), r[2].parse().unwrap())
        })
        .collect();
    let deltas: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let worst = rows.iter().map(|(_, l, r)| (l / r - 1.0).abs()).fold(0.0f64, f64::max);
    let increasing = rows.windows(2).all(|w| w[1].1 > w[0].1);
    let pass = deltas == [1e-3, 1e-6, 1e-9] && worst <= 0.15 && increasing;
    let detail: Vec<String> = rows.iter().map(|(d, l, r)| format!("{d:e}:{l:.4}/{r:.4}")).collect();
    report(
        6,
        "completeness diagnostic",
        pass,
        &format!("{}, max relative deviation {:.2}%, increasing {increasing}", detail.join(" "), 100.0 * worst),
    );
    assert!(pass);
}

#[test]
fn criterion_7_linking() {
    let t = Instant::now();
    let o = ops(8);
    let j = AlmostComplexStructure::standard();
    let p = |coeffs: &[f64]| Seed::polynomial(coeffs.iter().map(|x| c(*x, 0.0)).collect());
    let line = DiskMap::from_seeds(&o, p(&[0.0, 1.0]), Some(p(&[0.0]))).unwrap();
    let pairs = [
        ("transversal", p(&[0.0]), 1),
        ("quadratic", p(&[0.0, 0.0, 1.0]), 2),
        ("cubic", p(&[0.0, 0.0, 0.0, 1.0]), 3),
    ];
    let radii = [0.3, 0.5];
    let mut failures = Vec::new();
    let mut detail = Vec::new();
    for (name, second, expected) in pairs {
        let other = if name == "transversal" {
            DiskMap::from_seeds(&o, p(&[0.0]), Some(p(&[0.0, 1.0]))).unwrap()
        } else {
            DiskMap::from_seeds(&o, p(&[0.0, 1.0]), Some(second)).unwrap()
        };
        let mut linkings = Vec::new();
        for projection_seed in [1, 2, 3] {
            let cfg = LinkingConfig { projection_seed, ..LinkingConfig::default() };
            let r = verify_linking_identity(&line, &other, &radii, &j, &cfg).unwrap();
            if !r.positivity {
                failures.push(format!("{name}: index below multiplicity product"));
            }
            for check in &r.radii {
                if !(check.admissible && check.equal && check.index_sum == expected) {
                    failures.push(format!("{name} r = {}: {check:?}", check.radius));
                }
            }
            linkings.push(r.radii.iter().map(|c| c.linking).collect::<Vec<_>>());
        }
        if linkings.windows(2).any(|w| w[0] != w[1]) {
            failures.push(format!("{name}: projections disagree {linkings:?}"));
        }
        detail.push(format!("{name} {:?}", linkings[0].iter().map(|l| l.unwrap_or(i64::MIN)).collect::<Vec<_>>()));
    }
    let elapsed = t.elapsed();
    if elapsed > Duration::from_secs(120) {
        failures.push(format!("took {elapsed:?}"));
    }
    let pass = failures.is_empty();
    report(
        7,
        "linking identity",
        pass,
        &format!("{} at radii {radii:?}, 3 projections each, {elapsed:.2?} {}", detail.join(", "), failures.join("; ")),
    );
    assert!(pass, "{failures:?}");
}

fn chain_rule_cases() -> Vec<(Complex64, Complex64, Complex64)> {
    let mut cases = Vec::new();
    for a in [(-1.0f64).exp(), (-2.0f64).exp()] {
        let a = c(a, 0.0);
        let k = c(0.02, 0.01);
        let u = |z: Complex64| a + k * z + c(0.005, 0.0) * z * z;
        cases.push((a, k, lifted_derivative_at_origin(u, 0.5, 64).unwrap()));
    }
    cases
}

/// The factor exactly as written, with `(1 + b)²`. At `a = e^{-1}` the
/// branch value is `b = -1` and the factor is infinite; at `e^{-2}` it is
/// nine times too large. Expected to fail.
#[test]
fn criterion_8_chain_rule_identity() {
    let mut detail = Vec::new();
    let mut pass = true;
    for (a, k, dw) in chain_rule_cases() {
        let predicted = chain_rule_factor_plus(a).unwrap() * k;
        let err = (dw - predicted).norm() / dw.norm();
        pass &= err <= 1e-6;
        detail.push(format!("a = {:.6}: dw(0) = {dw:.6e}, formula {predicted:.6e}, relative error {err:.3e}", a.re));
    }
    report(8, "chain-rule identity with (1+b)^2", pass, &detail.join("; "));
    assert!(pass, "{detail:?}");
}

/// Companion to criterion 8 with `(1 - b)²`, the factor the derivative of
/// the covering map actually produces.
#[test]
fn criterion_8_corrected_chain_rule() {
    let mut detail = Vec::new();
    let mut pass = true;
    for (a, k, dw) in chain_rule_cases() {
        let predicted = chain_rule_factor(a).unwrap() * k;
        let err = (dw - predicted).norm() / dw.norm();
        pass &= err <= 1e-6;
        detail.push(format!("a = {:.6}: relative error {err:.3e}", a.re));
    }
    report(8, "chain-rule identity with (1-b)^2 (companion)", pass, &detail.join("; "));
    assert!(pass, "{detail:?}");
}

#[test]
fn criterion_9_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let mut failures = Vec::new();
    let runs = [
        ("gauge-scan", "gauge_scan.toml"),
        ("schwarz-scan", "schwarz_scan.toml"),
        ("metric", "metric_standard.toml"),
        ("completeness", "completeness.toml"),
        ("linking", "linking.toml"),
        ("solve-disk", "solve_disk.toml"),
    ];
    for (command, config) in runs {
        let a = tmp.path().join(format!("{command}_a"));
        let b = tmp.path().join(format!("{command}_b"));
        jhol(command, &configs().join(config), &a);
        jhol(command, &configs().join(config), &b);
        for file in ["records.jsonl", "summary.json"] {
            if std::fs::read(a.join(file)).unwrap() != std::fs::read(b.join(file)).unwrap() {
                failures.push(format!("{command}/{file}"));
            }
        }
    }
    let pass = failures.is_empty();
    report(
        9,
        "determinism",
        pass,
        &format!("{} commands run twice, differing files: {failures:?}", runs.len()),
    );
    assert!(pass);
}
