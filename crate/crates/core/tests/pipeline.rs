use std::sync::Arc;

use jhol_core::almost_complex::{validate, AlmostComplexStructure, Component};
use jhol_core::beltrami::{representation_residual, solve_coupled, ComponentSeed, DiskMap, Gauge, Seed, SolveConfig};
use jhol_core::grid::DiskGrid;
use jhol_core::hyperbolic::{Cover, Domain, MetricConfig, RoydenEstimator};
use jhol_core::integral_ops::IntegralOperators;
use jhol_core::linking::{verify_linking_identity, LinkingConfig};
use num_complex::Complex64;

const STRUCTURE: &str = r#"
description = "quadratic perturbation"
epsilon = 0.1

[[a]]
row = 0
col = 0
coeff = 0.4
powers = [1, 0, 0, 0]

[[a]]
row = 0
col = 1
coeff = 0.3
powers = [0, 0, 1, 0]

[[b]]
row = 1
col = 1
coeff = 0.3
powers = [0, 0, 0, 1]

[[b]]
row = 0
col = 1
coeff = 0.25
powers = [1, 0, 0, 0]
"#;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn ops(n: usize) -> Arc<IntegralOperators> {
    Arc::new(IntegralOperators::new(DiskGrid::new(n, 1.0).unwrap()))
}

#[test]
fn structure_file_round_trips_and_validates() {
    let j = AlmostComplexStructure::from_toml(STRUCTURE).unwrap();
    let again = AlmostComplexStructure::from_toml(&j.to_file().unwrap().to_toml().unwrap()).unwrap();
    let g = DiskGrid::new(8, 1.0).unwrap();
    let report = validate(&j, &g, &g);
    assert!(report.accepted, "{report:?}");
    assert!(report.projected);
    assert!(report.square_deviation_a < 1e-10 && report.square_deviation_b < 1e-10);
    let p = (c(0.3, -0.2), c(0.1, 0.4));
    assert_eq!(j.a(p.0, p.1).unwrap(), again.a(p.0, p.1).unwrap());
}

#[test]
fn solved_disk_keeps_its_jet_and_residual() {
    let j = Arc::new(AlmostComplexStructure::from_toml(STRUCTURE).unwrap());
    let o = ops(24);
    let seed = DiskMap::from_seeds(&o, Seed::affine(c(0.1, 0.0), c(0.5, 0.1)), Some(Seed::affine(c(0.0, 0.2), c(0.3, 0.0))))
        .unwrap();
    let out = solve_coupled(&seed, &j, &SolveConfig::default()).unwrap();
    assert!(out.relative_residual() < 1e-6);
    for (a, b) in [(out.first(), seed.first()), (out.second().unwrap(), seed.second().unwrap())] {
        assert!((a.origin().value - b.origin().value).norm() < 1e-12);
        assert!((a.origin().dz - b.origin().dz).norm() < 1e-12);
    }
    let mu_a = j.coefficients(Component::First).unwrap();
    let mu_b = j.coefficients(Component::Second).unwrap();
    let (abs, rel) = out.recompute_residual(&mu_a, Some(&mu_b)).unwrap();
    assert!((abs - out.residual()).abs() <= 1e-12 * abs.max(1e-300) + 1e-15);
    assert!((rel - out.relative_residual()).abs() <= 1e-9 * rel.max(1e-300) + 1e-15);
}

#[test]
fn perturbed_metric_stays_near_the_standard_one() {
    let j = Arc::new(AlmostComplexStructure::from_toml(STRUCTURE).unwrap().rescale(0.5).unwrap());
    let est = RoydenEstimator::new(ops(16), j, Domain::Bidisk, MetricConfig::default()).unwrap();
    for a in [0.0, 0.5] {
        let s = est.estimate([c(a, 0.0), c(0.0, 0.0)], [c(1.0, 0.0), c(0.0, 0.0)]).unwrap();
        let exact = 1.0 / (1.0 - a * a);
        assert!((s.upper_estimate / exact - 1.0).abs() < 0.1, "{a}: {}", s.upper_estimate);
    }
}

#[test]
fn solved_disks_satisfy_the_linking_identity() {
    let j = Arc::new(AlmostComplexStructure::from_toml(STRUCTURE).unwrap().rescale(0.5).unwrap());
    let o = ops(24);
    let cfg = SolveConfig::default();
    let zero = c(0.0, 0.0);
    let m1 = solve_coupled(
        &DiskMap::from_seeds(&o, Seed::affine(zero, c(0.8, 0.0)), Some(Seed::constant(zero))).unwrap(),
        &j,
        &cfg,
    )
    .unwrap();
    let m2 = solve_coupled(
        &DiskMap::from_seeds(&o, Seed::constant(zero), Some(Seed::affine(zero, c(0.8, 0.0)))).unwrap(),
        &j,
        &cfg,
    )
    .unwrap();
    let rep = verify_linking_identity(&m1, &m2, &[0.3, 0.5], &j, &LinkingConfig::default()).unwrap();
    assert!(rep.positivity);
    assert_eq!(rep.intersections.len(), 1);
    assert_eq!(rep.intersections[0].index, 1);
    assert!(rep.all_equal, "{rep:?}");
}

/// Solving the pulled-back equation for `w` and mapping back through the
/// gauge gives a solution of the original equation for `u`.
#[test]
fn gauged_solution_solves_the_original_equation() {
    let j = Arc::new(AlmostComplexStructure::from_toml(STRUCTURE).unwrap().rescale(3.0).unwrap());
    let o = ops(24);
    let cfg = SolveConfig::default();
    for (cover, center) in [(Cover::Identity, c(0.4, 0.2)), (Cover::Punctured, c(-0.3, 0.5))] {
        let first = ComponentSeed { seed: Seed::with_jet(c(0.0, 0.0), c(0.3, 0.1)).unwrap(), gauge: Some(Gauge { cover, center }) };
        let second = ComponentSeed::from(Seed::with_jet(c(0.1, -0.2), c(0.2, 0.0)).unwrap());
        let out = solve_coupled(&DiskMap::holomorphic(&o, first, Some(second)).unwrap(), &j, &cfg).unwrap();
        assert!(out.relative_residual() <= cfg.tolerance);
        let u = out.first();
        let mu = j.coefficients(Component::First).unwrap();
        let r = representation_residual(u.values(), u.dz(), u.dzbar(), out.v().unwrap(), &mu).unwrap();
        let rel = r.norm_l2() / u.dz().norm_l2();
        assert!(rel <= 10.0 * cfg.tolerance, "{cover:?}: {rel:e}");
    }
}

/// The solved disk moves away from its holomorphic seed linearly in ε.
#[test]
fn deviation_from_seed_scales_with_epsilon() {
    let base = AlmostComplexStructure::from_toml(STRUCTURE).unwrap();
    let o = ops(24);
    let seed = DiskMap::from_seeds(&o, Seed::affine(c(0.1, 0.0), c(0.5, 0.1)), Some(Seed::affine(c(0.0, 0.2), c(0.3, 0.0))))
        .unwrap();
    let deviation = |eps: f64| {
        let j = Arc::new(base.rescale(eps / base.epsilon()).unwrap());
        let out = solve_coupled(&seed, &j, &SolveConfig::default()).unwrap();
        assert!(out.relative_residual() <= 1e-6);
        (out.u() - seed.u()).sup_norm().max((out.v().unwrap() - seed.v().unwrap()).sup_norm())
    };
    let (d1, d2) = (deviation(0.05), deviation(0.025));
    assert!(d1 > 0.0 && d1 < 0.05, "{d1}");
    let ratio = d1 / d2;
    assert!((1.8..=2.2).contains(&ratio), "{d1} / {d2} = {ratio}");
}
