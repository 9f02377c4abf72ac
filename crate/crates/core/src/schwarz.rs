//! Empirical Schwarz-type constants: sup of `‖df(0)‖` over solved disks,
//! the gauge-family constant, and Brody reparametrization.

use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::almost_complex::{AlmostComplexStructure, Component};
use crate::beltrami::{solve_coupled, ComponentSeed, DiskMap, Gauge, Seed, SolveConfig};
use crate::error::{Error, Result};
use crate::hyperbolic::{
    chain_rule_factor, standard_metric, Cover, Domain, MetricConfig, MobiusTransform, RoydenEstimator,
};
use crate::integral_ops::IntegralOperators;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanConfig {
    pub solve: SolveConfig,
    pub seed: u64,
    /// Base points are drawn from `|z| ≤ base_radius`.
    pub base_radius: f64,
    /// Each rejected draw shrinks the scale by this factor.
    pub shrink: f64,
    pub max_attempts: usize,
    pub containment_margin: f64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            solve: SolveConfig::default(),
            seed: 0,
            base_radius: 0.9,
            shrink: 0.98,
            max_attempts: 8,
            containment_margin: 1e-3,
        }
    }
}

impl ScanConfig {
    fn validate(&self) -> Result<()> {
        self.solve.validate()?;
        if !(self.base_radius > 0.0 && self.base_radius < 1.0) {
            return Err(Error::InvalidInput(format!("base_radius must lie in (0, 1), got {}", self.base_radius)));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) || self.max_attempts == 0 {
            return Err(Error::InvalidInput("shrink must lie in (0, 1) and max_attempts be positive".into()));
        }
        Ok(())
    }

    fn solve_config(&self) -> SolveConfig {
        SolveConfig { containment_margin: self.containment_margin, ..self.solve.clone() }
    }
}

/// Independent stream for sample `index`, so a scan of `n` samples is a
/// prefix of a scan of `m > n` samples.
fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn uniform_disk(rng: &mut ChaCha8Rng, radius: f64) -> Complex64 {
    let r = radius * rng.gen::<f64>().sqrt();
    Complex64::from_polar(r, std::f64::consts::TAU * rng.gen::<f64>())
}

fn uniform_sphere(rng: &mut ChaCha8Rng) -> [Complex64; 2] {
    loop {
        let g: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return [Complex64::new(g[0], g[1]) / n, Complex64::new(g[2], g[3]) / n];
        }
    }
}

fn unit_circle(rng: &mut ChaCha8Rng) -> Complex64 {
    Complex64::from_polar(1.0, std::f64::consts::TAU * rng.gen::<f64>())
}

fn check_regime(j: &Arc<AlmostComplexStructure>, cfg: &SolveConfig) -> Result<f64> {
    let bound = j
        .coefficients(Component::First)?
        .bound()
        .max(j.coefficients(Component::Second)?.bound());
    if !(bound < cfg.mu_bound_limit) {
        return Err(Error::OutOfRegime(format!(
            "coefficient bound {bound:.4} not below the solver limit {}",
            cfg.mu_bound_limit
        )));
    }
    Ok(bound)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchwarzSample {
    pub index: usize,
    pub point: [Complex64; 2],
    pub direction: [Complex64; 2],
    /// Scale of the accepted jet, or of the last rejected one.
    pub scale: f64,
    pub attempts: usize,
    pub feasible: bool,
    /// `max` over components of `|∂u(0)| + |∂̄u(0)|`.
    pub derivative_norm: Option<f64>,
    pub residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GromovReport {
    pub value: f64,
    pub requested: usize,
    pub feasible: usize,
    pub seed: u64,
    pub restrict_eta: bool,
    pub grid_resolution: usize,
    pub mu_bound: f64,
    pub samples: Vec<SchwarzSample>,
}

/// Sup of `‖df(0)‖` over solved disks `Δ → Δ²` with random jets.
///
/// Base points are uniform in `|z| ≤ base_radius`, directions uniform on
/// the unit sphere of `ℂ²` (or on the circle `η = 0` with `restrict_eta`),
/// and the scale is drawn uniformly from `[0, 1.25 s*)`, `s*` the extremal
/// scale for the standard structure, then shrunk until the disk stays in
/// the bidisk.
pub fn gromov_scan(
    j: &Arc<AlmostComplexStructure>,
    ops: &Arc<IntegralOperators>,
    n_samples: usize,
    restrict_eta: bool,
    cfg: &ScanConfig,
) -> Result<GromovReport> {
    cfg.validate()?;
    if n_samples == 0 {
        return Err(Error::InvalidInput("n_samples must be positive".into()));
    }
    let mcfg = MetricConfig {
        solve: cfg.solve.clone(),
        containment_margin: cfg.containment_margin,
        ..MetricConfig::default()
    };
    let est = RoydenEstimator::new(ops.clone(), j.clone(), Domain::Bidisk, mcfg)?;
    let samples: Vec<SchwarzSample> = (0..n_samples)
        .into_par_iter()
        .map(|index| -> Result<SchwarzSample> {
            let mut rng = sample_rng(cfg.seed, index);
            let point = [uniform_disk(&mut rng, cfg.base_radius), uniform_disk(&mut rng, cfg.base_radius)];
            let direction = if restrict_eta { [unit_circle(&mut rng), ZERO] } else { uniform_sphere(&mut rng) };
            let limit = 1.0 / standard_metric(Domain::Bidisk, point, direction)?;
            let mut scale = 1.25 * limit * rng.gen::<f64>();
            for attempt in 1..=cfg.max_attempts {
                if let Some(map) = est.solve_at(point, direction, scale)? {
                    return Ok(SchwarzSample {
                        index,
                        point,
                        direction,
                        scale,
                        attempts: attempt,
                        feasible: true,
                        derivative_norm: Some(map.derivative_norm_at_origin()),
                        residual: Some(map.relative_residual()),
                    });
                }
                scale *= cfg.shrink;
            }
            Ok(SchwarzSample {
                index,
                point,
                direction,
                scale: scale / cfg.shrink,
                attempts: cfg.max_attempts,
                feasible: false,
                derivative_norm: None,
                residual: None,
            })
        })
        .collect::<Result<_>>()?;
    let feasible = samples.iter().filter(|s| s.feasible).count();
    if 2 * feasible < n_samples {
        return Err(Error::InsufficientCoverage { feasible, requested: n_samples });
    }
    let value = samples.iter().filter_map(|s| s.derivative_norm).fold(0.0, f64::max);
    Ok(GromovReport {
        value,
        requested: n_samples,
        feasible,
        seed: cfg.seed,
        restrict_eta,
        grid_resolution: ops.grid().resolution(),
        mu_bound: est.mu_bound(),
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GaugeSample {
    pub index: usize,
    /// Gauge parameter: the value `u(0)`.
    pub center: Complex64,
    /// `w_z(0)` requested of the seed.
    pub derivative: Complex64,
    pub second_point: Complex64,
    pub attempts: usize,
    pub feasible: bool,
    /// `|∂w(0)| + |∂̄w(0)|`.
    pub dw_norm: Option<f64>,
    /// `|du(0)|/(1 - |u(0)|²)` with `|du(0)|` the operator norm; identity cover only.
    pub normalized: Option<f64>,
    /// `|∂w(0) - factor(a)·∂u(0)|/|∂w(0)|` with the closed-form chain-rule
    /// factor; punctured cover only.
    pub chain_rule_deviation: Option<f64>,
    /// Solver failure other than leaving the target, if any.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GaugeReport {
    pub cover: Cover,
    /// Empirical `K = sup ‖dw(0)‖`.
    pub k: f64,
    pub max_normalized: Option<f64>,
    pub requested: usize,
    pub feasible: usize,
    /// Some sample failed for a reason other than target containment.
    pub partial: bool,
    pub seed: u64,
    pub grid_resolution: usize,
    pub mu_bound: f64,
    pub epsilon: f64,
    pub samples: Vec<GaugeSample>,
}

/// Sup of `‖dw(0)‖` over solutions of the gauged equations with `w(0) = 0`.
///
/// The gauge parameter `a = u(0)` is drawn uniformly from
/// `|a| ≤ base_radius` and the first component is `u = (cover ∘ φ_c)(w)`
/// with `c` the lift of `a`. The second component starts from a Möbius disk
/// at a random `b` with derivative at most half the extremal one.
pub fn gauge_scan(
    j: &Arc<AlmostComplexStructure>,
    ops: &Arc<IntegralOperators>,
    cover: Cover,
    n_samples: usize,
    cfg: &ScanConfig,
) -> Result<GaugeReport> {
    cfg.validate()?;
    if n_samples == 0 {
        return Err(Error::InvalidInput("n_samples must be positive".into()));
    }
    let mu_bound = check_regime(j, &cfg.solve)?;
    let solve_cfg = cfg.solve_config();
    let samples: Vec<GaugeSample> = (0..n_samples)
        .into_par_iter()
        .map(|index| -> Result<GaugeSample> {
            let mut rng = sample_rng(cfg.seed, index);
            let mut center = uniform_disk(&mut rng, cfg.base_radius);
            if center.norm() == 0.0 {
                center = Complex64::new(cfg.base_radius * 0.5, 0.0);
            }
            let dir = unit_circle(&mut rng);
            let mut scale = 1.05 * rng.gen::<f64>();
            let b = uniform_disk(&mut rng, cfg.base_radius);
            let v_derivative = 0.5 * (1.0 - b.norm_sqr()) * rng.gen::<f64>() * unit_circle(&mut rng);
            let second = ComponentSeed { seed: Seed::with_jet(b, v_derivative)?, gauge: None };
            let gauge = Gauge { cover, center: cover.lift(center)? };
            let mut sample = GaugeSample {
                index,
                center,
                derivative: scale * dir,
                second_point: b,
                attempts: 0,
                feasible: false,
                dw_norm: None,
                normalized: None,
                chain_rule_deviation: None,
                failure: None,
            };
            for attempt in 1..=cfg.max_attempts {
                sample.attempts = attempt;
                sample.derivative = scale * dir;
                let first = ComponentSeed { seed: Seed::with_jet(ZERO, scale * dir)?, gauge: Some(gauge) };
                let seed = DiskMap::holomorphic(ops, first, Some(second.clone()))?;
                match solve_coupled(&seed, j, &solve_cfg) {
                    Ok(map) => {
                        let w = map.first().origin_unknown();
                        let u = map.first().origin();
                        sample.feasible = true;
                        sample.failure = None;
                        sample.dw_norm = Some(w.operator_norm());
                        match cover {
                            Cover::Identity => {
                                sample.normalized = Some(u.operator_norm() / (1.0 - u.value.norm_sqr()));
                            }
                            Cover::Punctured => {
                                let predicted = chain_rule_factor(center)? * u.dz;
                                sample.chain_rule_deviation = Some((w.dz - predicted).norm() / w.dz.norm());
                            }
                        }
                        return Ok(sample);
                    }
                    Err(Error::TargetViolation { .. }) => {}
                    Err(e) if e.is_input_error() => return Err(e),
                    Err(e) => sample.failure = Some(e.to_string()),
                }
                scale *= cfg.shrink;
            }
            Ok(sample)
        })
        .collect::<Result<_>>()?;
    let feasible = samples.iter().filter(|s| s.feasible).count();
    if feasible == 0 {
        return Err(Error::InsufficientCoverage { feasible, requested: n_samples });
    }
    let k = samples.iter().filter_map(|s| s.dw_norm).fold(0.0, f64::max);
    let max_normalized = samples.iter().filter_map(|s| s.normalized).reduce(f64::max);
    Ok(GaugeReport {
        cover,
        k,
        max_normalized,
        requested: n_samples,
        feasible,
        partial: samples.iter().any(|s| s.failure.is_some()),
        seed: cfg.seed,
        grid_resolution: ops.grid().resolution(),
        mu_bound,
        epsilon: j.epsilon(),
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BrodyConfig {
    pub max_relocations: usize,
    /// Relative tolerance on the weighted maximum and on `‖f̃_x(0)‖`.
    pub value_tolerance: f64,
    /// The maximizer must lie within this many radial cells of 0.
    pub cell_tolerance: f64,
}

impl Default for BrodyConfig {
    fn default() -> Self {
        BrodyConfig { max_relocations: 50, value_tolerance: 1e-3, cell_tolerance: 2.0 }
    }
}

#[derive(Debug, Clone)]
pub struct BrodyResult {
    pub map: DiskMap,
    /// `f̃ = f ∘ transform`.
    pub transform: MobiusTransform,
    pub relocations: usize,
    pub converged: bool,
    /// `sup (R² - |z|²)/R² · ‖f̃_x(z)‖` over the nodes and the origin.
    pub weighted_max: f64,
    pub origin_value: f64,
    pub argmax: Complex64,
}

fn dx_norm(a: Complex64, b: Option<Complex64>) -> f64 {
    (a.norm_sqr() + b.map_or(0.0, |b| b.norm_sqr())).sqrt()
}

/// Nodes with `‖f_x‖` there, origin first.
fn gradient_profile(f: &DiskMap) -> Vec<(Complex64, f64)> {
    let first = f.first();
    let second = f.second();
    let o2 = second.map(|s| s.origin().dx());
    let mut out = vec![(ZERO, dx_norm(first.origin().dx(), o2))];
    let grid = f.grid();
    for (k, &z) in grid.nodes().iter().enumerate() {
        let a = first.dz().values()[k] + first.dzbar().values()[k];
        let b = second.map(|s| s.dz().values()[k] + s.dzbar().values()[k]);
        out.push((z, dx_norm(a, b)));
    }
    out
}

/// `(argmax, max)` of `t‖f_x(y)‖(1 - |y|²/(tR)²)` over `|y| < tR`, reported
/// in the coordinate `z = y/t` of `f(t·)`.
fn scaled_max(profile: &[(Complex64, f64)], t: f64, r: f64) -> (Complex64, f64) {
    let tr2 = (t * r) * (t * r);
    profile
        .iter()
        .filter(|(y, _)| y.norm_sqr() < tr2)
        .map(|&(y, g)| (y / t, t * g * (1.0 - y.norm_sqr() / tr2)))
        .fold((ZERO, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
}

/// Precomposes `f` with scalings and automorphisms of its disk until the
/// weighted gradient `(R² - |z|²)/R² · ‖f_x(z)‖` peaks at 0 with value `c`.
pub fn brody_reparametrize(f: &DiskMap, c: f64, cfg: &BrodyConfig) -> Result<BrodyResult> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::InvalidInput(format!("target value must be positive, got {c}")));
    }
    let grid = f.grid().clone();
    let r = grid.radius();
    let cell = r / grid.resolution() as f64;
    let start = gradient_profile(f)[0].1;
    if start < c * (1.0 - cfg.value_tolerance) {
        return Err(Error::InvalidInput(format!("‖f_x(0)‖ = {start:.6} is below the target {c}")));
    }
    let mut map = f.clone();
    let mut transform = MobiusTransform::identity();
    let mut relocations = 0;
    loop {
        let profile = gradient_profile(&map);
        let origin_value = profile[0].1;
        let (argmax, weighted_max) = scaled_max(&profile, 1.0, r);
        let centered = argmax.norm() <= cfg.cell_tolerance * cell;
        let tol = cfg.value_tolerance * c;
        if centered && (weighted_max - c).abs() <= tol && (origin_value - c).abs() <= tol {
            return Ok(BrodyResult { map, transform, relocations, converged: true, weighted_max, origin_value, argmax });
        }
        if relocations == cfg.max_relocations {
            return Ok(BrodyResult { map, transform, relocations, converged: false, weighted_max, origin_value, argmax });
        }
        // Largest t ≤ 1 with weighted max of f(t·) equal to c; the max is
        // increasing in t and tends to 0 with t.
        let t = if weighted_max <= c {
            1.0
        } else {
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if scaled_max(&profile, mid, r).1 < c {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            hi
        };
        let (z_star, _) = scaled_max(&profile, t, r);
        let step = MobiusTransform::scaling(Complex64::new(t, 0.0))
            .compose(&MobiusTransform::disk_automorphism(z_star, r)?);
        map = map.precompose(&step)?;
        transform = transform.compose(&step);
        relocations += 1;
    }
}
