//! Disk automorphisms, the punctured-disk covering, and Kobayashi-Royden
//! metric estimates for block-diagonal structures on the bidisk.

use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::almost_complex::{pullback_coefficients, AlmostComplexStructure, BeltramiCoefficients, Component};
use crate::beltrami::{solve_coupled, ComponentSeed, DiskMap, Gauge, Seed, SolveConfig};
use crate::error::{Error, Result};
use crate::integral_ops::IntegralOperators;

/// The automorphism `(a - λ)/(1 - conj(a) λ)` swapping `a` and the origin.
pub fn mobius(a: Complex64, lambda: Complex64) -> Result<Complex64> {
    check_center(a)?;
    Ok((a - lambda) / (1.0 - a.conj() * lambda))
}

/// Derivative of [`mobius`] in `λ`: `(|a|² - 1)/(1 - conj(a) λ)²`.
pub fn mobius_derivative(a: Complex64, lambda: Complex64) -> Result<Complex64> {
    check_center(a)?;
    let d = 1.0 - a.conj() * lambda;
    Ok(Complex64::new(a.norm_sqr() - 1.0, 0.0) / (d * d))
}

fn check_center(a: Complex64) -> Result<()> {
    if !(a.norm() < 1.0) {
        return Err(Error::InvalidInput(format!("automorphism center {a} not in the open disk")));
    }
    Ok(())
}

/// Universal covering `Δ → Δ \ {0}`, `λ ↦ exp((λ - 1)/(λ + 1))`.
pub fn covering_punctured(lambda: Complex64) -> Result<Complex64> {
    let d = lambda + 1.0;
    if d.norm() < 1e-300 {
        return Err(Error::InvalidInput("covering evaluated at its pole λ = -1".into()));
    }
    Ok(((lambda - 1.0) / d).exp())
}

/// `π'(λ) = π(λ)·2/(λ + 1)²`.
pub fn covering_punctured_derivative(lambda: Complex64) -> Result<Complex64> {
    let p = covering_punctured(lambda)?;
    let d = lambda + 1.0;
    Ok(p * 2.0 / (d * d))
}

/// Principal logarithm with imaginary part in `[-π, π)`.
pub fn log_branch(a: Complex64) -> Result<Complex64> {
    if a.norm() == 0.0 || !a.is_finite() {
        return Err(Error::InvalidInput(format!("logarithm of {a}")));
    }
    let mut b = a.ln();
    // `ln` returns arg in (-π, π]; move the cut to the other side.
    if b.im >= std::f64::consts::PI {
        b.im -= 2.0 * std::f64::consts::PI;
    }
    Ok(b)
}

/// Returns `(b, c)` with `b = ln a` and `c = (b + 1)/(1 - b)`, so that
/// `covering_punctured(c) = a`.
pub fn branch_point(a: Complex64) -> Result<(Complex64, Complex64)> {
    if !(a.norm() > 0.0 && a.norm() < 1.0) {
        return Err(Error::InvalidInput(format!("branch point needs 0 < |a| < 1, got {a}")));
    }
    let b = log_branch(a)?;
    Ok((b, (b + 1.0) / (1.0 - b)))
}

/// `ζ ↦ (aζ + b)/(cζ + d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MobiusTransform {
    pub a: Complex64,
    pub b: Complex64,
    pub c: Complex64,
    pub d: Complex64,
}

impl MobiusTransform {
    pub fn identity() -> Self {
        let (one, zero) = (Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0));
        MobiusTransform { a: one, b: zero, c: zero, d: one }
    }

    pub fn scaling(t: Complex64) -> Self {
        MobiusTransform { a: t, ..Self::identity() }
    }

    /// Automorphism of the disk of radius `r` sending 0 to `p`:
    /// `ζ ↦ r φ_{p/r}(-ζ/r)`.
    pub fn disk_automorphism(p: Complex64, r: f64) -> Result<Self> {
        let q = p / r;
        check_center(q)?;
        // r (q + ζ/r)/(1 + conj(q) ζ/r)
        Ok(MobiusTransform {
            a: Complex64::new(1.0, 0.0),
            b: p,
            c: q.conj() / r,
            d: Complex64::new(1.0, 0.0),
        })
    }

    pub fn apply(&self, z: Complex64) -> Complex64 {
        (self.a * z + self.b) / (self.c * z + self.d)
    }

    pub fn derivative(&self, z: Complex64) -> Complex64 {
        let den = self.c * z + self.d;
        (self.a * self.d - self.b * self.c) / (den * den)
    }

    /// `self ∘ inner`.
    pub fn compose(&self, inner: &MobiusTransform) -> MobiusTransform {
        MobiusTransform {
            a: self.a * inner.a + self.b * inner.c,
            b: self.a * inner.b + self.b * inner.d,
            c: self.c * inner.a + self.d * inner.c,
            d: self.c * inner.b + self.d * inner.d,
        }
    }
}

/// Covering of the target used by a gauge-transformed equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cover {
    Identity,
    Punctured,
}

impl Cover {
    pub fn eval(self, lambda: Complex64) -> Result<Complex64> {
        match self {
            Cover::Identity => Ok(lambda),
            Cover::Punctured => covering_punctured(lambda),
        }
    }

    pub fn derivative(self, lambda: Complex64) -> Result<Complex64> {
        match self {
            Cover::Identity => Ok(Complex64::new(1.0, 0.0)),
            Cover::Punctured => covering_punctured_derivative(lambda),
        }
    }

    /// A preimage of `a` under the cover.
    pub fn lift(self, a: Complex64) -> Result<Complex64> {
        match self {
            Cover::Identity => {
                check_center(a)?;
                Ok(a)
            }
            Cover::Punctured => Ok(branch_point(a)?.1),
        }
    }
}

/// `Φ = cover ∘ φ_a` together with its derivative.
pub fn gauge_map(cover: Cover, a: Complex64, lambda: Complex64) -> Result<(Complex64, Complex64)> {
    let inner = mobius(a, lambda)?;
    let value = cover.eval(inner)?;
    let deriv = cover.derivative(inner)? * mobius_derivative(a, lambda)?;
    Ok((value, deriv))
}

/// Chain-rule factor `dw(0)/du(0)` for `w = φ_c ∘ u_π`, `u(0) = a`, in the
/// form `1/(|c|² - 1) · 2/(1 + b)² · 1/a` with `b = ln a`, `c = (b+1)/(1-b)`.
///
/// Kept for comparison only: its denominator vanishes at `a = e^{-1}`.
/// [`chain_rule_factor`] is the value obtained by differentiating the
/// composition directly.
pub fn chain_rule_factor_plus(a: Complex64) -> Result<Complex64> {
    let (b, c) = branch_point(a)?;
    let opb = 1.0 + b;
    Ok(1.0 / (c.norm_sqr() - 1.0) * (2.0 / (opb * opb)) / a)
}

/// `dw(0)/du(0) = φ_c'(c) / π'(c) = 1/(|c|² - 1) · 2/(1 - b)² · 1/a`.
pub fn chain_rule_factor(a: Complex64) -> Result<Complex64> {
    let (b, c) = branch_point(a)?;
    let omb = 1.0 - b;
    Ok(1.0 / (c.norm_sqr() - 1.0) * (2.0 / (omb * omb)) / a)
}

/// `dw(0)` for `w = φ_c ∘ u_π`, computed from samples of `u` alone.
///
/// `u_π = (1 + log u)/(1 - log u)` with the branch of `log u` continued from
/// `b = ln u(0)`; `dw(0)` is the first Fourier coefficient of `w` on the
/// circle of radius `rho`, which is spectrally accurate for analytic `u`.
pub fn lifted_derivative_at_origin(
    u: impl Fn(Complex64) -> Complex64,
    rho: f64,
    samples: usize,
) -> Result<Complex64> {
    let a = u(Complex64::new(0.0, 0.0));
    let (b, c) = branch_point(a)?;
    let step = |prev_log: Complex64, prev: Complex64, next: Complex64| -> Result<Complex64> {
        if !(next.norm() > 0.0 && next.norm() < 1.0) {
            return Err(Error::InvalidInput(format!("map leaves the punctured disk: {next}")));
        }
        Ok(prev_log + (next / prev).ln())
    };
    // Continue the logarithm out along the positive real radius, then around.
    let radial = 32;
    let mut log = b;
    let mut prev = a;
    for k in 1..=radial {
        let next = u(Complex64::new(rho * k as f64 / radial as f64, 0.0));
        log = step(log, prev, next)?;
        prev = next;
    }
    let mut acc = Complex64::new(0.0, 0.0);
    for k in 0..samples {
        let theta = std::f64::consts::TAU * k as f64 / samples as f64;
        if k > 0 {
            let next = u(Complex64::from_polar(rho, theta));
            log = step(log, prev, next)?;
            prev = next;
        }
        let lifted = (1.0 + log) / (1.0 - log);
        let w = mobius(c, lifted)?;
        acc += w * Complex64::from_polar(1.0, -theta);
    }
    Ok(acc / (samples as f64 * rho))
}

/// Radius below which the punctured-disk lower bound is used by default.
pub const DEFAULT_VALIDITY_RADIUS: f64 = 0.3;
/// Feasible disks must stay this far inside the unit circle.
pub const CONTAINMENT_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// `Δ × Δ`.
    Bidisk,
    /// `(Δ \ {0}) × Δ`, the complement of `{z₁ = 0}`.
    PuncturedBidisk,
}

impl Domain {
    pub fn contains(self, point: [Complex64; 2]) -> bool {
        let inside = point[0].norm() < 1.0 && point[1].norm() < 1.0;
        match self {
            Domain::Bidisk => inside,
            Domain::PuncturedBidisk => inside && point[0].norm() > 0.0,
        }
    }

    fn check(self, point: [Complex64; 2]) -> Result<()> {
        if self.contains(point) {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "point ({}, {}) is not in the {self:?} domain",
                point[0], point[1]
            )))
        }
    }
}

/// Poincaré density of `Δ \ {0}` at `a`: `1/(2|a| ln(1/|a|))`.
pub fn punctured_disk_density(a: Complex64) -> Result<f64> {
    let r = a.norm();
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::InvalidInput(format!("punctured disk density at {a}")));
    }
    Ok(1.0 / (2.0 * r * (1.0 / r).ln()))
}

/// Kobayashi-Royden metric of the domain for the standard structure.
pub fn standard_metric(domain: Domain, point: [Complex64; 2], direction: [Complex64; 2]) -> Result<f64> {
    domain.check(point)?;
    let first = match domain {
        Domain::Bidisk => 1.0 / (1.0 - point[0].norm_sqr()),
        Domain::PuncturedBidisk => punctured_disk_density(point[0])?,
    };
    Ok((direction[0].norm() * first).max(direction[1].norm() / (1.0 - point[1].norm_sqr())))
}

/// `max(C₁|ξ|/(1-|a|²), C₂|η|/(1-|b|²))`.
pub fn lower_bound_bidisk(point: [Complex64; 2], direction: [Complex64; 2], c1: f64, c2: f64) -> Result<f64> {
    Domain::Bidisk.check(point)?;
    Ok((c1 * direction[0].norm() / (1.0 - point[0].norm_sqr()))
        .max(c2 * direction[1].norm() / (1.0 - point[1].norm_sqr())))
}

/// `max(K₁|ξ|/(|a| ln(1/|a|)), C₂|η|/(1-|b|²))`, valid for `0 < |a| < r0`.
pub fn lower_bound_punctured(
    point: [Complex64; 2],
    direction: [Complex64; 2],
    k1: f64,
    c2: f64,
    r0: f64,
) -> Result<f64> {
    Domain::PuncturedBidisk.check(point)?;
    let r = point[0].norm();
    if r >= r0 {
        return Err(Error::InvalidInput(format!(
            "|a| = {r} outside the validity radius {r0} of the punctured bound"
        )));
    }
    Ok((k1 * direction[0].norm() / (r * (1.0 / r).ln()))
        .max(c2 * direction[1].norm() / (1.0 - point[1].norm_sqr())))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub c1: f64,
    pub c2: f64,
    pub k1: f64,
}

impl Default for Constants {
    /// The values that are sharp for the standard structure.
    fn default() -> Self {
        Constants { c1: 1.0, c2: 1.0, k1: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub solve: SolveConfig,
    pub bisection_steps: usize,
    pub containment_margin: f64,
    pub validity_radius: f64,
    /// Accepted samples satisfy `lower ≤ upper · (1 + slack)`.
    pub slack: f64,
    pub constants: Constants,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            solve: SolveConfig::default(),
            bisection_steps: 12,
            containment_margin: CONTAINMENT_MARGIN,
            validity_radius: DEFAULT_VALIDITY_RADIUS,
            slack: 0.05,
            constants: Constants::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSample {
    pub domain: Domain,
    pub point: [Complex64; 2],
    pub direction: [Complex64; 2],
    /// `None` where the formula does not apply (punctured, `|a| ≥ r0`).
    pub lower_bound: Option<f64>,
    pub upper_estimate: f64,
    pub grid_resolution: usize,
    /// Largest feasible `R·‖direction‖` found.
    pub feasible_scale: f64,
    pub solves: usize,
    pub max_residual: f64,
    pub mu_bound: f64,
    pub accepted: bool,
}

/// Upper estimates of the Kobayashi-Royden metric by searching for the
/// largest disk with a prescribed 1-jet.
///
/// A disk `f` on `Δ(R)` with `f(0) = p`, `f_x(0) = X` is the same as
/// `g(ζ) = f(Rζ)` on the unit disk with `g_x(0) = R X`, so the search runs
/// over the scale `s = R‖X‖` with unit direction, which makes the estimate
/// exactly homogeneous in `X`.
#[derive(Debug, Clone)]
pub struct RoydenEstimator {
    ops: Arc<IntegralOperators>,
    structure: Arc<AlmostComplexStructure>,
    domain: Domain,
    cfg: MetricConfig,
    mu_a: BeltramiCoefficients,
    mu_b: BeltramiCoefficients,
}

/// Solves `d + μ¹ d + μ² conj(d) = target` for `d`.
fn match_direction(target: Complex64, mu: (Complex64, Complex64)) -> Result<Complex64> {
    let (m1, m2) = mu;
    let p = 1.0 + m1;
    let det = p.norm_sqr() - m2.norm_sqr();
    if !(det.abs() > 1e-14) {
        return Err(Error::OutOfRegime("direction matching is singular".into()));
    }
    Ok((p.conj() * target - m2 * target.conj()) / det)
}

impl RoydenEstimator {
    pub fn new(
        ops: Arc<IntegralOperators>,
        structure: Arc<AlmostComplexStructure>,
        domain: Domain,
        cfg: MetricConfig,
    ) -> Result<Self> {
        cfg.solve.validate()?;
        if cfg.bisection_steps == 0 {
            return Err(Error::InvalidInput("bisection_steps must be positive".into()));
        }
        let mu_a = structure.coefficients(Component::First)?;
        let mu_b = structure.coefficients(Component::Second)?;
        let bound = mu_a.bound().max(mu_b.bound());
        if !(bound < cfg.solve.mu_bound_limit) {
            return Err(Error::OutOfRegime(format!(
                "coefficient bound {bound:.4} not below the solver limit {}",
                cfg.solve.mu_bound_limit
            )));
        }
        Ok(RoydenEstimator { ops, structure, domain, cfg, mu_a, mu_b })
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn config(&self) -> &MetricConfig {
        &self.cfg
    }

    pub fn structure(&self) -> &Arc<AlmostComplexStructure> {
        &self.structure
    }

    pub fn mu_bound(&self) -> f64 {
        self.mu_a.bound().max(self.mu_b.bound())
    }

    /// Seeds whose solutions have value `point` and `x`-derivative `s·dir` at 0.
    pub fn seeds(&self, point: [Complex64; 2], dir: [Complex64; 2], s: f64) -> Result<(ComponentSeed, ComponentSeed)> {
        let zero = Complex64::new(0.0, 0.0);
        let (a, b) = (point[0], point[1]);
        let d2 = match_direction(s * dir[1], self.mu_b.eval(zero, a, b))?;
        let second = ComponentSeed { seed: Seed::with_jet(b, d2)?, gauge: None };
        let first = match self.domain {
            Domain::Bidisk => {
                let d1 = match_direction(s * dir[0], self.mu_a.eval(zero, b, a))?;
                ComponentSeed { seed: Seed::with_jet(a, d1)?, gauge: None }
            }
            Domain::PuncturedBidisk => {
                let (_, c) = branch_point(a)?;
                let (_, dphi) = gauge_map(Cover::Punctured, c, zero)?;
                let pulled = pullback_coefficients(&self.mu_a, Cover::Punctured, c)?;
                let dw = match_direction(s * dir[0] / dphi, pulled.eval(zero, b, zero))?;
                ComponentSeed {
                    seed: Seed::with_jet(zero, dw)?,
                    gauge: Some(Gauge { cover: Cover::Punctured, center: c }),
                }
            }
        };
        Ok((first, second))
    }

    /// Solves for a disk at scale `s`; `None` when no admissible disk was found.
    pub fn solve_at(&self, point: [Complex64; 2], dir: [Complex64; 2], s: f64) -> Result<Option<DiskMap>> {
        let (first, second) = match self.seeds(point, dir, s) {
            Ok(x) => x,
            Err(Error::InvalidInput(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        // A seed leaving the disk can overflow the covering map.
        let seed = match DiskMap::holomorphic(&self.ops, first, Some(second)) {
            Ok(s) => s,
            Err(Error::GridMismatch(m)) => return Err(Error::GridMismatch(m)),
            Err(_) => return Ok(None),
        };
        let cfg = SolveConfig { containment_margin: self.cfg.containment_margin, ..self.cfg.solve.clone() };
        match solve_coupled(&seed, &self.structure, &cfg) {
            Ok(map) => Ok(Some(map)),
            Err(Error::InvalidInput(m)) => Err(Error::InvalidInput(m)),
            Err(Error::GridMismatch(m)) => Err(Error::GridMismatch(m)),
            Err(_) => Ok(None),
        }
    }

    pub fn lower_bound(&self, point: [Complex64; 2], direction: [Complex64; 2]) -> Option<f64> {
        let k = &self.cfg.constants;
        match self.domain {
            Domain::Bidisk => lower_bound_bidisk(point, direction, k.c1, k.c2).ok(),
            Domain::PuncturedBidisk => {
                lower_bound_punctured(point, direction, k.k1, k.c2, self.cfg.validity_radius).ok()
            }
        }
    }

    pub fn estimate(&self, point: [Complex64; 2], direction: [Complex64; 2]) -> Result<MetricSample> {
        self.domain.check(point)?;
        let norm = (direction[0].norm_sqr() + direction[1].norm_sqr()).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::InvalidInput("direction must be nonzero".into()));
        }
        let dir = [direction[0] / norm, direction[1] / norm];
        let limit = 1.0 / standard_metric(self.domain, point, dir)?;
        let mut solves = 0usize;
        let mut max_residual = 0.0f64;
        let mut feasible = |s: f64| -> Result<bool> {
            solves += 1;
            Ok(match self.solve_at(point, dir, s)? {
                Some(m) => {
                    max_residual = max_residual.max(m.relative_residual());
                    true
                }
                None => false,
            })
        };
        let mut lo = 0.0;
        let mut hi = 1.25 * limit;
        let mut expansions = 0;
        while feasible(hi)? {
            lo = hi;
            hi *= 2.0;
            expansions += 1;
            if expansions > 8 {
                return Err(Error::Numerical("disk search did not find an infeasible scale".into()));
            }
        }
        for _ in 0..self.cfg.bisection_steps {
            let mid = 0.5 * (lo + hi);
            if feasible(mid)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        if !(lo > 0.0) {
            return Err(Error::OutOfRegime(format!(
                "no feasible disk at any tested radius (point {:?})",
                point
            )));
        }
        let upper = norm / lo;
        let lower = self.lower_bound(point, direction);
        let accepted = lower.is_none_or(|l| l <= upper * (1.0 + self.cfg.slack));
        Ok(MetricSample {
            domain: self.domain,
            point,
            direction,
            lower_bound: lower,
            upper_estimate: upper,
            grid_resolution: self.ops.grid().resolution(),
            feasible_scale: lo,
            solves,
            max_residual,
            mu_bound: self.mu_bound(),
            accepted,
        })
    }
}

/// Kobayashi-Royden upper estimate with a fresh estimator.
pub fn royden_estimate(
    ops: Arc<IntegralOperators>,
    structure: Arc<AlmostComplexStructure>,
    domain: Domain,
    point: [Complex64; 2],
    direction: [Complex64; 2],
    cfg: &MetricConfig,
) -> Result<MetricSample> {
    RoydenEstimator::new(ops, structure, domain, cfg.clone())?.estimate(point, direction)
}

/// Largest constants keeping each lower-bound term below the measured upper
/// estimates. A constant is `None` when no sample constrains it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub k1: Option<f64>,
    pub samples: usize,
    /// SHA-256 over the sample inputs and estimates.
    pub dataset_hash: String,
}

impl Calibration {
    pub fn constants(&self) -> Result<Constants> {
        match (self.c1, self.c2, self.k1) {
            (Some(c1), Some(c2), Some(k1)) => Ok(Constants { c1, c2, k1 }),
            _ => Err(Error::InsufficientCoverage {
                feasible: [self.c1, self.c2, self.k1].iter().filter(|x| x.is_some()).count(),
                requested: 3,
            }),
        }
    }
}

pub fn calibrate(samples: &[MetricSample], validity_radius: f64) -> Calibration {
    let min_ratio = |acc: Option<f64>, r: f64| Some(acc.map_or(r, |a: f64| a.min(r)));
    let (mut c1, mut c2, mut k1) = (None, None, None);
    let mut hasher = Sha256::new();
    for s in samples {
        hasher.update([match s.domain {
            Domain::Bidisk => 0u8,
            Domain::PuncturedBidisk => 1u8,
        }]);
        for z in s.point.iter().chain(s.direction.iter()) {
            hasher.update(z.re.to_bits().to_le_bytes());
            hasher.update(z.im.to_bits().to_le_bytes());
        }
        hasher.update(s.upper_estimate.to_bits().to_le_bytes());
        hasher.update((s.grid_resolution as u64).to_le_bytes());

        let (a, b) = (s.point[0], s.point[1]);
        let (xi, eta) = (s.direction[0].norm(), s.direction[1].norm());
        if eta > 0.0 {
            c2 = min_ratio(c2, s.upper_estimate * (1.0 - b.norm_sqr()) / eta);
        }
        if xi > 0.0 {
            match s.domain {
                Domain::Bidisk => c1 = min_ratio(c1, s.upper_estimate * (1.0 - a.norm_sqr()) / xi),
                Domain::PuncturedBidisk => {
                    let r = a.norm();
                    if r > 0.0 && r < validity_radius {
                        k1 = min_ratio(k1, s.upper_estimate * r * (1.0 / r).ln() / xi);
                    }
                }
            }
        }
    }
    Calibration { c1, c2, k1, samples: samples.len(), dataset_hash: hex::encode(hasher.finalize()) }
}

/// Pointwise metric integrated by [`path_length`].
pub enum PathMetric<'a> {
    /// The lower-bound formulas with the given constants.
    Lower { domain: Domain, constants: Constants, validity_radius: f64 },
    /// Disk-search upper estimates.
    Estimate(&'a RoydenEstimator),
}

impl PathMetric<'_> {
    fn domain(&self) -> Domain {
        match self {
            PathMetric::Lower { domain, .. } => *domain,
            PathMetric::Estimate(e) => e.domain(),
        }
    }

    pub fn eval(&self, point: [Complex64; 2], direction: [Complex64; 2]) -> Result<f64> {
        if direction[0].norm() == 0.0 && direction[1].norm() == 0.0 {
            return Ok(0.0);
        }
        match self {
            PathMetric::Lower { domain, constants, validity_radius } => match domain {
                Domain::Bidisk => lower_bound_bidisk(point, direction, constants.c1, constants.c2),
                Domain::PuncturedBidisk => {
                    lower_bound_punctured(point, direction, constants.k1, constants.c2, *validity_radius)
                }
            },
            PathMetric::Estimate(e) => Ok(e.estimate(point, direction)?.upper_estimate),
        }
    }
}

/// Midpoint-rule length of a sampled path.
pub fn path_length(path: &[[Complex64; 2]], metric: &PathMetric<'_>) -> Result<f64> {
    let domain = metric.domain();
    if let Some(p) = path.iter().find(|p| !domain.contains(**p)) {
        return Err(Error::InvalidInput(format!("path exits the domain at ({}, {})", p[0], p[1])));
    }
    let mut total = 0.0;
    for w in path.windows(2) {
        let mid = [(w[0][0] + w[1][0]) * 0.5, (w[0][1] + w[1][1]) * 0.5];
        let step = [w[1][0] - w[0][0], w[1][1] - w[0][1]];
        total += metric.eval(mid, step)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PartialLength {
    pub delta: f64,
    pub length: f64,
}

/// Lengths of the radial path `a(t) = t`, `z₂ = b`, from `t = start` down to
/// each truncation `δ`, sampled geometrically with `per_decade` steps.
pub fn radial_partial_lengths(
    metric: &PathMetric<'_>,
    start: f64,
    b: Complex64,
    deltas: &[f64],
    per_decade: usize,
) -> Result<Vec<PartialLength>> {
    if deltas.iter().any(|d| !(*d > 0.0 && *d < start)) || per_decade == 0 {
        return Err(Error::InvalidInput("truncations must lie in (0, start)".into()));
    }
    let mut sorted: Vec<f64> = deltas.to_vec();
    sorted.sort_by(|x, y| y.total_cmp(x));
    let mut out = Vec::with_capacity(sorted.len());
    let mut total = 0.0;
    let mut from = start;
    let point = |t: f64| [Complex64::new(t, 0.0), b];
    for &delta in &sorted {
        let decades = (from / delta).log10();
        let steps = ((decades * per_decade as f64).ceil() as usize).max(1);
        let ratio = (delta / from).powf(1.0 / steps as f64);
        let path: Vec<[Complex64; 2]> = (0..=steps)
            .map(|k| point(if k == steps { delta } else { from * ratio.powi(k as i32) }))
            .collect();
        total += path_length(&path, metric)?;
        out.push(PartialLength { delta, length: total });
        from = delta;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn mobius_swaps_center_and_origin() {
        let a = c(0.3, -0.4);
        assert!((mobius(a, c(0.0, 0.0)).unwrap() - a).norm() < 1e-15);
        assert!(mobius(a, a).unwrap().norm() < 1e-15);
        let z = c(0.2, 0.7);
        assert!((mobius(c(0.0, 0.0), z).unwrap() + z).norm() < 1e-15);
        assert!(mobius(c(1.0, 0.0), z).is_err());
    }

    #[test]
    fn covering_values() {
        assert!((covering_punctured(c(0.0, 0.0)).unwrap() - c((-1.0f64).exp(), 0.0)).norm() < 1e-15);
        assert!(covering_punctured(c(-1.0, 0.0)).is_err());
        let (b, cc) = branch_point(c((-1.0f64).exp(), 0.0)).unwrap();
        assert!((b + 1.0).norm() < 1e-15 && cc.norm() < 1e-15);
        let (b, cc) = branch_point(c((-2.0f64).exp(), 0.0)).unwrap();
        assert!((b + 2.0).norm() < 1e-15);
        assert!((cc + 1.0 / 3.0).norm() < 1e-15);
        assert!(branch_point(c(0.0, 0.0)).is_err());
    }

    #[test]
    fn log_branch_cut_is_half_open() {
        let b = log_branch(c(-0.5, 0.0)).unwrap();
        assert!((b.im + std::f64::consts::PI).abs() < 1e-15);
    }

    #[test]
    fn derivatives_match_difference_quotients() {
        let a = c(0.4, 0.1);
        let z = c(-0.2, 0.3);
        let h = 1e-6;
        let fd = (mobius(a, z + h).unwrap() - mobius(a, z - h).unwrap()) / (2.0 * h);
        assert!((fd - mobius_derivative(a, z).unwrap()).norm() < 1e-8);
        let fd = (covering_punctured(z + h).unwrap() - covering_punctured(z - h).unwrap()) / (2.0 * h);
        assert!((fd - covering_punctured_derivative(z).unwrap()).norm() < 1e-8);
    }

    #[test]
    fn disk_automorphism_moves_origin_and_keeps_circle() {
        let r = 0.8;
        let p = c(0.3, -0.2);
        let m = MobiusTransform::disk_automorphism(p, r).unwrap();
        assert!((m.apply(c(0.0, 0.0)) - p).norm() < 1e-15);
        for k in 0..16 {
            let z = Complex64::from_polar(r, k as f64 * 0.4);
            assert!((m.apply(z).norm() - r).abs() < 1e-13);
        }
        let s = MobiusTransform::scaling(c(0.5, 0.0));
        let both = m.compose(&s);
        let z = c(0.1, 0.2);
        assert!((both.apply(z) - m.apply(s.apply(z))).norm() < 1e-15);
        let h = 1e-6;
        let fd = (both.apply(z + h) - both.apply(z - h)) / (2.0 * h);
        assert!((fd - both.derivative(z)).norm() < 1e-8);
    }

    proptest! {
        #[test]
        fn mobius_preserves_the_circle(ar in 0.0f64..0.95, at in 0.0f64..6.3, t in 0.0f64..6.3) {
            let a = Complex64::from_polar(ar, at);
            let w = mobius(a, Complex64::from_polar(1.0, t)).unwrap();
            prop_assert!((w.norm() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn covering_inverts_branch_point(r in 1e-6f64..0.999, t in -std::f64::consts::PI..std::f64::consts::PI) {
            let a = Complex64::from_polar(r, t);
            let (_, cc) = branch_point(a).unwrap();
            prop_assert!(cc.norm() < 1.0);
            let back = covering_punctured(cc).unwrap();
            prop_assert!((back - a).norm() < 1e-12);
        }

        #[test]
        fn covering_lands_in_punctured_disk(r in 0.0f64..0.999, t in 0.0f64..6.3) {
            let p = covering_punctured(Complex64::from_polar(r, t)).unwrap();
            prop_assert!(p.norm() < 1.0 && p.norm() > 0.0);
        }
    }

    fn ops(n: usize) -> Arc<IntegralOperators> {
        Arc::new(IntegralOperators::new(crate::grid::DiskGrid::new(n, 1.0).unwrap()))
    }

    fn standard_estimator(domain: Domain) -> RoydenEstimator {
        RoydenEstimator::new(
            ops(16),
            Arc::new(AlmostComplexStructure::standard()),
            domain,
            MetricConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn lower_bound_examples() {
        let zero = c(0.0, 0.0);
        let one = c(1.0, 0.0);
        assert_eq!(lower_bound_bidisk([zero, zero], [one, zero], 1.0, 1.0).unwrap(), 1.0);
        for a in [0.5, 0.9, 0.99, 0.999] {
            let v = lower_bound_bidisk([c(a, 0.0), zero], [one, zero], 1.0, 1.0).unwrap();
            assert!((v - 1.0 / (1.0 - a * a)).abs() < 1e-12 * v);
        }
        let (p, d) = ([c(0.3, 0.1), c(-0.5, 0.2)], [c(0.7, 0.0), c(0.0, -1.2)]);
        let swapped = lower_bound_bidisk([p[1], p[0]], [d[1], d[0]], 2.0, 0.5).unwrap();
        assert_eq!(lower_bound_bidisk(p, d, 0.5, 2.0).unwrap(), swapped);
        assert!(lower_bound_bidisk([one, zero], [one, zero], 1.0, 1.0).is_err());
    }

    #[test]
    fn punctured_lower_bound_examples() {
        let zero = c(0.0, 0.0);
        let a = c((-std::f64::consts::E).exp(), 0.0);
        let v = lower_bound_punctured([a, zero], [c(1.0, 0.0), zero], 1.0, 1.0, 0.3).unwrap();
        let expected = (std::f64::consts::E - 1.0).exp();
        assert!((v - expected).abs() < 1e-12 * expected, "{v}");
        assert!(lower_bound_punctured([zero, zero], [c(1.0, 0.0), zero], 1.0, 1.0, 0.3).is_err());
        assert!(lower_bound_punctured([c(0.3, 0.0), zero], [c(1.0, 0.0), zero], 1.0, 1.0, 0.3).is_err());
        // Increasing as |a| decreases below 1/e.
        let mut prev = 0.0;
        for k in 1..40 {
            let r = (-1.0 - 0.5 * k as f64).exp();
            let v = lower_bound_punctured([c(r, 0.0), zero], [c(1.0, 0.0), zero], 1.0, 1.0, 0.3).unwrap();
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn constant_path_has_zero_length() {
        let m = PathMetric::Lower { domain: Domain::Bidisk, constants: Constants::default(), validity_radius: 0.3 };
        let p = [c(0.2, 0.1), c(0.0, 0.4)];
        assert_eq!(path_length(&[p; 10], &m).unwrap(), 0.0);
        let out = [p, [c(1.2, 0.0), c(0.0, 0.0)]];
        assert!(path_length(&out, &m).is_err());
    }

    #[test]
    fn radial_length_matches_antiderivative() {
        let m = PathMetric::Lower {
            domain: Domain::PuncturedBidisk,
            constants: Constants { c1: 1.0, c2: 1.0, k1: 1.0 },
            validity_radius: 0.3 + 1e-9,
        };
        let deltas = [1e-3, 1e-6, 1e-9];
        let exact = |d: f64| (1.0f64 / d).ln().ln() - (10.0f64 / 3.0).ln().ln();
        let coarse = radial_partial_lengths(&m, 0.3, c(0.0, 0.0), &deltas, 16).unwrap();
        let fine = radial_partial_lengths(&m, 0.3, c(0.0, 0.0), &deltas, 32).unwrap();
        for (p, q) in coarse.iter().zip(&fine) {
            let e = exact(p.delta);
            assert!((p.length - e).abs() < 2e-3 * e, "{} vs {e}", p.length);
            assert!((q.length - e).abs() < 5e-4 * e, "{} vs {e}", q.length);
            assert!((p.length - q.length).abs() < 1e-2 * q.length);
        }
        assert!(coarse.windows(2).all(|w| w[1].length > w[0].length));
    }

    #[test]
    fn corrected_chain_rule_matches_lifted_derivative() {
        for a in [(-1.0f64).exp(), (-2.0f64).exp(), 0.05, 0.6] {
            for (k, rho) in [(c(0.02, 0.01), 0.5), (c(-0.01, 0.03), 0.8)] {
                let a = c(a, 0.0);
                let u = |z: Complex64| a + k * z + c(0.005, 0.0) * z * z;
                let dw = lifted_derivative_at_origin(u, rho, 64).unwrap();
                let predicted = chain_rule_factor(a).unwrap() * k;
                assert!((dw - predicted).norm() < 1e-10 * predicted.norm(), "{dw} vs {predicted}");
            }
        }
        // At a = e^{-2} the two forms differ by ((1 - b)/(1 + b))² = 9.
        let a = c((-2.0f64).exp(), 0.0);
        let ratio = chain_rule_factor_plus(a).unwrap() / chain_rule_factor(a).unwrap();
        assert!((ratio - c(9.0, 0.0)).norm() < 1e-12);
        assert!(!chain_rule_factor_plus(c((-1.0f64).exp(), 0.0)).unwrap().is_finite());
    }

    #[test]
    fn standard_bidisk_estimate_matches_poincare() {
        let est = standard_estimator(Domain::Bidisk);
        for a in [0.0, 0.3, 0.5, 0.7] {
            let s = est.estimate([c(a, 0.0), c(0.0, 0.0)], [c(1.0, 0.0), c(0.0, 0.0)]).unwrap();
            let exact = 1.0 / (1.0 - a * a);
            assert!((s.upper_estimate / exact - 1.0).abs() < 0.05, "a = {a}: {}", s.upper_estimate);
            assert!(s.upper_estimate >= exact * (1.0 - 1e-9));
            assert!(s.accepted);
        }
    }

    #[test]
    fn standard_punctured_estimate_matches_density() {
        let est = standard_estimator(Domain::PuncturedBidisk);
        for a in [c(0.1, 0.0), c(0.0, -0.01), c(0.5, 0.2)] {
            let s = est.estimate([a, c(0.1, 0.0)], [c(1.0, 0.0), c(0.0, 0.0)]).unwrap();
            let exact = punctured_disk_density(a).unwrap();
            assert!((s.upper_estimate / exact - 1.0).abs() < 0.05, "a = {a}: {} vs {exact}", s.upper_estimate);
        }
    }

    #[test]
    fn estimate_is_homogeneous() {
        let est = standard_estimator(Domain::Bidisk);
        let p = [c(0.2, -0.1), c(0.3, 0.3)];
        let d = [c(0.6, 0.2), c(-0.3, 0.5)];
        let base = est.estimate(p, d).unwrap().upper_estimate;
        for t in [0.01, 3.0, 250.0] {
            let scaled = est.estimate(p, [d[0] * t, d[1] * t]).unwrap().upper_estimate;
            assert!((scaled - t * base).abs() < 1e-12 * t * base);
        }
        assert!(est.estimate(p, [c(0.0, 0.0); 2]).is_err());
    }

    #[test]
    fn perturbed_estimate_is_close_to_standard() {
        let j = AlmostComplexStructure::from_toml(
            r#"
            description = "small test perturbation"
            epsilon = 0.05
            [[a]]
            row = 0
            col = 1
            coeff = 1.0
            powers = [0, 0, 1, 0]
            [[b]]
            row = 1
            col = 0
            coeff = 1.0
            powers = [1, 0, 0, 0]
            "#,
        )
        .unwrap();
        let est = RoydenEstimator::new(ops(16), Arc::new(j), Domain::Bidisk, MetricConfig::default()).unwrap();
        let s = est.estimate([c(0.2, 0.0), c(0.1, 0.0)], [c(1.0, 0.0), c(0.0, 0.0)]).unwrap();
        let exact = 1.0 / (1.0 - 0.04);
        assert!((s.upper_estimate / exact - 1.0).abs() < 0.25, "{}", s.upper_estimate);
        assert!(s.max_residual < 1e-6);
    }

    #[test]
    fn calibration_recovers_standard_constants() {
        let bi = standard_estimator(Domain::Bidisk);
        let pu = standard_estimator(Domain::PuncturedBidisk);
        let mut samples = Vec::new();
        for a in [0.0, 0.4] {
            samples.push(bi.estimate([c(a, 0.0), c(0.2, 0.0)], [c(1.0, 0.0), c(0.0, 0.0)]).unwrap());
            samples.push(bi.estimate([c(0.1, 0.0), c(a, 0.0)], [c(0.0, 0.0), c(1.0, 0.0)]).unwrap());
        }
        for a in [0.01, 0.2] {
            samples.push(pu.estimate([c(a, 0.0), c(0.0, 0.0)], [c(1.0, 0.0), c(0.0, 0.0)]).unwrap());
        }
        let cal = calibrate(&samples, 0.3);
        let k = cal.constants().unwrap();
        assert!((k.c1 - 1.0).abs() < 0.02 && (k.c2 - 1.0).abs() < 0.02, "{k:?}");
        assert!((k.k1 - 0.5).abs() < 0.01, "{k:?}");
        assert_eq!(cal.dataset_hash, calibrate(&samples, 0.3).dataset_hash);
        assert_eq!(cal.dataset_hash.len(), 64);
        assert!(calibrate(&samples[..1], 0.3).constants().is_err());
        let cfg = MetricConfig { constants: k, ..MetricConfig::default() };
        let checked = RoydenEstimator::new(ops(16), bi.structure().clone(), Domain::Bidisk, cfg).unwrap();
        for s in &samples[..4] {
            let again = checked.estimate(s.point, s.direction).unwrap();
            assert!(again.lower_bound.unwrap() <= again.upper_estimate * 1.05);
        }
    }
}
