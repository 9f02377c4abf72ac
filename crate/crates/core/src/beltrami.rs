//! Solver for the generalized Beltrami equation
//! `∂̄u - μ¹(z, v, u) ∂u - μ²(z, v, u) conj(∂u) = 0` on a disk.
//!
//! The unknown is written `u = h + T_CG ω` with `ω = ∂̄u`, so `∂u = h' + T_CZ ω`.
//! Each step sets `ω ← μ¹ ∂u + μ² conj(∂u)` and re-anchors the holomorphic
//! part `h = seed - (T_CG ω)(0) - (T_CZ ω)(0) z`, which keeps `u(0)` and
//! `∂u(0)` equal to the seed's. The residual `ω - μ¹∂u - μ²conj(∂u)` is exact
//! for the represented function (no finite differences), so it can be driven
//! to rounding level.

use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::almost_complex::{pullback_coefficients, AlmostComplexStructure, BeltramiCoefficients, Component};
use crate::error::{Error, Result};
use crate::grid::{finite_diff_dbar, finite_diff_dz, DiskGrid, GridFunction};
use crate::hyperbolic::{gauge_map, Cover, MobiusTransform};
use crate::integral_ops::{IntegralOperators, ModalField};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Residuals below this (relative) are at rounding level and end the iteration.
const FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveConfig {
    pub max_iterations: usize,
    /// Target for the relative residual `‖R‖ / ‖∂u‖`.
    pub tolerance: f64,
    pub cutoff_inner_radius: f64,
    /// Largest coefficient bound `sup |μ¹| + |μ²|` the solver accepts.
    pub mu_bound_limit: f64,
    /// Solutions must satisfy `sup |u| < 1 - containment_margin`.
    pub containment_margin: f64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            max_iterations: 60,
            tolerance: 1e-10,
            cutoff_inner_radius: 0.75,
            mu_bound_limit: 0.2,
            containment_margin: 0.0,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff_inner_radius > 0.0 && self.cutoff_inner_radius < 1.0) {
            return Err(Error::InvalidInput(format!(
                "cutoff_inner_radius must lie in (0, 1), got {}",
                self.cutoff_inner_radius
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidInput(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if !(self.mu_bound_limit > 0.0 && self.mu_bound_limit < 1.0) {
            return Err(Error::InvalidInput(format!(
                "mu_bound_limit must lie in (0, 1), got {}",
                self.mu_bound_limit
            )));
        }
        if !(0.0..1.0).contains(&self.containment_margin) {
            return Err(Error::InvalidInput(format!(
                "containment_margin must lie in [0, 1), got {}",
                self.containment_margin
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidInput("max_iterations must be positive".into()));
        }
        Ok(())
    }
}

/// Holomorphic starting map; its value and derivative at 0 are the jet the
/// solution keeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Seed {
    /// `Σ c_k z^k`.
    Polynomial { coeffs: Vec<Complex64> },
    /// `(c + s z)/(1 + conj(c) s z)`: value `c`, derivative `s(1 - |c|²)` at 0.
    Mobius { center: Complex64, scale: Complex64 },
}

impl Seed {
    pub fn polynomial(coeffs: Vec<Complex64>) -> Self {
        Seed::Polynomial { coeffs }
    }

    pub fn affine(value: Complex64, derivative: Complex64) -> Self {
        Seed::Polynomial { coeffs: vec![value, derivative] }
    }

    pub fn constant(value: Complex64) -> Self {
        Seed::Polynomial { coeffs: vec![value] }
    }

    pub fn mobius(center: Complex64, scale: Complex64) -> Result<Self> {
        if !(center.norm() < 1.0) || !(center.norm() * scale.norm() < 1.0) || !scale.is_finite() {
            return Err(Error::InvalidInput(format!(
                "Möbius seed needs |c| < 1 and |c s| < 1, got c = {center}, s = {scale}"
            )));
        }
        Ok(Seed::Mobius { center, scale })
    }

    /// The disk automorphism-type seed with the given value and derivative at 0.
    pub fn with_jet(value: Complex64, derivative: Complex64) -> Result<Self> {
        let d = 1.0 - value.norm_sqr();
        if !(d > 0.0) {
            return Err(Error::InvalidInput(format!("seed value {value} not in the open disk")));
        }
        Self::mobius(value, derivative / d)
    }

    pub fn value(&self, z: Complex64) -> Complex64 {
        match self {
            Seed::Polynomial { coeffs } => coeffs.iter().rev().fold(ZERO, |acc, c| acc * z + c),
            Seed::Mobius { center, scale } => (center + scale * z) / (1.0 + center.conj() * scale * z),
        }
    }

    pub fn derivative(&self, z: Complex64) -> Complex64 {
        match self {
            Seed::Polynomial { coeffs } => coeffs
                .iter()
                .enumerate()
                .skip(1)
                .rev()
                .fold(ZERO, |acc, (k, c)| acc * z + c * k as f64),
            Seed::Mobius { center, scale } => {
                let den = 1.0 + center.conj() * scale * z;
                scale * (1.0 - center.norm_sqr()) / (den * den)
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Seed::Polynomial { coeffs } => coeffs.iter().all(|c| c.is_finite()),
            Seed::Mobius { center, scale } => center.is_finite() && scale.is_finite(),
        }
    }
}

/// The target coordinate is `u = (cover ∘ φ_center)(w)` where `w` is the
/// function actually solved for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gauge {
    pub cover: Cover,
    pub center: Complex64,
}

impl Gauge {
    fn apply(&self, w: Complex64) -> Result<(Complex64, Complex64)> {
        gauge_map(self.cover, self.center, w)
    }
}

/// Value and Wirtinger derivatives at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jet {
    pub value: Complex64,
    pub dz: Complex64,
    pub dzbar: Complex64,
}

impl Jet {
    /// Derivative along `∂/∂x`.
    pub fn dx(&self) -> Complex64 {
        self.dz + self.dzbar
    }

    /// Operator norm of the real differential, `|∂u| + |∂̄u|`.
    pub fn operator_norm(&self) -> f64 {
        self.dz.norm() + self.dzbar.norm()
    }

    fn through_gauge(self, gauge: Option<&Gauge>) -> Result<Jet> {
        match gauge {
            None => Ok(self),
            Some(g) => {
                let (u, d) = g.apply(self.value)?;
                Ok(Jet { value: u, dz: d * self.dz, dzbar: d * self.dzbar })
            }
        }
    }
}

/// Representation `w = seed - shift.0 - shift.1 z + T_CG ω`, optionally
/// precomposed with a Möbius map and pushed through a gauge.
#[derive(Debug, Clone)]
pub struct ComponentMap {
    ops: Arc<IntegralOperators>,
    seed: Seed,
    shift: (Complex64, Complex64),
    omega: Option<(GridFunction, ModalField)>,
    gauge: Option<Gauge>,
    pre: Option<MobiusTransform>,
    /// Samples of the solved-for function and its derivatives at the nodes.
    unknown: Samples,
    target: Samples,
    origin_unknown: Jet,
    origin_target: Jet,
    /// Jet at 0 of the representation before any precomposition.
    base_origin: Jet,
}

#[derive(Debug, Clone)]
struct Samples {
    value: GridFunction,
    dz: GridFunction,
    dzbar: GridFunction,
}

impl ComponentMap {
    fn holomorphic(ops: &Arc<IntegralOperators>, seed: Seed, gauge: Option<Gauge>) -> Result<Self> {
        let grid = ops.grid();
        let value = GridFunction::sample(grid, |z| seed.value(z))?;
        let dz = GridFunction::sample(grid, |z| seed.derivative(z))?;
        let dzbar = GridFunction::zeros(grid.clone());
        let origin = Jet { value: seed.value(ZERO), dz: seed.derivative(ZERO), dzbar: ZERO };
        Self::assemble(ops, seed, (ZERO, ZERO), None, gauge, Samples { value, dz, dzbar }, origin)
    }

    fn assemble(
        ops: &Arc<IntegralOperators>,
        seed: Seed,
        shift: (Complex64, Complex64),
        omega: Option<(GridFunction, ModalField)>,
        gauge: Option<Gauge>,
        unknown: Samples,
        origin_unknown: Jet,
    ) -> Result<Self> {
        let target = match &gauge {
            None => unknown.clone(),
            Some(g) => {
                let grid = ops.grid();
                let n = grid.len();
                let (mut val, mut dz, mut dzbar) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
                for i in 0..n {
                    let (u, d) = g.apply(unknown.value.values()[i])?;
                    val.push(u);
                    dz.push(d * unknown.dz.values()[i]);
                    dzbar.push(d * unknown.dzbar.values()[i]);
                }
                Samples {
                    value: GridFunction::new(grid.clone(), val)?,
                    dz: GridFunction::new(grid.clone(), dz)?,
                    dzbar: GridFunction::new(grid.clone(), dzbar)?,
                }
            }
        };
        let origin_target = origin_unknown.through_gauge(gauge.as_ref())?;
        Ok(ComponentMap {
            ops: ops.clone(),
            seed,
            shift,
            omega,
            gauge,
            pre: None,
            unknown,
            target,
            origin_unknown,
            origin_target,
            base_origin: origin_unknown,
        })
    }

    pub fn seed(&self) -> &Seed {
        &self.seed
    }

    pub fn gauge(&self) -> Option<&Gauge> {
        self.gauge.as_ref()
    }

    /// Function values in target coordinates.
    pub fn values(&self) -> &GridFunction {
        &self.target.value
    }

    pub fn dz(&self) -> &GridFunction {
        &self.target.dz
    }

    pub fn dzbar(&self) -> &GridFunction {
        &self.target.dzbar
    }

    /// Samples of the solved-for function (differs from the target only under a gauge).
    pub fn unknown_values(&self) -> &GridFunction {
        &self.unknown.value
    }

    pub fn unknown_dz(&self) -> &GridFunction {
        &self.unknown.dz
    }

    pub fn unknown_dzbar(&self) -> &GridFunction {
        &self.unknown.dzbar
    }

    /// Jet at 0 in target coordinates.
    pub fn origin(&self) -> Jet {
        self.origin_target
    }

    pub fn origin_unknown(&self) -> Jet {
        self.origin_unknown
    }

    fn base_jet(&self, p: Complex64) -> Result<Jet> {
        let mut jet = Jet {
            value: self.seed.value(p) - self.shift.0 - self.shift.1 * p,
            dz: self.seed.derivative(p) - self.shift.1,
            dzbar: ZERO,
        };
        if let Some((_, field)) = &self.omega {
            jet.value += self.ops.cauchy_green_at(field, p)?;
            jet.dz += self.ops.calderon_zygmund_at(field, p)?;
            jet.dzbar = self.ops.interpolate_at(field, p)?;
        }
        Ok(jet)
    }

    /// Jet of the solved-for function at an arbitrary point of the disk.
    pub fn unknown_jet_at(&self, z: Complex64) -> Result<Jet> {
        match &self.pre {
            None => self.base_jet(z),
            Some(m) => {
                let p = m.apply(z);
                let d = m.derivative(z);
                let j = self.base_jet(p)?;
                Ok(Jet { value: j.value, dz: j.dz * d, dzbar: j.dzbar * d.conj() })
            }
        }
    }

    /// Jet in target coordinates at an arbitrary point of the disk.
    pub fn jet_at(&self, z: Complex64) -> Result<Jet> {
        self.unknown_jet_at(z)?.through_gauge(self.gauge.as_ref())
    }

    pub fn value_at(&self, z: Complex64) -> Result<Complex64> {
        Ok(self.jet_at(z)?.value)
    }

    /// Solved-for values on the boundary circle of the grid disk.
    pub fn unknown_boundary(&self) -> Result<Vec<Complex64>> {
        let grid = self.ops.grid();
        let r = grid.radius();
        if self.pre.is_none() {
            let m = grid.angles();
            let mut out: Vec<Complex64> = (0..m)
                .map(|k| {
                    let z = Complex64::from_polar(r, grid.angle(k));
                    self.seed.value(z) - self.shift.0 - self.shift.1 * z
                })
                .collect();
            if let Some((_, field)) = &self.omega {
                for (o, t) in out.iter_mut().zip(self.ops.cauchy_green_ring(field, r)?) {
                    *o += t;
                }
            }
            Ok(out)
        } else {
            (0..grid.angles())
                .map(|k| Ok(self.unknown_jet_at(Complex64::from_polar(r, grid.angle(k)))?.value))
                .collect()
        }
    }

    /// `sup |w|` over the nodes and the boundary circle, `w` the solved-for function.
    pub fn sup_modulus(&self) -> Result<f64> {
        let nodes = self.unknown.value.sup_norm();
        let ring = self.unknown_boundary()?.iter().fold(0.0f64, |m, w| m.max(w.norm()));
        Ok(nodes.max(ring))
    }

    fn precompose(&self, m: &MobiusTransform) -> Result<Self> {
        let total = match &self.pre {
            None => *m,
            Some(p) => p.compose(m),
        };
        let mut out = self.clone();
        out.pre = Some(total);
        let grid = self.ops.grid().clone();
        let n = grid.len();
        let (mut val, mut dz, mut dzbar) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for &z in grid.nodes() {
            let j = out.unknown_jet_at(z)?;
            val.push(j.value);
            dz.push(j.dz);
            dzbar.push(j.dzbar);
        }
        let unknown = Samples {
            value: GridFunction::new(grid.clone(), val)?,
            dz: GridFunction::new(grid.clone(), dz)?,
            dzbar: GridFunction::new(grid, dzbar)?,
        };
        let origin = if total.apply(ZERO).norm() == 0.0 {
            let d = total.derivative(ZERO);
            let j = self.base_origin;
            Jet { value: j.value, dz: j.dz * d, dzbar: j.dzbar * d.conj() }
        } else {
            out.unknown_jet_at(ZERO)?
        };
        let rebuilt = Self::assemble(&self.ops, self.seed.clone(), self.shift, self.omega.clone(), self.gauge, unknown, origin)?;
        Ok(ComponentMap { pre: Some(total), base_origin: self.base_origin, ..rebuilt })
    }

    fn c1_norm(&self) -> f64 {
        let s = &self.target;
        let d = s
            .dz
            .values()
            .iter()
            .zip(s.dzbar.values())
            .fold(0.0f64, |m, (a, b)| m.max(a.norm() + b.norm()));
        s.value.sup_norm() + d
    }
}

/// A sampled map `Δ → ℂ²` (or `ℂ` when the second component is absent),
/// with the residual history of the solve that produced it.
#[derive(Debug, Clone)]
pub struct DiskMap {
    first: ComponentMap,
    second: Option<ComponentMap>,
    residual: f64,
    relative_residual: f64,
    history: Vec<f64>,
    contraction: f64,
    mu_bound: f64,
    parameter_c1: Option<f64>,
}

/// Seed data for one component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSeed {
    pub seed: Seed,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gauge: Option<Gauge>,
}

impl From<Seed> for ComponentSeed {
    fn from(seed: Seed) -> Self {
        ComponentSeed { seed, gauge: None }
    }
}

impl DiskMap {
    /// The map given by holomorphic seeds, without solving anything.
    pub fn holomorphic(
        ops: &Arc<IntegralOperators>,
        first: impl Into<ComponentSeed>,
        second: Option<ComponentSeed>,
    ) -> Result<Self> {
        let first = first.into();
        if !first.seed.is_finite() || second.as_ref().is_some_and(|s| !s.seed.is_finite()) {
            return Err(Error::InvalidInput("seed has non-finite coefficients".into()));
        }
        let a = ComponentMap::holomorphic(ops, first.seed, first.gauge)?;
        let b = match second {
            Some(s) => Some(ComponentMap::holomorphic(ops, s.seed, s.gauge)?),
            None => None,
        };
        let parameter_c1 = b.as_ref().map(ComponentMap::c1_norm);
        Ok(DiskMap {
            first: a,
            second: b,
            residual: 0.0,
            relative_residual: 0.0,
            history: Vec::new(),
            contraction: 0.0,
            mu_bound: 0.0,
            parameter_c1,
        })
    }

    /// Shorthand for an ungauged pair of seeds.
    pub fn from_seeds(ops: &Arc<IntegralOperators>, first: Seed, second: Option<Seed>) -> Result<Self> {
        Self::holomorphic(ops, first, second.map(ComponentSeed::from))
    }

    pub fn grid(&self) -> &Arc<DiskGrid> {
        self.first.ops.grid()
    }

    pub fn ops(&self) -> &Arc<IntegralOperators> {
        &self.first.ops
    }

    pub fn resolution(&self) -> usize {
        self.grid().resolution()
    }

    pub fn first(&self) -> &ComponentMap {
        &self.first
    }

    pub fn second(&self) -> Option<&ComponentMap> {
        self.second.as_ref()
    }

    pub fn component(&self, c: Component) -> Option<&ComponentMap> {
        match c {
            Component::First => Some(&self.first),
            Component::Second => self.second.as_ref(),
        }
    }

    pub fn u(&self) -> &GridFunction {
        self.first.values()
    }

    pub fn v(&self) -> Option<&GridFunction> {
        self.second.as_ref().map(ComponentMap::values)
    }

    /// `∂u` at the nodes.
    pub fn du(&self) -> &GridFunction {
        self.first.dz()
    }

    /// `∂̄u` at the nodes.
    pub fn dbar_u(&self) -> &GridFunction {
        self.first.dzbar()
    }

    /// Absolute discrete L² norm of the Beltrami residual.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    /// Residual divided by the L² norm of `∂u` (joint over components).
    pub fn relative_residual(&self) -> f64 {
        self.relative_residual
    }

    /// Relative residual per iteration.
    pub fn history(&self) -> &[f64] {
        &self.history
    }

    pub fn iterations(&self) -> usize {
        self.history.len()
    }

    /// Largest ratio of consecutive residuals above the rounding floor.
    pub fn contraction(&self) -> f64 {
        self.contraction
    }

    pub fn mu_bound(&self) -> f64 {
        self.mu_bound
    }

    /// `C¹` norm of the second component, the parameter of the first equation.
    pub fn parameter_c1(&self) -> Option<f64> {
        self.parameter_c1
    }

    /// Jets of both components at an arbitrary point, target coordinates.
    pub fn jet_at(&self, z: Complex64) -> Result<(Jet, Option<Jet>)> {
        let a = self.first.jet_at(z)?;
        let b = match &self.second {
            Some(s) => Some(s.jet_at(z)?),
            None => None,
        };
        Ok((a, b))
    }

    pub fn value_at(&self, z: Complex64) -> Result<(Complex64, Complex64)> {
        let (a, b) = self.jet_at(z)?;
        Ok((a.value, b.map_or(ZERO, |j| j.value)))
    }

    /// `max` over components of the operator norm of the differential at 0.
    pub fn derivative_norm_at_origin(&self) -> f64 {
        let a = self.first.origin().operator_norm();
        self.second.as_ref().map_or(a, |s| a.max(s.origin().operator_norm()))
    }

    /// `f ∘ m`, for a Möbius map sending the grid disk into itself.
    pub fn precompose(&self, m: &MobiusTransform) -> Result<DiskMap> {
        let r = self.grid().radius();
        for k in 0..64 {
            let z = Complex64::from_polar(r, std::f64::consts::TAU * k as f64 / 64.0);
            if m.apply(z).norm() > r * (1.0 + 1e-12) {
                return Err(Error::InvalidInput("precomposition leaves the grid disk".into()));
            }
        }
        let first = self.first.precompose(m)?;
        let second = match &self.second {
            Some(s) => Some(s.precompose(m)?),
            None => None,
        };
        Ok(DiskMap {
            first,
            second,
            ..self.clone()
        })
    }

    /// Recomputes the joint residual from the stored samples and the given
    /// coefficients, which must be the ones the solve used.
    pub fn recompute_residual(
        &self,
        mu_first: &BeltramiCoefficients,
        mu_second: Option<&BeltramiCoefficients>,
    ) -> Result<(f64, f64)> {
        let param_first = match &self.second {
            Some(s) => s.values().clone(),
            None => GridFunction::zeros(self.grid().clone()),
        };
        let mut parts = vec![(&self.first, param_first, mu_first)];
        if let (Some(s), Some(mu)) = (&self.second, mu_second) {
            parts.push((s, self.first.values().clone(), mu));
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for (c, param, mu) in parts {
            let r = representation_residual(c.unknown_values(), c.unknown_dz(), c.unknown_dzbar(), &param, mu)?;
            num += r.norm_l2().powi(2);
            den += c.unknown_dz().norm_l2().powi(2);
        }
        Ok(relative(num.sqrt(), den.sqrt()))
    }
}

fn relative(abs: f64, scale: f64) -> (f64, f64) {
    if scale > 0.0 {
        (abs, abs / scale)
    } else {
        (abs, abs)
    }
}

/// `∂̄w - μ¹∂w - μ²conj(∂w)` from given derivative samples, with the
/// coefficients evaluated at `(z, param(z), w(z))`.
pub fn representation_residual(
    w: &GridFunction,
    dz: &GridFunction,
    dzbar: &GridFunction,
    param: &GridFunction,
    mu: &BeltramiCoefficients,
) -> Result<GridFunction> {
    w.check_same_grid(dz)?;
    w.check_same_grid(dzbar)?;
    w.check_same_grid(param)?;
    let grid = w.grid().clone();
    let values = grid
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let (m1, m2) = mu.eval(z, param.values()[i], w.values()[i]);
            let d = dz.values()[i];
            dzbar.values()[i] - m1 * d - m2 * d.conj()
        })
        .collect();
    GridFunction::new(grid, values)
}

/// The Beltrami residual of `u` computed with finite-difference derivatives.
/// The outer ring uses one-sided stencils; measure with `norm_l2_interior`.
pub fn residual(u: &GridFunction, v: &GridFunction, mu: &BeltramiCoefficients) -> Result<GridFunction> {
    u.check_same_grid(v)?;
    let dz = finite_diff_dz(u)?;
    let dzbar = finite_diff_dbar(u)?;
    representation_residual(u, &dz, &dzbar, v, mu)
}

/// Smooth radial cutoff, `1` on `|z| ≤ inner·R` and `0` at `|z| = R`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cutoff {
    inner: f64,
    radius: f64,
}

fn bump(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else {
        (-1.0 / t).exp()
    }
}

fn bump_derivative(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else {
        (-1.0 / t).exp() / (t * t)
    }
}

impl Cutoff {
    pub fn new(inner: f64, radius: f64) -> Result<Self> {
        if !(inner > 0.0 && inner < 1.0) || !(radius > 0.0) {
            return Err(Error::InvalidInput(format!("cutoff needs 0 < inner < 1, got {inner}")));
        }
        Ok(Cutoff { inner, radius })
    }

    fn t(&self, r: f64) -> f64 {
        (self.radius - r) / (self.radius * (1.0 - self.inner))
    }

    /// `ρ(r) = b(t)/(b(t) + b(1-t))`, `b(t) = exp(-1/t)`.
    pub fn value(&self, r: f64) -> f64 {
        let t = self.t(r);
        if t >= 1.0 {
            return 1.0;
        }
        if t <= 0.0 {
            return 0.0;
        }
        let (a, b) = (bump(t), bump(1.0 - t));
        a / (a + b)
    }

    /// `dρ/dr`.
    pub fn radial_derivative(&self, r: f64) -> f64 {
        let t = self.t(r);
        if t >= 1.0 || t <= 0.0 {
            return 0.0;
        }
        let (a, b) = (bump(t), bump(1.0 - t));
        let (da, db) = (bump_derivative(t), -bump_derivative(1.0 - t));
        let dt = (da * (a + b) - a * (da + db)) / ((a + b) * (a + b));
        dt * (-1.0 / (self.radius * (1.0 - self.inner)))
    }

    /// `∂ρ = ρ'(r) conj(z)/(2r)`.
    pub fn dz(&self, z: Complex64) -> Complex64 {
        let r = z.norm();
        if r == 0.0 {
            return ZERO;
        }
        z.conj() * (self.radial_derivative(r) / (2.0 * r))
    }

    /// `∂̄ρ = ρ'(r) z/(2r)`.
    pub fn dzbar(&self, z: Complex64) -> Complex64 {
        self.dz(z).conj()
    }
}

/// Samples the cutoff on `grid`, scaled to the grid radius.
pub fn build_cutoff(grid: &Arc<DiskGrid>, inner_radius: f64) -> Result<GridFunction> {
    let c = Cutoff::new(inner_radius, grid.radius())?;
    GridFunction::sample(grid, |z| Complex64::new(c.value(z.norm()), 0.0))
}

/// How well a solved component satisfies the cutoff identities: `ρu` is
/// reproduced by `T_CG` of its `∂̄`, and that `∂̄` solves the cutoff equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CutoffDefect {
    /// `‖T_CG ∂̄(ρu) - ρu‖ / ‖ρu‖`.
    pub representation: f64,
    /// `‖[Id - μ¹T_CZ - μ²σT_CZ]ψ - (u g₁ + ū g₂)‖ / ‖ψ‖`, `ψ = ∂̄(ρu)`.
    pub equation: f64,
}

pub fn cutoff_defect(
    c: &ComponentMap,
    param: &GridFunction,
    mu: &BeltramiCoefficients,
    inner_radius: f64,
) -> Result<CutoffDefect> {
    let ops = &c.ops;
    let grid = ops.grid().clone();
    let cut = Cutoff::new(inner_radius, grid.radius())?;
    let h = c.unknown_values().values();
    let om = c.unknown_dzbar().values();
    let nodes = grid.nodes();
    let rho: Vec<f64> = nodes.iter().map(|z| cut.value(z.norm())).collect();
    let psi: Vec<Complex64> = (0..grid.len())
        .map(|i| rho[i] * om[i] + h[i] * cut.dzbar(nodes[i]))
        .collect();
    let psi = GridFunction::new(grid.clone(), psi)?;
    let rho_h = GridFunction::new(grid.clone(), (0..grid.len()).map(|i| rho[i] * h[i]).collect())?;
    let back = ops.cauchy_green(&psi)?;
    let representation = (&back - &rho_h).norm_l2() / rho_h.norm_l2().max(1e-300);
    let s = ops.calderon_zygmund(&psi)?;
    let diff: Vec<Complex64> = (0..grid.len())
        .map(|i| {
            let z = nodes[i];
            let (m1, m2) = mu.eval(z, param.values()[i], h[i]);
            let lhs = psi.values()[i] - m1 * s.values()[i] - m2 * s.values()[i].conj();
            let g1 = cut.dzbar(z) - m1 * cut.dz(z);
            let g2 = -m2 * cut.dz(z).conj();
            lhs - (h[i] * g1 + h[i].conj() * g2)
        })
        .collect();
    let equation = GridFunction::new(grid, diff)?.norm_l2() / psi.norm_l2().max(1e-300);
    Ok(CutoffDefect { representation, equation })
}

/// One component during the iteration.
struct Unknown<'a> {
    seed: &'a Seed,
    gauge: Option<Gauge>,
    mu: BeltramiCoefficients,
    omega: GridFunction,
}

struct Represented {
    field: ModalField,
    shift: (Complex64, Complex64),
    value: Vec<Complex64>,
    dz: Vec<Complex64>,
}

fn represent(ops: &IntegralOperators, seed: &Seed, omega: &GridFunction) -> Result<Represented> {
    let field = ops.modal(omega)?;
    let t = ops.cauchy_green_modal(&field);
    let s = ops.calderon_zygmund_modal(&field, omega);
    let shift = (ops.cauchy_green_origin(&field), ops.calderon_zygmund_origin(&field));
    let nodes = ops.grid().nodes();
    let value = nodes
        .iter()
        .zip(t.values())
        .map(|(&z, tv)| seed.value(z) - shift.0 - shift.1 * z + tv)
        .collect();
    let dz = nodes
        .iter()
        .zip(s.values())
        .map(|(&z, sv)| seed.derivative(z) - shift.1 + sv)
        .collect();
    Ok(Represented { field, shift, value, dz })
}

fn target_values(rep: &Represented, gauge: Option<&Gauge>) -> Result<Vec<Complex64>> {
    match gauge {
        None => Ok(rep.value.clone()),
        Some(g) => rep.value.iter().map(|w| Ok(g.apply(*w)?.0)).collect(),
    }
}

/// `(μ¹∂w + μ²conj(∂w), ∂w)` at every node.
fn update(grid: &DiskGrid, rep: &Represented, param: &[Complex64], mu: &BeltramiCoefficients) -> Vec<Complex64> {
    grid.nodes()
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let (m1, m2) = mu.eval(z, param[i], rep.value[i]);
            let d = rep.dz[i];
            m1 * d + m2 * d.conj()
        })
        .collect()
}

fn finish_component(
    ops: &Arc<IntegralOperators>,
    unknown: Unknown<'_>,
    rep: Represented,
    param_origin: Complex64,
) -> Result<ComponentMap> {
    let grid = ops.grid().clone();
    let origin_value = unknown.seed.value(ZERO) - rep.shift.0 + ops.cauchy_green_origin(&rep.field);
    let origin_dz = unknown.seed.derivative(ZERO);
    // At a solution ∂̄w(0) is given by the equation itself.
    let (m1, m2) = unknown.mu.eval(ZERO, param_origin, unknown.seed.value(ZERO));
    let origin = Jet {
        value: origin_value,
        dz: origin_dz,
        dzbar: m1 * origin_dz + m2 * origin_dz.conj(),
    };
    let samples = Samples {
        value: GridFunction::new(grid.clone(), rep.value)?,
        dz: GridFunction::new(grid.clone(), rep.dz)?,
        dzbar: unknown.omega.clone(),
    };
    let omega = if unknown.mu.is_vanishing() { None } else { Some((unknown.omega, rep.field)) };
    ComponentMap::assemble(ops, unknown.seed.clone(), rep.shift, omega, unknown.gauge, samples, origin)
}

/// Picard iteration on the `ω`'s of all components at once; each component's
/// coefficients are evaluated with the other component's current values as
/// parameter (or the fixed `param` when there is only one component).
#[allow(clippy::type_complexity)]
fn iterate(
    ops: &Arc<IntegralOperators>,
    mut comps: Vec<Unknown<'_>>,
    fixed_param: Option<&GridFunction>,
    cfg: &SolveConfig,
) -> Result<(Vec<ComponentMap>, f64, f64, Vec<f64>, f64)> {
    cfg.validate()?;
    let grid = ops.grid().clone();
    let bound = comps.iter().fold(0.0f64, |m, c| m.max(c.mu.bound()));
    if !(bound < cfg.mu_bound_limit) {
        return Err(Error::OutOfRegime(format!(
            "coefficient bound {bound:.4} not below the solver limit {}",
            cfg.mu_bound_limit
        )));
    }
    let vanishing = comps.iter().all(|c| c.mu.is_vanishing());
    let mut history = Vec::new();
    let mut contraction = 0.0f64;
    let mut above_one = 0usize;
    let mut prev_abs = f64::NAN;
    loop {
        let reps = comps
            .iter()
            .map(|c| represent(ops, c.seed, &c.omega))
            .collect::<Result<Vec<_>>>()?;
        let targets = comps
            .iter()
            .zip(&reps)
            .map(|(c, r)| target_values(r, c.gauge.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let zero_param = vec![ZERO; grid.len()];
        let mut num = 0.0;
        let mut den = 0.0;
        let mut next = Vec::with_capacity(comps.len());
        for (i, c) in comps.iter().enumerate() {
            let param: &[Complex64] = match (fixed_param, comps.len()) {
                (Some(p), _) => p.values(),
                (None, 2) => &targets[1 - i],
                (None, _) => &zero_param,
            };
            let new = if c.mu.is_vanishing() { vec![ZERO; grid.len()] } else { update(&grid, &reps[i], param, &c.mu) };
            let res = GridFunction::new(
                grid.clone(),
                c.omega.values().iter().zip(&new).map(|(a, b)| a - b).collect(),
            )
            .map_err(|e| Error::Numerical(format!("iteration produced {e}")))?;
            num += res.norm_l2().powi(2);
            den += GridFunction::from_raw(grid.clone(), reps[i].dz.clone()).norm_l2().powi(2);
            next.push(new);
        }
        let (abs, rel) = relative(num.sqrt(), den.sqrt());
        if !rel.is_finite() {
            return Err(Error::Numerical("residual became non-finite".into()));
        }
        if let Some(&prev) = history.last() {
            if prev > FLOOR {
                // Ratios of absolute residuals: the normalization can drift
                // while the iteration diverges.
                let ratio = abs / prev_abs;
                contraction = contraction.max(ratio);
                if ratio >= 1.0 {
                    above_one += 1;
                } else {
                    above_one = 0;
                }
                if above_one >= 3 {
                    history.push(rel);
                    return Err(Error::NonContraction { factor: ratio, history });
                }
            }
        }
        history.push(rel);
        prev_abs = abs;
        if vanishing || rel <= cfg.tolerance || rel <= FLOOR {
            let param_origin: Vec<Complex64> = match (fixed_param, comps.len()) {
                (Some(_), _) => vec![fixed_param_origin(fixed_param)],
                (None, 2) => {
                    vec![target_origin(&comps[1])?, target_origin(&comps[0])?]
                }
                (None, _) => vec![ZERO],
            };
            let mut maps = Vec::with_capacity(comps.len());
            for (i, (c, r)) in comps.into_iter().zip(reps).enumerate() {
                let po = param_origin[i.min(param_origin.len() - 1)];
                maps.push(finish_component(ops, c, r, po)?);
            }
            return Ok((maps, abs, rel, history, contraction));
        }
        if history.len() >= cfg.max_iterations {
            return Err(Error::NotConverged { iterations: history.len(), last: rel, history });
        }
        for (c, new) in comps.iter_mut().zip(next) {
            c.omega = GridFunction::new(grid.clone(), new)
                .map_err(|e| Error::Numerical(format!("iteration produced {e}")))?;
        }
    }
}

fn target_origin(c: &Unknown<'_>) -> Result<Complex64> {
    let w0 = c.seed.value(ZERO);
    match &c.gauge {
        None => Ok(w0),
        Some(g) => Ok(g.apply(w0)?.0),
    }
}

fn fixed_param_origin(p: Option<&GridFunction>) -> Complex64 {
    // The parameter is only known at the nodes; use the innermost ring mean.
    let Some(p) = p else { return ZERO };
    let m = p.grid().angles();
    p.values()[..m].iter().sum::<Complex64>() / m as f64
}

fn check_containment(c: &ComponentMap, margin: f64) -> Result<()> {
    let sup = c.sup_modulus()?;
    if !(sup < 1.0 - margin) {
        return Err(Error::TargetViolation { sup_modulus: sup });
    }
    Ok(())
}

/// Solves the scalar equation for the first component of `seed` with `v`
/// held fixed. The result keeps `v` as its second component when the seed
/// has none.
pub fn neumann_solve(
    seed: &DiskMap,
    mu: &BeltramiCoefficients,
    v: &GridFunction,
    cfg: &SolveConfig,
) -> Result<DiskMap> {
    let ops = seed.ops().clone();
    seed.u().check_same_grid(v)?;
    let unknown = Unknown {
        seed: &seed.first.seed,
        gauge: seed.first.gauge,
        mu: mu.clone(),
        omega: GridFunction::zeros(ops.grid().clone()),
    };
    let (mut maps, abs, rel, history, contraction) = iterate(&ops, vec![unknown], Some(v), cfg)?;
    let first = maps.remove(0);
    let v_c1 = {
        let dz = finite_diff_dz(v)?;
        let dzbar = finite_diff_dbar(v)?;
        let d = dz.values().iter().zip(dzbar.values()).fold(0.0f64, |m, (a, b)| m.max(a.norm() + b.norm()));
        v.sup_norm() + d
    };
    Ok(DiskMap {
        first,
        second: seed.second.clone(),
        residual: abs,
        relative_residual: rel,
        history,
        contraction,
        mu_bound: mu.bound(),
        parameter_c1: Some(v_c1),
    })
}

/// Coefficients the coupled solve uses for each component, including the
/// pullback under the first component's gauge.
pub fn coupled_coefficients(
    seed: &DiskMap,
    j: &Arc<AlmostComplexStructure>,
) -> Result<(BeltramiCoefficients, BeltramiCoefficients)> {
    let mut a = j.coefficients(Component::First)?;
    if let Some(g) = seed.first.gauge {
        a = pullback_coefficients(&a, g.cover, g.center)?;
    }
    let mut b = j.coefficients(Component::Second)?;
    if let Some(g) = seed.second.as_ref().and_then(|s| s.gauge) {
        b = pullback_coefficients(&b, g.cover, g.center)?;
    }
    Ok((a, b))
}

/// Solves both equations of a `J`-holomorphic map into the bidisk, keeping
/// the seeds' jets. Both components must stay inside the unit disk (the
/// solved-for function, under a gauge).
pub fn solve_coupled(seed: &DiskMap, j: &Arc<AlmostComplexStructure>, cfg: &SolveConfig) -> Result<DiskMap> {
    let ops = seed.ops().clone();
    let second = seed
        .second
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("coupled solve needs a seed with two components".into()))?;
    let (mu_a, mu_b) = coupled_coefficients(seed, j)?;
    let comps = vec![
        Unknown {
            seed: &seed.first.seed,
            gauge: seed.first.gauge,
            mu: mu_a.clone(),
            omega: GridFunction::zeros(ops.grid().clone()),
        },
        Unknown {
            seed: &second.seed,
            gauge: second.gauge,
            mu: mu_b.clone(),
            omega: GridFunction::zeros(ops.grid().clone()),
        },
    ];
    let (mut maps, abs, rel, history, contraction) = iterate(&ops, comps, None, cfg)?;
    let second = maps.pop().expect("two components");
    let first = maps.pop().expect("two components");
    check_containment(&first, cfg.containment_margin)?;
    check_containment(&second, cfg.containment_margin)?;
    let parameter_c1 = Some(second.c1_norm());
    Ok(DiskMap {
        first,
        second: Some(second),
        residual: abs,
        relative_residual: rel,
        history,
        contraction,
        mu_bound: mu_a.bound().max(mu_b.bound()),
        parameter_c1,
    })
}
