//! Block-diagonal almost-complex structures `J = diag(A, B)` on ℝ⁴ and the
//! Beltrami coefficients they induce.
//!
//! A block is given as `J_st + P(x₁, y₁, x₂, y₂)` with `P` a matrix of real
//! polynomials. Inputs that miss `A² = -Id` by a small amount are pulled back
//! onto the constraint by `A ↦ A(-A²)^{-1/2}`.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::DiskGrid;
use crate::hyperbolic::{gauge_map, Cover};

/// Inputs closer than this to `A² = -Id` are used as given.
pub const EXACT_TOLERANCE: f64 = 1e-10;
/// Largest raw constraint violation the retraction is allowed to repair.
pub const PROJECTION_LIMIT: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat2(pub [[f64; 2]; 2]);

impl Mat2 {
    pub const IDENTITY: Mat2 = Mat2([[1.0, 0.0], [0.0, 1.0]]);
    pub const ZERO: Mat2 = Mat2([[0.0, 0.0], [0.0, 0.0]]);
    /// Multiplication by `i` on `ℝ² = ℂ`.
    pub const J_ST: Mat2 = Mat2([[0.0, -1.0], [1.0, 0.0]]);

    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        Mat2([[a, b], [c, d]])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[i][j]
    }

    pub fn det(&self) -> f64 {
        self.0[0][0] * self.0[1][1] - self.0[0][1] * self.0[1][0]
    }

    pub fn trace(&self) -> f64 {
        self.0[0][0] + self.0[1][1]
    }

    pub fn inverse(&self) -> Option<Mat2> {
        let d = self.det();
        let scale = self.max_abs().max(1e-300);
        if d.abs() <= 1e-13 * scale * scale || !d.is_finite() {
            return None;
        }
        let m = &self.0;
        Some(Mat2([[m[1][1] / d, -m[0][1] / d], [-m[1][0] / d, m[0][0] / d]]))
    }

    pub fn scale(&self, s: f64) -> Mat2 {
        let m = &self.0;
        Mat2([[s * m[0][0], s * m[0][1]], [s * m[1][0], s * m[1][1]]])
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().flatten().fold(0.0f64, |acc, x| acc.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|x| x.is_finite())
    }

    /// Applies the matrix to `w` viewed as a vector in ℝ².
    pub fn apply(&self, w: Complex64) -> Complex64 {
        let m = &self.0;
        Complex64::new(m[0][0] * w.re + m[0][1] * w.im, m[1][0] * w.re + m[1][1] * w.im)
    }
}

impl std::ops::Mul for Mat2 {
    type Output = Mat2;
    fn mul(self, o: Mat2) -> Mat2 {
        let (a, b) = (&self.0, &o.0);
        let mut out = [[0.0; 2]; 2];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        Mat2(out)
    }
}

impl std::ops::Add for Mat2 {
    type Output = Mat2;
    fn add(self, o: Mat2) -> Mat2 {
        let (a, b) = (&self.0, &o.0);
        Mat2([[a[0][0] + b[0][0], a[0][1] + b[0][1]], [a[1][0] + b[1][0], a[1][1] + b[1][1]]])
    }
}

impl std::ops::Sub for Mat2 {
    type Output = Mat2;
    fn sub(self, o: Mat2) -> Mat2 {
        self + o.scale(-1.0)
    }
}

/// `max |A² + Id|`, the distance from being a complex structure.
pub fn square_deviation(a: &Mat2) -> f64 {
    (*a * *a + Mat2::IDENTITY).max_abs()
}

/// `A(-A²)^{-1/2}`, the nearest complex structure along the polar retraction.
///
/// The square root of a 2×2 matrix `M` with positive eigenvalues is
/// `(M + sI)/t` with `s = √det M`, `t = √(tr M + 2s)`.
pub fn retract(a: &Mat2) -> Result<Mat2> {
    let m = (*a * *a).scale(-1.0);
    let det = m.det();
    let s = det.max(0.0).sqrt();
    let t2 = m.trace() + 2.0 * s;
    if !(det > 0.0) || !(t2 > 0.0) {
        return Err(Error::StructureRejected(format!(
            "cannot retract {:?}: -A² has no positive square root",
            a.0
        )));
    }
    let root = (m + Mat2::IDENTITY.scale(s)).scale(1.0 / t2.sqrt());
    let inv = root
        .inverse()
        .ok_or_else(|| Error::StructureRejected("singular square root in retraction".into()))?;
    Ok(*a * inv)
}

/// `q_A = -(1 - A J_st)^{-1}(1 + A J_st)`.
pub fn q_of_a(a: &Mat2) -> Result<Mat2> {
    let aj = *a * Mat2::J_ST;
    let lhs = Mat2::IDENTITY - aj;
    let inv = lhs.inverse().ok_or_else(|| {
        Error::OutOfRegime(format!("1 - A J_st is singular at A = {:?}", a.0))
    })?;
    Ok((inv * (Mat2::IDENTITY + aj)).scale(-1.0))
}

/// Splits `q` as `w ↦ μ¹ w + μ² conj(w)`.
pub fn split_linear_antilinear(q: &Mat2) -> (Complex64, Complex64) {
    let jqj = Mat2::J_ST * *q * Mat2::J_ST;
    let lin = (*q - jqj).scale(0.5);
    let anti = (*q + jqj).scale(0.5);
    (
        Complex64::new(lin.get(0, 0), lin.get(1, 0)),
        Complex64::new(anti.get(0, 0), anti.get(1, 0)),
    )
}

/// One monomial `coeff · x₁^p y₁^q x₂^r y₂^s` in entry `(row, col)` of a
/// perturbation matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub row: usize,
    pub col: usize,
    pub coeff: f64,
    /// Exponents of `x₁, y₁, x₂, y₂`.
    pub powers: [u32; 4],
}

impl Term {
    fn eval(&self, z1: Complex64, z2: Complex64) -> f64 {
        let vars = [z1.re, z1.im, z2.re, z2.im];
        vars.iter()
            .zip(self.powers.iter())
            .fold(self.coeff, |acc, (x, &p)| acc * x.powi(p as i32))
    }

    fn degree(&self) -> u32 {
        self.powers.iter().sum()
    }
}

fn default_true() -> bool {
    true
}

/// On-disk form of a structure. See the repository README for the schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureFile {
    #[serde(default)]
    pub description: String,
    pub epsilon: f64,
    /// Repair small violations of `A² = -Id` by retraction.
    #[serde(default = "default_true")]
    pub project: bool,
    #[serde(default)]
    pub a: Vec<Term>,
    #[serde(default)]
    pub b: Vec<Term>,
}

impl StructureFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidInput(format!("structure file: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidInput(format!("structure file: {e}")))
    }
}

pub type MatrixFieldFn = dyn Fn(Complex64, Complex64) -> Mat2 + Send + Sync;

#[derive(Clone)]
enum Block {
    /// `J_st` plus a polynomial perturbation.
    Polynomial(Vec<Term>),
    /// A full matrix field supplied in code.
    Custom(Arc<MatrixFieldFn>),
}

impl Block {
    fn raw(&self, z1: Complex64, z2: Complex64) -> Mat2 {
        match self {
            Block::Polynomial(terms) => {
                let mut m = Mat2::J_ST;
                for t in terms {
                    m.0[t.row][t.col] += t.eval(z1, z2);
                }
                m
            }
            Block::Custom(f) => f(z1, z2),
        }
    }
}

impl fmt::Debug for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Block::Polynomial(t) => f.debug_tuple("Polynomial").field(t).finish(),
            Block::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Which block of `J` an equation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    /// The `z₁` equation, driven by `A(u, v)`.
    First,
    /// The `z₂` equation, driven by `B(u, v)`.
    Second,
}

impl Component {
    pub fn other(self) -> Self {
        match self {
            Component::First => Component::Second,
            Component::Second => Component::First,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AlmostComplexStructure {
    a: Block,
    b: Block,
    epsilon: f64,
    description: String,
    project: bool,
}

impl AlmostComplexStructure {
    /// `A ≡ B ≡ J_st`.
    pub fn standard() -> Self {
        AlmostComplexStructure {
            a: Block::Polynomial(Vec::new()),
            b: Block::Polynomial(Vec::new()),
            epsilon: 1.0,
            description: "standard".into(),
            project: true,
        }
    }

    pub fn from_file(file: &StructureFile) -> Result<Self> {
        if !(file.epsilon > 0.0) || !file.epsilon.is_finite() {
            return Err(Error::InvalidInput(format!("epsilon must be positive, got {}", file.epsilon)));
        }
        for (name, terms) in [("a", &file.a), ("b", &file.b)] {
            for t in terms {
                if t.row > 1 || t.col > 1 {
                    return Err(Error::InvalidInput(format!(
                        "{name}: entry ({}, {}) outside a 2x2 matrix",
                        t.row, t.col
                    )));
                }
                if !t.coeff.is_finite() {
                    return Err(Error::InvalidInput(format!("{name}: non-finite coefficient")));
                }
            }
        }
        Ok(AlmostComplexStructure {
            a: Block::Polynomial(file.a.clone()),
            b: Block::Polynomial(file.b.clone()),
            epsilon: file.epsilon,
            description: file.description.clone(),
            project: file.project,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_file(&StructureFile::from_toml(text)?)
    }

    /// Back to file form. Fails for structures built from code closures.
    pub fn to_file(&self) -> Result<StructureFile> {
        let terms = |b: &Block| match b {
            Block::Polynomial(t) => Ok(t.clone()),
            Block::Custom(_) => Err(Error::InvalidInput(
                "structure given by a code closure has no file form".into(),
            )),
        };
        Ok(StructureFile {
            description: self.description.clone(),
            epsilon: self.epsilon,
            project: self.project,
            a: terms(&self.a)?,
            b: terms(&self.b)?,
        })
    }

    /// Blocks given directly as matrix fields (full matrices, not perturbations).
    pub fn custom(
        a: impl Fn(Complex64, Complex64) -> Mat2 + Send + Sync + 'static,
        b: impl Fn(Complex64, Complex64) -> Mat2 + Send + Sync + 'static,
        description: impl Into<String>,
    ) -> Self {
        AlmostComplexStructure {
            a: Block::Custom(Arc::new(a)),
            b: Block::Custom(Arc::new(b)),
            epsilon: 1.0,
            description: description.into(),
            project: true,
        }
    }

    pub fn with_projection(mut self, project: bool) -> Self {
        self.project = project;
        self
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn projection_enabled(&self) -> bool {
        self.project
    }

    /// Highest total degree of the polynomial perturbation, if it has one.
    pub fn degree(&self) -> Option<u32> {
        match (&self.a, &self.b) {
            (Block::Polynomial(a), Block::Polynomial(b)) => {
                Some(a.iter().chain(b.iter()).map(Term::degree).max().unwrap_or(0))
            }
            _ => None,
        }
    }

    /// `J_ε(z₁, z₂) = J(ε z₁, ε z₂)`; factors multiply under composition.
    pub fn rescale(&self, eps: f64) -> Result<Self> {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::InvalidInput(format!("rescale factor must be positive, got {eps}")));
        }
        let mut out = self.clone();
        out.epsilon *= eps;
        Ok(out)
    }

    fn block(&self, c: Component) -> &Block {
        match c {
            Component::First => &self.a,
            Component::Second => &self.b,
        }
    }

    /// Block value as specified, before any retraction.
    pub fn raw_block(&self, c: Component, z1: Complex64, z2: Complex64) -> Mat2 {
        self.block(c).raw(z1 * self.epsilon, z2 * self.epsilon)
    }

    /// Block value used by the solver: the raw value, retracted onto
    /// `A² = -Id` when projection is on and the raw value misses it.
    pub fn block_at(&self, c: Component, z1: Complex64, z2: Complex64) -> Result<Mat2> {
        let raw = self.raw_block(c, z1, z2);
        if !raw.is_finite() {
            return Err(Error::Numerical(format!("non-finite structure value at ({z1}, {z2})")));
        }
        if self.project && square_deviation(&raw) > EXACT_TOLERANCE {
            retract(&raw)
        } else {
            Ok(raw)
        }
    }

    pub fn a(&self, z1: Complex64, z2: Complex64) -> Result<Mat2> {
        self.block_at(Component::First, z1, z2)
    }

    pub fn b(&self, z1: Complex64, z2: Complex64) -> Result<Mat2> {
        self.block_at(Component::Second, z1, z2)
    }

    /// `(μ¹, μ²)` of the equation for component `c` at the point `(z₁, z₂)`.
    pub fn mu_at(&self, c: Component, z1: Complex64, z2: Complex64) -> Result<(Complex64, Complex64)> {
        let m = self.block_at(c, z1, z2)?;
        Ok(split_linear_antilinear(&q_of_a(&m)?))
    }

    /// Beltrami coefficients for component `c`, with the bound measured on
    /// [`coefficient_samples`].
    pub fn coefficients(self: &Arc<Self>, c: Component) -> Result<BeltramiCoefficients> {
        let j = Arc::clone(self);
        let field = move |_z: Complex64, param: Complex64, unknown: Complex64| {
            let (z1, z2) = match c {
                Component::First => (unknown, param),
                Component::Second => (param, unknown),
            };
            j.mu_at(c, z1, z2).unwrap_or((
                Complex64::new(f64::NAN, f64::NAN),
                Complex64::new(f64::NAN, f64::NAN),
            ))
        };
        // The field does not depend on z, so sample only the (param, unknown) plane.
        let pts = disk_samples();
        let mut bound = 0.0f64;
        for &p in &pts {
            for &u in &pts {
                let (z1, z2) = match c {
                    Component::First => (u, p),
                    Component::Second => (p, u),
                };
                let (m1, m2) = self.mu_at(c, z1, z2)?;
                bound = bound.max(m1.norm() + m2.norm());
            }
        }
        Ok(BeltramiCoefficients::with_bound(field, bound))
    }

    /// Sup over the closed bidisk samples of `‖A - J_st‖` and `‖B - J_st‖`.
    pub fn sup_deviation(&self) -> Result<f64> {
        let pts = disk_samples();
        let mut worst = 0.0f64;
        for &z1 in &pts {
            for &z2 in &pts {
                worst = worst
                    .max((self.a(z1, z2)? - Mat2::J_ST).max_abs())
                    .max((self.b(z1, z2)? - Mat2::J_ST).max_abs());
            }
        }
        Ok(worst)
    }
}

/// Fixed sample set of the closed unit disk: the origin and rings at radii
/// 1/4, 1/2, 3/4, 1 with 12 angles each.
pub fn disk_samples() -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0)];
    for r in [0.25, 0.5, 0.75, 1.0] {
        for k in 0..12 {
            out.push(Complex64::from_polar(r, std::f64::consts::TAU * (k as f64 + 0.5) / 12.0));
        }
    }
    out
}

/// Triples `(z, v, u)` used to measure bounds of coefficient fields that may
/// depend on all three arguments.
pub fn coefficient_samples() -> Vec<(Complex64, Complex64, Complex64)> {
    let pts = disk_samples();
    let coarse: Vec<Complex64> = pts.iter().step_by(3).copied().collect();
    let mut out = Vec::with_capacity(coarse.len() * pts.len() * pts.len());
    for &z in &coarse {
        for &v in &pts {
            for &u in &pts {
                out.push((z, v, u));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub accepted: bool,
    /// `max |A² + Id|` over the samples before retraction.
    pub raw_square_deviation_a: f64,
    pub raw_square_deviation_b: f64,
    /// Same after retraction (equal to the raw values when none is applied).
    pub square_deviation_a: f64,
    pub square_deviation_b: f64,
    pub origin_deviation_a: f64,
    pub origin_deviation_b: f64,
    pub projected: bool,
    pub samples: usize,
    pub reason: Option<String>,
}

impl ValidationReport {
    pub fn ensure_accepted(&self) -> Result<()> {
        if self.accepted {
            Ok(())
        } else {
            Err(Error::StructureRejected(self.reason.clone().unwrap_or_default()))
        }
    }
}

/// Checks the normal-form assumptions on the product of the node sets of
/// `g1` and `g2` (plus the origin).
pub fn validate(j: &AlmostComplexStructure, g1: &DiskGrid, g2: &DiskGrid) -> ValidationReport {
    let zero = Complex64::new(0.0, 0.0);
    let mut pts1 = vec![zero];
    pts1.extend_from_slice(g1.nodes());
    let mut pts2 = vec![zero];
    pts2.extend_from_slice(g2.nodes());

    let mut raw_dev = [0.0f64; 2];
    let mut dev = [0.0f64; 2];
    let mut failure: Option<String> = None;
    for &z1 in &pts1 {
        for &z2 in &pts2 {
            for (i, c) in [Component::First, Component::Second].into_iter().enumerate() {
                let raw = j.raw_block(c, z1, z2);
                let d = if raw.is_finite() { square_deviation(&raw) } else { f64::INFINITY };
                raw_dev[i] = raw_dev[i].max(d);
                match j.block_at(c, z1, z2) {
                    Ok(m) => dev[i] = dev[i].max(square_deviation(&m)),
                    Err(e) => {
                        dev[i] = f64::INFINITY;
                        failure.get_or_insert(e.to_string());
                    }
                }
            }
        }
    }
    let origin = |c| {
        j.block_at(c, zero, zero)
            .map(|m| (m - Mat2::J_ST).max_abs())
            .unwrap_or(f64::INFINITY)
    };
    let origin_a = origin(Component::First);
    let origin_b = origin(Component::Second);
    let worst_raw = raw_dev[0].max(raw_dev[1]);
    let projected = j.project && worst_raw > EXACT_TOLERANCE;

    let reason = if let Some(f) = failure {
        Some(f)
    } else if worst_raw > EXACT_TOLERANCE && !j.project {
        Some(format!("A² + Id deviates by {worst_raw:.3e} and projection is off"))
    } else if worst_raw > PROJECTION_LIMIT {
        Some(format!(
            "A² + Id deviates by {worst_raw:.3e}, beyond the retraction limit {PROJECTION_LIMIT}"
        ))
    } else if dev[0].max(dev[1]) > EXACT_TOLERANCE {
        Some(format!("retracted blocks still deviate by {:.3e}", dev[0].max(dev[1])))
    } else if origin_a.max(origin_b) > EXACT_TOLERANCE {
        Some(format!(
            "J(0) differs from J_st by {:.3e}",
            origin_a.max(origin_b)
        ))
    } else {
        None
    };
    ValidationReport {
        accepted: reason.is_none(),
        raw_square_deviation_a: raw_dev[0],
        raw_square_deviation_b: raw_dev[1],
        square_deviation_a: dev[0],
        square_deviation_b: dev[1],
        origin_deviation_a: origin_a,
        origin_deviation_b: origin_b,
        projected,
        samples: pts1.len() * pts2.len(),
        reason,
    }
}

pub type MuFn = dyn Fn(Complex64, Complex64, Complex64) -> (Complex64, Complex64) + Send + Sync;

/// The pair `(μ¹, μ²)` as a function of `(z, v, u)`, with `bound` an upper
/// estimate of `sup |μ¹| + |μ²|`.
#[derive(Clone)]
pub struct BeltramiCoefficients {
    field: Arc<MuFn>,
    bound: f64,
    vanishing: bool,
}

impl fmt::Debug for BeltramiCoefficients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BeltramiCoefficients")
            .field("bound", &self.bound)
            .field("vanishing", &self.vanishing)
            .finish()
    }
}

impl BeltramiCoefficients {
    pub fn zero() -> Self {
        let z = Complex64::new(0.0, 0.0);
        BeltramiCoefficients {
            field: Arc::new(move |_, _, _| (z, z)),
            bound: 0.0,
            vanishing: true,
        }
    }

    pub fn constant(mu1: Complex64, mu2: Complex64) -> Self {
        BeltramiCoefficients {
            field: Arc::new(move |_, _, _| (mu1, mu2)),
            bound: mu1.norm() + mu2.norm(),
            vanishing: mu1.norm() == 0.0 && mu2.norm() == 0.0,
        }
    }

    /// Wraps a field and measures its bound on [`coefficient_samples`].
    pub fn from_fn(
        f: impl Fn(Complex64, Complex64, Complex64) -> (Complex64, Complex64) + Send + Sync + 'static,
    ) -> Result<Self> {
        let mut bound = 0.0f64;
        for (z, v, u) in coefficient_samples() {
            let (a, b) = f(z, v, u);
            let s = a.norm() + b.norm();
            if !s.is_finite() {
                return Err(Error::Numerical(format!("coefficient not finite at ({z}, {v}, {u})")));
            }
            bound = bound.max(s);
        }
        Ok(Self::with_bound(f, bound))
    }

    /// Wraps a field whose bound the caller already knows.
    pub fn with_bound(
        f: impl Fn(Complex64, Complex64, Complex64) -> (Complex64, Complex64) + Send + Sync + 'static,
        bound: f64,
    ) -> Self {
        BeltramiCoefficients {
            field: Arc::new(f),
            bound,
            vanishing: bound == 0.0,
        }
    }

    pub fn eval(&self, z: Complex64, v: Complex64, u: Complex64) -> (Complex64, Complex64) {
        (self.field)(z, v, u)
    }

    pub fn mu1(&self, z: Complex64, v: Complex64, u: Complex64) -> Complex64 {
        self.eval(z, v, u).0
    }

    pub fn mu2(&self, z: Complex64, v: Complex64, u: Complex64) -> Complex64 {
        self.eval(z, v, u).1
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// True when the field is known to vanish identically.
    pub fn is_vanishing(&self) -> bool {
        self.vanishing
    }
}

/// Coefficients of the equation for `w` where `u = (cover ∘ φ_a)(w)`.
///
/// `μ¹` is composed with the gauge map and `μ²` picks up the unimodular
/// factor `conj(Φ')/Φ'`, so the bound carries over unchanged.
pub fn pullback_coefficients(
    mu: &BeltramiCoefficients,
    cover: Cover,
    a: Complex64,
) -> Result<BeltramiCoefficients> {
    // Fail early on a bad center or a degenerate covering derivative.
    for p in disk_samples() {
        let (val, d) = gauge_map(cover, a, p * 0.99)?;
        if !(d.norm() > 1e-300) || !val.is_finite() {
            return Err(Error::Degenerate(format!("gauge map derivative vanishes near {p}")));
        }
    }
    if mu.is_vanishing() {
        return Ok(BeltramiCoefficients::zero());
    }
    let inner = mu.clone();
    let field = move |z: Complex64, v: Complex64, w: Complex64| match gauge_map(cover, a, w) {
        Ok((u, d)) => {
            let (m1, m2) = inner.eval(z, v, u);
            (m1, m2 * d.conj() / d)
        }
        Err(_) => (
            Complex64::new(f64::NAN, f64::NAN),
            Complex64::new(f64::NAN, f64::NAN),
        ),
    };
    Ok(BeltramiCoefficients::with_bound(field, mu.bound()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn small_grid() -> Arc<DiskGrid> {
        DiskGrid::new(8, 1.0).unwrap()
    }

    fn quadratic() -> StructureFile {
        StructureFile {
            description: "quadratic test perturbation".into(),
            epsilon: 1.0,
            project: true,
            a: vec![
                Term { row: 0, col: 0, coeff: 0.3, powers: [1, 0, 0, 0] },
                Term { row: 1, col: 0, coeff: -0.2, powers: [0, 1, 1, 0] },
            ],
            b: vec![Term { row: 0, col: 1, coeff: 0.25, powers: [0, 0, 0, 2] }],
        }
    }

    #[test]
    fn standard_structure_is_accepted_with_zero_deviation() {
        let g = small_grid();
        let r = validate(&AlmostComplexStructure::standard(), &g, &g);
        assert!(r.accepted);
        assert_eq!(r.square_deviation_a, 0.0);
        assert_eq!(r.square_deviation_b, 0.0);
        assert_eq!(r.origin_deviation_a, 0.0);
        assert!(!r.projected);
    }

    #[test]
    fn conjugated_structure_is_accepted() {
        // S(z) = Id + P(z) with P(0) = 0; S J S⁻¹ squares to -Id exactly.
        let s = |z1: Complex64, z2: Complex64| {
            Mat2::new(1.0 + 0.2 * z1.re, 0.1 * z2.im, -0.15 * z1.im * z2.re, 1.0 + 0.1 * z2.re)
        };
        let conj = move |z1, z2| {
            let m = s(z1, z2);
            m * Mat2::J_ST * m.inverse().unwrap()
        };
        let j = AlmostComplexStructure::custom(conj, conj, "conjugated").with_projection(false);
        let g = small_grid();
        let r = validate(&j, &g, &g);
        assert!(r.accepted, "{r:?}");
        assert!(r.raw_square_deviation_a < 1e-12);
    }

    #[test]
    fn shifted_structure_is_rejected() {
        let shifted = |_, _| Mat2::J_ST + Mat2::IDENTITY.scale(0.5);
        let j = AlmostComplexStructure::custom(shifted, |_, _| Mat2::J_ST, "shifted");
        let g = small_grid();
        let r = validate(&j, &g, &g);
        assert!(!r.accepted);
        assert!(r.raw_square_deviation_a > 0.5);
        assert!(matches!(r.ensure_accepted(), Err(Error::StructureRejected(_))));
        let r = validate(&j.with_projection(false), &g, &g);
        assert!(!r.accepted);
    }

    #[test]
    fn small_polynomial_is_retracted_onto_the_constraint() {
        let j = AlmostComplexStructure::from_file(&quadratic()).unwrap().rescale(0.2).unwrap();
        let g = small_grid();
        let r = validate(&j, &g, &g);
        assert!(r.accepted, "{r:?}");
        assert!(r.projected);
        assert!(r.raw_square_deviation_a > 1e-3);
        assert!(r.square_deviation_a < 1e-12);
    }

    #[test]
    fn nonzero_value_at_origin_is_rejected() {
        let mut f = quadratic();
        f.a.push(Term { row: 1, col: 1, coeff: 0.01, powers: [0, 0, 0, 0] });
        let j = AlmostComplexStructure::from_file(&f).unwrap();
        let g = small_grid();
        let r = validate(&j, &g, &g);
        assert!(!r.accepted);
        assert!(r.origin_deviation_a > 1e-3);
    }

    #[test]
    fn schema_violations_are_reported() {
        assert!(StructureFile::from_toml("epsilon = 1.0\nbogus = 3").is_err());
        assert!(StructureFile::from_toml("description = \"x\"").is_err());
        let bad = "epsilon = 1.0\n[[a]]\nrow = 2\ncol = 0\ncoeff = 1.0\npowers = [0,0,0,0]\n";
        let f = StructureFile::from_toml(bad).unwrap();
        assert!(AlmostComplexStructure::from_file(&f).is_err());
        assert!(AlmostComplexStructure::from_toml("epsilon = -1.0").is_err());
    }

    #[test]
    fn file_round_trip_is_lossless() {
        let mut f = quadratic();
        f.a[0].coeff = 0.1 + 0.2;
        f.epsilon = 1.0 / 3.0;
        let text = f.to_toml().unwrap();
        let back = StructureFile::from_toml(&text).unwrap();
        assert_eq!(back, f);
        let j = AlmostComplexStructure::from_file(&back).unwrap();
        assert_eq!(j.to_file().unwrap(), f);
    }

    #[test]
    fn rescale_identity_and_composition() {
        let j = AlmostComplexStructure::from_file(&quadratic()).unwrap();
        let same = j.rescale(1.0).unwrap();
        let ab = j.rescale(0.5).unwrap().rescale(0.3).unwrap();
        let direct = j.rescale(0.15).unwrap();
        for z1 in disk_samples() {
            for z2 in disk_samples().into_iter().step_by(7) {
                assert_eq!(same.raw_block(Component::First, z1, z2), j.raw_block(Component::First, z1, z2));
                let d = (ab.a(z1, z2).unwrap() - direct.a(z1, z2).unwrap()).max_abs();
                assert!(d < 1e-14);
            }
        }
        assert!(j.rescale(0.0).is_err());
    }

    #[test]
    fn rescaled_structure_approaches_standard_linearly() {
        let j = AlmostComplexStructure::from_file(&quadratic()).unwrap();
        let lipschitz: Vec<f64> = [0.2, 0.1, 0.05, 0.025]
            .iter()
            .map(|&e| j.rescale(e).unwrap().sup_deviation().unwrap() / e)
            .collect();
        // Measured slope stays bounded (linear leading order).
        let l = lipschitz[0];
        for x in &lipschitz {
            assert!(*x <= l * 1.0001, "{lipschitz:?}");
        }
        assert!(l < 1.0);
    }

    #[test]
    fn q_vanishes_at_standard_and_is_singular_at_minus_standard() {
        assert_eq!(q_of_a(&Mat2::J_ST).unwrap().max_abs(), 0.0);
        assert!(matches!(q_of_a(&Mat2::J_ST.scale(-1.0)), Err(Error::OutOfRegime(_))));
    }

    #[test]
    fn q_is_linear_to_leading_order() {
        let e = Mat2::new(0.3, -0.7, 0.2, 0.5);
        let ratios: Vec<f64> = [1e-2, 1e-3, 1e-4]
            .iter()
            .map(|&t| q_of_a(&(Mat2::J_ST + e.scale(t))).unwrap().max_abs() / t)
            .collect();
        assert!((ratios[1] - ratios[2]).abs() < 1e-3 * ratios[2], "{ratios:?}");
        assert!(ratios.iter().all(|r| *r < 1.0));
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_linear_antilinear(&Mat2::ZERO), (c(0.0, 0.0), c(0.0, 0.0)));
        assert_eq!(split_linear_antilinear(&Mat2::IDENTITY), (c(1.0, 0.0), c(0.0, 0.0)));
        let (m1, m2) = split_linear_antilinear(&Mat2::new(1.0, 0.0, 0.0, -1.0));
        assert_eq!((m1, m2), (c(0.0, 0.0), c(1.0, 0.0)));
        for w in [c(1.0, 0.0), c(0.0, 1.0)] {
            assert_eq!(Mat2::new(1.0, 0.0, 0.0, -1.0).apply(w), w.conj());
        }
    }

    #[test]
    fn standard_structure_has_vanishing_coefficients() {
        let j = Arc::new(AlmostComplexStructure::standard());
        for comp in [Component::First, Component::Second] {
            let mu = j.coefficients(comp).unwrap();
            assert_eq!(mu.bound(), 0.0);
            let (a, b) = mu.eval(c(0.1, 0.2), c(0.3, -0.4), c(-0.5, 0.1));
            assert_eq!((a, b), (c(0.0, 0.0), c(0.0, 0.0)));
        }
    }

    #[test]
    fn coordinate_axis_stays_complex() {
        // u ≡ 0 solves the first equation for any v, so {z₁ = 0} is J-complex.
        let j = Arc::new(AlmostComplexStructure::from_file(&quadratic()).unwrap().rescale(0.3).unwrap());
        let mu = j.coefficients(Component::First).unwrap();
        for z2 in disk_samples() {
            let (m1, m2) = mu.eval(c(0.2, 0.0), z2, c(0.0, 0.0));
            let zero = c(0.0, 0.0);
            // Residual of u ≡ 0: ∂̄u − μ¹∂u − μ²conj(∂u) with ∂u = ∂̄u = 0.
            assert_eq!(zero - m1 * zero - m2 * zero.conj(), zero);
            assert!(m1.is_finite() && m2.is_finite());
        }
    }

    #[test]
    fn bound_shrinks_with_epsilon() {
        let j = AlmostComplexStructure::from_file(&quadratic()).unwrap();
        let mut last = f64::INFINITY;
        for e in [0.4, 0.2, 0.1, 0.05, 0.025] {
            let b = Arc::new(j.rescale(e).unwrap()).coefficients(Component::First).unwrap().bound();
            assert!(b <= last, "bound {b} at eps {e} exceeds {last}");
            last = b;
        }
        assert!(last < 0.01);
    }

    #[test]
    fn pullback_identity_at_origin_is_unchanged() {
        let mu = BeltramiCoefficients::from_fn(|z, v, u| (0.1 * z * v, 0.05 * u.conj() + 0.02)).unwrap();
        let pulled = pullback_coefficients(&mu, Cover::Identity, c(0.0, 0.0)).unwrap();
        let (z, v, w) = (c(0.1, 0.2), c(-0.3, 0.1), c(0.2, -0.5));
        let (a, b) = pulled.eval(z, v, w);
        let (a0, b0) = mu.eval(z, v, -w);
        assert!((a - a0).norm() < 1e-15 && (b - b0).norm() < 1e-15);
    }

    #[test]
    fn pullback_of_zero_is_zero() {
        let z = BeltramiCoefficients::zero();
        for cover in [Cover::Identity, Cover::Punctured] {
            let p = pullback_coefficients(&z, cover, c(0.3, 0.1)).unwrap();
            assert!(p.is_vanishing());
            assert_eq!(p.eval(c(0.1, 0.0), c(0.0, 0.0), c(0.4, 0.4)).1, c(0.0, 0.0));
        }
        assert!(pullback_coefficients(&z, Cover::Identity, c(1.0, 0.0)).is_err());
    }

    proptest! {
        #[test]
        fn split_reconstructs_q(
            a in -2.0f64..2.0, b in -2.0f64..2.0, cc in -2.0f64..2.0, d in -2.0f64..2.0,
            wr in -1.0f64..1.0, wi in -1.0f64..1.0,
        ) {
            let q = Mat2::new(a, b, cc, d);
            let (m1, m2) = split_linear_antilinear(&q);
            let w = Complex64::new(wr, wi);
            prop_assert!((q.apply(w) - (m1 * w + m2 * w.conj())).norm() < 1e-12);
        }

        #[test]
        fn retraction_lands_on_complex_structures(
            a in -0.2f64..0.2, b in -0.2f64..0.2, cc in -0.2f64..0.2, d in -0.2f64..0.2,
        ) {
            let m = Mat2::J_ST + Mat2::new(a, b, cc, d);
            let r = retract(&m).unwrap();
            prop_assert!(square_deviation(&r) < 1e-12);
            // A structure already on the constraint is a fixed point.
            let again = retract(&r).unwrap();
            prop_assert!((again - r).max_abs() < 1e-12);
        }

        #[test]
        fn structure_split_reconstructs_q(x1 in -1.0f64..1.0, y1 in -1.0f64..1.0, x2 in -1.0f64..1.0, y2 in -1.0f64..1.0) {
            let j = AlmostComplexStructure::from_file(&quadratic()).unwrap().rescale(0.3).unwrap();
            let m = j.a(Complex64::new(x1, y1), Complex64::new(x2, y2)).unwrap();
            let q = q_of_a(&m).unwrap();
            let (m1, m2) = split_linear_antilinear(&q);
            for w in [Complex64::new(1.0, 0.0), Complex64::new(0.3, -0.8)] {
                prop_assert!((q.apply(w) - m1 * w - m2 * w.conj()).norm() < 1e-12);
            }
        }

        #[test]
        fn pullback_preserves_antilinear_modulus(
            ar in 0.01f64..0.9, at in 0.0..std::f64::consts::TAU, wr in 0.0f64..0.9, wt in 0.0..std::f64::consts::TAU, punct in any::<bool>(),
        ) {
            let mu = BeltramiCoefficients::from_fn(|z, v, u| (0.05 * u, 0.1 * (u * u + z * v))).unwrap();
            let cover = if punct { Cover::Punctured } else { Cover::Identity };
            let a = Complex64::from_polar(ar, at);
            let p = pullback_coefficients(&mu, cover, a).unwrap();
            let w = Complex64::from_polar(wr, wt);
            let (z, v) = (Complex64::new(0.1, 0.1), Complex64::new(-0.2, 0.0));
            let (u, _) = gauge_map(cover, a, w).unwrap();
            let (m1, m2) = p.eval(z, v, w);
            let (n1, n2) = mu.eval(z, v, u);
            prop_assert!((m1 - n1).norm() < 1e-14);
            prop_assert!((m2.norm() - n2.norm()).abs() < 1e-14);
        }
    }
}
