//! Solid Cauchy transform and Beurling transform on a polar disk grid.
//!
//! ```text
//! T_CG g(z) = 1/(2iπ) ∬ g(ζ)/(ζ - z) dζ∧dζ̄       (∂̄ T_CG g = g)
//! T_CZ g(z) = p.v. 1/(2iπ) ∬ g(ζ)/(ζ - z)² dζ∧dζ̄  (T_CZ = ∂ T_CG)
//! ```
//!
//! Both kernels are integrated exactly in angle: on a ring the angular
//! integral reduces to a single Fourier mode of `g`, so each output mode
//! `k` is a radial integral of input mode `k + 1` (Cauchy) or `k + 2`
//! (Beurling) against a bounded power kernel. The radial integrals use
//! product integration against a piecewise model of each mode profile:
//! `G_0 (ρ/ρ_0)^|m|` on `[0, ρ_0]`, linear between ring radii, linear
//! extrapolation on the last half cell.
//!
//! Integrating the angle first is a principal value over thin annuli, not
//! over small disks. For the Beurling kernel the two differ by the
//! analytic local term `(z̄/z) g(z)`, which is added back.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::grid::{DiskGrid, GridFunction};

/// Signed Fourier mode of FFT bin `b` for `m` angles.
fn signed_mode(b: usize, m: usize) -> i64 {
    if b < m / 2 {
        b as i64
    } else {
        b as i64 - m as i64
    }
}

fn bin_of(mode: i64, m: usize) -> Option<usize> {
    let half = (m / 2) as i64;
    if mode >= -half && mode < half {
        Some(mode.rem_euclid(m as i64) as usize)
    } else {
        None
    }
}

/// `∫_a^b (ρ/c)^p dρ`
fn moment0(a: f64, b: f64, c: f64, p: i32) -> f64 {
    if p == -1 {
        return c * (b / a).ln();
    }
    let term = |x: f64| if x == 0.0 { 0.0 } else { x * (x / c).powi(p) };
    (term(b) - term(a)) / (p as f64 + 1.0)
}

/// `∫_a^b (ρ/c)^p ρ dρ`
fn moment1(a: f64, b: f64, c: f64, p: i32) -> f64 {
    if p == -2 {
        return c * c * (b / a).ln();
    }
    let term = |x: f64| if x == 0.0 { 0.0 } else { x * x * (x / c).powi(p) };
    (term(b) - term(a)) / (p as f64 + 2.0)
}

/// `∫_a^b (ρ/ρ0)^s (ρ/c)^p dρ` with `0 <= a <= b <= ρ0`.
fn power_piece(a: f64, b: f64, rho0: f64, s: i32, c: f64, p: i32) -> f64 {
    let e = s + p;
    let term = |x: f64| {
        if x == 0.0 {
            0.0
        } else {
            x * (x / rho0).powi(s) * (x / c).powi(p)
        }
    };
    if e == -1 {
        term(b) * (b / a).ln()
    } else {
        (term(b) - term(a)) / (e as f64 + 1.0)
    }
}

/// Radial layout shared by every mode profile.
#[derive(Debug, Clone)]
struct RadialLayout {
    radii: Vec<f64>,
    h: f64,
    outer: f64,
}

impl RadialLayout {
    fn new(grid: &DiskGrid) -> Self {
        Self {
            radii: grid.ring_radii(),
            h: grid.ring_spacing(),
            outer: grid.radius(),
        }
    }

    /// Adds to `w` the weights `w_i` with
    /// `∫_lo^hi G(ρ) (ρ/c)^p dρ ≈ Σ w_i G_i` for a profile of mode order `s`.
    #[allow(clippy::too_many_arguments)]
    fn accumulate(&self, s: i32, c: f64, p: i32, lo: f64, hi: f64, scale: f64, w: &mut [f64]) {
        if hi <= lo {
            return;
        }
        let n = self.radii.len();
        let rho0 = self.radii[0];
        // [0, ρ0]: G_0 (ρ/ρ0)^s
        let (a, b) = (lo.max(0.0), hi.min(rho0));
        if b > a {
            w[0] += scale * power_piece(a, b, rho0, s, c, p);
        }
        // [ρ_{i-1}, ρ_i]: linear
        for i in 1..n {
            let (c0, d0) = (self.radii[i - 1], self.radii[i]);
            let (a, b) = (lo.max(c0), hi.min(d0));
            if b <= a {
                continue;
            }
            let m0 = moment0(a, b, c, p);
            let e = (moment1(a, b, c, p) - c0 * m0) / self.h;
            w[i - 1] += scale * (m0 - e);
            w[i] += scale * e;
        }
        // [ρ_{n-1}, R]: linear extrapolation from the last two rings
        let c0 = self.radii[n - 1];
        let (a, b) = (lo.max(c0), hi.min(self.outer));
        if b > a {
            let m0 = moment0(a, b, c, p);
            let e = (moment1(a, b, c, p) - c0 * m0) / self.h;
            w[n - 1] += scale * (m0 + e);
            w[n - 2] -= scale * e;
        }
    }

    /// Value of the piecewise profile model at radius `r`.
    fn interpolate(&self, s: i32, profile: impl Fn(usize) -> Complex64, r: f64) -> Complex64 {
        let n = self.radii.len();
        let rho0 = self.radii[0];
        if r <= rho0 {
            return profile(0) * (r / rho0).powi(s);
        }
        let pos = (r - rho0) / self.h;
        let i = (pos.floor() as usize).min(n - 2);
        let t = pos - i as f64;
        profile(i) * (1.0 - t) + profile(i + 1) * t
    }
}

/// Which operator a radial kernel belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Operator {
    CauchyGreen,
    CalderonZygmund,
}

/// Radial kernel of one output mode at radius `r`:
/// `pref * ∫_{lo}^{hi} g_in(ρ) (ρ/r)^p dρ`.
struct ModeKernel {
    input_mode: i64,
    prefactor: f64,
    power: i32,
    inner: bool,
}

impl ModeKernel {
    fn for_output(op: Operator, k: i64, r: f64) -> Option<Self> {
        match op {
            Operator::CauchyGreen => {
                if k <= -1 {
                    Some(Self {
                        input_mode: k + 1,
                        prefactor: 2.0,
                        power: (-k) as i32,
                        inner: true,
                    })
                } else {
                    Some(Self {
                        input_mode: k + 1,
                        prefactor: -2.0,
                        power: -(k as i32),
                        inner: false,
                    })
                }
            }
            Operator::CalderonZygmund => {
                if k == -1 || r == 0.0 {
                    None
                } else if k <= -2 {
                    Some(Self {
                        input_mode: k + 2,
                        prefactor: 2.0 * (k as f64 + 1.0) / r,
                        power: (-k - 1) as i32,
                        inner: true,
                    })
                } else {
                    Some(Self {
                        input_mode: k + 2,
                        prefactor: -2.0 * (k as f64 + 1.0) / r,
                        power: -((k + 1) as i32),
                        inner: false,
                    })
                }
            }
        }
    }

    fn weights(&self, layout: &RadialLayout, r: f64, w: &mut [f64]) {
        w.iter_mut().for_each(|x| *x = 0.0);
        let s = self.input_mode.unsigned_abs() as i32;
        let (lo, hi) = if self.inner {
            (0.0, r)
        } else {
            (r, layout.outer)
        };
        layout.accumulate(s, r, self.power, lo, hi, self.prefactor, w);
    }
}

/// Angular Fourier modes of a grid function, one radial profile per mode.
#[derive(Debug, Clone)]
pub struct ModalField {
    rings: usize,
    angles: usize,
    /// `modes[b * rings + i]`: coefficient of bin `b` on ring `i`.
    modes: Vec<Complex64>,
}

impl ModalField {
    fn profile(&self, b: usize) -> &[Complex64] {
        &self.modes[b * self.rings..(b + 1) * self.rings]
    }
}

/// Precomputed Cauchy-Green and Calderon-Zygmund operators for one grid.
pub struct IntegralOperators {
    grid: Arc<DiskGrid>,
    layout: RadialLayout,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    /// `weights[(b * n + j) * n + i]`, prefactor included; empty rows for
    /// modes without a kernel.
    cg: Vec<f64>,
    cz: Vec<f64>,
    cg_input: Vec<Option<usize>>,
    cz_input: Vec<Option<usize>>,
}

impl std::fmt::Debug for IntegralOperators {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IntegralOperators")
            .field("resolution", &self.grid.resolution())
            .field("radius", &self.grid.radius())
            .finish()
    }
}

impl IntegralOperators {
    pub fn new(grid: Arc<DiskGrid>) -> Self {
        let n = grid.rings();
        let m = grid.angles();
        let layout = RadialLayout::new(&grid);
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(m);
        let inverse = planner.plan_fft_inverse(m);
        let build = |op: Operator| {
            let mut table = vec![0.0; m * n * n];
            let mut inputs = vec![None; m];
            for b in 0..m {
                let k = signed_mode(b, m);
                for j in 0..n {
                    let r = layout.radii[j];
                    let Some(kernel) = ModeKernel::for_output(op, k, r) else {
                        continue;
                    };
                    let Some(b_in) = bin_of(kernel.input_mode, m) else {
                        continue;
                    };
                    inputs[b] = Some(b_in);
                    let row = &mut table[(b * n + j) * n..(b * n + j + 1) * n];
                    kernel.weights(&layout, r, row);
                }
            }
            (table, inputs)
        };
        let (cg, cg_input) = build(Operator::CauchyGreen);
        let (cz, cz_input) = build(Operator::CalderonZygmund);
        Self {
            grid,
            layout,
            forward,
            inverse,
            cg,
            cz,
            cg_input,
            cz_input,
        }
    }

    pub fn grid(&self) -> &Arc<DiskGrid> {
        &self.grid
    }

    fn check(&self, g: &GridFunction) -> Result<()> {
        if !g.grid().same_layout(&self.grid) {
            return Err(Error::GridMismatch(
                "function sampled on a different grid than the operators".into(),
            ));
        }
        if let Some(index) = g.values().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(())
    }

    /// Angular FFT of every ring.
    pub fn modal(&self, g: &GridFunction) -> Result<ModalField> {
        self.check(g)?;
        let n = self.grid.rings();
        let m = self.grid.angles();
        let mut modes = vec![Complex64::new(0.0, 0.0); m * n];
        let mut buf = vec![Complex64::new(0.0, 0.0); m];
        let inv_m = 1.0 / m as f64;
        for i in 0..n {
            buf.copy_from_slice(&g.values()[i * m..(i + 1) * m]);
            self.forward.process(&mut buf);
            for (b, v) in buf.iter().enumerate() {
                modes[b * n + i] = v * inv_m;
            }
        }
        Ok(ModalField {
            rings: n,
            angles: m,
            modes,
        })
    }

    fn apply_table(&self, field: &ModalField, table: &[f64], inputs: &[Option<usize>]) -> Vec<Complex64> {
        let n = self.grid.rings();
        let m = self.grid.angles();
        let mut out = vec![Complex64::new(0.0, 0.0); m * n];
        for b in 0..m {
            let Some(b_in) = inputs[b] else { continue };
            let profile = field.profile(b_in);
            for j in 0..n {
                let row = &table[(b * n + j) * n..(b * n + j + 1) * n];
                let acc = row
                    .iter()
                    .zip(profile)
                    .fold(Complex64::new(0.0, 0.0), |acc, (w, g)| acc + g * *w);
                out[j * m + b] = acc;
            }
        }
        for j in 0..n {
            self.inverse.process(&mut out[j * m..(j + 1) * m]);
        }
        out
    }

    /// `T_CG g` at every node.
    pub fn cauchy_green(&self, g: &GridFunction) -> Result<GridFunction> {
        let field = self.modal(g)?;
        Ok(self.cauchy_green_modal(&field))
    }

    pub fn cauchy_green_modal(&self, field: &ModalField) -> GridFunction {
        let values = self.apply_table(field, &self.cg, &self.cg_input);
        GridFunction::from_raw(self.grid.clone(), values)
    }

    /// `T_CZ g` at every node.
    pub fn calderon_zygmund(&self, g: &GridFunction) -> Result<GridFunction> {
        self.check_symmetric()?;
        let field = self.modal(g)?;
        Ok(self.calderon_zygmund_modal(&field, g))
    }

    pub fn calderon_zygmund_modal(&self, field: &ModalField, g: &GridFunction) -> GridFunction {
        let mut values = self.apply_table(field, &self.cz, &self.cz_input);
        for ((v, z), gz) in values.iter_mut().zip(self.grid.nodes()).zip(g.values()) {
            *v += z.conj() / z * gz;
        }
        GridFunction::from_raw(self.grid.clone(), values)
    }

    fn check_symmetric(&self) -> Result<()> {
        if !self.grid.angles().is_multiple_of(2) {
            return Err(Error::InvalidInput(
                "grid lacks z -> -z symmetry (odd angle count)".into(),
            ));
        }
        Ok(())
    }

    fn mode_values_at(&self, field: &ModalField, op: Operator, r: f64) -> Vec<Complex64> {
        let n = self.grid.rings();
        let m = self.grid.angles();
        let mut w = vec![0.0; n];
        let mut out = vec![Complex64::new(0.0, 0.0); m];
        for (b, slot) in out.iter_mut().enumerate() {
            let k = signed_mode(b, m);
            let Some(kernel) = ModeKernel::for_output(op, k, r) else {
                continue;
            };
            let Some(b_in) = bin_of(kernel.input_mode, m) else {
                continue;
            };
            kernel.weights(&self.layout, r, &mut w);
            *slot = w
                .iter()
                .zip(field.profile(b_in))
                .fold(Complex64::new(0.0, 0.0), |acc, (w, g)| acc + g * *w);
        }
        out
    }

    fn interpolated_modes(&self, field: &ModalField, r: f64) -> Vec<Complex64> {
        let m = field.angles;
        (0..m)
            .map(|b| {
                let s = signed_mode(b, m).unsigned_abs() as i32;
                let profile = field.profile(b);
                self.layout.interpolate(s, |i| profile[i], r)
            })
            .collect()
    }

    fn synthesize(modes: &[Complex64], theta: f64) -> Complex64 {
        let m = modes.len();
        modes
            .iter()
            .enumerate()
            .map(|(b, c)| c * Complex64::from_polar(1.0, signed_mode(b, m) as f64 * theta))
            .sum()
    }

    fn check_point(&self, z: Complex64) -> Result<()> {
        if !z.is_finite() || z.norm() > self.grid.radius() * (1.0 + 1e-12) {
            return Err(Error::InvalidInput(format!(
                "evaluation point {z} outside the grid disk"
            )));
        }
        Ok(())
    }

    /// `T_CG g` at an arbitrary point of the closed grid disk.
    pub fn cauchy_green_at(&self, field: &ModalField, z: Complex64) -> Result<Complex64> {
        self.check_point(z)?;
        if z.norm() == 0.0 {
            return Ok(self.cauchy_green_origin(field));
        }
        let modes = self.mode_values_at(field, Operator::CauchyGreen, z.norm());
        Ok(Self::synthesize(&modes, z.arg()))
    }

    /// `T_CZ g` at an arbitrary point of the closed grid disk.
    pub fn calderon_zygmund_at(&self, field: &ModalField, z: Complex64) -> Result<Complex64> {
        self.check_point(z)?;
        if z.norm() == 0.0 {
            return Ok(self.calderon_zygmund_origin(field));
        }
        let r = z.norm();
        let modes = self.mode_values_at(field, Operator::CalderonZygmund, r);
        let local = Self::synthesize(&self.interpolated_modes(field, r), z.arg());
        Ok(Self::synthesize(&modes, z.arg()) + z.conj() / z * local)
    }

    /// The sampled function itself at an arbitrary point, from its mode profiles.
    pub fn interpolate_at(&self, field: &ModalField, z: Complex64) -> Result<Complex64> {
        self.check_point(z)?;
        let r = z.norm();
        Ok(Self::synthesize(&self.interpolated_modes(field, r), z.arg()))
    }

    /// `T_CG g(0) = -2 ∫ g_1(ρ) dρ`.
    pub fn cauchy_green_origin(&self, field: &ModalField) -> Complex64 {
        self.origin_integral(field, 1, 0, -2.0)
    }

    /// `T_CZ g(0) = -2 ∫ g_2(ρ)/ρ dρ`.
    pub fn calderon_zygmund_origin(&self, field: &ModalField) -> Complex64 {
        self.origin_integral(field, 2, -1, -2.0)
    }

    fn origin_integral(&self, field: &ModalField, mode: i64, power: i32, pref: f64) -> Complex64 {
        let n = self.grid.rings();
        let Some(b) = bin_of(mode, field.angles) else {
            return Complex64::new(0.0, 0.0);
        };
        let mut w = vec![0.0; n];
        self.layout
            .accumulate(mode as i32, 1.0, power, 0.0, self.layout.outer, pref, &mut w);
        w.iter()
            .zip(field.profile(b))
            .fold(Complex64::new(0.0, 0.0), |acc, (w, g)| acc + g * *w)
    }

    /// `T_CG g` on the circle of radius `r` at the grid angles.
    pub fn cauchy_green_ring(&self, field: &ModalField, r: f64) -> Result<Vec<Complex64>> {
        self.check_point(Complex64::new(r, 0.0))?;
        let mut modes = self.mode_values_at(field, Operator::CauchyGreen, r);
        self.inverse.process(&mut modes);
        Ok(modes)
    }

    /// `T_CZ g` on the circle of radius `r` at the grid angles.
    pub fn calderon_zygmund_ring(&self, field: &ModalField, r: f64) -> Result<Vec<Complex64>> {
        self.check_point(Complex64::new(r, 0.0))?;
        let mut modes = self.mode_values_at(field, Operator::CalderonZygmund, r);
        self.inverse.process(&mut modes);
        let mut local = self.interpolated_modes(field, r);
        self.inverse.process(&mut local);
        let m = self.grid.angles();
        for (k, (v, g)) in modes.iter_mut().zip(&local).enumerate() {
            let theta = 2.0 * PI * k as f64 / m as f64;
            *v += Complex64::from_polar(1.0, -2.0 * theta) * g;
        }
        Ok(modes)
    }

    /// Sampled function on the circle of radius `r`, from its mode profiles.
    pub fn interpolate_ring(&self, field: &ModalField, r: f64) -> Result<Vec<Complex64>> {
        self.check_point(Complex64::new(r, 0.0))?;
        let mut local = self.interpolated_modes(field, r);
        self.inverse.process(&mut local);
        Ok(local)
    }
}

/// `T_CG g` on `g`'s own grid.
pub fn cauchy_green(g: &GridFunction) -> Result<GridFunction> {
    IntegralOperators::new(g.grid().clone()).cauchy_green(g)
}

/// `T_CZ g` on `g`'s own grid.
pub fn calderon_zygmund(g: &GridFunction) -> Result<GridFunction> {
    IntegralOperators::new(g.grid().clone()).calderon_zygmund(g)
}


/// One function of the smooth self-test suite with its identity errors.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct IdentityCheck {
    pub name: &'static str,
    pub resolution: usize,
    /// `‖∂̄(T_CG g) - g‖ / ‖g‖` over interior nodes, `∂̄` by finite differences.
    pub inverse_error: f64,
    /// `‖T_CZ g - ∂(T_CG g)‖ / ‖g‖` over interior nodes.
    pub composition_error: f64,
}

type SuiteFn = fn(Complex64) -> Complex64;

/// Low-degree monomials in `z, z̄` and an off-center Gaussian.
pub fn smooth_suite() -> Vec<(&'static str, SuiteFn)> {
    vec![
        ("one", |_| Complex64::new(1.0, 0.0)),
        ("z", |z| z),
        ("zbar", |z| z.conj()),
        ("z^2", |z| z * z),
        ("z zbar", |z| z * z.conj()),
        ("zbar^2", |z| z.conj() * z.conj()),
        ("z^2 zbar", |z| z * z * z.conj()),
        ("gaussian", |z| {
            Complex64::new((-(z - Complex64::new(0.2, -0.1)).norm_sqr() / 0.1).exp(), 0.0)
        }),
    ]
}

/// Identity errors of the operators on the unit disk at one resolution.
pub fn identity_checks(resolution: usize) -> Result<Vec<IdentityCheck>> {
    let grid = DiskGrid::new(resolution, 1.0)?;
    let ops = IntegralOperators::new(grid.clone());
    smooth_suite()
        .into_iter()
        .map(|(name, f)| {
            let g = GridFunction::sample(&grid, f)?;
            let w = ops.cauchy_green(&g)?;
            let scale = g.norm_l2_interior();
            let inverse_error = (&crate::grid::finite_diff_dbar(&w)? - &g).norm_l2_interior() / scale;
            let s = ops.calderon_zygmund(&g)?;
            let composition_error = (&s - &crate::grid::finite_diff_dz(&w)?).norm_l2_interior() / scale;
            Ok(IdentityCheck { name, resolution, inverse_error, composition_error })
        })
        .collect()
}
