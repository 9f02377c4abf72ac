//! Polar discretization of the disk `|z| < radius`.
//!
//! Nodes sit at ring midpoints `r_j = (j + 1/2) h` and at equispaced angles
//! `θ_k = 2πk / M` with `M = 4n` even, so the node set is invariant under
//! `z ↦ -z`. Weights are exact annular-sector areas, which makes the total
//! weight equal to `π radius²` up to rounding.
//!
//! Nodes are stored ring-major: index `j * M + k`.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{Error, Result};

pub const MIN_RESOLUTION: usize = 8;

#[derive(Debug, Clone)]
pub struct DiskGrid {
    resolution: usize,
    radius: f64,
    angles: usize,
    nodes: Vec<Complex64>,
    weights: Vec<f64>,
}

impl DiskGrid {
    /// Builds a grid with `resolution` rings and `4 * resolution` angles.
    pub fn new(resolution: usize, radius: f64) -> Result<Arc<Self>> {
        if resolution < MIN_RESOLUTION {
            return Err(Error::InvalidInput(format!(
                "resolution {resolution} below minimum {MIN_RESOLUTION}"
            )));
        }
        if !(radius > 0.0 && radius <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "radius {radius} outside (0, 1]"
            )));
        }
        let angles = 4 * resolution;
        let h = radius / resolution as f64;
        let dtheta = 2.0 * PI / angles as f64;
        let mut nodes = Vec::with_capacity(resolution * angles);
        let mut weights = Vec::with_capacity(resolution * angles);
        for j in 0..resolution {
            let r = (j as f64 + 0.5) * h;
            for k in 0..angles {
                nodes.push(Complex64::from_polar(r, k as f64 * dtheta));
                weights.push(r * h * dtheta);
            }
        }
        Ok(Arc::new(Self {
            resolution,
            radius,
            angles,
            nodes,
            weights,
        }))
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Number of rings.
    pub fn rings(&self) -> usize {
        self.resolution
    }

    /// Number of angles per ring (always even).
    pub fn angles(&self) -> usize {
        self.angles
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Complex64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn ring_spacing(&self) -> f64 {
        self.radius / self.resolution as f64
    }

    pub fn angle_spacing(&self) -> f64 {
        2.0 * PI / self.angles as f64
    }

    pub fn ring_radius(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.ring_spacing()
    }

    pub fn ring_radii(&self) -> Vec<f64> {
        (0..self.resolution).map(|j| self.ring_radius(j)).collect()
    }

    pub fn angle(&self, k: usize) -> f64 {
        k as f64 * self.angle_spacing()
    }

    pub fn index(&self, ring: usize, angle: usize) -> usize {
        ring * self.angles + angle
    }

    pub fn ring_of(&self, index: usize) -> usize {
        index / self.angles
    }

    /// Index of the node `-z`.
    pub fn antipode(&self, index: usize) -> usize {
        let j = index / self.angles;
        let k = index % self.angles;
        self.index(j, (k + self.angles / 2) % self.angles)
    }

    /// Nodes with a full centered stencil. The outermost ring is excluded.
    pub fn is_interior(&self, index: usize) -> bool {
        self.ring_of(index) + 1 < self.resolution
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Two grids are compatible when they were built from the same parameters.
    pub fn same_layout(&self, other: &DiskGrid) -> bool {
        self.resolution == other.resolution && self.radius == other.radius
    }
}

/// Complex samples on a [`DiskGrid`].
#[derive(Debug, Clone)]
pub struct GridFunction {
    grid: Arc<DiskGrid>,
    values: Vec<Complex64>,
}

impl GridFunction {
    pub fn new(grid: Arc<DiskGrid>, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} values for {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Arc<DiskGrid>) -> Self {
        let values = vec![Complex64::new(0.0, 0.0); grid.len()];
        Self { grid, values }
    }

    /// Samples a pointwise function at every node.
    pub fn sample<F>(grid: &Arc<DiskGrid>, f: F) -> Result<Self>
    where
        F: Fn(Complex64) -> Complex64,
    {
        let values = grid.nodes().iter().map(|&z| f(z)).collect();
        Self::new(grid.clone(), values)
    }

    pub(crate) fn from_raw(grid: Arc<DiskGrid>, values: Vec<Complex64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn grid(&self) -> &Arc<DiskGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }

    pub fn check_same_grid(&self, other: &GridFunction) -> Result<()> {
        if self.grid.same_layout(&other.grid) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "resolution/radius ({}, {}) vs ({}, {})",
                self.grid.resolution(),
                self.grid.radius(),
                other.grid.resolution(),
                other.grid.radius()
            )))
        }
    }

    pub fn map<F>(&self, f: F) -> Self
    where
        F: Fn(Complex64) -> Complex64,
    {
        Self::from_raw(self.grid.clone(), self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_with<F>(&self, other: &GridFunction, f: F) -> Result<Self>
    where
        F: Fn(Complex64, Complex64) -> Complex64,
    {
        self.check_same_grid(other)?;
        Ok(Self::from_raw(
            self.grid.clone(),
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn scale(&self, c: Complex64) -> Self {
        self.map(|v| v * c)
    }

    /// Discrete L² norm over all nodes.
    pub fn norm_l2(&self) -> f64 {
        self.weighted_sum(|_| true).sqrt()
    }

    /// Discrete L² norm over nodes with a full stencil.
    pub fn norm_l2_interior(&self) -> f64 {
        let grid = self.grid.clone();
        self.weighted_sum(|i| grid.is_interior(i)).sqrt()
    }

    /// Discrete L² norm over nodes with `|z| < r`.
    pub fn norm_l2_within(&self, r: f64) -> f64 {
        let grid = self.grid.clone();
        self.weighted_sum(|i| grid.nodes()[i].norm() < r).sqrt()
    }

    fn weighted_sum<P: Fn(usize) -> bool>(&self, keep: P) -> f64 {
        self.values
            .iter()
            .zip(self.grid.weights())
            .enumerate()
            .filter(|(i, _)| keep(*i))
            .map(|(_, (v, w))| w * v.norm_sqr())
            .sum()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

impl std::ops::Add for &GridFunction {
    type Output = GridFunction;
    fn add(self, rhs: &GridFunction) -> GridFunction {
        self.zip_with(rhs, |a, b| a + b).expect("grid mismatch in add")
    }
}

impl std::ops::Sub for &GridFunction {
    type Output = GridFunction;
    fn sub(self, rhs: &GridFunction) -> GridFunction {
        self.zip_with(rhs, |a, b| a - b).expect("grid mismatch in sub")
    }
}

/// Which Wirtinger derivative to take.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Wirtinger {
    Dz,
    Dzbar,
}

/// Second-order finite-difference `∂f/∂z̄`.
///
/// Centered differences in `r` and `θ`; the ring below the innermost one is
/// the innermost ring rotated by π. The outer ring uses a one-sided
/// second-order stencil and is reported as non-interior by
/// [`DiskGrid::is_interior`].
pub fn finite_diff_dbar(f: &GridFunction) -> Result<GridFunction> {
    wirtinger_fd(f, Wirtinger::Dzbar)
}

/// Second-order finite-difference `∂f/∂z`. See [`finite_diff_dbar`].
pub fn finite_diff_dz(f: &GridFunction) -> Result<GridFunction> {
    wirtinger_fd(f, Wirtinger::Dz)
}

fn wirtinger_fd(f: &GridFunction, which: Wirtinger) -> Result<GridFunction> {
    let grid = f.grid();
    let n = grid.rings();
    let m = grid.angles();
    if n < 3 || m < 4 {
        return Err(Error::InvalidInput(
            "grid too coarse for the finite-difference stencil".into(),
        ));
    }
    let h = grid.ring_spacing();
    let dt = grid.angle_spacing();
    let v = f.values();
    let at = |j: usize, k: usize| v[j * m + (k % m)];
    let mut out = Vec::with_capacity(v.len());
    for j in 0..n {
        let r = grid.ring_radius(j);
        for k in 0..m {
            let f_r = if j + 1 < n {
                let below = if j == 0 {
                    at(0, k + m / 2)
                } else {
                    at(j - 1, k)
                };
                (at(j + 1, k) - below) / (2.0 * h)
            } else {
                (3.0 * at(j, k) - 4.0 * at(j - 1, k) + at(j - 2, k)) / (2.0 * h)
            };
            let f_t = (at(j, k + 1) - at(j, k + m - 1)) / (2.0 * dt);
            let phase = Complex64::from_polar(1.0, grid.angle(k));
            let i_over_r = Complex64::new(0.0, 1.0 / r);
            let d = match which {
                Wirtinger::Dzbar => 0.5 * phase * (f_r + i_over_r * f_t),
                Wirtinger::Dz => 0.5 * phase.conj() * (f_r - i_over_r * f_t),
            };
            out.push(d);
        }
    }
    GridFunction::new(grid.clone(), out)
}
