//! Intersection indices of disks in `ℂ²`, their slices by round spheres,
//! and linking numbers of the slices.

use nalgebra::{Matrix4, Vector3, Vector4};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::almost_complex::{AlmostComplexStructure, Component};
use crate::beltrami::{DiskMap, Jet};
use crate::error::{Error, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkingConfig {
    /// Points per diameter of the coarse intersection search.
    pub search_points: usize,
    /// Candidates are searched in `|z| ≤ search_radius · R`.
    pub search_radius: f64,
    pub root_tolerance: f64,
    /// Samples of the first winding-number circle; doubled on disagreement.
    pub winding_samples: usize,
    /// Largest step between consecutive slice points, in `ℝ⁴`.
    pub max_step: f64,
    /// Smallest accepted angle, in degrees, between a slice and the
    /// distribution of complex tangent planes of the sphere.
    pub min_angle_deg: f64,
    /// Smallest accepted `|∇|M|²| / (2r‖dM‖)` along a slice.
    pub min_transversality: f64,
    /// Seed for the projection directions used by the crossing count.
    pub projection_seed: u64,
}

impl Default for LinkingConfig {
    fn default() -> Self {
        LinkingConfig {
            search_points: 24,
            search_radius: 0.9,
            root_tolerance: 1e-13,
            winding_samples: 32,
            max_step: 0.02,
            min_angle_deg: 5.0,
            min_transversality: 1e-3,
            projection_seed: 1,
        }
    }
}

fn jets(m: &DiskMap, z: Complex64) -> Result<[Jet; 2]> {
    let (a, b) = m.jet_at(z)?;
    Ok([a, b.unwrap_or(Jet { value: ZERO, dz: ZERO, dzbar: ZERO })])
}

fn value(m: &DiskMap, z: Complex64) -> Result<[Complex64; 2]> {
    let j = jets(m, z)?;
    Ok([j[0].value, j[1].value])
}

fn to_real(p: [Complex64; 2]) -> [f64; 4] {
    [p[0].re, p[0].im, p[1].re, p[1].im]
}

/// Real partials `(∂/∂x, ∂/∂y)` of a component.
fn partials(j: &Jet) -> (Complex64, Complex64) {
    (j.dz + j.dzbar, Complex64::i() * (j.dz - j.dzbar))
}

/// Winding number of a closed sampled loop around 0; `None` if it passes
/// within `floor` of 0.
fn winding(values: &[Complex64], floor: f64) -> Option<i64> {
    if values.iter().any(|v| !(v.norm() > floor)) {
        return None;
    }
    let mut total = 0.0;
    for k in 0..values.len() {
        let next = values[(k + 1) % values.len()];
        total += (next / values[k]).arg();
    }
    Some((total / std::f64::consts::TAU).round() as i64)
}

/// Winding of `f` around the circle `|z - center| = rho`, with the sample
/// count doubled until two consecutive counts agree.
fn circle_winding(
    f: impl Fn(Complex64) -> Result<Complex64>,
    center: Complex64,
    rho: f64,
    samples: usize,
    floor: f64,
) -> Result<i64> {
    let eval = |n: usize| -> Result<Option<i64>> {
        let vals: Vec<Complex64> = (0..n)
            .map(|k| f(center + Complex64::from_polar(rho, std::f64::consts::TAU * k as f64 / n as f64)))
            .collect::<Result<_>>()?;
        Ok(winding(&vals, floor))
    };
    let mut n = samples.max(8);
    let mut prev = eval(n)?;
    for _ in 0..4 {
        n *= 2;
        let cur = eval(n)?;
        if prev.is_some() && cur == prev {
            return Ok(cur.unwrap_or(0));
        }
        prev = cur;
    }
    Err(Error::Degenerate(format!(
        "winding number around {center} at radius {rho:.3e} is not stable"
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Intersection {
    pub point: [Complex64; 2],
    pub preimages: (Complex64, Complex64),
    /// Local intersection index `δ_p`.
    pub index: i64,
    /// `1 +` the vanishing order of the derivative of each disk at its preimage.
    pub multiplicities: (u32, u32),
}

/// `1 +` order of vanishing of `∂M` at `z`, from the winding of its components.
fn multiplicity(m: &DiskMap, z: Complex64, rho: f64, cfg: &LinkingConfig) -> Result<u32> {
    let j = jets(m, z)?;
    if j.iter().any(|c| c.dz.norm() + c.dzbar.norm() > 1e-6) {
        return Ok(1);
    }
    let mut order: Option<i64> = None;
    for c in 0..2 {
        let f = |w: Complex64| -> Result<Complex64> { Ok(jets(m, w)?[c].dz) };
        let peak = (0..16)
            .map(|k| f(z + Complex64::from_polar(rho, std::f64::consts::TAU * k as f64 / 16.0)))
            .collect::<Result<Vec<_>>>()?
            .iter()
            .fold(0.0f64, |a, v| a.max(v.norm()));
        if peak < 1e-12 {
            continue;
        }
        let w = circle_winding(f, z, rho, cfg.winding_samples, peak * 1e-9)?;
        order = Some(order.map_or(w, |o| o.min(w)));
    }
    match order {
        Some(o) if o >= 0 => Ok(1 + o as u32),
        _ => Err(Error::Degenerate(format!("disk is constant near {z}"))),
    }
}

/// Levenberg-Marquardt on `M₁(z₁) - M₂(z₂) = 0` from `start`.
fn refine(
    m1: &DiskMap,
    m2: &DiskMap,
    start: (Complex64, Complex64),
    limit: (f64, f64),
    tol: f64,
) -> Result<Option<(Complex64, Complex64)>> {
    let residual = |z1: Complex64, z2: Complex64| -> Result<(Vector4<f64>, Matrix4<f64>)> {
        let (a, b) = (jets(m1, z1)?, jets(m2, z2)?);
        let f = Vector4::new(
            (a[0].value - b[0].value).re,
            (a[0].value - b[0].value).im,
            (a[1].value - b[1].value).re,
            (a[1].value - b[1].value).im,
        );
        let mut jac = Matrix4::zeros();
        for c in 0..2 {
            let (ax, ay) = partials(&a[c]);
            let (bx, by) = partials(&b[c]);
            for (col, d) in [ax, ay, -bx, -by].into_iter().enumerate() {
                jac[(2 * c, col)] = d.re;
                jac[(2 * c + 1, col)] = d.im;
            }
        }
        Ok((f, jac))
    };
    let (mut z1, mut z2) = start;
    let (mut f, mut jac) = residual(z1, z2)?;
    let mut lambda = 1e-6;
    for _ in 0..400 {
        if f.norm() < tol {
            return Ok(Some((z1, z2)));
        }
        let jt = jac.transpose();
        let lhs = jt * jac + Matrix4::identity() * lambda * (1.0 + (jt * jac).diagonal().max());
        let Some(step) = lhs.lu().solve(&(-(jt * f))) else {
            return Ok(None);
        };
        let n1 = z1 + Complex64::new(step[0], step[1]);
        let n2 = z2 + Complex64::new(step[2], step[3]);
        if n1.norm() > limit.0 || n2.norm() > limit.1 {
            lambda *= 10.0;
            if lambda > 1e12 {
                return Ok(None);
            }
            continue;
        }
        let (nf, nj) = residual(n1, n2)?;
        if nf.norm() < f.norm() {
            (z1, z2, f, jac) = (n1, n2, nf, nj);
            lambda = (lambda * 0.3).max(1e-15);
            if step.norm() < 1e-15 {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
    }
    Ok((f.norm() < tol).then_some((z1, z2)))
}

/// Isolated common values of two disks with their intersection indices.
///
/// Candidates come from a coarse search over pairs of parameter points and
/// are refined by Levenberg-Marquardt. The index is the winding number of
/// `h ∘ M₂` around the preimage, where `h = 0` locally defines the image of
/// the immersed disk as a graph; for an immersed disk this is the local
/// degree of `(z₁, z₂) ↦ M₁(z₁) - M₂(z₂)`.
pub fn intersect_disks(m1: &DiskMap, m2: &DiskMap, cfg: &LinkingConfig) -> Result<Vec<Intersection>> {
    let r1 = m1.grid().radius();
    let r2 = m2.grid().radius();
    let sample = |m: &DiskMap, r: f64| -> Result<Vec<(Complex64, [Complex64; 2])>> {
        let n = cfg.search_points.max(4);
        let h = 2.0 * cfg.search_radius * r / n as f64;
        let mut out = Vec::new();
        for i in 0..=n {
            for k in 0..=n {
                let z = Complex64::new(-cfg.search_radius * r + i as f64 * h, -cfg.search_radius * r + k as f64 * h);
                if z.norm() <= cfg.search_radius * r {
                    out.push((z, value(m, z)?));
                }
            }
        }
        Ok(out)
    };
    let s1 = sample(m1, r1)?;
    let s2 = sample(m2, r2)?;
    let dist = |a: [Complex64; 2], b: [Complex64; 2]| ((a[0] - b[0]).norm_sqr() + (a[1] - b[1]).norm_sqr()).sqrt();
    // Candidate threshold: a couple of image cells.
    let spacing = |m: &DiskMap, s: &[(Complex64, [Complex64; 2])], r: f64| -> f64 {
        let h = 2.0 * cfg.search_radius * r / cfg.search_points.max(4) as f64;
        s.iter().map(|(z, _)| jets_norm(m, *z)).fold(0.0f64, f64::max) * h
    };
    let threshold = 1.5 * (spacing(m1, &s1, r1) + spacing(m2, &s2, r2));
    let mut candidates: Vec<(f64, Complex64, Complex64)> = s1
        .par_iter()
        .flat_map_iter(|(z1, p1)| {
            s2.iter()
                .map(move |(z2, p2)| (dist(*p1, *p2), *z1, *z2))
                .filter(|c| c.0 < threshold)
        })
        .collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.re.total_cmp(&b.1.re)).then(a.1.im.total_cmp(&b.1.im)));
    candidates.truncate(2000);

    let limit1 = r1 * (1.0 - 1e-9);
    let limit2 = r2 * (1.0 - 1e-9);
    let mut roots: Vec<(Complex64, Complex64)> = Vec::new();
    let near = |roots: &[(Complex64, Complex64)], z1: Complex64, z2: Complex64, d: f64| {
        roots.iter().any(|(a, b)| (a - z1).norm() < d && (b - z2).norm() < d)
    };
    let cell = 2.0 * cfg.search_radius * r1.max(r2) / cfg.search_points.max(4) as f64;
    for (_, z1, z2) in candidates {
        if near(&roots, z1, z2, 1.5 * cell) {
            continue;
        }
        if let Some((a, b)) = refine(m1, m2, (z1, z2), (limit1, limit2), cfg.root_tolerance)? {
            if a.norm() >= limit1 || b.norm() >= limit2 {
                return Err(Error::Degenerate("intersection on the boundary of a disk".into()));
            }
            if !near(&roots, a, b, 0.5 * cell) {
                roots.push((a, b));
            }
        }
    }

    let mut out = Vec::with_capacity(roots.len());
    for (i, &(z1, z2)) in roots.iter().enumerate() {
        // Circle radius: well inside the disks and away from other preimages.
        let mut rho = 0.05 * r1.min(r2);
        rho = rho.min(0.5 * (r1 - z1.norm())).min(0.5 * (r2 - z2.norm()));
        for (k, &(a, b)) in roots.iter().enumerate() {
            if k != i {
                rho = rho.min(0.4 * (a - z1).norm().max((b - z2).norm()));
            }
        }
        let mu1 = multiplicity(m1, z1, rho, cfg)?;
        let mu2 = multiplicity(m2, z2, rho, cfg)?;
        let index = if mu1 == 1 {
            graph_index(m1, z1, m2, z2, rho, cfg)?
        } else if mu2 == 1 {
            graph_index(m2, z2, m1, z1, rho, cfg)?
        } else {
            return Err(Error::Degenerate(format!("both disks are singular at the common value {:?}", value(m1, z1)?)));
        };
        out.push(Intersection { point: value(m1, z1)?, preimages: (z1, z2), index, multiplicities: (mu1, mu2) });
    }
    out.sort_by(|a, b| a.preimages.0.re.total_cmp(&b.preimages.0.re).then(a.preimages.0.im.total_cmp(&b.preimages.0.im)));
    Ok(out)
}

fn jets_norm(m: &DiskMap, z: Complex64) -> f64 {
    jets(m, z).map_or(0.0, |j| j.iter().map(|c| c.dz.norm() + c.dzbar.norm()).fold(0.0, f64::max))
}

/// Winding of `h ∘ N` around `zn`, where `h(x, y) = 0` defines the image of
/// the immersed disk `M` near `M(zm)` as a graph over its better coordinate.
fn graph_index(m: &DiskMap, zm: Complex64, n: &DiskMap, zn: Complex64, rho: f64, cfg: &LinkingConfig) -> Result<i64> {
    let j = jets(m, zm)?;
    // Graph over the component whose real differential is best conditioned.
    let det = |c: &Jet| c.dz.norm_sqr() - c.dzbar.norm_sqr();
    let (base, other) = if det(&j[0]).abs() >= det(&j[1]).abs() { (0, 1) } else { (1, 0) };
    let r = m.grid().radius();
    let h = |w: Complex64| -> Result<Complex64> {
        let target = value(n, w)?;
        // Solve M_base(s) = target_base for s near zm by Newton.
        let mut s = zm;
        for _ in 0..60 {
            let js = jets(m, s)?;
            let f = js[base].value - target[base];
            if f.norm() < 1e-14 {
                break;
            }
            // Real 2×2 inverse of the differential.
            let (px, py) = partials(&js[base]);
            let d = px.re * py.im - px.im * py.re;
            if d.abs() < 1e-300 {
                return Err(Error::Degenerate("graph coordinate is singular".into()));
            }
            let dx = (py.im * f.re - py.re * f.im) / d;
            let dy = (-px.im * f.re + px.re * f.im) / d;
            s -= Complex64::new(dx, dy);
            if !(s.norm() < r) {
                return Err(Error::Degenerate("graph inversion left the disk".into()));
            }
        }
        Ok(target[other] - value(m, s)?[other])
    };
    let peak = (0..16)
        .map(|k| h(zn + Complex64::from_polar(rho, std::f64::consts::TAU * k as f64 / 16.0)))
        .collect::<Result<Vec<_>>>()?
        .iter()
        .fold(0.0f64, |a, v| a.max(v.norm()));
    if !(peak > 1e-13) {
        return Err(Error::Degenerate("intersection is not isolated".into()));
    }
    circle_winding(h, zn, rho, cfg.winding_samples, peak * 1e-9)
}

/// A closed polyline on the sphere of radius `radius` in `ℝ⁴`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSlice {
    pub points: Vec<[f64; 4]>,
    pub radius: f64,
    pub source: String,
    /// Parameter-disk preimages of the points.
    pub preimages: Vec<Complex64>,
    pub max_step: f64,
    /// `min |∇|M|²| / (2r‖dM‖)` along the curve.
    pub transversality: f64,
    /// Smallest angle to the complex tangent distribution, in degrees.
    pub min_angle_deg: f64,
}

impl CurveSlice {
    pub fn length(&self) -> f64 {
        let n = self.points.len();
        (0..n).map(|k| dist4(&self.points[k], &self.points[(k + 1) % n])).sum()
    }
}

fn dist4(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `(φ, ∇φ)` for `φ = |M|²` as a function of the parameter, with `∇φ`
/// written as the complex number `φ_x + iφ_y`.
fn sphere_level(m: &DiskMap, z: Complex64) -> Result<(f64, Complex64, [Jet; 2])> {
    let j = jets(m, z)?;
    let mut phi = 0.0;
    let mut grad = ZERO;
    for c in &j {
        let (px, py) = partials(c);
        phi += c.value.norm_sqr();
        grad += Complex64::new(2.0 * (c.value.conj() * px).re, 2.0 * (c.value.conj() * py).re);
    }
    Ok((phi, grad, j))
}

/// `J(p)ᵀ n` for the block-diagonal structure at `p`, in real coordinates.
fn structure_transpose_apply(j: &AlmostComplexStructure, p: [Complex64; 2], n: [f64; 4]) -> Result<[f64; 4]> {
    let a = j.block_at(Component::First, p[0], p[1])?.0;
    let b = j.block_at(Component::Second, p[0], p[1])?.0;
    Ok([
        a[0][0] * n[0] + a[1][0] * n[1],
        a[0][1] * n[0] + a[1][1] * n[1],
        b[0][0] * n[2] + b[1][0] * n[3],
        b[0][1] * n[2] + b[1][1] * n[3],
    ])
}

fn dot4(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Angle in degrees between `t` and the complex tangent plane of the sphere
/// at `p`, which is the orthogonal complement of `{p, J(p)ᵀp}`.
fn distribution_angle(j: &AlmostComplexStructure, p: [Complex64; 2], t: [f64; 4]) -> Result<f64> {
    let n = to_real(p);
    let nn = dot4(&n, &n).sqrt();
    let e1 = n.map(|x| x / nn);
    let mut e2 = structure_transpose_apply(j, p, n)?;
    let c = dot4(&e2, &e1);
    for k in 0..4 {
        e2[k] -= c * e1[k];
    }
    let n2 = dot4(&e2, &e2).sqrt();
    if n2 < 1e-14 {
        return Err(Error::Numerical("structure maps the normal to itself".into()));
    }
    let e2 = e2.map(|x| x / n2);
    let tn = dot4(&t, &t).sqrt();
    let proj = (dot4(&t, &e1).powi(2) + dot4(&t, &e2).powi(2)).sqrt() / tn;
    Ok(proj.min(1.0).asin().to_degrees())
}

/// Traces `M ∩ S_r` by predictor-corrector continuation in the parameter disk.
pub fn sphere_slice(
    m: &DiskMap,
    r: f64,
    j: &AlmostComplexStructure,
    source: &str,
    cfg: &LinkingConfig,
) -> Result<CurveSlice> {
    if !(r > 0.0) || !(cfg.max_step > 0.0) {
        return Err(Error::InvalidInput("radius and max_step must be positive".into()));
    }
    let rd = m.grid().radius();
    let target = r * r;
    let correct = |mut z: Complex64| -> Result<Complex64> {
        for _ in 0..50 {
            let (phi, g, _) = sphere_level(m, z)?;
            let f = phi - target;
            if f.abs() < 1e-13 * target {
                return Ok(z);
            }
            if g.norm() < 1e-300 {
                break;
            }
            z -= g * (f / g.norm_sqr());
            if !(z.norm() < rd) {
                break;
            }
        }
        Err(Error::OutOfRegime(format!("slice at r = {r} leaves the parameter disk or is tangential")))
    };
    // Start on the positive real parameter axis: first sign change of φ - r².
    let steps = 2000;
    let mut start = None;
    let mut prev = sphere_level(m, ZERO)?.0 - target;
    for k in 1..steps {
        let z = Complex64::new(rd * k as f64 / steps as f64, 0.0);
        let cur = sphere_level(m, z)?.0 - target;
        if prev < 0.0 && cur >= 0.0 {
            let (mut lo, mut hi) = (rd * (k - 1) as f64 / steps as f64, z.re);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if sphere_level(m, Complex64::new(mid, 0.0))?.0 < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            start = Some(Complex64::new(0.5 * (lo + hi), 0.0));
            break;
        }
        prev = cur;
    }
    let start = correct(start.ok_or_else(|| Error::OutOfRegime(format!("disk does not reach the sphere r = {r}")))?)?;

    let mut preimages = vec![start];
    let mut points = vec![to_real(value(m, start)?)];
    let mut transversality = f64::INFINITY;
    let mut min_angle = f64::INFINITY;
    let mut z = start;
    let mut travelled = 0.0;
    let max_points = 200_000;
    loop {
        let (_, g, jz) = sphere_level(m, z)?;
        let dm = jz.iter().map(|c| c.dz.norm() + c.dzbar.norm()).fold(0.0, f64::max);
        transversality = transversality.min(g.norm() / (2.0 * r * dm.max(1e-300)));
        // Counterclockwise tangent of the level set in the parameter disk.
        let dir = Complex64::i() * g / g.norm();
        let image_dir: [f64; 4] = {
            let mut t = [0.0; 4];
            for c in 0..2 {
                let (px, py) = partials(&jz[c]);
                let d = px * dir.re + py * dir.im;
                t[2 * c] = d.re;
                t[2 * c + 1] = d.im;
            }
            t
        };
        let speed = dot4(&image_dir, &image_dir).sqrt();
        min_angle = min_angle.min(distribution_angle(j, [jz[0].value, jz[1].value], image_dir)?);
        if transversality < cfg.min_transversality {
            return Err(Error::OutOfRegime(format!(
                "slice at r = {r} is tangential (margin {transversality:.3e})"
            )));
        }
        // Predictor with the step shrunk until the chord respects max_step.
        let mut h = 0.9 * cfg.max_step / speed;
        let last = *points.last().unwrap();
        let next = loop {
            let cand = correct(z + dir * h)?;
            let p = to_real(value(m, cand)?);
            if dist4(&p, &last) <= cfg.max_step {
                break (cand, p);
            }
            h *= 0.5;
            if h < 1e-12 {
                return Err(Error::Numerical("slice continuation stalled".into()));
            }
        };
        travelled += dist4(&next.1, &last);
        let close = dist4(&next.1, &points[0]);
        if travelled > 4.0 * cfg.max_step && close <= cfg.max_step && points.len() > 3 {
            // The next point would be at or past the start: close the loop.
            let back = {
                let a = [next.1[0] - last[0], next.1[1] - last[1], next.1[2] - last[2], next.1[3] - last[3]];
                let b = [points[0][0] - last[0], points[0][1] - last[1], points[0][2] - last[2], points[0][3] - last[3]];
                dot4(&a, &b)
            };
            if back > 0.0 || close < 0.5 * cfg.max_step {
                if dist4(&last, &points[0]) > cfg.max_step * (1.0 + 1e-9) {
                    points.push(next.1);
                    preimages.push(next.0);
                }
                break;
            }
        }
        points.push(next.1);
        preimages.push(next.0);
        z = next.0;
        if points.len() > max_points {
            return Err(Error::Numerical("slice did not close".into()));
        }
    }
    if min_angle < cfg.min_angle_deg {
        return Err(Error::OutOfRegime(format!(
            "slice at r = {r} meets the complex tangent distribution at {min_angle:.2}°"
        )));
    }
    Ok(CurveSlice {
        points,
        radius: r,
        source: source.to_string(),
        preimages,
        max_step: cfg.max_step,
        transversality,
        min_angle_deg: min_angle,
    })
}

/// Deterministic pseudo-random unit vectors for projection choices.
fn projection_frames(seed: u64, count: usize) -> Vec<([f64; 4], Vector3<f64>)> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut pole: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let n = dot4(&pole, &pole).sqrt();
            pole.iter_mut().for_each(|x| *x /= n);
            let view = Vector3::<f64>::from_fn(|_, _| rng.sample(StandardNormal)).normalize();
            (pole, view)
        })
        .collect()
}

/// Stereographic projection of `S_r` from `r·pole` to `ℝ³`.
fn stereographic(points: &[[f64; 4]], r: f64, pole: &[f64; 4]) -> Option<Vec<Vector3<f64>>> {
    // Orthonormal frame completing the pole.
    let mut basis: Vec<[f64; 4]> = Vec::with_capacity(3);
    for k in 0..4 {
        if basis.len() == 3 {
            break;
        }
        let mut e = [0.0; 4];
        e[k] = 1.0;
        let c = dot4(&e, pole);
        for i in 0..4 {
            e[i] -= c * pole[i];
        }
        for b in &basis {
            let c = dot4(&e, b);
            for i in 0..4 {
                e[i] -= c * b[i];
            }
        }
        let n = dot4(&e, &e).sqrt();
        if n > 0.3 {
            basis.push(e.map(|x| x / n));
        }
    }
    // The picture is oriented like S_r (outward normal first) when
    // det(-pole, e1, e2, e3) > 0; flip e3 otherwise.
    let m = nalgebra::Matrix4::from_columns(&[
        Vector4::from(pole.map(|x| -x)),
        Vector4::from(basis[0]),
        Vector4::from(basis[1]),
        Vector4::from(basis[2]),
    ]);
    if m.determinant() < 0.0 {
        basis[2] = basis[2].map(|x| -x);
    }
    points
        .iter()
        .map(|p| {
            let h = r - dot4(p, pole);
            if h < 1e-6 * r {
                return None;
            }
            Some(Vector3::new(dot4(p, &basis[0]), dot4(p, &basis[1]), dot4(p, &basis[2])) * (r / h))
        })
        .collect()
}

/// Sum of crossing signs where a segment of `a` passes over one of `b`,
/// viewed along `view`. `None` when a crossing is too close to degenerate.
fn over_crossings(a: &[Vector3<f64>], b: &[Vector3<f64>], view: &Vector3<f64>) -> Option<i64> {
    let helper = if view.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = view.cross(&helper).normalize();
    let e2 = view.cross(&e1);
    let flat = |p: &Vector3<f64>| (p.dot(&e1), p.dot(&e2), p.dot(view));
    let (na, nb) = (a.len(), b.len());
    let mut total = 0i64;
    for i in 0..na {
        let (p0, p1) = (flat(&a[i]), flat(&a[(i + 1) % na]));
        for k in 0..nb {
            let (q0, q1) = (flat(&b[k]), flat(&b[(k + 1) % nb]));
            let d = (p1.0 - p0.0) * (q1.1 - q0.1) - (p1.1 - p0.1) * (q1.0 - q0.0);
            let scale = ((p1.0 - p0.0).hypot(p1.1 - p0.1)) * ((q1.0 - q0.0).hypot(q1.1 - q0.1));
            let rx = q0.0 - p0.0;
            let ry = q0.1 - p0.1;
            if d.abs() <= 1e-12 * scale {
                // Parallel segments: degenerate only if collinear and overlapping.
                if (rx * (p1.1 - p0.1) - ry * (p1.0 - p0.0)).abs() <= 1e-12 * scale.max(1e-300) {
                    let s0 = rx * (p1.0 - p0.0) + ry * (p1.1 - p0.1);
                    if s0.abs() <= scale {
                        return None;
                    }
                }
                continue;
            }
            let s = (rx * (q1.1 - q0.1) - ry * (q1.0 - q0.0)) / d;
            let t = (rx * (p1.1 - p0.1) - ry * (p1.0 - p0.0)) / d;
            if !(-1e-9..=1.0 + 1e-9).contains(&s) || !(-1e-9..=1.0 + 1e-9).contains(&t) {
                continue;
            }
            if s.abs() < 1e-9 || (s - 1.0).abs() < 1e-9 || t.abs() < 1e-9 || (t - 1.0).abs() < 1e-9 {
                return None;
            }
            let ha = p0.2 + s * (p1.2 - p0.2);
            let hb = q0.2 + t * (q1.2 - q0.2);
            if (ha - hb).abs() < 1e-12 {
                return None;
            }
            if ha > hb {
                total += if d > 0.0 { 1 } else { -1 };
            }
        }
    }
    Some(total)
}

/// Linking number of one stereographic picture, with both over/under counts
/// required to agree.
fn projected_linking(g1: &CurveSlice, g2: &CurveSlice, pole: &[f64; 4], view: &Vector3<f64>) -> Option<i64> {
    let a = stereographic(&g1.points, g1.radius, pole)?;
    let b = stereographic(&g2.points, g2.radius, pole)?;
    let ab = over_crossings(&a, &b, view)?;
    let ba = over_crossings(&b, &a, view)?;
    (ab == ba).then_some(ab)
}

/// Linking number of two disjoint closed curves on the same sphere, from
/// signed crossings of generic stereographic pictures; two independent
/// pictures must agree.
pub fn linking_number(g1: &CurveSlice, g2: &CurveSlice, cfg: &LinkingConfig) -> Result<i64> {
    if (g1.radius - g2.radius).abs() > 1e-12 * g1.radius.max(1.0) {
        return Err(Error::InvalidInput("curves lie on different spheres".into()));
    }
    if g1.points.len() < 3 || g2.points.len() < 3 {
        return Err(Error::InvalidInput("curves need at least three points".into()));
    }
    let gap = g1
        .points
        .par_iter()
        .map(|p| g2.points.iter().map(|q| dist4(p, q)).fold(f64::INFINITY, f64::min))
        .reduce(|| f64::INFINITY, f64::min);
    if gap <= 0.5 * (g1.max_step + g2.max_step) {
        return Err(Error::Degenerate(format!("curves come within {gap:.3e} of each other")));
    }
    let mut found = Vec::new();
    for (pole, view) in projection_frames(cfg.projection_seed, 16) {
        if let Some(l) = projected_linking(g1, g2, &pole, &view) {
            found.push(l);
            if found.len() == 2 {
                break;
            }
        }
    }
    match found.as_slice() {
        [a, b] if a == b => Ok(*a),
        [a, b] => Err(Error::Numerical(format!("projections disagree: {a} vs {b}"))),
        _ => Err(Error::Degenerate("no generic projection found".into())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadiusCheck {
    pub radius: f64,
    pub admissible: bool,
    pub linking: Option<i64>,
    pub index_sum: i64,
    pub equal: bool,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkingReport {
    pub intersections: Vec<Intersection>,
    pub radii: Vec<RadiusCheck>,
    /// Every index is at least the product of the multiplicities (and ≥ 1).
    pub positivity: bool,
    pub all_equal: bool,
}

/// Checks that the slices at each radius link as many times as the indices
/// of the intersections inside the ball add up to.
pub fn verify_linking_identity(
    m1: &DiskMap,
    m2: &DiskMap,
    radii: &[f64],
    j: &AlmostComplexStructure,
    cfg: &LinkingConfig,
) -> Result<LinkingReport> {
    let intersections = intersect_disks(m1, m2, cfg)?;
    let positivity = intersections
        .iter()
        .all(|p| p.index >= 1 && p.index >= (p.multiplicities.0 * p.multiplicities.1) as i64);
    let checks: Vec<RadiusCheck> = radii
        .par_iter()
        .map(|&r| {
            let index_sum = intersections
                .iter()
                .filter(|p| (p.point[0].norm_sqr() + p.point[1].norm_sqr()).sqrt() < r)
                .map(|p| p.index)
                .sum();
            let outcome = sphere_slice(m1, r, j, "first", cfg)
                .and_then(|a| Ok((a, sphere_slice(m2, r, j, "second", cfg)?)))
                .and_then(|(a, b)| linking_number(&a, &b, cfg));
            match outcome {
                Ok(l) => RadiusCheck { radius: r, admissible: true, linking: Some(l), index_sum, equal: l == index_sum, note: None },
                Err(e) => RadiusCheck { radius: r, admissible: false, linking: None, index_sum, equal: false, note: Some(e.to_string()) },
            }
        })
        .collect();
    if !checks.iter().any(|c| c.admissible) {
        return Err(Error::OutOfRegime(format!(
            "no admissible radius among {radii:?}: {}",
            checks.iter().filter_map(|c| c.note.clone()).collect::<Vec<_>>().join("; ")
        )));
    }
    let all_equal = checks.iter().filter(|c| c.admissible).all(|c| c.equal);
    Ok(LinkingReport { intersections, radii: checks, positivity, all_equal })
}
