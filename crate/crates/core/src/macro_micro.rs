//! Macro-micro decomposition, conservation functionals, the spatial grid,
//! test functions and boundary-flux checks.

mod elliptic;

pub use elliptic::{
    solve_poisson_neumann, solve_vector_poisson_tangential, BallMesh, EllipticOptions, EllipticSolution,
    VectorSolution,
};

use crate::collision::InvariantBasis;
use crate::error::{invalid, Error, Result};
use crate::frames::{mu_tilde, sqrt_mu};
use crate::quadrature::{gauss_legendre, VelocityGrid};
use crate::vec3::Vec3;
use std::f64::consts::PI;

/// Cartesian nodes inside the closed unit ball with cut-cell volumes.
///
/// The lattice is `n` points per axis on `[-1, 1]^3` (`n` odd), so the node
/// set is invariant under the octahedral group.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialGrid {
    n: usize,
    spacing: f64,
    nodes: Vec<Vec3>,
    volumes: Vec<f64>,
    /// Lattice coordinates of each node.
    coords: Vec<[usize; 3]>,
    /// Map from lattice index to node index.
    lookup: Vec<Option<usize>>,
    boundary: Vec<bool>,
}

fn box_index(n: usize, c: [usize; 3]) -> usize {
    c[0] + n * (c[1] + n * c[2])
}

/// Fraction of the cube `[c - d/2, c + d/2]^3` inside the unit ball,
/// integrating exactly along one axis and by Gauss rules across it, averaged
/// over the three axis choices to keep octahedral symmetry.
fn cell_fraction(center: Vec3, d: f64, rule: &(Vec<f64>, Vec<f64>)) -> f64 {
    let half = 0.5 * d;
    let near: f64 = (0..3)
        .map(|a| (center[a].abs() - half).max(0.0).powi(2))
        .sum::<f64>()
        .sqrt();
    let far: f64 = (0..3)
        .map(|a| (center[a].abs() + half).powi(2))
        .sum::<f64>()
        .sqrt();
    if far <= 1.0 {
        return 1.0;
    }
    if near >= 1.0 {
        return 0.0;
    }
    let (x, w) = rule;
    let mut total = 0.0;
    for axis in 0..3 {
        let (p, q) = ((axis + 1) % 3, (axis + 2) % 3);
        let mut acc = 0.0;
        for (xi, wi) in x.iter().zip(w) {
            let u = center[p] + half * xi;
            for (xj, wj) in x.iter().zip(w) {
                let v = center[q] + half * xj;
                let rem = 1.0 - u * u - v * v;
                if rem <= 0.0 {
                    continue;
                }
                let s = rem.sqrt();
                let lo = (center[axis] - half).max(-s);
                let hi = (center[axis] + half).min(s);
                if hi > lo {
                    acc += 0.25 * wi * wj * (hi - lo);
                }
            }
        }
        total += acc / d;
    }
    total / 3.0
}

impl SpatialGrid {
    pub fn new(n: usize) -> Result<Self> {
        if n < 3 || n % 2 == 0 {
            return Err(invalid("spatial_n", format!("need an odd count >= 3, got {n}")));
        }
        let d = 2.0 / (n - 1) as f64;
        let at = |i: usize| -1.0 + d * i as f64;
        let mut lookup = vec![None; n * n * n];
        let mut nodes = Vec::new();
        let mut coords = Vec::new();
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let y = Vec3::new(at(i), at(j), at(k));
                    if y.norm2() <= 1.0 + 1e-12 {
                        lookup[box_index(n, [i, j, k])] = Some(nodes.len());
                        nodes.push(y);
                        coords.push([i, j, k]);
                    }
                }
            }
        }
        let rule = gauss_legendre(12);
        let mut volumes = vec![0.0; nodes.len()];
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let c = Vec3::new(at(i), at(j), at(k));
                    let frac = cell_fraction(c, d, &rule);
                    if frac == 0.0 {
                        continue;
                    }
                    let vol = frac * d * d * d;
                    if let Some(idx) = lookup[box_index(n, [i, j, k])] {
                        volumes[idx] += vol;
                        continue;
                    }
                    // sliver of an outside cell: hand it to the nearest inside neighbours
                    let mut best = f64::INFINITY;
                    let mut targets: Vec<usize> = Vec::new();
                    for dz in -1i64..=1 {
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                let (a, b, e) = (i as i64 + dx, j as i64 + dy, k as i64 + dz);
                                if a < 0 || b < 0 || e < 0 || a >= n as i64 || b >= n as i64 || e >= n as i64 {
                                    continue;
                                }
                                if let Some(t) = lookup[box_index(n, [a as usize, b as usize, e as usize])] {
                                    let dist = (nodes[t] - c).norm2();
                                    if dist < best - 1e-12 {
                                        best = dist;
                                        targets.clear();
                                        targets.push(t);
                                    } else if (dist - best).abs() <= 1e-12 {
                                        targets.push(t);
                                    }
                                }
                            }
                        }
                    }
                    let share = vol / targets.len().max(1) as f64;
                    for t in targets {
                        volumes[t] += share;
                    }
                }
            }
        }
        let boundary = coords
            .iter()
            .map(|&[i, j, k]| {
                [(1i64, 0i64, 0i64), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                    .iter()
                    .any(|&(dx, dy, dz)| {
                        let (a, b, e) = (i as i64 + dx, j as i64 + dy, k as i64 + dz);
                        a < 0
                            || b < 0
                            || e < 0
                            || a >= n as i64
                            || b >= n as i64
                            || e >= n as i64
                            || lookup[box_index(n, [a as usize, b as usize, e as usize])].is_none()
                    })
            })
            .collect();
        Ok(SpatialGrid {
            n,
            spacing: d,
            nodes,
            volumes,
            coords,
            lookup,
            boundary,
        })
    }

    pub fn per_axis(&self) -> usize {
        self.n
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Vec3] {
        &self.nodes
    }

    pub fn volumes(&self) -> &[f64] {
        &self.volumes
    }

    /// Nodes with at least one lattice neighbour outside the ball.
    pub fn boundary_mask(&self) -> &[bool] {
        &self.boundary
    }

    pub fn node_at(&self, i: usize, j: usize, k: usize) -> Option<usize> {
        self.lookup[box_index(self.n, [i, j, k])]
    }

    pub fn lattice_coords(&self, idx: usize) -> [usize; 3] {
        self.coords[idx]
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        values.iter().zip(&self.volumes).map(|(v, w)| v * w).sum()
    }

    /// Multilinear interpolation weights at `y` (in the closed ball).
    ///
    /// Box corners outside the ball are dropped and the remaining weights
    /// renormalised; the corner nearest the origin is always inside.
    pub fn stencil(&self, y: Vec3) -> Vec<(usize, f64)> {
        let d = self.spacing;
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let s = ((y[a] + 1.0) / d).clamp(0.0, (self.n - 1) as f64);
            let i = (s.floor() as usize).min(self.n - 2);
            base[a] = i;
            frac[a] = s - i as f64;
        }
        let mut out = Vec::with_capacity(8);
        let mut total = 0.0;
        for corner in 0..8 {
            let off = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let mut w = 1.0;
            for a in 0..3 {
                w *= if off[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            if w == 0.0 {
                continue;
            }
            if let Some(idx) = self.node_at(base[0] + off[0], base[1] + off[1], base[2] + off[2]) {
                out.push((idx, w));
                total += w;
            }
        }
        if total <= 0.0 {
            // every weighted corner is outside: fall back to the nearest inside corner
            let mut best = (usize::MAX, f64::INFINITY);
            for corner in 0..8 {
                let off = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
                if let Some(idx) = self.node_at(base[0] + off[0], base[1] + off[1], base[2] + off[2]) {
                    let dist = (self.nodes[idx] - y).norm2();
                    if dist < best.1 {
                        best = (idx, dist);
                    }
                }
            }
            return vec![(best.0, 1.0)];
        }
        for e in &mut out {
            e.1 /= total;
        }
        out
    }

    pub fn interpolate(&self, values: &[f64], y: Vec3) -> f64 {
        self.stencil(y).iter().map(|&(i, w)| w * values[i]).sum()
    }

    /// Plain-text table `x y z value`.
    pub fn dump(&self, values: &[f64]) -> String {
        let mut out = String::from("x y z value\n");
        for (y, v) in self.nodes.iter().zip(values) {
            out.push_str(&format!("{:.6} {:.6} {:.6} {:.12e}\n", y.x, y.y, y.z, v));
        }
        out
    }
}

/// Spatial × velocity product grid; field values are stored spatial-major,
/// `values[i * nv + j]` for spatial node `i` and velocity node `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseGrid {
    pub spatial: SpatialGrid,
    pub velocity: VelocityGrid,
}

impl PhaseGrid {
    pub fn new(spatial: SpatialGrid, velocity: VelocityGrid) -> Self {
        PhaseGrid { spatial, velocity }
    }

    pub fn len(&self) -> usize {
        self.spatial.len() * self.velocity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample(&self, f: impl Fn(Vec3, Vec3) -> f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for &y in self.spatial.nodes() {
            for &v in self.velocity.nodes() {
                out.push(f(y, v));
            }
        }
        out
    }

    pub fn check(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::GridMismatch {
                expected: self.len(),
                got: values.len(),
            });
        }
        Ok(())
    }
}

/// Hydrodynamic fields and the microscopic remainder.
#[derive(Clone, Debug, PartialEq)]
pub struct MacroFields {
    pub a: Vec<f64>,
    pub b: Vec<[f64; 3]>,
    pub c: Vec<f64>,
    pub q: Vec<f64>,
    /// `(I - P) u · μ̃^{1/2}`, phase-grid layout.
    pub d: Vec<f64>,
}

/// Split `u` into `a, b, c, q` and the micro part `d`.
pub fn decompose(u: &[f64], grid: &PhaseGrid, h: f64) -> Result<MacroFields> {
    grid.check(u)?;
    let basis = InvariantBasis;
    let nv = grid.velocity.len();
    let chis: Vec<[f64; 5]> = grid
        .velocity
        .nodes()
        .iter()
        .map(|&v| [0, 1, 2, 3, 4].map(|k| basis.chi(k, v)))
        .collect();
    let wv = grid.velocity.weights();
    let ns = grid.spatial.len();
    let mut out = MacroFields {
        a: vec![0.0; ns],
        b: vec![[0.0; 3]; ns],
        c: vec![0.0; ns],
        q: vec![0.0; ns],
        d: vec![0.0; u.len()],
    };
    for (i, &y) in grid.spatial.nodes().iter().enumerate() {
        let slice = &u[i * nv..(i + 1) * nv];
        let mut coef = [0.0; 5];
        for ((x, chi), w) in slice.iter().zip(&chis).zip(wv) {
            for k in 0..5 {
                coef[k] += w * x * chi[k];
            }
        }
        let s = mu_tilde(y, h).sqrt();
        let a = coef[0] * s;
        let q = h * h * y.norm2() * a / 6f64.sqrt();
        out.a[i] = a;
        out.b[i] = [coef[1] * s, coef[2] * s, coef[3] * s];
        out.q[i] = q;
        out.c[i] = coef[4] * s + q;
        for (j, chi) in chis.iter().enumerate() {
            let pu: f64 = (0..5).map(|k| coef[k] * chi[k]).sum();
            out.d[i * nv + j] = (slice[j] - pu) * s;
        }
    }
    Ok(out)
}

/// `u = {a χ₀ + Σ b^j χ_j + (c - q) χ₄} μ̃^{-1/2} + d μ̃^{-1/2}`.
pub fn reconstruct(fields: &MacroFields, grid: &PhaseGrid, h: f64) -> Result<Vec<f64>> {
    grid.check(&fields.d)?;
    let basis = InvariantBasis;
    let nv = grid.velocity.len();
    let mut u = vec![0.0; grid.len()];
    for (i, &y) in grid.spatial.nodes().iter().enumerate() {
        let inv = 1.0 / mu_tilde(y, h).sqrt();
        let (a, b, c, q) = (fields.a[i], fields.b[i], fields.c[i], fields.q[i]);
        for (j, &v) in grid.velocity.nodes().iter().enumerate() {
            let macro_part = a * basis.chi(0, v)
                + b[0] * basis.chi(1, v)
                + b[1] * basis.chi(2, v)
                + b[2] * basis.chi(3, v)
                + (c - q) * basis.chi(4, v);
            u[i * nv + j] = (macro_part + fields.d[i * nv + j]) * inv;
        }
    }
    Ok(u)
}

/// Mass, energy and angular-momentum functionals of `u` against `M^{1/2}`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Conservation {
    pub mass: f64,
    pub energy: f64,
    pub angular: [f64; 3],
}

impl Conservation {
    pub fn as_array(&self) -> [f64; 5] {
        [self.mass, self.energy, self.angular[0], self.angular[1], self.angular[2]]
    }

    /// Largest componentwise difference.
    pub fn max_diff(&self, other: &Conservation) -> f64 {
        self.as_array()
            .iter()
            .zip(other.as_array())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn conservation_functionals(u: &[f64], grid: &PhaseGrid, h: f64) -> Result<Conservation> {
    grid.check(u)?;
    let nv = grid.velocity.len();
    let mut out = Conservation::default();
    for (i, (&y, &vol)) in grid.spatial.nodes().iter().zip(grid.spatial.volumes()).enumerate() {
        let s = mu_tilde(y, h).sqrt();
        for (j, (&v, &w)) in grid.velocity.nodes().iter().zip(grid.velocity.weights()).enumerate() {
            let m = vol * w * u[i * nv + j] * s * sqrt_mu(v);
            out.mass += m;
            out.energy += m * (v.norm2() + h * h * y.norm2());
            let l = y.cross(v);
            out.angular[0] += m * l.x;
            out.angular[1] += m * l.y;
            out.angular[2] += m * l.z;
        }
    }
    Ok(out)
}

/// `∫ (1 + |η|² + h²|y|²) |u| M^{1/2}`: the scale against which drifts of
/// the conserved functionals are measured.
pub fn conservation_scale(u: &[f64], grid: &PhaseGrid, h: f64) -> Result<f64> {
    grid.check(u)?;
    let nv = grid.velocity.len();
    let mut acc = 0.0;
    for (i, (&y, &vol)) in grid.spatial.nodes().iter().zip(grid.spatial.volumes()).enumerate() {
        let s = mu_tilde(y, h).sqrt();
        for (j, (&v, &w)) in grid.velocity.nodes().iter().zip(grid.velocity.weights()).enumerate() {
            acc += vol * w * u[i * nv + j].abs() * s * sqrt_mu(v) * (1.0 + v.norm2() + h * h * y.norm2());
        }
    }
    Ok(acc)
}

/// Which test function of the macroscopic estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TestKind {
    A,
    B,
    C,
}

/// Potential feeding a test function: a scalar potential through its
/// gradient, or a vector potential through its value and Jacobian
/// `J[i][j] = ∂_j φ^i`.
pub enum Potential<'a> {
    Scalar {
        gradient: &'a dyn Fn(Vec3) -> Vec3,
    },
    Vector {
        value: &'a dyn Fn(Vec3) -> Vec3,
        jacobian: &'a dyn Fn(Vec3) -> [[f64; 3]; 3],
    },
}

/// Evaluate `ψ_a`, `ψ_b` or `ψ_c` at `(y, η)`.
pub fn test_function(kind: TestKind, potential: &Potential<'_>, y: Vec3, eta: Vec3, h: f64) -> Result<f64> {
    let m_half = mu_tilde(y, h).sqrt() * sqrt_mu(eta);
    match (kind, potential) {
        (TestKind::A, Potential::Scalar { gradient }) => Ok(gradient(y).dot(eta) * (eta.norm2() - 10.0) * m_half),
        (TestKind::C, Potential::Scalar { gradient }) => Ok(gradient(y).dot(eta) * (eta.norm2() - 5.0) * m_half),
        (TestKind::B, Potential::Vector { jacobian, .. }) => {
            let j = jacobian(y);
            let mut quad = 0.0;
            let mut div = 0.0;
            for i in 0..3 {
                div += j[i][i];
                for k in 0..3 {
                    quad += j[i][k] * eta[i] * eta[k];
                }
            }
            Ok((quad - div * (eta.norm2() - 1.0) / 2.0) * m_half)
        }
        _ => Err(invalid(
            "potential",
            "kinds a and c take a scalar potential, kind b a vector potential",
        )),
    }
}

/// Quadrature for `∫_{∂Ω} ∫_{R³} (η·n) F dη dS`: Gauss-Legendre in `cos θ`,
/// trapezoid in the azimuth, and a velocity lattice aligned with the local
/// frame `(n, t₁, t₂)` so that specular reflection maps nodes to nodes.
#[derive(Clone, Debug)]
pub struct SurfaceRule {
    points: Vec<(Vec3, f64)>,
    lattice: VelocityGrid,
}

impl SurfaceRule {
    pub fn new(n_theta: usize, n_phi: usize, velocity_n: usize, eta_max: f64) -> Result<Self> {
        let (ct, wt) = gauss_legendre(n_theta);
        let mut points = Vec::with_capacity(n_theta * n_phi);
        for (c, w) in ct.iter().zip(&wt) {
            let s = (1.0 - c * c).max(0.0).sqrt();
            for k in 0..n_phi {
                let phi = 2.0 * PI * (k as f64 + 0.5) / n_phi as f64;
                points.push((Vec3::new(s * phi.cos(), s * phi.sin(), *c), w * 2.0 * PI / n_phi as f64));
            }
        }
        Ok(SurfaceRule {
            points,
            lattice: VelocityGrid::new(velocity_n, eta_max)?,
        })
    }

    pub fn integrate(&self, mut f: impl FnMut(Vec3, Vec3) -> f64) -> f64 {
        let mut total = 0.0;
        for &(n, ws) in &self.points {
            let t1 = n.any_orthogonal();
            let t2 = n.cross(t1);
            let mut inner = 0.0;
            for (&l, &wv) in self.lattice.nodes().iter().zip(self.lattice.weights()) {
                let eta = n * l.x + t1 * l.y + t2 * l.z;
                inner += wv * l.x * f(n, eta);
            }
            total += ws * inner;
        }
        total
    }
}

impl Default for SurfaceRule {
    fn default() -> Self {
        SurfaceRule::new(16, 32, 25, 6.0).expect("valid default surface rule")
    }
}

/// `∫_γ ψ u dγ = ∫_{∂Ω} ∫ (η·n) ψ u dη dS` for a phase-space function `u`.
pub fn boundary_term(
    kind: TestKind,
    potential: &Potential<'_>,
    u: &dyn Fn(Vec3, Vec3) -> f64,
    h: f64,
    rule: &SurfaceRule,
) -> Result<f64> {
    // validate the pairing once before the sweep
    test_function(kind, potential, Vec3::new(0.0, 0.0, 1.0), Vec3::ZERO, h)?;
    Ok(rule.integrate(|y, eta| test_function(kind, potential, y, eta, h).unwrap_or(0.0) * u(y, eta)))
}

/// The part of the `ψ_b` flux that survives on a curved wall for a
/// tangential potential that does not vanish there:
/// `-∫_{∂Ω} ∫ (η·n)² (η·φ) M^{1/2} u dη dS`.
pub fn boundary_curvature_remainder(
    value: &dyn Fn(Vec3) -> Vec3,
    u: &dyn Fn(Vec3, Vec3) -> f64,
    h: f64,
    rule: &SurfaceRule,
) -> f64 {
    rule.integrate(|y, eta| {
        let m_half = mu_tilde(y, h).sqrt() * sqrt_mu(eta);
        -eta.dot(y) * eta.dot(value(y)) * m_half * u(y, eta)
    })
}
