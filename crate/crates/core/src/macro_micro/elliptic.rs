//! Isoparametric Lagrange finite elements on a body-fitted ball mesh.
//!
//! The mesh has seven blocks: the cube `[-1/2, 1/2]^3` and six shells that
//! blend each cube face into the matching gnomonic patch of the unit sphere.
//! Each block map is smooth and block interfaces are element faces, so
//! wall nodes lie exactly on the sphere.

use crate::error::{invalid, Error, Result};
use crate::quadrature::gauss_legendre;
use crate::vec3::Vec3;
use rayon::prelude::*;
use std::collections::HashMap;
use std::f64::consts::PI;

const INNER_HALF_WIDTH: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct BallMesh {
    m: usize,
    order: usize,
    nodes: Vec<Vec3>,
    boundary: Vec<bool>,
    /// Node ids of each element in tensor order, `(order + 1)^3` per element.
    elements: Vec<Vec<usize>>,
}

/// Point of block `block` at block parameters `p ∈ [0, 1]^3`.
/// Block 6 is the inner cube; blocks `2·axis + side` are shells.
fn block_map(block: usize, p: [f64; 3]) -> Vec3 {
    let a = INNER_HALF_WIDTH;
    if block == 6 {
        return Vec3::new(a * (2.0 * p[0] - 1.0), a * (2.0 * p[1] - 1.0), a * (2.0 * p[2] - 1.0));
    }
    let axis = block / 2;
    let sign = if block % 2 == 0 { -1.0 } else { 1.0 };
    let mut w = [0.0; 3];
    w[axis] = sign;
    w[(axis + 1) % 3] = 2.0 * p[0] - 1.0;
    w[(axis + 2) % 3] = 2.0 * p[1] - 1.0;
    let w = Vec3::from_array(w);
    let s = p[2];
    w * ((1.0 - s) * a + s / w.norm())
}

fn node_key(y: Vec3) -> [i64; 3] {
    [y.x, y.y, y.z].map(|c| (c * 1e9).round() as i64)
}

impl BallMesh {
    /// Quadratic elements, `m` of them across the inner cube.
    pub fn new(m: usize) -> Result<Self> {
        Self::with_order(m, 2)
    }

    /// `m` elements across the inner cube (and per shell face), `m / 2`
    /// through each shell, Lagrange degree `order` (1 or 2).
    pub fn with_order(m: usize, order: usize) -> Result<Self> {
        if m < 2 || m % 2 == 1 {
            return Err(invalid("m", format!("need an even count >= 2, got {m}")));
        }
        if !(1..=2).contains(&order) {
            return Err(invalid("order", format!("supported degrees are 1 and 2, got {order}")));
        }
        let radial = m / 2;
        let mut lookup: HashMap<[i64; 3], usize> = HashMap::new();
        let mut nodes = Vec::new();
        let mut elements = Vec::new();
        let per = order + 1;
        for block in 0..7 {
            let counts = if block == 6 { [m, m, m] } else { [m, m, radial] };
            let fine = counts.map(|c| c * order);
            let mut ids = vec![0usize; (fine[0] + 1) * (fine[1] + 1) * (fine[2] + 1)];
            for k in 0..=fine[2] {
                for j in 0..=fine[1] {
                    for i in 0..=fine[0] {
                        let p = [
                            i as f64 / fine[0] as f64,
                            j as f64 / fine[1] as f64,
                            k as f64 / fine[2] as f64,
                        ];
                        let mut y = block_map(block, p);
                        if block != 6 && k == fine[2] {
                            y = y.normalized().expect("wall point away from origin");
                        }
                        let id = *lookup.entry(node_key(y)).or_insert_with(|| {
                            nodes.push(y);
                            nodes.len() - 1
                        });
                        ids[i + (fine[0] + 1) * (j + (fine[1] + 1) * k)] = id;
                    }
                }
            }
            for ek in 0..counts[2] {
                for ej in 0..counts[1] {
                    for ei in 0..counts[0] {
                        let mut el = Vec::with_capacity(per * per * per);
                        for c in 0..per {
                            for b in 0..per {
                                for a in 0..per {
                                    let (i, j, k) = (ei * order + a, ej * order + b, ek * order + c);
                                    el.push(ids[i + (fine[0] + 1) * (j + (fine[1] + 1) * k)]);
                                }
                            }
                        }
                        elements.push(el);
                    }
                }
            }
        }
        let boundary = nodes.iter().map(|y| (y.norm() - 1.0).abs() < 1e-12).collect();
        Ok(BallMesh {
            m,
            order,
            nodes,
            boundary,
            elements,
        })
    }

    pub fn level(&self) -> usize {
        self.m
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Nominal element size in the inner cube.
    pub fn spacing(&self) -> f64 {
        2.0 * INNER_HALF_WIDTH / self.m as f64
    }

    pub fn nodes(&self) -> &[Vec3] {
        &self.nodes
    }

    pub fn boundary_mask(&self) -> &[bool] {
        &self.boundary
    }

    pub fn element_count(&self) -> usize {
        self.elements.len()
    }
}

fn lagrange_1d(order: usize, x: f64) -> (Vec<f64>, Vec<f64>) {
    let pts: Vec<f64> = (0..=order).map(|j| j as f64 / order as f64).collect();
    let mut val = vec![0.0; order + 1];
    let mut der = vec![0.0; order + 1];
    for j in 0..=order {
        let mut v = 1.0;
        let mut d = 0.0;
        for k in 0..=order {
            if k == j {
                continue;
            }
            let denom = pts[j] - pts[k];
            d = d * (x - pts[k]) / denom + v / denom;
            v *= (x - pts[k]) / denom;
        }
        val[j] = v;
        der[j] = d;
    }
    (val, der)
}

struct ElementQuadrature {
    /// Per point: shape values, reference gradients, weight.
    points: Vec<(Vec<f64>, Vec<[f64; 3]>, f64)>,
}

impl ElementQuadrature {
    fn new(order: usize, gauss: usize) -> Self {
        let (x, w) = gauss_legendre(gauss);
        let per = order + 1;
        let mut points = Vec::new();
        for (a, wa) in x.iter().zip(&w) {
            for (b, wb) in x.iter().zip(&w) {
                for (c, wc) in x.iter().zip(&w) {
                    let p = [0.5 * (a + 1.0), 0.5 * (b + 1.0), 0.5 * (c + 1.0)];
                    let l = p.map(|t| lagrange_1d(order, t));
                    let mut n = Vec::with_capacity(per * per * per);
                    let mut g = Vec::with_capacity(per * per * per);
                    for k in 0..per {
                        for j in 0..per {
                            for i in 0..per {
                                n.push(l[0].0[i] * l[1].0[j] * l[2].0[k]);
                                g.push([
                                    l[0].1[i] * l[1].0[j] * l[2].0[k],
                                    l[0].0[i] * l[1].1[j] * l[2].0[k],
                                    l[0].0[i] * l[1].0[j] * l[2].1[k],
                                ]);
                            }
                        }
                    }
                    points.push((n, g, wa * wb * wc / 8.0));
                }
            }
        }
        ElementQuadrature { points }
    }
}

fn invert3(j: [[f64; 3]; 3]) -> Option<([[f64; 3]; 3], f64)> {
    let det = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
        + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    let inv = [
        [
            (j[1][1] * j[2][2] - j[1][2] * j[2][1]) / det,
            (j[0][2] * j[2][1] - j[0][1] * j[2][2]) / det,
            (j[0][1] * j[1][2] - j[0][2] * j[1][1]) / det,
        ],
        [
            (j[1][2] * j[2][0] - j[1][0] * j[2][2]) / det,
            (j[0][0] * j[2][2] - j[0][2] * j[2][0]) / det,
            (j[0][2] * j[1][0] - j[0][0] * j[1][2]) / det,
        ],
        [
            (j[1][0] * j[2][1] - j[1][1] * j[2][0]) / det,
            (j[0][1] * j[2][0] - j[0][0] * j[2][1]) / det,
            (j[0][0] * j[1][1] - j[0][1] * j[1][0]) / det,
        ],
    ];
    Some((inv, det))
}

/// Loop over elements, handing each quadrature point's physical position,
/// shape values, physical gradients and weight to `visit`.
fn for_each_point(
    mesh: &BallMesh,
    quad: &ElementQuadrature,
    mut visit: impl FnMut(&[usize], Vec3, &[f64], &[[f64; 3]], f64),
) -> Result<()> {
    let mut grads: Vec<[f64; 3]> = Vec::new();
    for (e, ids) in mesh.elements.iter().enumerate() {
        // some blocks are parametrised left-handed; only a sign flip inside
        // one element means it is folded
        let mut orientation = 0.0;
        for (n, g, w) in &quad.points {
            let mut jac = [[0.0; 3]; 3];
            let mut pos = Vec3::ZERO;
            for (c, &id) in ids.iter().enumerate() {
                let x = mesh.nodes[id];
                pos += x * n[c];
                for r in 0..3 {
                    for s in 0..3 {
                        jac[r][s] += x[r] * g[c][s];
                    }
                }
            }
            let folded = || Error::Degenerate(format!("folded element {e}"));
            let (inv, det) = invert3(jac).ok_or_else(folded)?;
            if orientation == 0.0 {
                orientation = det.signum();
            } else if det.signum() != orientation {
                return Err(folded());
            }
            // physical gradient: ∇N = J^{-T} ∇_ref N
            grads.clear();
            grads.extend(g.iter().map(|gc| -> [f64; 3] {
                std::array::from_fn(|r| (0..3).map(|s| inv[s][r] * gc[s]).sum())
            }));
            visit(ids, pos, n, &grads, w * det.abs());
        }
    }
    Ok(())
}

/// Compressed sparse rows for the stiffness matrix plus the lumped mass.
struct System {
    row_start: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    lumped_mass: Vec<f64>,
}

fn assemble(mesh: &BallMesh, quad: &ElementQuadrature) -> Result<System> {
    let count = mesh.nodes.len();
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); count];
    for el in &mesh.elements {
        for &a in el {
            rows[a].extend_from_slice(el);
        }
        // keep the scratch lists short
        for &a in el {
            if rows[a].len() > 512 {
                rows[a].sort_unstable();
                rows[a].dedup();
            }
        }
    }
    let mut row_start = Vec::with_capacity(count + 1);
    let mut cols = Vec::new();
    row_start.push(0);
    for r in &mut rows {
        r.sort_unstable();
        r.dedup();
        cols.extend_from_slice(r);
        row_start.push(cols.len());
        *r = Vec::new();
    }
    let mut vals = vec![0.0; cols.len()];
    let mut lumped_mass = vec![0.0; count];
    for_each_point(mesh, quad, |ids, _, n, grads, w| {
        for (a, &ia) in ids.iter().enumerate() {
            lumped_mass[ia] += w * n[a];
            let range = row_start[ia]..row_start[ia + 1];
            let row_cols = &cols[range.clone()];
            for (b, &ib) in ids.iter().enumerate() {
                let g = grads[a][0] * grads[b][0] + grads[a][1] * grads[b][1] + grads[a][2] * grads[b][2];
                let slot = row_cols.binary_search(&ib).expect("pattern covers element couplings");
                vals[range.start + slot] += w * g;
            }
        }
    })?;
    Ok(System {
        row_start,
        cols,
        vals,
        lumped_mass,
    })
}

impl System {
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        out.par_iter_mut().enumerate().for_each(|(i, o)| {
            let range = self.row_start[i]..self.row_start[i + 1];
            *o = self.cols[range.clone()]
                .iter()
                .zip(&self.vals[range])
                .map(|(&c, v)| v * x[c])
                .sum();
        });
    }

    fn diagonal(&self) -> Vec<f64> {
        (0..self.lumped_mass.len())
            .map(|i| {
                let range = self.row_start[i]..self.row_start[i + 1];
                let slot = self.cols[range.clone()].binary_search(&i).expect("diagonal present");
                self.vals[range.start + slot]
            })
            .collect()
    }
}

/// Solver controls.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EllipticOptions {
    /// Relative residual target.
    pub tol: f64,
    pub max_iter: usize,
    /// Relative tolerance on the source mean for the Neumann problem.
    pub compatibility_tol: f64,
}

impl Default for EllipticOptions {
    fn default() -> Self {
        EllipticOptions {
            tol: 1e-11,
            max_iter: 20_000,
            compatibility_tol: 1e-8,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.par_iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Preconditioned conjugate gradients for a symmetric semidefinite operator
/// restricted to the range of the orthogonal projector `project`.
fn pcg(
    apply: impl Fn(&[f64], &mut [f64]),
    precond: &[f64],
    project: impl Fn(&mut [f64]),
    rhs: &[f64],
    opts: &EllipticOptions,
) -> Result<(Vec<f64>, usize, f64)> {
    let n = rhs.len();
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    project(&mut r);
    let norm_b = dot(&r, &r).sqrt();
    if norm_b == 0.0 {
        return Ok((x, 0, 0.0));
    }
    let precondition = |r: &[f64], z: &mut [f64]| {
        z.par_iter_mut().zip(r).zip(precond).for_each(|((z, r), p)| *z = r / p);
        project(z);
    };
    let mut z = vec![0.0; n];
    precondition(&r, &mut z);
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    for iter in 1..=opts.max_iter {
        apply(&p, &mut ap);
        project(&mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(Error::NoConvergence {
                residual: dot(&r, &r).sqrt() / norm_b,
                iterations: iter,
            });
        }
        let alpha = rz / pap;
        x.par_iter_mut().zip(&p).for_each(|(x, p)| *x += alpha * p);
        r.par_iter_mut().zip(&ap).for_each(|(r, a)| *r -= alpha * a);
        let res = dot(&r, &r).sqrt() / norm_b;
        if res <= opts.tol {
            return Ok((x, iter, res));
        }
        precondition(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.par_iter_mut().zip(&z).for_each(|(p, z)| *p = z + beta * *p);
    }
    Err(Error::NoConvergence {
        residual: dot(&r, &r).sqrt() / norm_b,
        iterations: opts.max_iter,
    })
}

/// Mean of `s` over the exact unit ball by a spherical product rule.
fn ball_mean(s: &dyn Fn(Vec3) -> f64) -> (f64, f64) {
    let (xr, wr) = gauss_legendre(20);
    let (xc, wc) = gauss_legendre(20);
    let n_phi = 40;
    let mut total = 0.0;
    let mut peak: f64 = 0.0;
    for (a, wa) in xr.iter().zip(&wr) {
        let r = 0.5 * (a + 1.0);
        for (c, wcos) in xc.iter().zip(&wc) {
            let sn = (1.0 - c * c).sqrt();
            for k in 0..n_phi {
                let ph = 2.0 * PI * (k as f64 + 0.5) / n_phi as f64;
                let y = Vec3::new(r * sn * ph.cos(), r * sn * ph.sin(), r * c);
                let v = s(y);
                peak = peak.max(v.abs());
                total += 0.5 * wa * wcos * (2.0 * PI / n_phi as f64) * r * r * v;
            }
        }
    }
    (total / (4.0 * PI / 3.0), peak)
}

/// Scalar field on a [`BallMesh`].
#[derive(Clone, Debug)]
pub struct EllipticSolution {
    pub mesh: BallMesh,
    pub values: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    /// Discrete `H¹` norm of the solution.
    pub h1_norm: f64,
    /// `L²` norm of the source over the mesh.
    pub source_l2: f64,
}

impl EllipticSolution {
    /// Largest nodal deviation from `exact`.
    pub fn max_error(&self, exact: impl Fn(Vec3) -> f64) -> f64 {
        self.mesh
            .nodes
            .iter()
            .zip(&self.values)
            .map(|(&y, v)| (v - exact(y)).abs())
            .fold(0.0, f64::max)
    }

    /// `‖Φ‖_{H¹} / ‖s‖_{L²}`.
    pub fn stability_ratio(&self) -> f64 {
        self.h1_norm / self.source_l2
    }

    /// Plain-text table `x y z value`.
    pub fn dump(&self) -> String {
        let mut out = String::from("x y z value\n");
        for (y, v) in self.mesh.nodes.iter().zip(&self.values) {
            out.push_str(&format!("{:.6} {:.6} {:.6} {:.12e}\n", y.x, y.y, y.z, v));
        }
        out
    }
}

/// Vector field on a [`BallMesh`].
#[derive(Clone, Debug)]
pub struct VectorSolution {
    pub mesh: BallMesh,
    pub values: Vec<Vec3>,
    pub iterations: usize,
    pub residual: f64,
    pub h1_norm: f64,
    pub source_l2: f64,
    /// `∫|∇φ|²` as assembled.
    pub energy: f64,
    /// `∫ b·φ` as assembled.
    pub work: f64,
}

impl VectorSolution {
    pub fn max_error(&self, exact: impl Fn(Vec3) -> Vec3) -> f64 {
        self.mesh
            .nodes
            .iter()
            .zip(&self.values)
            .map(|(&y, &v)| (v - exact(y)).max_abs())
            .fold(0.0, f64::max)
    }

    /// Largest `|φ·n|` over wall nodes.
    pub fn wall_normal_flux(&self) -> f64 {
        self.mesh
            .nodes
            .iter()
            .zip(&self.values)
            .zip(&self.mesh.boundary)
            .filter(|(_, &b)| b)
            .map(|((&y, &v), _)| v.dot(y).abs())
            .fold(0.0, f64::max)
    }

    pub fn stability_ratio(&self) -> f64 {
        self.h1_norm / self.source_l2
    }

    /// Plain-text table `x y z vx vy vz`.
    pub fn dump(&self) -> String {
        let mut out = String::from("x y z vx vy vz\n");
        for (y, v) in self.mesh.nodes.iter().zip(&self.values) {
            out.push_str(&format!(
                "{:.6} {:.6} {:.6} {:.12e} {:.12e} {:.12e}\n",
                y.x, y.y, y.z, v.x, v.y, v.z
            ));
        }
        out
    }
}

/// Solve `-ΔΦ = s` in the ball with `∂_n Φ = 0` and `∫Φ = 0`.
///
/// Fails with [`Error::IncompatibleSource`] when the mean of `s` over the
/// ball is not negligible relative to its size.
pub fn solve_poisson_neumann(
    mesh: &BallMesh,
    source: &dyn Fn(Vec3) -> f64,
    opts: &EllipticOptions,
) -> Result<EllipticSolution> {
    let (mean, peak) = ball_mean(source);
    if mean.abs() > opts.compatibility_tol * peak.max(1.0) {
        return Err(Error::IncompatibleSource(mean));
    }
    let quad = ElementQuadrature::new(mesh.order, mesh.order + 2);
    let system = assemble(mesh, &quad)?;
    let count = mesh.nodes.len();
    let mut rhs = vec![0.0; count];
    let mut source_sq = 0.0;
    for_each_point(mesh, &quad, |ids, pos, n, _, w| {
        let s = source(pos);
        source_sq += w * s * s;
        for a in 0..ids.len() {
            rhs[ids[a]] += w * s * n[a];
        }
    })?;
    // The mesh volume differs from the ball's at second order: drop the
    // resulting constant so the discrete system stays consistent.
    let volume: f64 = system.lumped_mass.iter().sum();
    let drift = rhs.iter().sum::<f64>() / volume;
    for (f, m) in rhs.iter_mut().zip(&system.lumped_mass) {
        *f -= drift * m;
    }
    let diag = system.diagonal();
    let project = |v: &mut [f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter_mut().for_each(|x| *x -= mean);
    };
    let (mut values, iterations, residual) =
        pcg(|x, out| system.apply(x, out), &diag, project, &rhs, opts)?;
    let shift = values.iter().zip(&system.lumped_mass).map(|(v, m)| v * m).sum::<f64>() / volume;
    values.iter_mut().for_each(|v| *v -= shift);
    let mut kx = vec![0.0; count];
    system.apply(&values, &mut kx);
    let grad_sq = dot(&values, &kx);
    let l2_sq: f64 = values.iter().zip(&system.lumped_mass).map(|(v, m)| v * v * m).sum();
    Ok(EllipticSolution {
        mesh: mesh.clone(),
        values,
        iterations,
        residual,
        h1_norm: (grad_sq + l2_sq).sqrt(),
        source_l2: source_sq.sqrt(),
    })
}

/// Solve `-Δφ = b` in the ball with `φ·n = 0` and tangential `∂_n φ = 0`
/// on the wall.
///
/// The normal condition is imposed at wall nodes by projecting out the
/// normal component; the tangential one is natural.
pub fn solve_vector_poisson_tangential(
    mesh: &BallMesh,
    source: &dyn Fn(Vec3) -> Vec3,
    opts: &EllipticOptions,
) -> Result<VectorSolution> {
    let quad = ElementQuadrature::new(mesh.order, mesh.order + 2);
    let system = assemble(mesh, &quad)?;
    let count = mesh.nodes.len();
    let mut rhs = vec![0.0; 3 * count];
    let mut source_sq = 0.0;
    for_each_point(mesh, &quad, |ids, pos, n, _, w| {
        let b = source(pos);
        source_sq += w * b.norm2();
        for a in 0..ids.len() {
            for c in 0..3 {
                rhs[3 * ids[a] + c] += w * b[c] * n[a];
            }
        }
    })?;
    let normals: Vec<Option<Vec3>> = mesh
        .nodes
        .iter()
        .zip(&mesh.boundary)
        .map(|(&y, &b)| b.then_some(y))
        .collect();
    let project = |v: &mut [f64]| {
        v.par_chunks_mut(3).zip(&normals).for_each(|(chunk, n)| {
            if let Some(n) = n {
                let dn = chunk[0] * n.x + chunk[1] * n.y + chunk[2] * n.z;
                chunk[0] -= dn * n.x;
                chunk[1] -= dn * n.y;
                chunk[2] -= dn * n.z;
            }
        });
    };
    let apply = |x: &[f64], out: &mut [f64]| {
        let mut comp = vec![0.0; count];
        let mut res = vec![0.0; count];
        for c in 0..3 {
            comp.iter_mut().enumerate().for_each(|(i, v)| *v = x[3 * i + c]);
            system.apply(&comp, &mut res);
            res.iter().enumerate().for_each(|(i, v)| out[3 * i + c] = *v);
        }
    };
    let diag: Vec<f64> = system.diagonal().iter().flat_map(|&d| [d, d, d]).collect();
    let (flat, iterations, residual) = pcg(apply, &diag, project, &rhs, opts)?;
    let mut kx = vec![0.0; 3 * count];
    apply(&flat, &mut kx);
    let energy = dot(&flat, &kx);
    let mut projected = rhs.clone();
    project(&mut projected);
    let work = dot(&flat, &projected);
    let l2_sq: f64 = flat
        .chunks(3)
        .zip(&system.lumped_mass)
        .map(|(v, m)| m * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]))
        .sum();
    let values = flat.chunks(3).map(|v| Vec3::new(v[0], v[1], v[2])).collect();
    Ok(VectorSolution {
        mesh: mesh.clone(),
        values,
        iterations,
        residual,
        h1_norm: (energy + l2_sq).sqrt(),
        source_l2: source_sq.sqrt(),
        energy,
        work,
    })
}
