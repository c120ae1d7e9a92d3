//! Velocity lattices and one-dimensional Gauss rules.

use crate::error::{invalid, Result};
use crate::vec3::Vec3;

/// Uniform Cartesian lattice on `[-eta_max, eta_max]^3` with tensor trapezoid weights.
///
/// Node `(ix, iy, iz)` is stored at flat index `ix + n*(iy + n*iz)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityGrid {
    n: usize,
    eta_max: f64,
    spacing: f64,
    nodes: Vec<Vec3>,
    weights: Vec<f64>,
}

impl VelocityGrid {
    /// `n` points per axis; must be odd so that the origin is a node.
    pub fn new(n: usize, eta_max: f64) -> Result<Self> {
        if n < 3 || n % 2 == 0 {
            return Err(invalid("n", format!("need an odd count >= 3, got {n}")));
        }
        if !(eta_max > 0.0 && eta_max.is_finite()) {
            return Err(invalid("eta_max", format!("must be positive, got {eta_max}")));
        }
        let spacing = 2.0 * eta_max / (n - 1) as f64;
        let axis: Vec<f64> = (0..n).map(|i| -eta_max + spacing * i as f64).collect();
        let w1: Vec<f64> = (0..n)
            .map(|i| if i == 0 || i == n - 1 { 0.5 * spacing } else { spacing })
            .collect();
        let mut nodes = Vec::with_capacity(n * n * n);
        let mut weights = Vec::with_capacity(n * n * n);
        for iz in 0..n {
            for iy in 0..n {
                for ix in 0..n {
                    nodes.push(Vec3::new(axis[ix], axis[iy], axis[iz]));
                    weights.push(w1[ix] * w1[iy] * w1[iz]);
                }
            }
        }
        Ok(VelocityGrid {
            n,
            eta_max,
            spacing,
            nodes,
            weights,
        })
    }

    pub fn per_axis(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn eta_max(&self) -> f64 {
        self.eta_max
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn nodes(&self) -> &[Vec3] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.n * (iy + self.n * iz)
    }

    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        (i % self.n, (i / self.n) % self.n, i / (self.n * self.n))
    }

    /// Quadrature of a function sampled at the nodes.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        values.iter().zip(&self.weights).map(|(v, w)| v * w).sum()
    }

    /// Weighted inner product of two sampled functions.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .zip(&self.weights)
            .map(|((x, y), w)| x * y * w)
            .sum()
    }

    pub fn sample(&self, f: impl Fn(Vec3) -> f64) -> Vec<f64> {
        self.nodes.iter().map(|&v| f(v)).collect()
    }

    /// Trilinear interpolation of nodal values; zero outside the lattice.
    pub fn interpolate(&self, values: &[f64], eta: Vec3) -> f64 {
        let mut idx = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let s = (eta[a] + self.eta_max) / self.spacing;
            if !(s >= 0.0 && s <= (self.n - 1) as f64) {
                return 0.0;
            }
            let i = (s.floor() as usize).min(self.n - 2);
            idx[a] = i;
            frac[a] = s - i as f64;
        }
        let mut acc = 0.0;
        for corner in 0..8 {
            let (dx, dy, dz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
            let w = if dx == 1 { frac[0] } else { 1.0 - frac[0] }
                * if dy == 1 { frac[1] } else { 1.0 - frac[1] }
                * if dz == 1 { frac[2] } else { 1.0 - frac[2] };
            if w != 0.0 {
                acc += w * values[self.index(idx[0] + dx, idx[1] + dy, idx[2] + dz)];
            }
        }
        acc
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Gauss-Legendre rule mapped to `[a, b]`.
#[derive(Clone, Debug)]
pub struct GaussRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussRule {
    pub fn new(n: usize) -> Self {
        let (nodes, weights) = gauss_legendre(n);
        GaussRule { nodes, weights }
    }

    pub fn integrate(&self, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(mid + half * x))
            .sum::<f64>()
            * half
    }

    /// Nodes on `[-1, 1]`.
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Adaptive Simpson quadrature with absolute tolerance `tol`.
pub fn adaptive_simpson(f: &mut impl FnMut(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn step(
        f: &mut impl FnMut(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    if a == b {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, tol, 40)
}
