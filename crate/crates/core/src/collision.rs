//! Hard-sphere collision operators.
//!
//! `Q(f, g) = 1/2 ∫∫ |(η - η*)·ω| (f'g'_* + f'_*g' - f g_* - f_* g) dη* dω`,
//! `L u = 2 μ^{-1/2} Q(μ, μ^{1/2} u) = -ν u + K u`,
//! `Γ(g, h) = μ^{-1/2} Q(μ^{1/2} g, μ^{1/2} h)`.

use crate::error::{invalid, Error, Result};
use crate::frames::{mu, sqrt_mu, weight_phi};
use crate::quadrature::{gauss_legendre, VelocityGrid};
use crate::vec3::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::f64::consts::{PI, SQRT_2};

/// Coefficient of the `1/|V|` (gain) part of `k`.
pub const KERNEL_GAIN: f64 = 1.595_769_121_605_730_7; // 4 / sqrt(2π)
/// Coefficient of the `|V|` (loss) part of `k`.
pub const KERNEL_LOSS: f64 = 0.398_942_280_401_432_7; // 1 / sqrt(2π)

/// Largest lattice accepted by any dense build.
pub const DENSE_HARD_LIMIT: usize = 41 * 41 * 41;
/// Dense builds above this size need an explicit opt-in.
pub const DENSE_DEFAULT_LIMIT: usize = 15 * 15 * 15;

/// Collision frequency `ν(|η|) = 2π ∫ |η - η*| μ(η*) dη*`.
pub fn nu(r: f64) -> f64 {
    let r = r.abs();
    if r < 1e-6 {
        // (r + 1/r) erf(r/√2) -> √(2/π)(1 + r²/3) near zero
        let c = (2.0 / PI).sqrt();
        return 2.0 * PI * (c * (-0.5 * r * r).exp() + c * (1.0 + r * r / 3.0));
    }
    2.0 * PI * ((2.0 / PI).sqrt() * (-0.5 * r * r).exp() + (r + 1.0 / r) * libm::erf(r / SQRT_2))
}

pub fn nu_at(eta: Vec3) -> f64 {
    nu(eta.norm())
}

/// Extremes of `ν` over a lattice: `ν₀ = min ν` and the envelope
/// constant `ν₁ = max ν/(1+|η|)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NuProfile {
    pub nu0: f64,
    pub nu1: f64,
}

impl NuProfile {
    pub fn from_grid(grid: &VelocityGrid) -> Self {
        let (mut nu0, mut nu1) = (f64::INFINITY, 0.0f64);
        for &v in grid.nodes() {
            let r = v.norm();
            let n = nu(r);
            nu0 = nu0.min(n);
            nu1 = nu1.max(n / (1.0 + r));
        }
        NuProfile { nu0, nu1 }
    }

    pub fn holds(&self, r: f64) -> bool {
        let n = nu(r);
        n >= self.nu0 * (1.0 - 1e-14) && n <= self.nu1 * (1.0 + r) * (1.0 + 1e-14)
    }
}

/// Gain (positive) part of the kernel.
fn kernel_gain(eta: Vec3, eta_star: Vec3, r: f64) -> f64 {
    let de = eta_star.norm2() - eta.norm2();
    KERNEL_GAIN / r * (-(r * r) / 8.0 - de * de / (8.0 * r * r)).exp()
}

/// Loss part of the kernel (enters with a minus sign).
fn kernel_loss(eta: Vec3, eta_star: Vec3, r: f64) -> f64 {
    KERNEL_LOSS * r * (-(eta.norm2() + eta_star.norm2()) / 4.0).exp()
}

fn kernel_unchecked(eta: Vec3, eta_star: Vec3) -> f64 {
    let r = (eta_star - eta).norm();
    kernel_gain(eta, eta_star, r) - kernel_loss(eta, eta_star, r)
}

/// The kernel `k(η, η*)` of `K`; singular at coincidence.
pub fn kernel_k(eta: Vec3, eta_star: Vec3) -> Result<f64> {
    if (eta_star - eta).norm() == 0.0 {
        return Err(Error::SingularKernel);
    }
    Ok(kernel_unchecked(eta, eta_star))
}

/// `(1/r + r) e^{-r²/8}`, the shape of the pointwise kernel bound.
pub fn kernel_envelope(r: f64) -> f64 {
    (1.0 / r + r) * (-(r * r) / 8.0).exp()
}

/// Tensor rule in spherical coordinates centred on a velocity: Gauss
/// panels in the radius, Gauss in `cos θ`, trapezoid in `φ`.
#[derive(Clone, Debug)]
pub struct PolarRule {
    radial: Vec<(f64, f64)>,
    directions: Vec<(Vec3, f64)>,
}

impl PolarRule {
    pub fn new(r_max: f64, panels: usize, per_panel: usize, n_theta: usize, n_phi: usize) -> Self {
        let (x, w) = gauss_legendre(per_panel);
        let width = r_max / panels as f64;
        let mut radial = Vec::with_capacity(panels * per_panel);
        for p in 0..panels {
            let a = p as f64 * width;
            for (xi, wi) in x.iter().zip(&w) {
                radial.push((a + 0.5 * width * (xi + 1.0), 0.5 * width * wi));
            }
        }
        let (ct, wt) = gauss_legendre(n_theta);
        let mut directions = Vec::with_capacity(n_theta * n_phi);
        for (c, wc) in ct.iter().zip(&wt) {
            let s = (1.0 - c * c).max(0.0).sqrt();
            for k in 0..n_phi {
                let phi = 2.0 * PI * (k as f64 + 0.5) / n_phi as f64;
                directions.push((
                    Vec3::new(s * phi.cos(), s * phi.sin(), *c),
                    wc * 2.0 * PI / n_phi as f64,
                ));
            }
        }
        PolarRule { radial, directions }
    }

    /// `∫ g(η + r ω) r² dr dω`, with `g` returning the integrand times `r`
    /// already divided out where convenient.
    pub fn integrate_around(&self, center: Vec3, mut g: impl FnMut(f64, Vec3) -> f64) -> f64 {
        let mut acc = 0.0;
        for &(r, wr) in &self.radial {
            let mut shell = 0.0;
            for &(dir, wd) in &self.directions {
                shell += wd * g(r, center + dir * r);
            }
            acc += wr * r * r * shell;
        }
        acc
    }
}

impl Default for PolarRule {
    fn default() -> Self {
        PolarRule::new(14.0, 28, 8, 24, 48)
    }
}

/// `∫ |k(η, η*)| dη*` by polar quadrature around `η`.
pub fn kernel_abs_integral(eta: Vec3, rule: &PolarRule) -> f64 {
    rule.integrate_around(eta, |_, es| kernel_unchecked(eta, es).abs())
}

/// `(L u)(η) = -ν u(η) + ∫ k(η, η*) u(η*) dη*` for a velocity profile given
/// as a function, by polar quadrature around `η`.
pub fn apply_l_pointwise(u: impl Fn(Vec3) -> f64, eta: Vec3, rule: &PolarRule) -> f64 {
    let ku = rule.integrate_around(eta, |_, es| kernel_unchecked(eta, es) * u(es));
    -nu_at(eta) * u(eta) + ku
}

/// How the singular diagonal cell of the kernel matrix is filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum DiagonalRule {
    /// Choose the diagonal so that the discrete `L χ₀ = 0` holds row by row.
    #[default]
    NullSpace,
    /// Integrate the `1/r` singularity over a ball of the cell's volume.
    EquivalentBall,
}

/// Position and exponent carried by the weighted kernel `K_φ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelWeight {
    pub y: Vec3,
    pub h: f64,
    pub beta: f64,
}

impl KernelWeight {
    fn phi(&self, eta: Vec3) -> f64 {
        weight_phi(self.y, eta, self.h, self.beta)
    }
}

fn equivalent_ball_diagonal(eta: Vec3, cell_volume: f64) -> f64 {
    let a = (3.0 * cell_volume / (4.0 * PI)).cbrt();
    let s = eta.norm();
    // direction average of exp(-(V̂·η)²/2)
    let avg = if s < 1e-8 {
        1.0
    } else {
        (PI / 2.0).sqrt() * libm::erf(s / SQRT_2) / s
    };
    KERNEL_GAIN * 2.0 * PI * a * a * avg
}

fn check_dense_size(n: usize, max_nodes: usize) -> Result<()> {
    let limit = max_nodes.min(DENSE_HARD_LIMIT);
    if n > limit {
        return Err(Error::MemoryGuard { nodes: n, limit });
    }
    Ok(())
}

/// Dense discretisation of `K` (or `K_φ`) on a set of velocity nodes.
///
/// Off-diagonal entries are `k(η_i, η_j) w_j`; the diagonal follows
/// [`DiagonalRule`]. Row-major storage.
#[derive(Clone, Debug)]
pub struct KernelMatrix {
    n: usize,
    data: Vec<f64>,
    nu: Vec<f64>,
    rule: DiagonalRule,
    weight: Option<KernelWeight>,
}

impl KernelMatrix {
    /// Build on a full lattice, refusing more than `max_nodes` nodes
    /// (pass [`DENSE_DEFAULT_LIMIT`] unless a larger matrix is intended).
    pub fn build(
        grid: &VelocityGrid,
        rule: DiagonalRule,
        weight: Option<KernelWeight>,
        max_nodes: usize,
    ) -> Result<Self> {
        let cell = grid.spacing().powi(3);
        Self::from_nodes(grid.nodes(), grid.weights(), cell, rule, weight, max_nodes)
    }

    /// Build on an arbitrary node subset with quadrature weights.
    pub fn from_nodes(
        nodes: &[Vec3],
        weights: &[f64],
        cell_volume: f64,
        rule: DiagonalRule,
        weight: Option<KernelWeight>,
        max_nodes: usize,
    ) -> Result<Self> {
        let n = nodes.len();
        if weights.len() != n {
            return Err(Error::GridMismatch {
                expected: n,
                got: weights.len(),
            });
        }
        check_dense_size(n, max_nodes)?;
        let chi0: Vec<f64> = nodes.iter().map(|&v| sqrt_mu(v)).collect();
        let nu: Vec<f64> = nodes.iter().map(|&v| nu_at(v)).collect();
        let mut data = vec![0.0; n * n];
        data.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            let ei = nodes[i];
            let mut null_sum = 0.0;
            for j in 0..n {
                if j != i {
                    let kij = kernel_unchecked(ei, nodes[j]) * weights[j];
                    row[j] = kij;
                    null_sum += kij * chi0[j];
                }
            }
            row[i] = match rule {
                DiagonalRule::NullSpace => nu[i] - null_sum / chi0[i],
                DiagonalRule::EquivalentBall => equivalent_ball_diagonal(ei, cell_volume),
            };
            if let Some(wt) = weight {
                let pi = wt.phi(ei);
                for (j, x) in row.iter_mut().enumerate() {
                    if j != i {
                        *x *= pi / wt.phi(nodes[j]);
                    }
                }
            }
        });
        Ok(KernelMatrix {
            n,
            data,
            nu,
            rule,
            weight,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn rule(&self) -> DiagonalRule {
        self.rule
    }

    pub fn weight(&self) -> Option<KernelWeight> {
        self.weight
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Row-major entries.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn nu(&self) -> &[f64] {
        &self.nu
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.n {
            return Err(Error::GridMismatch {
                expected: self.n,
                got: len,
            });
        }
        Ok(())
    }

    pub fn apply_k(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_len(u.len())?;
        Ok(self
            .data
            .par_chunks(self.n)
            .map(|row| row.iter().zip(u).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// `-ν u + K u`.
    pub fn apply_l(&self, u: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.apply_k(u)?;
        for ((o, &n), &x) in out.iter_mut().zip(&self.nu).zip(u) {
            *o -= n * x;
        }
        Ok(out)
    }

    /// `Σ_j |K[i][j]|` per row.
    pub fn row_abs_sums(&self) -> Vec<f64> {
        self.data
            .par_chunks(self.n)
            .map(|row| row.iter().map(|x| x.abs()).sum())
            .collect()
    }

    /// Plain-text dump, one matrix row per line.
    pub fn dump(&self) -> String {
        let mut out = String::with_capacity(self.n * self.n * 24);
        for row in self.data.chunks(self.n) {
            let line: Vec<String> = row.iter().map(|x| format!("{x:.12e}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

/// `-ν u + K u` through a prebuilt matrix.
pub fn apply_l(u: &[f64], kernel: &KernelMatrix) -> Result<Vec<f64>> {
    kernel.apply_l(u)
}

/// Weighted L² norms `‖L χ_k‖` for `k = 0..4` on a full lattice, computed
/// without storing the matrix (for lattices too large for a dense build).
pub fn invariant_residuals(grid: &VelocityGrid, rule: DiagonalRule) -> [f64; 5] {
    let basis = InvariantBasis;
    let nodes = grid.nodes();
    let w = grid.weights();
    let chis: Vec<[f64; 5]> = nodes
        .iter()
        .map(|&v| [0, 1, 2, 3, 4].map(|k| basis.chi(k, v)))
        .collect();
    let cell = grid.spacing().powi(3);
    let rows: Vec<[f64; 5]> = (0..nodes.len())
        .into_par_iter()
        .map(|i| {
            let ei = nodes[i];
            let mut acc = [0.0; 5];
            for j in 0..nodes.len() {
                if j != i {
                    let kij = kernel_unchecked(ei, nodes[j]) * w[j];
                    for k in 0..5 {
                        acc[k] += kij * chis[j][k];
                    }
                }
            }
            let nui = nu_at(ei);
            let diag = match rule {
                DiagonalRule::NullSpace => nui - acc[0] / chis[i][0],
                DiagonalRule::EquivalentBall => equivalent_ball_diagonal(ei, cell),
            };
            let mut out = [0.0; 5];
            for k in 0..5 {
                out[k] = acc[k] + (diag - nui) * chis[i][k];
            }
            out
        })
        .collect();
    let mut norms = [0.0; 5];
    for (row, wi) in rows.iter().zip(w) {
        for k in 0..5 {
            norms[k] += wi * row[k] * row[k];
        }
    }
    norms.map(f64::sqrt)
}

/// Normalised collision invariants and Burnette functions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InvariantBasis;

impl InvariantBasis {
    /// `χ₀ = μ^{1/2}`, `χ_j = η^j μ^{1/2}`, `χ₄ = (|η|² - 3)/√6 μ^{1/2}`.
    pub fn chi(&self, k: usize, eta: Vec3) -> f64 {
        let s = sqrt_mu(eta);
        match k {
            0 => s,
            1..=3 => eta[k - 1] * s,
            4 => (eta.norm2() - 3.0) / 6f64.sqrt() * s,
            _ => panic!("collision invariant index {k} out of range 0..=4"),
        }
    }

    /// `A_j = η^j (|η|² - 5)/√10 μ^{1/2}`, `j = 1..=3`.
    pub fn burnette_a(&self, j: usize, eta: Vec3) -> f64 {
        assert!((1..=3).contains(&j), "A_j index {j} out of range 1..=3");
        eta[j - 1] * (eta.norm2() - 5.0) / 10f64.sqrt() * sqrt_mu(eta)
    }

    /// `B_kl = (η^k η^l - δ_kl |η|²/3) μ^{1/2}`, `k, l = 1..=3`.
    pub fn burnette_b(&self, k: usize, l: usize, eta: Vec3) -> f64 {
        assert!((1..=3).contains(&k) && (1..=3).contains(&l), "B_kl index out of range 1..=3");
        let d = if k == l { eta.norm2() / 3.0 } else { 0.0 };
        (eta[k - 1] * eta[l - 1] - d) * sqrt_mu(eta)
    }

    pub fn sample_chi(&self, k: usize, grid: &VelocityGrid) -> Vec<f64> {
        grid.sample(|v| self.chi(k, v))
    }
}

/// `⟨u, χ_k⟩` for `k = 0..4` by lattice quadrature.
pub fn invariant_coefficients(u: &[f64], grid: &VelocityGrid) -> Result<[f64; 5]> {
    if u.len() != grid.len() {
        return Err(Error::GridMismatch {
            expected: grid.len(),
            got: u.len(),
        });
    }
    let basis = InvariantBasis;
    let mut c = [0.0; 5];
    for ((&v, &w), &x) in grid.nodes().iter().zip(grid.weights()).zip(u) {
        for (k, ck) in c.iter_mut().enumerate() {
            *ck += w * x * basis.chi(k, v);
        }
    }
    Ok(c)
}

/// `P u = Σ ⟨u, χ_k⟩ χ_k`.
pub fn project_p(u: &[f64], grid: &VelocityGrid) -> Result<Vec<f64>> {
    let c = invariant_coefficients(u, grid)?;
    let basis = InvariantBasis;
    Ok(grid
        .nodes()
        .iter()
        .map(|&v| (0..5).map(|k| c[k] * basis.chi(k, v)).sum())
        .collect())
}

/// Inner products among the Burnette functions.
#[derive(Clone, Debug, PartialEq)]
pub struct GramTable {
    /// `⟨A_j, A_i⟩`
    pub aa: [[f64; 3]; 3],
    /// `⟨A_j, B_kl⟩` indexed `[j][k][l]`
    pub ab: [[[f64; 3]; 3]; 3],
    /// `⟨B_ij, B_kl⟩` indexed `[i][j][k][l]`
    pub bb: [[[[f64; 3]; 3]; 3]; 3],
}

fn delta(a: usize, b: usize) -> f64 {
    if a == b {
        1.0
    } else {
        0.0
    }
}

impl GramTable {
    /// The exact table: `δ_ji`, `0`, `δ_ik δ_jl + δ_il δ_jk - 2/3 δ_ij δ_kl`.
    pub fn exact() -> Self {
        let mut t = GramTable {
            aa: [[0.0; 3]; 3],
            ab: [[[0.0; 3]; 3]; 3],
            bb: [[[[0.0; 3]; 3]; 3]; 3],
        };
        for i in 0..3 {
            for j in 0..3 {
                t.aa[i][j] = delta(i, j);
                for k in 0..3 {
                    for l in 0..3 {
                        t.bb[i][j][k][l] = delta(i, k) * delta(j, l) + delta(i, l) * delta(j, k)
                            - 2.0 / 3.0 * delta(i, j) * delta(k, l);
                    }
                }
            }
        }
        t
    }

    /// Largest entrywise difference from another table.
    pub fn max_deviation(&self, other: &GramTable) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                d = d.max((self.aa[i][j] - other.aa[i][j]).abs());
                for k in 0..3 {
                    d = d.max((self.ab[i][j][k] - other.ab[i][j][k]).abs());
                    for l in 0..3 {
                        d = d.max((self.bb[i][j][k][l] - other.bb[i][j][k][l]).abs());
                    }
                }
            }
        }
        d
    }

    pub fn dump(&self) -> String {
        let mut out = String::from("pair value\n");
        for i in 0..3 {
            for j in 0..3 {
                out.push_str(&format!("A{} A{} {:.12e}\n", i + 1, j + 1, self.aa[i][j]));
            }
        }
        for j in 0..3 {
            for k in 0..3 {
                for l in 0..3 {
                    out.push_str(&format!("A{} B{}{} {:.12e}\n", j + 1, k + 1, l + 1, self.ab[j][k][l]));
                }
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    for l in 0..3 {
                        out.push_str(&format!(
                            "B{}{} B{}{} {:.12e}\n",
                            i + 1,
                            j + 1,
                            k + 1,
                            l + 1,
                            self.bb[i][j][k][l]
                        ));
                    }
                }
            }
        }
        out
    }
}

pub fn burnette_gram(basis: &InvariantBasis, grid: &VelocityGrid) -> GramTable {
    let a: Vec<Vec<f64>> = (1..=3).map(|j| grid.sample(|v| basis.burnette_a(j, v))).collect();
    let b: Vec<Vec<Vec<f64>>> = (1..=3)
        .map(|k| (1..=3).map(|l| grid.sample(|v| basis.burnette_b(k, l, v))).collect())
        .collect();
    let mut t = GramTable {
        aa: [[0.0; 3]; 3],
        ab: [[[0.0; 3]; 3]; 3],
        bb: [[[[0.0; 3]; 3]; 3]; 3],
    };
    for i in 0..3 {
        for j in 0..3 {
            t.aa[i][j] = grid.inner(&a[i], &a[j]);
            for k in 0..3 {
                t.ab[i][j][k] = grid.inner(&a[i], &b[j][k]);
                for l in 0..3 {
                    t.bb[i][j][k][l] = grid.inner(&b[i][j], &b[k][l]);
                }
            }
        }
    }
    t
}

/// Monte Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub stderr: f64,
    pub samples: usize,
}

impl McEstimate {
    /// Whether `target` lies within `k` standard errors.
    pub fn agrees_with(&self, target: f64, k: f64) -> bool {
        (self.value - target).abs() <= k * self.stderr
    }
}

const MC_BLOCK: usize = 4096;

/// Deterministic block-parallel Monte Carlo: block `b` draws from the
/// ChaCha stream `b` of `seed`, and block sums are combined in order.
pub fn mc_estimate(n_samples: usize, seed: u64, draw: impl Fn(&mut ChaCha8Rng) -> f64 + Sync) -> McEstimate {
    let blocks = n_samples.div_ceil(MC_BLOCK).max(1);
    let partial: Vec<(f64, f64, usize)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let count = MC_BLOCK.min(n_samples - b * MC_BLOCK);
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..count {
                let x = draw(&mut rng);
                s += x;
                s2 += x * x;
            }
            (s, s2, count)
        })
        .collect();
    let (mut s, mut s2, mut n) = (0.0, 0.0, 0usize);
    for (a, b, c) in partial {
        s += a;
        s2 += b;
        n += c;
    }
    let nf = n.max(1) as f64;
    let mean = s / nf;
    let var = (s2 / nf - mean * mean).max(0.0) * nf / (nf - 1.0).max(1.0);
    McEstimate {
        value: mean,
        stderr: (var / nf).sqrt(),
        samples: n,
    }
}

pub fn normal_vec(rng: &mut impl Rng, scale: f64) -> Vec3 {
    Vec3::new(
        rng.sample::<f64, _>(StandardNormal) * scale,
        rng.sample::<f64, _>(StandardNormal) * scale,
        rng.sample::<f64, _>(StandardNormal) * scale,
    )
}

pub fn unit_vec(rng: &mut impl Rng) -> Vec3 {
    let z: f64 = 2.0 * rng.gen::<f64>() - 1.0;
    let phi = 2.0 * PI * rng.gen::<f64>();
    let s = (1.0 - z * z).max(0.0).sqrt();
    Vec3::new(s * phi.cos(), s * phi.sin(), z)
}

/// Post-collision pair `(η', η*')`.
pub fn post_collision(eta: Vec3, eta_star: Vec3, omega: Vec3) -> (Vec3, Vec3) {
    let t = (eta_star - eta).dot(omega);
    (eta + omega * t, eta_star - omega * t)
}

/// Monte Carlo estimate of `Q(f, g)(η)` with `η* ~ μ` and uniform `ω`.
pub fn q_bilinear_mc<F, G>(f: F, g: G, eta: Vec3, n_samples: usize, seed: u64) -> McEstimate
where
    F: Fn(Vec3) -> f64 + Sync,
    G: Fn(Vec3) -> f64 + Sync,
{
    let (fe, ge) = (f(eta), g(eta));
    mc_estimate(n_samples, seed, |rng| {
        let es = normal_vec(rng, 1.0);
        let omega = unit_vec(rng);
        let (ep, esp) = post_collision(eta, es, omega);
        let cross = (es - eta).dot(omega).abs();
        let bracket = f(ep) * g(esp) + f(esp) * g(ep) - fe * g(es) - f(es) * ge;
        0.5 * cross * bracket * 4.0 * PI / mu(es)
    })
}

/// `2 μ^{-1/2} Q(μ, μ^{1/2} u)` through [`q_bilinear_mc`].
pub fn linearized_mc<U>(u: U, eta: Vec3, n_samples: usize, seed: u64) -> McEstimate
where
    U: Fn(Vec3) -> f64 + Sync,
{
    let q = q_bilinear_mc(mu, |v| sqrt_mu(v) * u(v), eta, n_samples, seed);
    let s = 2.0 / sqrt_mu(eta);
    McEstimate {
        value: q.value * s,
        stderr: q.stderr * s,
        samples: q.samples,
    }
}

/// `(4π)^{3/2} (2π)^{-3/4} · 4π`: the importance ratio `μ*^{1/2}/p(η*)` for
/// `η* ~ N(0, 2I)` times the sphere area.
fn half_gaussian_ratio() -> f64 {
    (4.0 * PI).powf(1.5) / (2.0 * PI).powf(0.75) * 4.0 * PI
}

/// `Γ(g, h)(η)` by Monte Carlo with `η* ~ N(0, 2I)`, which makes every
/// sample bounded for bounded `g, h`.
pub fn gamma_mc<G, H>(g: G, h: H, eta: Vec3, n_samples: usize, seed: u64) -> McEstimate
where
    G: Fn(Vec3) -> f64 + Sync,
    H: Fn(Vec3) -> f64 + Sync,
{
    let c = 0.5 * half_gaussian_ratio();
    let (ge, he) = (g(eta), h(eta));
    mc_estimate(n_samples, seed, |rng| {
        let es = normal_vec(rng, SQRT_2);
        let omega = unit_vec(rng);
        let (ep, esp) = post_collision(eta, es, omega);
        let cross = (es - eta).dot(omega).abs();
        c * cross * (g(ep) * h(esp) + g(esp) * h(ep) - ge * h(es) - g(es) * he)
    })
}

/// `Γ_φ(w_g, w_h) = φ Γ(w_g/φ, w_h/φ)` at `(y, η)`.
pub fn gamma_phi<G, H>(
    w_g: G,
    w_h: H,
    y: Vec3,
    eta: Vec3,
    h: f64,
    beta: f64,
    n_samples: usize,
    seed: u64,
) -> McEstimate
where
    G: Fn(Vec3) -> f64 + Sync,
    H: Fn(Vec3) -> f64 + Sync,
{
    let phi = |v: Vec3| weight_phi(y, v, h, beta);
    let est = gamma_mc(
        |v| w_g(v) / phi(v),
        |v| w_h(v) / phi(v),
        eta,
        n_samples,
        seed,
    );
    let p = phi(eta);
    McEstimate {
        value: est.value * p,
        stderr: est.stderr * p,
        samples: est.samples,
    }
}

/// `∫ ψ(η) Q(f, f)(η) dη` by Monte Carlo over `(η, η*, ω)` with both
/// velocities drawn from `μ`; the plain (unsymmetrised) integrand.
pub fn collision_moment_mc<F, P>(f: F, psi: P, n_samples: usize, seed: u64) -> McEstimate
where
    F: Fn(Vec3) -> f64 + Sync,
    P: Fn(Vec3) -> f64 + Sync,
{
    mc_estimate(n_samples, seed, |rng| {
        let e = normal_vec(rng, 1.0);
        let es = normal_vec(rng, 1.0);
        let omega = unit_vec(rng);
        let (ep, esp) = post_collision(e, es, omega);
        let cross = (es - e).dot(omega).abs();
        psi(e) * cross * (f(ep) * f(esp) - f(e) * f(es)) * 4.0 * PI / (mu(e) * mu(es))
    })
}

/// Collision frequency of a profile, `ν(f)(η) = 2π Σ_j |η_j - η| f_j w_j`.
pub fn nu_of_profile(f: &[f64], grid_nodes: &[Vec3], weights: &[f64], eta: Vec3) -> f64 {
    2.0 * PI
        * grid_nodes
            .iter()
            .zip(weights)
            .zip(f)
            .map(|((&v, &w), &x)| (v - eta).norm() * w * x)
            .sum::<f64>()
}

/// Random smooth slice `μ^{1/2} Σ c_α η^α` over monomials of degree ≤ 4.
pub fn random_slice(grid: &VelocityGrid, rng: &mut impl Rng) -> Vec<f64> {
    let mut terms = Vec::new();
    for a in 0..=4 {
        for b in 0..=(4 - a) {
            for c in 0..=(4 - a - b) {
                terms.push((a as i32, b as i32, c as i32, 2.0 * rng.gen::<f64>() - 1.0));
            }
        }
    }
    grid.sample(|v| {
        let p: f64 = terms
            .iter()
            .map(|&(a, b, c, k)| k * v.x.powi(a) * v.y.powi(b) * v.z.powi(c))
            .sum();
        p * sqrt_mu(v)
    })
}

/// Smallest ratio `-⟨Lu,u⟩ / ‖(I-P)u‖²_ν` over the given slices.
pub fn dissipation_constant(kernel: &KernelMatrix, grid: &VelocityGrid, slices: &[Vec<f64>]) -> Result<f64> {
    if kernel.len() != grid.len() {
        return Err(invalid("kernel", "lattice size differs from the kernel"));
    }
    let mut sigma = f64::INFINITY;
    for u in slices {
        let lu = kernel.apply_l(u)?;
        let pu = project_p(u, grid)?;
        let micro: Vec<f64> = u.iter().zip(&pu).map(|(a, b)| a - b).collect();
        let norm_nu: f64 = micro
            .iter()
            .zip(kernel.nu())
            .zip(grid.weights())
            .map(|((m, n), w)| w * n * m * m)
            .sum();
        if norm_nu > 0.0 {
            sigma = sigma.min(-grid.inner(&lu, u) / norm_nu);
        }
    }
    Ok(sigma)
}
