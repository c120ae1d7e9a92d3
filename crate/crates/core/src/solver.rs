//! Mild-solution engine for the weighted perturbation `w = φ u`.
//!
//! The linear problem is split into the attenuated transport of the initial
//! data, evaluated exactly at the fully backtracked point, and a Duhamel
//! part driven by `K_φ w` and the sources, marched on the grid with
//! one-step backtracking and an exponential integrator.

use crate::collision::{
    gamma_mc, normal_vec, nu_at, post_collision, unit_vec, DiagonalRule, InvariantBasis, KernelMatrix, DENSE_HARD_LIMIT,
};
use crate::error::{invalid, Error, Result};
use crate::frames::{alpha, mu, mu_tilde, radius, sqrt_mu, t_of_tau, weight_phi, DensitySample, SimParams};
use crate::macro_micro::{conservation_functionals, conservation_scale, Conservation, PhaseGrid};
use crate::quadrature::{GaussRule, VelocityGrid};
use crate::trajectories::{advance_free, BackwardPath, Characteristic, CharacteristicKind, PathTerminal, PhasePoint};
use crate::vec3::Vec3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::f64::consts::PI;
use std::sync::Arc;

/// Longest piece handed to one Gauss rule along a characteristic.
const MAX_PIECE: f64 = 0.25;
const GAUSS_POINTS: usize = 8;
/// Rule for the per-step exponent increments of the marching scheme.
const STEP_GAUSS_POINTS: usize = 4;
/// Attenuation exponent beyond which transported initial data is dropped
/// (`e^{-50}` is below `2e-22`).
const EXPONENT_CUTOFF: f64 = 50.0;
/// Floor below which positivity iterates count as negative.
pub const NEGATIVITY_FLOOR: f64 = -1e-12;

fn cos2(h: f64, tau: f64) -> f64 {
    let c = (h * tau).cos();
    c * c
}

fn for_each_piece(lo: f64, hi: f64, mut f: impl FnMut(f64, f64)) {
    if hi <= lo {
        return;
    }
    let pieces = ((hi - lo) / MAX_PIECE).ceil().max(1.0) as usize;
    let len = (hi - lo) / pieces as f64;
    for k in 0..pieces {
        let a = lo + len * k as f64;
        let b = if k + 1 == pieces { hi } else { a + len };
        f(a, b);
    }
}

/// `exp(-∫_{τ₁}^{τ} μ̃(y(s)) cos²(hs) ν(η(s)) ds)` along a backward path,
/// by Gauss rules on each smooth segment.
pub fn duhamel_attenuation(path: &BackwardPath, tau1: f64, tau: f64) -> Result<f64> {
    if !(0.0..=tau).contains(&tau1) || tau > path.tau0 * (1.0 + 1e-15) {
        return Err(invalid(
            "span",
            format!("need 0 <= tau1 <= tau <= {}, got [{tau1}, {tau}]", path.tau0),
        ));
    }
    if tau1 == tau {
        return Ok(1.0);
    }
    let h = path.h;
    let rule = GaussRule::new(GAUSS_POINTS);
    let mut exponent = 0.0;
    let glides = path.terminal == PathTerminal::Glide;
    for (top, bottom, state) in path.segments() {
        let lo = bottom.max(tau1);
        let hi = top.min(tau);
        for_each_piece(lo, hi, |a, b| {
            exponent += rule.integrate(a, b, |s| {
                let p = if glides { path.state_at(s) } else { advance_free(state, top, s, h) };
                mu_tilde(p.y, h) * cos2(h, s) * nu_at(p.eta)
            });
        });
    }
    Ok((-exponent).exp())
}

/// `∫ f(σ) (1, cos 2hσ, sin 2hσ) dσ` over backward durations `[s0, s1]`,
/// with `f = μ̃(y) ν(η)` along the characteristic.
///
/// The attenuation exponent for a node at time `τ` over that span is
/// `½ (J₀ + cos(2hτ) J_c + sin(2hτ) J_s)`.
fn exponent_moments(ch: &Characteristic, s0: f64, s1: f64, rule: &GaussRule) -> [f64; 3] {
    let h = ch.h();
    let mut cuts = vec![s0];
    if let CharacteristicKind::Billiard { first, chord, .. } = *ch.kind() {
        let mut k = if s0 <= first { 0.0 } else { ((s0 - first) / chord).ceil() };
        loop {
            let t = first + k * chord;
            if t >= s1 {
                break;
            }
            if t > s0 {
                cuts.push(t);
            }
            k += 1.0;
        }
    }
    cuts.push(s1);
    let mut m = [0.0; 3];
    for pair in cuts.windows(2) {
        for_each_piece(pair[0], pair[1], |a, b| {
            // sample strictly inside the piece so a bounce endpoint never
            // picks the wrong branch
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (x, w) in rule.nodes().iter().zip(rule.weights()) {
                let s = mid + half * x;
                let p = ch.state_after(s);
                let f = mu_tilde(p.y, h) * nu_at(p.eta) * w * half;
                let (sn, cs) = (2.0 * h * s).sin_cos();
                m[0] += f;
                m[1] += f * cs;
                m[2] += f * sn;
            }
        });
    }
    m
}

fn exponent_at(m: &[f64; 3], h: f64, tau: f64) -> f64 {
    let (sn, cs) = (2.0 * h * tau).sin_cos();
    0.5 * (m[0] + cs * m[1] + sn * m[2])
}

/// Weights of the exponential integrator for `∫₀^Δ e^{-rσ} G(σ) dσ` with
/// `G` linear between its values at `σ = 0` and `σ = Δ`; `x = rΔ`.
fn integrator_weights(x: f64, dt: f64) -> (f64, f64) {
    let (p1, p2) = if x < 1e-4 {
        (1.0 - x / 2.0 + x * x / 6.0, 0.5 - x / 3.0 + x * x / 8.0)
    } else {
        let e = (-x).exp();
        ((1.0 - e) / x, (1.0 - e * (1.0 + x)) / (x * x))
    };
    (dt * (p1 - p2), dt * p2)
}

/// Up to eight `(index, weight)` pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Stencil {
    idx: [u32; 8],
    w: [f64; 8],
    len: u8,
}

impl Stencil {
    fn push(&mut self, i: usize, w: f64) {
        self.idx[self.len as usize] = i as u32;
        self.w[self.len as usize] = w;
        self.len += 1;
    }

    fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.len as usize).map(move |k| (self.idx[k] as usize, self.w[k]))
    }

    fn apply(&self, values: &[f64]) -> f64 {
        self.iter().map(|(i, w)| w * values[i]).sum()
    }
}

/// Trilinear stencil on the velocity lattice. Outside the box the stencil
/// is empty unless `clamp`, which snaps to the nearest face.
fn velocity_stencil(grid: &VelocityGrid, eta: Vec3, clamp: bool) -> Stencil {
    let n = grid.per_axis();
    let top = (n - 1) as f64;
    let d = grid.spacing();
    let mut base = [0usize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let mut s = (eta[a] + grid.eta_max()) / d;
        if clamp {
            s = s.clamp(0.0, top);
        } else if !(0.0..=top).contains(&s) {
            return Stencil::default();
        }
        let i = (s.floor() as usize).min(n - 2);
        base[a] = i;
        frac[a] = s - i as f64;
    }
    let mut st = Stencil::default();
    for corner in 0..8 {
        let off = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let mut w = 1.0;
        for a in 0..3 {
            w *= if off[a] == 1 { frac[a] } else { 1.0 - frac[a] };
        }
        if w != 0.0 {
            st.push(grid.index(base[0] + off[0], base[1] + off[1], base[2] + off[2]), w);
        }
    }
    st
}

fn spatial_stencil(grid: &crate::macro_micro::SpatialGrid, y: Vec3) -> Stencil {
    let mut st = Stencil::default();
    for (i, w) in grid.stencil(y) {
        st.push(i, w);
    }
    st
}

/// Phase-space interpolation through a spatial and a velocity stencil.
fn interpolate_phase(values: &[f64], nv: usize, s: &Stencil, v: &Stencil) -> f64 {
    let mut acc = 0.0;
    for (i, ws) in s.iter() {
        let row = &values[i * nv..(i + 1) * nv];
        acc += ws * v.apply(row);
    }
    acc
}

/// What a [`DistributionField`] stores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldKind {
    /// Weighted perturbation `w = φ u`.
    W,
    /// Perturbation `u` with `f = M + M^{1/2} u`.
    U,
    /// Distribution `f`.
    F,
}

/// Values on a phase grid at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionField {
    pub grid: Arc<PhaseGrid>,
    pub tau: f64,
    pub kind: FieldKind,
    pub values: Vec<f64>,
}

impl DistributionField {
    pub fn new(grid: Arc<PhaseGrid>, tau: f64, kind: FieldKind, values: Vec<f64>) -> Result<Self> {
        grid.check(&values)?;
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Degenerate(format!("non-finite value at node {bad}")));
        }
        Ok(DistributionField { grid, tau, kind, values })
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Convert to another representation.
    pub fn convert(&self, target: FieldKind, params: &SimParams) -> DistributionField {
        if target == self.kind {
            return self.clone();
        }
        let nv = self.grid.velocity.len();
        let (h, beta) = (params.h, params.beta);
        let mut values = self.values.clone();
        for (i, &y) in self.grid.spatial.nodes().iter().enumerate() {
            let mt = mu_tilde(y, h);
            for (j, &eta) in self.grid.velocity.nodes().iter().enumerate() {
                let x = &mut values[i * nv + j];
                let phi = weight_phi(y, eta, h, beta);
                let m = mt * mu(eta);
                let m_half = mt.sqrt() * sqrt_mu(eta);
                let u = match self.kind {
                    FieldKind::W => *x / phi,
                    FieldKind::U => *x,
                    FieldKind::F => (*x - m) / m_half,
                };
                *x = match target {
                    FieldKind::W => u * phi,
                    FieldKind::U => u,
                    FieldKind::F => m + m_half * u,
                };
            }
        }
        DistributionField {
            grid: self.grid.clone(),
            tau: self.tau,
            kind: target,
            values,
        }
    }

    /// Largest `|F(y, η) - F(y, η - 2(η·y)y)|` over nodes on the unit sphere.
    pub fn specular_defect(&self) -> f64 {
        let nv = self.grid.velocity.len();
        let mut worst: f64 = 0.0;
        for (i, &y) in self.grid.spatial.nodes().iter().enumerate() {
            if (y.norm() - 1.0).abs() > 1e-12 {
                continue;
            }
            let row = &self.values[i * nv..(i + 1) * nv];
            for (j, &eta) in self.grid.velocity.nodes().iter().enumerate() {
                let mirrored = eta - y * (2.0 * eta.dot(y));
                let st = velocity_stencil(&self.grid.velocity, mirrored, false);
                worst = worst.max((row[j] - st.apply(row)).abs());
            }
        }
        worst
    }
}

/// Initial data for `w`.
#[derive(Clone)]
pub enum InitialData {
    /// Exact evaluator, used wherever the transport lands.
    Function(Arc<dyn Fn(Vec3, Vec3) -> f64 + Send + Sync>),
    /// Node values, interpolated multilinearly.
    Grid(Vec<f64>),
}

impl InitialData {
    pub fn function(f: impl Fn(Vec3, Vec3) -> f64 + Send + Sync + 'static) -> Self {
        InitialData::Function(Arc::new(f))
    }

    fn eval(&self, grid: &PhaseGrid, p: PhasePoint) -> f64 {
        match self {
            InitialData::Function(f) => f(p.y, p.eta),
            InitialData::Grid(values) => {
                let s = spatial_stencil(&grid.spatial, p.y);
                let v = velocity_stencil(&grid.velocity, p.eta, false);
                interpolate_phase(values, grid.velocity.len(), &s, &v)
            }
        }
    }

    pub fn at_nodes(&self, grid: &PhaseGrid) -> Vec<f64> {
        match self {
            InitialData::Function(f) => grid.sample(|y, eta| f(y, eta)),
            InitialData::Grid(values) => values.clone(),
        }
    }
}

/// Source `g(τ, y, η)` of the perturbation equation, entering the weighted
/// equation as `cos²(hτ) φ g`.
#[derive(Clone, Default)]
pub struct SourceTerm {
    eval: Option<Arc<dyn Fn(f64, Vec3, Vec3) -> f64 + Send + Sync>>,
    /// Declared microscopic (`P g = 0`).
    pub microscopic: bool,
}

impl SourceTerm {
    pub fn zero() -> Self {
        SourceTerm {
            eval: None,
            microscopic: true,
        }
    }

    pub fn new(g: impl Fn(f64, Vec3, Vec3) -> f64 + Send + Sync + 'static, microscopic: bool) -> Self {
        SourceTerm {
            eval: Some(Arc::new(g)),
            microscopic,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.eval.is_none()
    }

    pub fn value(&self, tau: f64, y: Vec3, eta: Vec3) -> f64 {
        self.eval.as_ref().map_or(0.0, |g| g(tau, y, eta))
    }

    /// Reject a source flagged microscopic whose invariant projections
    /// exceed `rel_tol` times its `L¹` size at the sampled points.
    pub fn check_microscopic(&self, grid: &VelocityGrid, taus: &[f64], ys: &[Vec3], rel_tol: f64) -> Result<()> {
        if self.is_zero() || !self.microscopic {
            return Ok(());
        }
        let mut size: f64 = 0.0;
        for &tau in taus {
            for &y in ys {
                let l1: f64 = grid
                    .nodes()
                    .iter()
                    .zip(grid.weights())
                    .map(|(&eta, &w)| w * self.value(tau, y, eta).abs())
                    .sum();
                size = size.max(l1);
            }
        }
        let content = self.macroscopic_content(grid, taus, ys);
        if content > rel_tol * size {
            return Err(invalid(
                "g",
                format!("flagged microscopic but carries invariant content {content:e} (size {size:e})"),
            ));
        }
        Ok(())
    }

    /// Largest `|⟨g(τ, y, ·), χ_k⟩|` over the given times and positions.
    pub fn macroscopic_content(&self, grid: &VelocityGrid, taus: &[f64], ys: &[Vec3]) -> f64 {
        let basis = InvariantBasis;
        let mut worst: f64 = 0.0;
        for &tau in taus {
            for &y in ys {
                for k in 0..5 {
                    let c: f64 = grid
                        .nodes()
                        .iter()
                        .zip(grid.weights())
                        .map(|(&eta, &w)| w * self.value(tau, y, eta) * basis.chi(k, eta))
                        .sum();
                    worst = worst.max(c.abs());
                }
            }
        }
        worst
    }
}

/// How the kernel term is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelMode {
    /// No `K` term.
    Off,
    /// The discrete `K` as built.
    Raw,
    /// `ν + (I-P) L (I-P)`: annihilates the discrete collision invariants,
    /// so the collision step conserves mass, momentum and energy exactly.
    Conservative,
}

/// Controls of the linear marching scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearConfig {
    pub tau_end: f64,
    pub steps: usize,
    /// Apply the `μ̃ cos² ν` damping.
    pub attenuation: bool,
    pub kernel: KernelMode,
    /// Fixed-point sweeps for the implicit end of each step.
    pub sweeps: usize,
    /// Keep a field snapshot every this many steps (and at the end).
    pub snapshot_every: usize,
    /// The first `lead_steps` steps are split into `lead_refine` substeps,
    /// where the transported initial data still varies fast.
    pub lead_steps: usize,
    pub lead_refine: usize,
}

impl LinearConfig {
    /// Full linear dynamics over `[0, tau_end]`.
    pub fn new(tau_end: f64, steps: usize) -> Self {
        LinearConfig {
            tau_end,
            steps,
            attenuation: true,
            kernel: KernelMode::Conservative,
            sweeps: 2,
            snapshot_every: (steps / 20).max(1),
            lead_steps: steps / 10,
            lead_refine: 4,
        }
    }

    /// Pure transport: no damping, no kernel.
    pub fn transport_only(tau_end: f64, steps: usize) -> Self {
        LinearConfig {
            attenuation: false,
            kernel: KernelMode::Off,
            ..Self::new(tau_end, steps)
        }
    }

    fn validate(&self, params: &SimParams) -> Result<()> {
        if self.steps == 0 {
            return Err(invalid("steps", "must be positive"));
        }
        if !(self.tau_end > 0.0 && self.tau_end < params.tau_max()) {
            return Err(invalid(
                "tau_end",
                format!("must lie in (0, {}), got {}", params.tau_max(), self.tau_end),
            ));
        }
        if self.snapshot_every == 0 {
            return Err(invalid("snapshot_every", "must be positive"));
        }
        if self.lead_refine == 0 || self.lead_steps > self.steps {
            return Err(invalid("lead_steps", "need lead_refine >= 1 and lead_steps <= steps"));
        }
        Ok(())
    }

    fn dt(&self) -> f64 {
        self.tau_end / self.steps as f64
    }

    /// `(τ_start, τ_end, substep length index, ends a full step)` for every
    /// substep; index 0 is the full step, 1 the refined one.
    fn schedule(&self) -> Vec<(f64, f64, usize, bool)> {
        let dt = self.dt();
        let mut out = Vec::new();
        for k in 0..self.steps {
            let t0 = dt * k as f64;
            if k < self.lead_steps && self.lead_refine > 1 {
                let r = self.lead_refine;
                for j in 0..r {
                    let a = t0 + dt * j as f64 / r as f64;
                    let b = if j + 1 == r { dt * (k + 1) as f64 } else { t0 + dt * (j + 1) as f64 / r as f64 };
                    out.push((a, b, 1, j + 1 == r));
                }
            } else {
                out.push((t0, dt * (k + 1) as f64, 0, true));
            }
        }
        out
    }
}

/// One row of a decay series.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecaySample {
    pub tau: f64,
    /// `‖u‖_{L²(Ω×R³)}`.
    pub l2: f64,
    /// `‖φ u‖_∞`.
    pub linf: f64,
    pub conservation: Conservation,
}

/// Norm and conservation history of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct DecayReport {
    pub h: f64,
    pub samples: Vec<DecaySample>,
    /// `∫(1 + |η|² + h²|y|²)|u₀| M^{1/2}`, the yardstick for drifts.
    pub scale: f64,
    /// Picard contraction ratios, if any.
    pub contraction: Vec<f64>,
}

impl DecayReport {
    /// Largest change of any conserved functional, relative to `scale`.
    pub fn conservation_drift(&self) -> f64 {
        let Some(first) = self.samples.first() else {
            return 0.0;
        };
        let worst = self
            .samples
            .iter()
            .map(|s| s.conservation.max_diff(&first.conservation))
            .fold(0.0, f64::max);
        if self.scale > 0.0 {
            worst / self.scale
        } else {
            worst
        }
    }

    /// `tau L2 Linf mass energy angx angy angz`, tab separated.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("tau\tL2\tLinf\tmass\tenergy\tangx\tangy\tangz\n");
        for s in &self.samples {
            let c = &s.conservation;
            out.push_str(&format!(
                "{:.9e}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}\n",
                s.tau, s.l2, s.linf, c.mass, c.energy, c.angular[0], c.angular[1], c.angular[2]
            ));
        }
        out
    }

    /// Drift of each functional from its initial value, tab separated.
    pub fn conservation_tsv(&self) -> String {
        let mut out = String::from("tau\tdmass\tdenergy\tdangx\tdangy\tdangz\n");
        if let Some(first) = self.samples.first() {
            let c0 = first.conservation.as_array();
            for s in &self.samples {
                let c = s.conservation.as_array();
                out.push_str(&format!("{:.9e}", s.tau));
                for k in 0..5 {
                    out.push_str(&format!("\t{:.6e}", c[k] - c0[k]));
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Slope fit of `log(norm)` against `α(τ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecayFit {
    pub lambda: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least-squares fit of `log y = c - λ x`.
pub fn fit_log_linear(x: &[f64], y: &[f64]) -> Result<DecayFit> {
    if x.len() != y.len() {
        return Err(Error::GridMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 10 {
        return Err(Error::Degenerate(format!("need at least 10 samples, got {}", x.len())));
    }
    if y.iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate("all-zero series".into()));
    }
    if let Some(bad) = y.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Degenerate(format!("non-positive sample {bad}")));
    }
    // centre on the first sample so that a constant series fits exactly
    let l0 = y[0].ln();
    let ly: Vec<f64> = y.iter().map(|v| v.ln() - l0).collect();
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("all samples at one time".into()));
    }
    let sxy: f64 = x.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(&ly).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let ss_tot: f64 = ly.iter().map(|b| (b - my) * (b - my)).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(DecayFit {
        lambda: -slope,
        intercept: intercept + l0,
        r_squared,
    })
}

/// Fit `‖φu(τ)‖_∞ ≈ C e^{-λ α(τ)}`.
pub fn decay_fit(report: &DecayReport) -> Result<DecayFit> {
    let x: Vec<f64> = report.samples.iter().map(|s| alpha(s.tau, report.h)).collect();
    let y: Vec<f64> = report.samples.iter().map(|s| s.linf).collect();
    fit_log_linear(&x, &y)
}

/// Fit `‖u(τ)‖₂ ≈ C e^{-λ α(τ)}`.
pub fn decay_fit_l2(report: &DecayReport) -> Result<DecayFit> {
    let x: Vec<f64> = report.samples.iter().map(|s| alpha(s.tau, report.h)).collect();
    let y: Vec<f64> = report.samples.iter().map(|s| s.l2).collect();
    fit_log_linear(&x, &y)
}

/// Lattice points kept when thinning: those an even number of steps from
/// the centre along every axis.
fn keep_coarse(c: [usize; 3], center: usize) -> bool {
    c.iter().all(|&x| (x as i64 - center as i64) % 2 == 0)
}

/// Per-axis interpolation from the thinned lattice.
fn coarse_axis(c: usize, center: usize) -> Vec<(i64, f64)> {
    if (c as i64 - center as i64) % 2 == 0 {
        vec![(c as i64, 1.0)]
    } else {
        vec![(c as i64 - 1, 0.5), (c as i64 + 1, 0.5)]
    }
}

/// `Γ_φ` evaluated on a thinned phase subset and spread back multilinearly.
#[derive(Clone, Debug)]
struct Thinning {
    /// Fine spatial indices of the coarse spatial nodes.
    spatial: Vec<usize>,
    /// Fine velocity indices of the coarse velocity nodes.
    velocity: Vec<usize>,
    /// Per fine spatial node: `(coarse position, weight)`.
    spatial_scatter: Vec<Vec<(usize, f64)>>,
    velocity_scatter: Vec<Vec<(usize, f64)>>,
}

impl Thinning {
    fn new(grid: &PhaseGrid) -> Self {
        let sp = &grid.spatial;
        let n = sp.per_axis();
        let center = (n - 1) / 2;
        let spatial: Vec<usize> = (0..sp.len()).filter(|&i| keep_coarse(sp.lattice_coords(i), center)).collect();
        let mut pos_of = std::collections::HashMap::new();
        for (k, &i) in spatial.iter().enumerate() {
            pos_of.insert(sp.lattice_coords(i), k);
        }
        let spatial_scatter = (0..sp.len())
            .map(|i| {
                let c = sp.lattice_coords(i);
                let axes: Vec<Vec<(i64, f64)>> = c.iter().map(|&x| coarse_axis(x, center)).collect();
                let mut out = Vec::new();
                for &(a, wa) in &axes[0] {
                    for &(b, wb) in &axes[1] {
                        for &(e, we) in &axes[2] {
                            if a < 0 || b < 0 || e < 0 {
                                continue;
                            }
                            if let Some(&k) = pos_of.get(&[a as usize, b as usize, e as usize]) {
                                out.push((k, wa * wb * we));
                            }
                        }
                    }
                }
                let total: f64 = out.iter().map(|p| p.1).sum();
                if total > 0.0 {
                    out.iter_mut().for_each(|p| p.1 /= total);
                    out
                } else {
                    let y = sp.nodes()[i];
                    let k = (0..spatial.len())
                        .min_by(|&a, &b| {
                            let da = (sp.nodes()[spatial[a]] - y).norm2();
                            let db = (sp.nodes()[spatial[b]] - y).norm2();
                            da.total_cmp(&db)
                        })
                        .expect("coarse set contains the centre");
                    vec![(k, 1.0)]
                }
            })
            .collect();
        let vg = &grid.velocity;
        let m = vg.per_axis();
        let vc = (m - 1) / 2;
        let velocity: Vec<usize> = (0..vg.len())
            .filter(|&j| {
                let (a, b, c) = vg.coords(j);
                keep_coarse([a, b, c], vc)
            })
            .collect();
        let mut vpos = std::collections::HashMap::new();
        for (k, &j) in velocity.iter().enumerate() {
            vpos.insert(vg.coords(j), k);
        }
        let velocity_scatter = (0..vg.len())
            .map(|j| {
                let (a0, b0, c0) = vg.coords(j);
                let axes: Vec<Vec<(i64, f64)>> = [a0, b0, c0].iter().map(|&x| coarse_axis(x, vc)).collect();
                let mut out = Vec::new();
                for &(a, wa) in &axes[0] {
                    for &(b, wb) in &axes[1] {
                        for &(e, we) in &axes[2] {
                            if a < 0 || b < 0 || e < 0 || a >= m as i64 || b >= m as i64 || e >= m as i64 {
                                continue;
                            }
                            if let Some(&k) = vpos.get(&(a as usize, b as usize, e as usize)) {
                                out.push((k, wa * wb * we));
                            }
                        }
                    }
                }
                let total: f64 = out.iter().map(|p| p.1).sum();
                out.iter_mut().for_each(|p| p.1 /= total);
                out
            })
            .collect();
        Thinning {
            spatial,
            velocity,
            spatial_scatter,
            velocity_scatter,
        }
    }

    fn coarse_len(&self) -> usize {
        self.spatial.len() * self.velocity.len()
    }

    /// Spread coarse values over the full phase grid.
    fn scatter(&self, coarse: &[f64], nv: usize, out: &mut [f64]) {
        let ncv = self.velocity.len();
        let mid: Vec<f64> = (0..self.spatial.len())
            .flat_map(|c| {
                let row = &coarse[c * ncv..(c + 1) * ncv];
                self.velocity_scatter
                    .iter()
                    .map(move |ws| ws.iter().map(|&(k, w)| w * row[k]).sum::<f64>())
            })
            .collect();
        out.par_chunks_mut(nv).enumerate().for_each(|(i, row)| {
            row.iter_mut().for_each(|x| *x = 0.0);
            for &(c, w) in &self.spatial_scatter[i] {
                for (x, m) in row.iter_mut().zip(&mid[c * nv..(c + 1) * nv]) {
                    *x += w * m;
                }
            }
        });
    }
}

fn mix_seed(parts: &[u64]) -> u64 {
    let mut z: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        z ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(z << 6).wrapping_add(z >> 2);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Monte Carlo controls for `Γ_φ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaConfig {
    pub samples: usize,
    /// Evaluate every this many steps; linear in time in between.
    pub stride: usize,
}

impl Default for GammaConfig {
    fn default() -> Self {
        GammaConfig { samples: 256, stride: 8 }
    }
}

/// `Γ_φ(w, w)` on the thinned set at a list of times.
#[derive(Clone, Debug, Default)]
struct GammaTable {
    taus: Vec<f64>,
    values: Vec<Vec<f64>>,
}

impl GammaTable {
    fn at(&self, tau: f64) -> Option<Vec<f64>> {
        if self.taus.is_empty() {
            return None;
        }
        let k = self.taus.partition_point(|&s| s <= tau);
        if k == 0 {
            return Some(self.values[0].clone());
        }
        if k == self.taus.len() {
            return Some(self.values[k - 1].clone());
        }
        let (a, b) = (self.taus[k - 1], self.taus[k]);
        let t = (tau - a) / (b - a);
        Some(
            self.values[k - 1]
                .iter()
                .zip(&self.values[k])
                .map(|(x, y)| (1.0 - t) * x + t * y)
                .collect(),
        )
    }
}

/// Output of a linear solve.
#[derive(Clone, Debug)]
pub struct LinearRun {
    pub last: DistributionField,
    /// Snapshots of `w`, including `τ = 0` and the final time.
    pub snapshots: Vec<DistributionField>,
    pub report: DecayReport,
}

/// Backtrack stencils and exponent moments of one step length.
struct StepData {
    spatial: Vec<Stencil>,
    velocity: Vec<Stencil>,
    moments: Vec<[f64; 3]>,
}

impl StepData {
    fn new(chars: &[Characteristic], grid: &PhaseGrid, dt: f64) -> Self {
        let rule = GaussRule::new(STEP_GAUSS_POINTS);
        let (spatial, (velocity, moments)) = chars
            .par_iter()
            .map(|ch| {
                let back = ch.state_after(dt);
                let y = if back.y.norm() > 1.0 { back.y * (1.0 / back.y.norm()) } else { back.y };
                (
                    spatial_stencil(&grid.spatial, y),
                    (
                        velocity_stencil(&grid.velocity, back.eta, false),
                        exponent_moments(ch, 0.0, dt, &rule),
                    ),
                )
            })
            .unzip();
        StepData {
            spatial,
            velocity,
            moments,
        }
    }
}

/// Precomputed per-node data for the marching scheme on one phase grid.
pub struct LinearSolver {
    params: SimParams,
    grid: Arc<PhaseGrid>,
    config: LinearConfig,
    kernel: Option<KernelMatrix>,
    /// Backward characteristic of every node.
    chars: Vec<Characteristic>,
    /// One-step backtrack data for the full and the refined step.
    steps: Vec<StepData>,
    phi: Vec<f64>,
    /// `χ_k` at the velocity nodes and the inverse Gram matrix.
    chi: [Vec<f64>; 5],
    gram_inv: [[f64; 5]; 5],
    thinning: Thinning,
}

fn invert_small<const N: usize>(m: [[f64; N]; N]) -> Result<[[f64; N]; N]> {
    let mut a = m;
    let mut inv = [[0.0; N]; N];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for col in 0..N {
        let piv = (col..N)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .unwrap_or(col);
        if a[piv][col].abs() < 1e-300 {
            return Err(Error::Degenerate("singular Gram matrix".into()));
        }
        a.swap(col, piv);
        inv.swap(col, piv);
        let d = a[col][col];
        for k in 0..N {
            a[col][k] /= d;
            inv[col][k] /= d;
        }
        for r in 0..N {
            if r != col {
                let f = a[r][col];
                for k in 0..N {
                    a[r][k] -= f * a[col][k];
                    inv[r][k] -= f * inv[col][k];
                }
            }
        }
    }
    Ok(inv)
}

impl LinearSolver {
    pub fn new(params: SimParams, grid: Arc<PhaseGrid>, config: LinearConfig) -> Result<Self> {
        params.validate()?;
        config.validate(&params)?;
        let h = params.h;
        let nv = grid.velocity.len();
        let kernel = match config.kernel {
            KernelMode::Off => None,
            _ => Some(KernelMatrix::build(
                &grid.velocity,
                DiagonalRule::NullSpace,
                None,
                DENSE_HARD_LIMIT,
            )?),
        };
        let dt = config.dt();
        let points: Vec<PhasePoint> = grid
            .spatial
            .nodes()
            .iter()
            .flat_map(|&y| grid.velocity.nodes().iter().map(move |&eta| PhasePoint::new(y, eta)))
            .collect();
        let chars: Vec<Characteristic> = points.par_iter().map(|&p| Characteristic::new(p, h)).collect();
        let mut steps = vec![StepData::new(&chars, &grid, dt)];
        if config.lead_steps > 0 && config.lead_refine > 1 {
            steps.push(StepData::new(&chars, &grid, dt / config.lead_refine as f64));
        }
        let phi = points.iter().map(|p| weight_phi(p.y, p.eta, h, params.beta)).collect();
        let basis = InvariantBasis;
        let chi: [Vec<f64>; 5] = std::array::from_fn(|k| basis.sample_chi(k, &grid.velocity));
        let wv = grid.velocity.weights();
        let mut gram = [[0.0; 5]; 5];
        for a in 0..5 {
            for b in 0..5 {
                gram[a][b] = (0..nv).map(|j| wv[j] * chi[a][j] * chi[b][j]).sum();
            }
        }
        let gram_inv = invert_small(gram)?;
        let thinning = Thinning::new(&grid);
        Ok(LinearSolver {
            params,
            grid,
            config,
            kernel,
            chars,
            steps,
            phi,
            chi,
            gram_inv,
            thinning,
        })
    }

    pub fn grid(&self) -> &Arc<PhaseGrid> {
        &self.grid
    }

    pub fn config(&self) -> &LinearConfig {
        &self.config
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    /// Remove the discrete collision-invariant part of one velocity slice.
    fn project_out(&self, u: &mut [f64]) {
        let wv = self.grid.velocity.weights();
        let mut b = [0.0; 5];
        for (k, bk) in b.iter_mut().enumerate() {
            *bk = u.iter().zip(&self.chi[k]).zip(wv).map(|((x, c), w)| w * x * c).sum();
        }
        let mut c = [0.0; 5];
        for (a, ca) in c.iter_mut().enumerate() {
            *ca = (0..5).map(|k| self.gram_inv[a][k] * b[k]).sum();
        }
        for (j, x) in u.iter_mut().enumerate() {
            *x -= (0..5).map(|k| c[k] * self.chi[k][j]).sum::<f64>();
        }
    }

    /// `G = μ̃ cos² φ K̃(w/φ) + cos² φ g + μ̃^{1/2} cos² Γ_φ` at `τ`.
    fn gain(&self, tau: f64, w: &[f64], source: &SourceTerm, gamma: Option<&[f64]>, out: &mut [f64]) {
        let nv = self.grid.velocity.len();
        let h = self.params.h;
        let c2 = cos2(h, tau);
        out.iter_mut().for_each(|x| *x = 0.0);
        if let Some(kernel) = &self.kernel {
            let u: Vec<f64> = w.iter().zip(&self.phi).map(|(a, p)| a / p).collect();
            let mut p = u.clone();
            if self.config.kernel == KernelMode::Conservative {
                p.par_chunks_mut(nv).for_each(|row| self.project_out(row));
            }
            let ns = self.grid.spatial.len();
            let mut kp = vec![0.0; ns * nv];
            // kp[i][j] = Σ_k K[j][k] p[i][k]
            unsafe {
                matrixmultiply::dgemm(
                    ns,
                    nv,
                    nv,
                    1.0,
                    p.as_ptr(),
                    nv as isize,
                    1,
                    kernel.data().as_ptr(),
                    1,
                    nv as isize,
                    0.0,
                    kp.as_mut_ptr(),
                    nv as isize,
                    1,
                );
            }
            let nu = kernel.nu();
            let conservative = self.config.kernel == KernelMode::Conservative;
            out.par_chunks_mut(nv).enumerate().for_each(|(i, row)| {
                let y = self.grid.spatial.nodes()[i];
                let scale = mu_tilde(y, h) * c2;
                let ui = &u[i * nv..(i + 1) * nv];
                let ki = &kp[i * nv..(i + 1) * nv];
                let pi = &p[i * nv..(i + 1) * nv];
                let mut ku: Vec<f64> = if conservative {
                    let mut l: Vec<f64> = (0..nv).map(|j| ki[j] - nu[j] * pi[j]).collect();
                    self.project_out(&mut l);
                    (0..nv).map(|j| nu[j] * ui[j] + l[j]).collect()
                } else {
                    ki.to_vec()
                };
                for (j, x) in row.iter_mut().enumerate() {
                    ku[j] *= scale * self.phi[i * nv + j];
                    *x = ku[j];
                }
            });
        }
        if !source.is_zero() {
            out.par_chunks_mut(nv).enumerate().for_each(|(i, row)| {
                let y = self.grid.spatial.nodes()[i];
                for (j, x) in row.iter_mut().enumerate() {
                    let eta = self.grid.velocity.nodes()[j];
                    *x += c2 * self.phi[i * nv + j] * source.value(tau, y, eta);
                }
            });
        }
        if let Some(g) = gamma {
            out.par_chunks_mut(nv).enumerate().for_each(|(i, row)| {
                let s = mu_tilde(self.grid.spatial.nodes()[i], h).sqrt() * c2;
                for (x, gv) in row.iter_mut().zip(&g[i * nv..(i + 1) * nv]) {
                    *x += s * gv;
                }
            });
        }
    }

    /// `Γ_φ(w, w)` on the thinned set.
    fn gamma_coarse(&self, w: &[f64], step: usize, cfg: &GammaConfig) -> Vec<f64> {
        let nv = self.grid.velocity.len();
        let (h, beta) = (self.params.h, self.params.beta);
        let ncv = self.thinning.velocity.len();
        let seed = self.params.seed;
        let mut out = vec![0.0; self.thinning.coarse_len()];
        out.par_chunks_mut(ncv).enumerate().for_each(|(c, row)| {
            let i = self.thinning.spatial[c];
            let y = self.grid.spatial.nodes()[i];
            let slice: Vec<f64> = (0..nv).map(|j| w[i * nv + j] / self.phi[i * nv + j]).collect();
            if slice.iter().all(|&x| x == 0.0) {
                return;
            }
            let vg = &self.grid.velocity;
            let u = |v: Vec3| velocity_stencil(vg, v, false).apply(&slice);
            for (k, x) in row.iter_mut().enumerate() {
                let j = self.thinning.velocity[k];
                let eta = vg.nodes()[j];
                let s = mix_seed(&[seed, step as u64, i as u64, j as u64]);
                let est = gamma_mc(u, u, eta, cfg.samples, s);
                *x = weight_phi(y, eta, h, beta) * est.value;
            }
        });
        out
    }

    fn record(&self, tau: f64, w: &[f64]) -> Result<DecaySample> {
        let u: Vec<f64> = w.iter().zip(&self.phi).map(|(a, p)| a / p).collect();
        let nv = self.grid.velocity.len();
        let wv = self.grid.velocity.weights();
        let mut l2 = 0.0;
        for (i, &vol) in self.grid.spatial.volumes().iter().enumerate() {
            for j in 0..nv {
                l2 += vol * wv[j] * u[i * nv + j] * u[i * nv + j];
            }
        }
        Ok(DecaySample {
            tau,
            l2: l2.sqrt(),
            linf: w.iter().fold(0.0, |m, v| m.max(v.abs())),
            conservation: conservation_functionals(&u, &self.grid, self.params.h)?,
        })
    }

    /// Solve with the given initial data and source.
    pub fn solve(&self, w0: &InitialData, source: &SourceTerm) -> Result<LinearRun> {
        self.run(w0, source, None, None).map(|(run, _)| run)
    }

    fn run(
        &self,
        w0: &InitialData,
        source: &SourceTerm,
        gamma_in: Option<&GammaTable>,
        gamma_out: Option<&GammaConfig>,
    ) -> Result<(LinearRun, GammaTable)> {
        let grid = &self.grid;
        let nv = grid.velocity.len();
        let n = grid.len();
        let h = self.params.h;
        let steps = self.config.steps;
        if let InitialData::Grid(values) = w0 {
            grid.check(values)?;
        }
        let w_init = w0.at_nodes(grid);
        let start = DistributionField::new(grid.clone(), 0.0, FieldKind::W, w_init.clone())?;
        let peak = start.sup_norm();
        if start.specular_defect() > 1e-6 * peak.max(f64::MIN_POSITIVE) {
            return Err(invalid("w0", "initial data is not specular at wall nodes"));
        }
        let ys = grid.spatial.nodes();
        let probe = [ys[0], ys[ys.len() / 2], ys[ys.len() - 1]];
        source.check_microscopic(&grid.velocity, &[0.0, 0.5 * self.config.tau_end, self.config.tau_end], &probe, 1e-6)?;
        let u0: Vec<f64> = w_init.iter().zip(&self.phi).map(|(a, p)| a / p).collect();
        let scale = conservation_scale(&u0, grid, h)?;
        let has_gain = self.kernel.is_some() || !source.is_zero() || gamma_in.is_some();
        let mut fine_gamma = vec![0.0; n];
        let gamma_at = |tau: f64, buf: &mut Vec<f64>| -> bool {
            match gamma_in.and_then(|t| t.at(tau)) {
                Some(coarse) => {
                    self.thinning.scatter(&coarse, nv, buf);
                    true
                }
                None => false,
            }
        };
        let mut table = GammaTable::default();
        let stride = gamma_out.map(|c| c.stride.max(1)).unwrap_or(usize::MAX);
        let evaluate_gamma = |step: usize, tau: f64, w: &[f64], table: &mut GammaTable| {
            if let Some(cfg) = gamma_out {
                if step % stride == 0 || step == steps {
                    table.taus.push(tau);
                    table.values.push(self.gamma_coarse(w, step, cfg));
                }
            }
        };

        let mut w = w_init;
        let mut v = vec![0.0; n];
        let mut g_prev = vec![0.0; n];
        if has_gain {
            let with_gamma = gamma_at(0.0, &mut fine_gamma);
            self.gain(0.0, &w, source, with_gamma.then_some(&fine_gamma[..]), &mut g_prev);
        }
        evaluate_gamma(0, 0.0, &w, &mut table);
        let mut samples = vec![self.record(0.0, &w)?];
        let mut snapshots = vec![start];
        let mut cumulative = vec![[0.0; 3]; n];
        let mut extinct = vec![false; n];
        let rule = GaussRule::new(STEP_GAUSS_POINTS);
        let attenuation = self.config.attenuation;
        let mut step = 0;
        for (s0, tau, kind, full) in self.config.schedule() {
            let s1 = tau;
            let data = &self.steps[kind];
            let dt = s1 - s0;
            // attenuated transport of the initial data, exact along the path
            let hom: Vec<f64> = cumulative
                .par_iter_mut()
                .zip(extinct.par_iter_mut())
                .zip(self.chars.par_iter())
                .map(|((cum, gone), ch)| {
                    if *gone {
                        return 0.0;
                    }
                    if !attenuation {
                        return w0.eval(grid, ch.state_after(tau));
                    }
                    let m = exponent_moments(ch, s0, s1, &rule);
                    for k in 0..3 {
                        cum[k] += m[k];
                    }
                    let e = exponent_at(cum, h, tau);
                    if e > EXPONENT_CUTOFF {
                        *gone = true;
                        return 0.0;
                    }
                    (-e).exp() * w0.eval(grid, ch.state_after(tau))
                })
                .collect();
            if has_gain {
                let base: Vec<(f64, f64)> = (0..n)
                    .into_par_iter()
                    .map(|z| {
                        let x = if attenuation { exponent_at(&data.moments[z], h, tau) } else { 0.0 };
                        let (w1, w0g) = integrator_weights(x, dt);
                        let (s, vs) = (&data.spatial[z], &data.velocity[z]);
                        let carried = (-x).exp() * interpolate_phase(&v, nv, s, vs)
                            + w0g * interpolate_phase(&g_prev, nv, s, vs);
                        (carried, w1)
                    })
                    .collect();
                let with_gamma = gamma_at(tau, &mut fine_gamma);
                let mut g = g_prev.clone();
                let mut total = vec![0.0; n];
                for _ in 0..self.config.sweeps.max(1) {
                    v.par_iter_mut()
                        .zip(&base)
                        .zip(&g)
                        .for_each(|((vz, &(carried, w1)), gz)| *vz = carried + w1 * gz);
                    total.par_iter_mut().zip(&hom).zip(&v).for_each(|((t, a), b)| *t = a + b);
                    self.gain(tau, &total, source, with_gamma.then_some(&fine_gamma[..]), &mut g);
                }
                g_prev = g;
                w = total;
            } else {
                w = hom;
            }
            if !full {
                continue;
            }
            step += 1;
            evaluate_gamma(step, tau, &w, &mut table);
            samples.push(self.record(tau, &w)?);
            if step % self.config.snapshot_every == 0 || step == steps {
                snapshots.push(DistributionField::new(grid.clone(), tau, FieldKind::W, w.clone())?);
            }
        }
        let last = snapshots.last().expect("final snapshot").clone();
        Ok((
            LinearRun {
                last,
                snapshots,
                report: DecayReport {
                    h,
                    samples,
                    scale,
                    contraction: Vec::new(),
                },
            },
            table,
        ))
    }
}

/// Build a [`LinearSolver`] and run it once.
pub fn solve_linear(
    params: SimParams,
    grid: Arc<PhaseGrid>,
    w0: &InitialData,
    source: &SourceTerm,
    config: LinearConfig,
) -> Result<LinearRun> {
    LinearSolver::new(params, grid, config)?.solve(w0, source)
}

/// Controls of the Picard iteration on the quadratic term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PicardConfig {
    pub m_max: usize,
    /// Stop once `‖w^{m+1} - w^m‖_∞ ≤ tol ‖w^1‖_∞`.
    pub tol: f64,
    /// Largest admissible `‖w₀‖_∞`.
    pub smallness: f64,
    pub gamma: GammaConfig,
}

impl Default for PicardConfig {
    fn default() -> Self {
        PicardConfig {
            m_max: 8,
            tol: 1e-6,
            smallness: 1e-2,
            gamma: GammaConfig::default(),
        }
    }
}

/// Where the Picard iteration stopped.
#[derive(Clone, Debug)]
pub struct PicardState {
    pub iterate: usize,
    pub current: DistributionField,
    /// `‖w^{m+1} - w^m‖_∞` over the snapshot times, one per step.
    pub differences: Vec<f64>,
    pub ratios: Vec<f64>,
    /// Snapshots of the last iterate.
    pub snapshots: Vec<DistributionField>,
}

/// Solve the nonlinear weighted equation by iterating the quadratic term,
/// each iterate being a full linear solve.
pub fn picard_solve(
    solver: &LinearSolver,
    w0: &InitialData,
    cfg: &PicardConfig,
) -> Result<(DistributionField, DecayReport, PicardState)> {
    let grid = solver.grid();
    let start = w0.at_nodes(grid);
    let size = start.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if size > cfg.smallness {
        return Err(invalid(
            "w0",
            format!("sup norm {size:e} exceeds the smallness threshold {:e}", cfg.smallness),
        ));
    }
    if cfg.m_max == 0 {
        return Err(invalid("m_max", "must be positive"));
    }
    let zero = SourceTerm::zero();
    let (mut run, mut table) = solver.run(w0, &zero, None, Some(&cfg.gamma))?;
    let first = run.snapshots.iter().map(|s| s.sup_norm()).fold(0.0, f64::max);
    let mut differences = vec![first];
    let mut ratios = Vec::new();
    let mut iterate = 1;
    let mut rising = 0;
    while iterate < cfg.m_max && differences[differences.len() - 1] > cfg.tol * first {
        let (next, next_table) = solver.run(w0, &zero, Some(&table), Some(&cfg.gamma))?;
        let diff = next
            .snapshots
            .iter()
            .zip(&run.snapshots)
            .map(|(a, b)| a.values.iter().zip(&b.values).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())))
            .fold(0.0, f64::max);
        let ratio = diff / differences[differences.len() - 1];
        differences.push(diff);
        ratios.push(ratio);
        iterate += 1;
        run = next;
        table = next_table;
        rising = if ratio >= 1.0 { rising + 1 } else { 0 };
        if rising >= 3 {
            return Err(Error::NonContraction { ratios });
        }
    }
    let mut report = run.report.clone();
    report.contraction = ratios.clone();
    let state = PicardState {
        iterate,
        current: run.last.clone(),
        differences,
        ratios,
        snapshots: run.snapshots.clone(),
    };
    Ok((run.last, report, state))
}

/// `ρ(t, x)` at every spatial node of every snapshot, in lab variables.
///
/// `∫ f dη = μ̃ + μ̃^{1/2} ∫ μ^{1/2} u dη` and `ρ = R^{-3} ∫ f dη`.
pub fn density_series(snapshots: &[DistributionField], params: &SimParams) -> Vec<DensitySample> {
    let mut out = Vec::new();
    for snap in snapshots {
        let u = snap.convert(FieldKind::U, params);
        let grid = &snap.grid;
        let nv = grid.velocity.len();
        let t = t_of_tau(snap.tau, params.h);
        let r = radius(t, params.h);
        for (i, &y) in grid.spatial.nodes().iter().enumerate() {
            let mt = mu_tilde(y, params.h);
            let pert: f64 = (0..nv)
                .map(|j| grid.velocity.weights()[j] * sqrt_mu(grid.velocity.nodes()[j]) * u.values[i * nv + j])
                .sum();
            out.push(DensitySample {
                t,
                x: y * r,
                rho: (mt + mt.sqrt() * pert) / (r * r * r),
            });
        }
    }
    out
}

/// Controls of the positivity iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositivityConfig {
    pub tau_end: f64,
    pub steps: usize,
    pub m_max: usize,
    /// Collision samples shared by every node.
    pub samples: usize,
}

/// Result of the positivity iteration.
#[derive(Clone, Debug)]
pub struct PositivityRun {
    /// Last iterate at every time level.
    pub series: Vec<DistributionField>,
    /// Smallest value of each iterate over all levels and nodes.
    pub minima: Vec<f64>,
    /// Largest relative mass change of each iterate.
    pub mass_drift: Vec<f64>,
}

/// Iterate `Λ f^{m+1} + cos² ν(f^m) f^{m+1} = cos² Q₁(f^m, f^m)` from
/// `f^0 = f₀`, marching each iterate along one-step backward
/// characteristics.
///
/// The collision integrals use one fixed sample set (`η* ~ μ`, `ω`
/// uniform) for every node, so `ν(M) M = Q₁(M, M)` holds node by node and
/// `f` is interpolated as `M` times an interpolant of `f / M`; every term
/// is then nonnegative and `f = M` is reproduced exactly.
pub fn positivity_iterate(
    params: &SimParams,
    grid: Arc<PhaseGrid>,
    f0: &[f64],
    cfg: &PositivityConfig,
) -> Result<PositivityRun> {
    params.validate()?;
    grid.check(f0)?;
    if let Some((node, &value)) = f0.iter().enumerate().find(|(_, &v)| v < 0.0 || !v.is_finite()) {
        return Err(Error::Negativity { value, node });
    }
    if cfg.steps == 0 || cfg.m_max == 0 || cfg.samples == 0 {
        return Err(invalid("positivity", "steps, m_max and samples must be positive"));
    }
    if !(cfg.tau_end > 0.0 && cfg.tau_end < params.tau_max()) {
        return Err(invalid("tau_end", format!("must lie in (0, {})", params.tau_max())));
    }
    let h = params.h;
    let ns = grid.spatial.len();
    let vg = &grid.velocity;
    let nv = vg.len();
    let n = ns * nv;
    let dt = cfg.tau_end / cfg.steps as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let draws: Vec<(Vec3, Vec3)> = (0..cfg.samples)
        .map(|_| {
            let es = normal_vec(&mut rng, 1.0);
            (es, unit_vec(&mut rng))
        })
        .collect();
    let star_stencils: Vec<Stencil> = draws.iter().map(|(es, _)| velocity_stencil(vg, *es, true)).collect();
    let star_mu: Vec<f64> = draws.iter().map(|(es, _)| mu(*es)).collect();
    // per velocity node and sample: weight, stencils and μ at η', η*'
    struct Post {
        weight: f64,
        prime: Stencil,
        star_prime: Stencil,
        mu_pair: f64,
    }
    let posts: Vec<Vec<Post>> = vg
        .nodes()
        .par_iter()
        .map(|&eta| {
            draws
                .iter()
                .zip(&star_mu)
                .map(|(&(es, om), &ms)| {
                    let (ep, esp) = post_collision(eta, es, om);
                    Post {
                        weight: (es - eta).dot(om).abs() * 4.0 * PI / (cfg.samples as f64 * ms),
                        prime: velocity_stencil(vg, ep, true),
                        star_prime: velocity_stencil(vg, esp, true),
                        mu_pair: mu(ep) * mu(esp),
                    }
                })
                .collect()
        })
        .collect();
    let m_node: Vec<f64> = grid.sample(|y, eta| mu_tilde(y, h) * mu(eta));
    let points: Vec<PhasePoint> = grid
        .spatial
        .nodes()
        .iter()
        .flat_map(|&y| vg.nodes().iter().map(move |&eta| PhasePoint::new(y, eta)))
        .collect();
    let steps_back: Vec<(Stencil, Stencil, f64)> = points
        .par_iter()
        .map(|&p| {
            let back = Characteristic::new(p, h).state_after(dt);
            let y = if back.y.norm() > 1.0 { back.y * (1.0 / back.y.norm()) } else { back.y };
            (
                spatial_stencil(&grid.spatial, y),
                velocity_stencil(vg, back.eta, true),
                mu_tilde(back.y, h) * mu(back.eta),
            )
        })
        .collect();
    let mass = |f: &[f64]| -> f64 {
        let mut acc = 0.0;
        for (i, &vol) in grid.spatial.volumes().iter().enumerate() {
            for j in 0..nv {
                acc += vol * vg.weights()[j] * f[i * nv + j];
            }
        }
        acc
    };
    // collision frequency and gain of one level
    let collide = |f: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let ratio: Vec<f64> = f.iter().zip(&m_node).map(|(a, m)| a / m).collect();
        let mut nu = vec![0.0; n];
        let mut gain = vec![0.0; n];
        nu.par_chunks_mut(nv)
            .zip(gain.par_chunks_mut(nv))
            .enumerate()
            .for_each(|(i, (nu_row, gain_row))| {
                let mt = mu_tilde(grid.spatial.nodes()[i], h);
                let r = &ratio[i * nv..(i + 1) * nv];
                let star: Vec<f64> = star_stencils
                    .iter()
                    .zip(&star_mu)
                    .map(|(st, &ms)| mt * ms * st.apply(r))
                    .collect();
                for j in 0..nv {
                    let mut a = 0.0;
                    let mut b = 0.0;
                    for (s, post) in posts[j].iter().enumerate() {
                        a += post.weight * star[s];
                        b += post.weight * mt * mt * post.mu_pair * post.prime.apply(r) * post.star_prime.apply(r);
                    }
                    nu_row[j] = a;
                    gain_row[j] = b;
                }
            });
        (nu, gain)
    };
    let levels = cfg.steps + 1;
    let mut history: Vec<Vec<f64>> = vec![f0.to_vec(); levels];
    let mass0 = mass(f0);
    let mut minima = Vec::new();
    let mut mass_drift = Vec::new();
    for _ in 0..cfg.m_max {
        let collided: Vec<(Vec<f64>, Vec<f64>)> = history.iter().map(|f| collide(f)).collect();
        let mut next = Vec::with_capacity(levels);
        next.push(f0.to_vec());
        for step in 1..levels {
            let (c_prev, c_next) = (cos2(h, dt * (step - 1) as f64), cos2(h, dt * step as f64));
            let prev = &next[step - 1];
            let ratio: Vec<f64> = prev.iter().zip(&m_node).map(|(a, m)| a / m).collect();
            let (nu_p, gain_p) = &collided[step - 1];
            let (nu_n, gain_n) = &collided[step];
            let gain_ratio: Vec<f64> = gain_p.iter().zip(&m_node).map(|(a, m)| a / m).collect();
            let level: Vec<f64> = (0..n)
                .into_par_iter()
                .map(|z| {
                    let (s, v, m_back) = &steps_back[z];
                    let f_back = m_back * interpolate_phase(&ratio, nv, s, v);
                    let nu_back = interpolate_phase(nu_p, nv, s, v);
                    let gain_back = m_back * interpolate_phase(&gain_ratio, nv, s, v);
                    let rate = 0.5 * (c_prev * nu_back + c_next * nu_n[z]);
                    let source = 0.5 * (c_prev * gain_back + c_next * gain_n[z]);
                    if rate > 0.0 {
                        let a = (-dt * rate).exp();
                        a * f_back + (1.0 - a) * source / rate
                    } else {
                        f_back + dt * source
                    }
                })
                .collect();
            if let Some((node, &value)) = level.iter().enumerate().find(|(_, &x)| x < NEGATIVITY_FLOOR) {
                return Err(Error::Negativity { value, node });
            }
            next.push(level);
        }
        minima.push(next.iter().flat_map(|l| l.iter()).fold(f64::INFINITY, |m, &x| m.min(x)));
        mass_drift.push(
            next.iter()
                .map(|l| (mass(l) - mass0).abs() / mass0.abs().max(f64::MIN_POSITIVE))
                .fold(0.0, f64::max),
        );
        history = next;
    }
    let series = history
        .into_iter()
        .enumerate()
        .map(|(k, values)| DistributionField::new(grid.clone(), dt * k as f64, FieldKind::F, values))
        .collect::<Result<Vec<_>>>()?;
    Ok(PositivityRun {
        series,
        minima,
        mass_drift,
    })
}
