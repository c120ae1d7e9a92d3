//! Self-checking experiment suites.
//!
//! Every suite runs a fixed battery against the library and returns named
//! checks with their thresholds, plus plain-text tables for the record.

use crate::collision::{
    apply_l_pointwise, burnette_gram, invariant_residuals, kernel_abs_integral, kernel_k, linearized_mc,
    random_slice, DiagonalRule, GramTable, InvariantBasis, KernelMatrix, PolarRule, DENSE_DEFAULT_LIMIT, KERNEL_GAIN,
};
use crate::error::{invalid, Error, Result};
use crate::frames::{density_bounds_check, radius, sqrt_mu, weight_phi, SimParams};
use crate::macro_micro::{
    boundary_curvature_remainder, boundary_term, solve_poisson_neumann, solve_vector_poisson_tangential, BallMesh,
    EllipticOptions, PhaseGrid, Potential, SpatialGrid, SurfaceRule, TestKind,
};
use crate::quadrature::VelocityGrid;
use crate::solver::{
    decay_fit, decay_fit_l2, density_series, duhamel_attenuation, picard_solve, solve_linear, InitialData,
    KernelMode, LinearConfig, LinearRun, LinearSolver, PicardConfig, SourceTerm,
};
use crate::trajectories::{
    advance_free, backward_exit_time, backward_path, continuity_probe, double_backtrack_jacobian, invariants,
    reverse_reflection_probe, uniform_in_ball, uniform_on_sphere, velocity_lemma_report, ASetParams, PhasePoint,
    ReflectionLaw, MAX_BOUNCES_CAP,
};
use crate::vec3::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

/// Direction of a check's inequality.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bound {
    AtMost,
    AtLeast,
    Below,
    Above,
}

impl Bound {
    fn symbol(self) -> &'static str {
        match self {
            Bound::AtMost => "<=",
            Bound::AtLeast => ">=",
            Bound::Below => "<",
            Bound::Above => ">",
        }
    }
}

/// One named pass/fail measurement. NaN values fail.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: Bound,
    pub threshold: f64,
    pub pass: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, value: f64, bound: Bound, threshold: f64) -> Self {
        let pass = match bound {
            Bound::AtMost => value <= threshold,
            Bound::AtLeast => value >= threshold,
            Bound::Below => value < threshold,
            Bound::Above => value > threshold,
        };
        Check {
            name: name.into(),
            value,
            bound,
            threshold,
            pass,
        }
    }

    /// `name value relation threshold PASS|FAIL`, tab separated.
    pub fn row(&self) -> String {
        format!(
            "{}\t{:.6e}\t{}\t{:.6e}\t{}",
            self.name,
            self.value,
            self.bound.symbol(),
            self.threshold,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

/// A named plain-text table.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub file: String,
    pub body: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outcome {
    pub checks: Vec<Check>,
    pub tables: Vec<Table>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn checks_tsv(&self) -> String {
        let mut out = String::from("check\tvalue\trelation\tthreshold\tstatus\n");
        for c in &self.checks {
            out.push_str(&c.row());
            out.push('\n');
        }
        out
    }

    fn push(&mut self, name: impl Into<String>, value: f64, bound: Bound, threshold: f64) {
        self.checks.push(Check::new(name, value, bound, threshold));
    }

    fn table(&mut self, file: &str, body: String) {
        self.tables.push(Table {
            file: file.to_string(),
            body,
        });
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn rk4_step(p: PhasePoint, h: f64, dt: f64) -> PhasePoint {
    let f = |q: PhasePoint| PhasePoint::new(q.eta, q.y * (-h * h));
    let add = |q: PhasePoint, d: PhasePoint, s: f64| PhasePoint::new(q.y + d.y * s, q.eta + d.eta * s);
    let k1 = f(p);
    let k2 = f(add(p, k1, 0.5 * dt));
    let k3 = f(add(p, k2, 0.5 * dt));
    let k4 = f(add(p, k3, dt));
    PhasePoint::new(
        p.y + (k1.y + k2.y * 2.0 + k3.y * 2.0 + k4.y) * (dt / 6.0),
        p.eta + (k1.eta + k2.eta * 2.0 + k3.eta * 2.0 + k4.eta) * (dt / 6.0),
    )
}

fn rk4_flow(p: PhasePoint, h: f64, span: f64, step: f64) -> PhasePoint {
    let n = (span.abs() / step).ceil().max(1.0) as usize;
    let dt = span / n as f64;
    (0..n).fold(p, |q, _| rk4_step(q, h, dt))
}

/// Backward flight to the wall by RK4 marching and bisection of the
/// crossing step; incoming wall points are reflected first.
fn rk4_exit_time(p: PhasePoint, h: f64, step: f64, horizon: f64) -> Option<f64> {
    let mut q = p;
    if p.y.norm() >= 1.0 - 1e-12 && p.y.dot(p.eta) < 0.0 {
        let n = p.y * (1.0 / p.y.norm());
        q = PhasePoint::new(p.y, p.eta - n * (2.0 * p.eta.dot(n)));
    }
    let mut s = 0.0;
    let mut left_wall = q.y.norm() < 1.0 - 1e-9;
    while s < horizon {
        let next = rk4_step(q, h, -step);
        let r = next.y.norm();
        if left_wall && r >= 1.0 {
            let (mut lo, mut hi) = (0.0, step);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if rk4_step(q, h, -mid).y.norm() >= 1.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Some(s + 0.5 * (lo + hi));
        }
        if r < 1.0 - 1e-9 {
            left_wall = true;
        }
        q = next;
        s += step;
    }
    None
}

fn vec_rel_err(a: Vec3, b: Vec3) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

/// Largest over smallest entry.
fn spread(values: &[f64]) -> f64 {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(0.0, f64::max);
    hi / lo
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryAuditConfig {
    pub h: f64,
    pub kappa: f64,
    pub n_cap: f64,
    pub flow_samples: usize,
    pub exit_samples: usize,
    pub lemma_samples: usize,
    pub jacobian_samples: usize,
    pub seed: u64,
}

impl Default for TrajectoryAuditConfig {
    fn default() -> Self {
        TrajectoryAuditConfig {
            h: 0.5,
            kappa: 0.1,
            n_cap: 2.0,
            flow_samples: 1000,
            exit_samples: 10_000,
            lemma_samples: 1000,
            jacobian_samples: 100,
            seed: SimParams::default().seed,
        }
    }
}

/// Characteristics: flow against RK4, per-segment invariants, exit times
/// against bisection, the Velocity-Lemma clauses, continuity moduli, the
/// reverse-reflection gap and the double-backtrack Jacobian.
pub fn trajectory_audit(cfg: &TrajectoryAuditConfig) -> Result<Outcome> {
    let h = cfg.h;
    let aset = ASetParams::new(cfg.kappa, cfg.n_cap)?;
    let tau_max = PI / (2.0 * h);
    let mut out = Outcome::default();

    let mut r = rng(cfg.seed, 1);
    let mut flow_err: f64 = 0.0;
    for _ in 0..cfg.flow_samples {
        let p = PhasePoint::new(uniform_in_ball(&mut r), uniform_on_sphere(&mut r) * (2.0 * cfg.n_cap * r.gen::<f64>()));
        let span = 2.0 * PI / h * r.gen::<f64>();
        let exact = advance_free(p, 0.0, span, h);
        let oracle = rk4_flow(p, h, span, 1e-4);
        flow_err = flow_err.max(vec_rel_err(exact.y, oracle.y)).max(vec_rel_err(exact.eta, oracle.eta));
    }
    out.push("flow_vs_rk4_rel_err", flow_err, Bound::AtMost, 1e-8);

    let mut r = rng(cfg.seed, 2);
    let mut drift: f64 = 0.0;
    for _ in 0..cfg.flow_samples {
        let p = aset.sample(h, &mut r);
        let tau0 = tau_max * (0.05 + 0.949 * r.gen::<f64>());
        let path = backward_path(tau0, p, h, aset.default_max_bounces(h), ReflectionLaw::Specular)?;
        for (top, bottom, state) in path.segments() {
            let a = invariants(state, h);
            let b = invariants(advance_free(state, top, bottom, h), h);
            drift = drift
                .max((a.e - b.e).abs() / a.e.max(1.0))
                .max((a.m - b.m).abs() / a.m.max(1.0));
        }
    }
    out.push("segment_invariant_drift", drift, Bound::AtMost, 1e-10);

    let mut r = rng(cfg.seed, 3);
    let mut exit_err: f64 = 0.0;
    for _ in 0..cfg.exit_samples {
        let p = aset.sample(h, &mut r);
        let closed = backward_exit_time(p, h)?;
        let oracle = rk4_exit_time(p, h, 1e-3, 4.0 * tau_max).unwrap_or(f64::INFINITY);
        exit_err = exit_err.max((closed - oracle).abs());
    }
    out.push("exit_time_vs_bisection", exit_err, Bound::AtMost, 1e-9);

    let mut r = rng(cfg.seed, 4);
    let mut lemma = String::from("tau0\tchord\tchord_lower\tchord_upper\tbounces\tbounce_bound\tmargin\tmargin_target\tmeasure\tmeasure_bound\n");
    let mut violations = [0usize; 4];
    for _ in 0..cfg.lemma_samples {
        let p = aset.sample(h, &mut r);
        let tau0 = tau_max * (0.05 + 0.949 * r.gen::<f64>());
        let rep = velocity_lemma_report(tau0, p, h, &aset, 4, &mut r)?;
        for (slot, ok) in violations
            .iter_mut()
            .zip([rep.chord_ok(), rep.bounces_ok(), rep.window_ok(), rep.measure_ok()])
        {
            *slot += usize::from(!ok);
        }
        let _ = writeln!(
            lemma,
            "{tau0:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{}\t{:.6e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}",
            rep.chord,
            rep.chord_lower,
            rep.chord_upper,
            rep.bounces,
            rep.bounce_bound,
            rep.min_window_margin,
            rep.window_target,
            rep.excluded_measure,
            rep.measure_bound
        );
    }
    for (name, count) in ["chord_bounds", "bounce_count", "window_margin", "excluded_measure"].iter().zip(violations) {
        out.push(format!("velocity_lemma_{name}_violations"), count as f64, Bound::AtMost, 0.0);
    }
    out.table("velocity_lemma.tsv", lemma);

    let eps = [1e-2, 1e-3, 1e-4];
    let mut cont = String::from("center\teps\tratio\n");
    let centers = [
        ("interior", PhasePoint::new(Vec3::new(0.2, 0.0, 0.0), Vec3::new(0.0, 0.1, 0.0)), true),
        ("gamma00", PhasePoint::new(Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, h / 2.0, 0.0)), true),
        ("gamma01", PhasePoint::new(Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 2.0 * h, 0.0)), false),
    ];
    for (label, center, regular) in centers {
        let ratios = continuity_probe(1.0, center, &eps, h, ReflectionLaw::Specular)?;
        for (e, q) in eps.iter().zip(&ratios) {
            let _ = writeln!(cont, "{label}\t{e:.1e}\t{q:.9e}");
        }
        if regular {
            out.push(format!("continuity_drift_{label}"), spread(&ratios), Bound::Below, 2.0);
        } else {
            // the other side of the dichotomy: moduli blow up on the singular set
            out.push(format!("continuity_drift_{label}"), spread(&ratios), Bound::AtLeast, 2.0);
        }
    }
    out.table("continuity.tsv", cont);

    let gaps = reverse_reflection_probe(1.0, Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, h / 2.0, 0.0), &eps, h)?;
    let last = gaps.last().expect("three eps values");
    out.push("reverse_reflection_gap", last.straddle, Bound::AtLeast, 0.1);
    out.table("reverse_reflection.tsv", reversal_table(&gaps));

    let mut r = rng(cfg.seed, 5);
    let mut jac_err: f64 = 0.0;
    let mut done = 0;
    while done < cfg.jacobian_samples {
        let p = aset.sample(h, &mut r);
        let tau = tau_max * (0.2 + 0.75 * r.gen::<f64>());
        let tau1 = tau * (0.5 + 0.5 * r.gen::<f64>());
        let span = 0.05 + (tau1 - 0.05) * r.gen::<f64>();
        let eta = uniform_on_sphere(&mut r) * (0.1 + 1.9 * r.gen::<f64>());
        match double_backtrack_jacobian(tau, p, tau1, tau1 - span, eta, h) {
            Ok(det) => {
                let expect = ((h * span).sin() / h).abs().powi(3);
                jac_err = jac_err.max((det.abs() - expect).abs() / expect);
                done += 1;
            }
            Err(Error::BounceInSpan) => continue,
            Err(e) => return Err(e),
        }
    }
    out.push("jacobian_rel_err", jac_err, Bound::AtMost, 1e-6);
    Ok(out)
}

fn reversal_table(gaps: &[crate::trajectories::ReversalGaps]) -> String {
    let mut body = String::from("eps\tstraddle_reverse\tstraddle_specular\tboth_free\tboth_bounce\n");
    for g in gaps {
        let _ = writeln!(
            body,
            "{:.1e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}",
            g.eps, g.straddle, g.straddle_specular, g.both_free, g.both_bounce
        );
    }
    body
}

/// Reverse-reflection pairs at shrinking separations around a tangential
/// wall point: the reverse law keeps a finite gap, specular does not.
pub fn reverse_reflection_demo(h: f64, tau0: f64, eps: &[f64]) -> Result<Outcome> {
    let gaps = reverse_reflection_probe(tau0, Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, h / 2.0, 0.0), eps, h)?;
    let finest = gaps
        .iter()
        .min_by(|a, b| a.eps.total_cmp(&b.eps))
        .ok_or_else(|| invalid("eps", "empty list"))?;
    let specular = gaps.iter().map(|g| g.straddle_specular / g.eps).fold(0.0, f64::max);
    let mut out = Outcome::default();
    out.push("reverse_reflection_gap", finest.straddle, Bound::AtLeast, 0.1);
    out.push("specular_gap_over_eps", specular, Bound::AtMost, 50.0);
    out.table("reverse_reflection.tsv", reversal_table(&gaps));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OperatorAuditConfig {
    pub eta_max: f64,
    /// Lattice sizes per axis for the `‖Lχ_k‖` refinement study.
    pub residual_levels: Vec<usize>,
    /// Level at which `‖Lχ_k‖ ≤ residual_target` is required.
    pub target_level: usize,
    pub residual_target: f64,
    pub slice_level: usize,
    pub slices: usize,
    pub symmetry_pairs: usize,
    pub mc_velocities: usize,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for OperatorAuditConfig {
    fn default() -> Self {
        OperatorAuditConfig {
            eta_max: 6.0,
            residual_levels: vec![15, 21, 27],
            target_level: 21,
            residual_target: 1e-3,
            slice_level: 15,
            slices: 100,
            symmetry_pairs: 100_000,
            mc_velocities: 10,
            mc_samples: 200_000,
            seed: SimParams::default().seed,
        }
    }
}

/// Residual norms at or below this are rounding noise, so a failure to
/// decrease there is not counted.
const RESIDUAL_FLOOR: f64 = 1e-12;

/// Collision operator: kernel symmetry and row integrals, null-space
/// residuals under refinement, dissipativity, Monte Carlo agreement of the
/// explicit `L`, and the Burnette Gram table.
pub fn operator_audit(cfg: &OperatorAuditConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let mut r = rng(cfg.seed, 11);
    let mut asym: f64 = 0.0;
    for _ in 0..cfg.symmetry_pairs {
        let a = uniform_on_sphere(&mut r) * (cfg.eta_max * r.gen::<f64>());
        let b = uniform_on_sphere(&mut r) * (cfg.eta_max * r.gen::<f64>());
        asym = asym.max((kernel_k(a, b)? - kernel_k(b, a)?).abs());
    }
    out.push("kernel_symmetry", asym, Bound::AtMost, 0.0);

    let rule = PolarRule::default();
    let mut rows = String::from("speed\tabs_integral\n");
    let mut row_max: f64 = 0.0;
    for i in 0..=12 {
        let speed = cfg.eta_max * i as f64 / 12.0;
        let v = kernel_abs_integral(uniform_on_sphere(&mut r) * speed, &rule);
        row_max = row_max.max(v);
        let _ = writeln!(rows, "{speed:.3}\t{v:.9e}");
    }
    // KERNEL_GAIN ∫ (1/r + r) e^{-r²/8} d³r
    out.push("kernel_row_integral_max", row_max, Bound::AtMost, 144.0 * PI * KERNEL_GAIN);
    out.table("kernel_rows.tsv", rows);

    let mut table = String::from("n\tk\tresidual\n");
    let mut levels = Vec::new();
    for &n in &cfg.residual_levels {
        let res = invariant_residuals(&VelocityGrid::new(n, cfg.eta_max)?, DiagonalRule::NullSpace);
        for (k, v) in res.iter().enumerate() {
            let _ = writeln!(table, "{n}\t{k}\t{v:.9e}");
        }
        levels.push((n, res));
    }
    let mut rises = 0;
    for pair in levels.windows(2) {
        for k in 0..5 {
            let (a, b) = (pair[0].1[k], pair[1].1[k]);
            if !(b < a || (a <= RESIDUAL_FLOOR && b <= RESIDUAL_FLOOR)) {
                rises += 1;
            }
        }
    }
    out.push("invariant_residual_rises", rises as f64, Bound::AtMost, 0.0);
    let at_target = levels
        .iter()
        .find(|(n, _)| *n == cfg.target_level)
        .map(|(_, res)| res.iter().copied().fold(0.0, f64::max))
        .unwrap_or(f64::NAN);
    out.push(
        format!("invariant_residual_at_{}", cfg.target_level),
        at_target,
        Bound::AtMost,
        cfg.residual_target,
    );
    out.table("residuals.tsv", table);

    let grid = VelocityGrid::new(cfg.slice_level, cfg.eta_max)?;
    let kernel = KernelMatrix::build(&grid, DiagonalRule::NullSpace, None, DENSE_DEFAULT_LIMIT.max(grid.len()))?;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..cfg.slices {
        let u = random_slice(&grid, &mut r);
        let lu = kernel.apply_l(&u)?;
        worst = worst.max(grid.inner(&lu, &u) / grid.inner(&u, &u));
    }
    out.push("dissipation_max", worst, Bound::AtMost, 0.0);

    let u = |v: Vec3| sqrt_mu(v) * (1.0 + 0.5 * v.x - 0.3 * v.y * v.z + 0.2 * v.norm2());
    let lu_grid = kernel.apply_l(&grid.sample(u))?;
    let mut mc_table = String::from("eta_x\teta_y\teta_z\texplicit\tmc\tstderr\tz_score\n");
    let mut disagreements = 0;
    for t in 0..cfg.mc_velocities {
        let eta = uniform_on_sphere(&mut r) * (3.0 * r.gen::<f64>());
        let mc = linearized_mc(u, eta, cfg.mc_samples, cfg.seed.wrapping_add(100 + t as u64));
        let explicit = apply_l_pointwise(u, eta, &rule);
        disagreements += usize::from(!mc.agrees_with(explicit, 3.0));
        let _ = writeln!(
            mc_table,
            "{:.6}\t{:.6}\t{:.6}\t{explicit:.9e}\t{:.9e}\t{:.3e}\t{:.3}",
            eta.x,
            eta.y,
            eta.z,
            mc.value,
            mc.stderr,
            (mc.value - explicit) / mc.stderr
        );
    }
    out.push("mc_disagreements", disagreements as f64, Bound::AtMost, 0.0);
    // the lattice operator at the nodes, for comparison with the explicit one
    let grid_gap = grid
        .nodes()
        .iter()
        .zip(&lu_grid)
        .filter(|(v, _)| v.norm() <= 3.0)
        .map(|(&v, &x)| (x - apply_l_pointwise(u, v, &rule)).abs())
        .fold(0.0, f64::max);
    let _ = writeln!(mc_table, "# lattice L at {}^3 differs from explicit L by up to {grid_gap:.3e} for |eta| <= 3", cfg.slice_level);
    out.table("mc_linearization.tsv", mc_table);

    let gram = burnette_gram(&InvariantBasis, &VelocityGrid::new(33, 8.0)?);
    out.push("gram_max_deviation", gram.max_deviation(&GramTable::exact()), Bound::AtMost, 1e-8);
    out.table("gram.tsv", gram.dump());
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EllipticAuditConfig {
    /// Mesh levels, each even and increasing.
    pub levels: Vec<usize>,
    /// `h` entering the boundary test functions.
    pub h: f64,
    pub seed: u64,
}

impl Default for EllipticAuditConfig {
    fn default() -> Self {
        EllipticAuditConfig {
            levels: vec![2, 4, 8],
            h: 0.5,
            seed: SimParams::default().seed,
        }
    }
}

fn orders(errors: &[f64]) -> Vec<f64> {
    errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

/// `J[i][j] = ∂_j (s(y) (c × y))^i` for a radial factor with gradient `ds`.
fn scaled_cross_jacobian(c: Vec3, y: Vec3, s: f64, ds: Vec3) -> [[f64; 3]; 3] {
    let base = [[0.0, -c.z, c.y], [c.z, 0.0, -c.x], [-c.y, c.x, 0.0]];
    let v = c.cross(y);
    let mut j = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            j[a][b] = base[a][b] * s + v[a] * ds[b];
        }
    }
    j
}

/// Elliptic solvers on manufactured solutions and the boundary terms of
/// the test functions.
pub fn elliptic_audit(cfg: &EllipticAuditConfig) -> Result<Outcome> {
    if cfg.levels.len() < 2 {
        return Err(invalid("elliptic_levels", "need at least two levels"));
    }
    let opts = EllipticOptions::default();
    let mut out = Outcome::default();
    let mut table = String::from("problem\tlevel\tmax_error\torder\tstability\n");

    type Scalar = Box<dyn Fn(Vec3) -> f64>;
    let scalar: [(&str, Scalar, Scalar); 2] = [
        (
            "neumann_bump",
            Box::new(|y: Vec3| 12.0 - 20.0 * y.norm2()),
            Box::new(|y: Vec3| (1.0 - y.norm2()).powi(2) - 8.0 / 35.0),
        ),
        ("neumann_cubic", Box::new(|y: Vec3| -10.0 * y.x), Box::new(|y: Vec3| y.x * (y.norm2() - 3.0))),
    ];
    for (name, source, exact) in &scalar {
        let mut errors = Vec::new();
        let mut stab = Vec::new();
        for &m in &cfg.levels {
            let sol = solve_poisson_neumann(&BallMesh::new(m)?, source.as_ref(), &opts)?;
            errors.push(sol.max_error(exact.as_ref()));
            stab.push(sol.stability_ratio());
        }
        let ord = orders(&errors);
        for (i, &m) in cfg.levels.iter().enumerate() {
            let o = if i == 0 { f64::NAN } else { ord[i - 1] };
            let _ = writeln!(table, "{name}\t{m}\t{:.9e}\t{o:.4}\t{:.6e}", errors[i], stab[i]);
        }
        out.push(format!("{name}_order"), ord.iter().copied().fold(f64::INFINITY, f64::min), Bound::AtLeast, 2.0);
    }

    let c = Vec3::new(0.3, -0.6, 0.9);
    type Vector = Box<dyn Fn(Vec3) -> Vec3>;
    let vector: [(&str, Vector, Vector); 2] = [
        (
            "tangential_vanishing",
            Box::new(move |y: Vec3| c.cross(y) * (20.0 - 28.0 * y.norm2())),
            Box::new(move |y: Vec3| c.cross(y) * (1.0 - y.norm2()).powi(2)),
        ),
        (
            "tangential_rotation",
            Box::new(move |y: Vec3| c.cross(y) * 10.0),
            Box::new(move |y: Vec3| c.cross(y) * (3.0 - y.norm2())),
        ),
    ];
    let mut green: f64 = 0.0;
    let mut flux: f64 = 0.0;
    for (name, source, exact) in &vector {
        let mut errors = Vec::new();
        let mut stab = Vec::new();
        for &m in &cfg.levels {
            let sol = solve_vector_poisson_tangential(&BallMesh::new(m)?, source.as_ref(), &opts)?;
            errors.push(sol.max_error(exact.as_ref()));
            stab.push(sol.stability_ratio());
            green = green.max((sol.energy - sol.work).abs() / sol.energy.abs().max(1.0));
            flux = flux.max(sol.wall_normal_flux());
        }
        let ord = orders(&errors);
        for (i, &m) in cfg.levels.iter().enumerate() {
            let o = if i == 0 { f64::NAN } else { ord[i - 1] };
            let _ = writeln!(table, "{name}\t{m}\t{:.9e}\t{o:.4}\t{:.6e}", errors[i], stab[i]);
        }
        out.push(format!("{name}_order"), ord.iter().copied().fold(f64::INFINITY, f64::min), Bound::AtLeast, 2.0);
    }
    out.push("green_identity_rel", green, Bound::AtMost, 1e-8);
    out.push("wall_normal_flux", flux, Bound::AtMost, 1e-12);
    out.table("elliptic_convergence.tsv", table);

    let h = cfg.h;
    let rule = SurfaceRule::default();
    let mut terms = String::from("case\tvalue\n");
    let symmetric = |y: Vec3, eta: Vec3| {
        let k = Vec3::new(0.3, -0.5, 0.8);
        (-0.25 * eta.norm2()).exp() * (1.0 + 0.3 * y.x + 0.2 * eta.dot(y).powi(2) + 0.5 * eta.dot(k.cross(y)))
    };
    let neumann_grad = |y: Vec3| Vec3::new(y.norm2() - 3.0 + 2.0 * y.x * y.x, 2.0 * y.x * y.y, 2.0 * y.x * y.z);
    let scalar_pot = Potential::Scalar { gradient: &neumann_grad };
    let c_sym = boundary_term(TestKind::C, &scalar_pot, &symmetric, h, &rule)?;
    let a_sym = boundary_term(TestKind::A, &scalar_pot, &symmetric, h, &rule)?;
    let d = Vec3::new(0.2, 0.7, -0.4);
    let vanishing = move |y: Vec3| d.cross(y) * (1.0 - y.norm2()).powi(2);
    let vanishing_jac = move |y: Vec3| {
        let s = 1.0 - y.norm2();
        scaled_cross_jacobian(d, y, s * s, y * (-4.0 * s))
    };
    let b_pot = Potential::Vector {
        value: &vanishing,
        jacobian: &vanishing_jac,
    };
    let b_sym = boundary_term(TestKind::B, &b_pot, &symmetric, h, &rule)?;
    let alive = move |y: Vec3| d.cross(y) * (3.0 - y.norm2());
    let alive_jac = move |y: Vec3| scaled_cross_jacobian(d, y, 3.0 - y.norm2(), y * -2.0);
    let alive_pot = Potential::Vector {
        value: &alive,
        jacobian: &alive_jac,
    };
    let b_alive = boundary_term(TestKind::B, &alive_pot, &symmetric, h, &rule)?;
    let remainder = boundary_curvature_remainder(&alive, &symmetric, h, &rule);
    let _ = writeln!(terms, "c_symmetric\t{c_sym:.9e}");
    let _ = writeln!(terms, "a_symmetric\t{a_sym:.9e}");
    let _ = writeln!(terms, "b_symmetric_vanishing\t{b_sym:.9e}");
    let _ = writeln!(terms, "b_symmetric_on_wall\t{b_alive:.9e}");
    let _ = writeln!(terms, "curvature_remainder\t{remainder:.9e}");
    out.push("boundary_term_c_symmetric", c_sym.abs(), Bound::AtMost, 1e-6);
    out.push("boundary_term_a_symmetric", a_sym.abs(), Bound::AtMost, 1e-6);
    out.push("boundary_term_b_symmetric", b_sym.abs(), Bound::AtMost, 1e-6);
    out.push(
        "boundary_term_b_curvature_gap",
        (b_alive - remainder).abs() / remainder.abs().max(1.0),
        Bound::AtMost,
        1e-6,
    );

    let mut r = rng(cfg.seed, 21);
    let mut control = f64::INFINITY;
    for i in 0..5 {
        let k: [f64; 3] = [r.gen(), r.gen(), r.gen()];
        // the odd part drops out against odd test functions, so the
        // asymmetry sits in the even part
        let asym = move |y: Vec3, eta: Vec3| {
            (-0.25 * eta.norm2()).exp() * (1.0 + eta.dot(y) * (k[0] * eta.x + k[1] * eta.y + k[2] * eta.z))
        };
        let v = boundary_term(TestKind::C, &scalar_pot, &asym, h, &rule)?;
        let _ = writeln!(terms, "c_asymmetric_{i}\t{v:.9e}");
        control = control.min(v.abs());
    }
    out.push("boundary_term_negative_control", control, Bound::AtLeast, 1e-3);
    out.table("boundary_terms.tsv", terms);
    Ok(out)
}

/// Grids and controls shared by the decay studies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecayStudyConfig {
    pub params: SimParams,
    pub spatial_n: usize,
    pub velocity_n: usize,
    pub steps: usize,
    /// `τ_end` as a fraction of `τ_max`.
    pub tau_fraction: f64,
    /// `‖φ u₀‖_∞` at the nodes.
    pub amplitude: f64,
    pub picard: PicardConfig,
}

impl DecayStudyConfig {
    pub fn grid(&self) -> Result<Arc<PhaseGrid>> {
        Ok(Arc::new(PhaseGrid::new(
            SpatialGrid::new(self.spatial_n)?,
            VelocityGrid::new(self.velocity_n, self.params.eta_max)?,
        )))
    }

    pub fn linear_config(&self) -> Result<LinearConfig> {
        if !(self.tau_fraction > 0.0 && self.tau_fraction < 1.0) {
            return Err(invalid("tau_fraction", format!("must lie in (0, 1), got {}", self.tau_fraction)));
        }
        let mut cfg = LinearConfig::new(self.tau_fraction * self.params.tau_max(), self.steps);
        cfg.snapshot_every = (self.steps / 36).max(1);
        Ok(cfg)
    }
}

/// Microscopic Burnette mix vanishing on the wall, as `u`.
pub fn burnette_profile(y: Vec3, eta: Vec3) -> f64 {
    let b = InvariantBasis;
    let s = (1.0 - y.norm2()).max(0.0);
    s * (b.burnette_a(1, eta) + 0.5 * b.burnette_b(1, 2, eta) + 0.3 * y.y * b.burnette_a(3, eta))
}

/// `w₀ = φ u₀` with the Burnette profile scaled so that the node maximum
/// of `|w₀|` equals `amplitude`.
pub fn burnette_initial_data(grid: &PhaseGrid, params: &SimParams, amplitude: f64) -> Result<InitialData> {
    let (h, beta) = (params.h, params.beta);
    let raw = move |y: Vec3, eta: Vec3| weight_phi(y, eta, h, beta) * burnette_profile(y, eta);
    let peak = grid.sample(raw).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(peak > 0.0) {
        return Err(Error::Degenerate("initial profile vanishes on the grid".into()));
    }
    let scale = amplitude / peak;
    Ok(InitialData::function(move |y, eta| scale * raw(y, eta)))
}

/// Largest node error of pure transport against the backtracked data,
/// undamped and damped, for data of unit size. The undamped run keeps the
/// check meaningful when the attenuation drives everything to zero.
pub fn transport_closed_form_error(params: &SimParams) -> Result<f64> {
    let grid = Arc::new(PhaseGrid::new(SpatialGrid::new(5)?, VelocityGrid::new(7, params.eta_max.min(4.0))?));
    let tau = 0.8 * params.tau_max();
    let data = |y: Vec3, eta: Vec3| (-0.3 * eta.norm2()).exp() * (1.0 + 0.5 * y.norm2() + 0.2 * eta.dot(y).powi(2));
    let damped = LinearConfig {
        kernel: KernelMode::Off,
        ..LinearConfig::new(tau, 40)
    };
    let mut worst: f64 = 0.0;
    for (config, attenuate) in [(LinearConfig::transport_only(tau, 40), false), (damped, true)] {
        let run = solve_linear(*params, grid.clone(), &InitialData::function(data), &SourceTerm::zero(), config)?;
        let nv = grid.velocity.len();
        let mut err: f64 = 0.0;
        for (i, &y) in grid.spatial.nodes().iter().enumerate() {
            for (j, &eta) in grid.velocity.nodes().iter().enumerate() {
                let path =
                    backward_path(tau, PhasePoint::new(y, eta), params.h, MAX_BOUNCES_CAP, ReflectionLaw::Specular)?;
                let foot = path.state_at(0.0);
                let factor = if attenuate { duhamel_attenuation(&path, 0.0, tau)? } else { 1.0 };
                let expect = data(foot.y, foot.eta) * factor;
                err = err.max((run.last.values[i * nv + j] - expect).abs());
            }
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Linear decay from microscopic data: closed-form transport, the `L²`
/// decay fit against `α(τ)` and conservation drift.
pub fn linear_decay_study(cfg: &DecayStudyConfig) -> Result<(Outcome, LinearRun)> {
    let mut out = Outcome::default();
    out.push("transport_closed_form", transport_closed_form_error(&cfg.params)?, Bound::AtMost, 1e-6);
    let grid = cfg.grid()?;
    let w0 = burnette_initial_data(&grid, &cfg.params, cfg.amplitude)?;
    let run = solve_linear(cfg.params, grid, &w0, &SourceTerm::zero(), cfg.linear_config()?)?;
    let fit = decay_fit_l2(&run.report)?;
    let sup_fit = decay_fit(&run.report)?;
    out.push("l2_decay_rate", fit.lambda, Bound::Above, 0.0);
    out.push("l2_fit_r_squared", fit.r_squared, Bound::AtLeast, 0.9);
    out.push("sup_decay_rate", sup_fit.lambda, Bound::Above, 0.0);
    out.push("conservation_drift", run.report.conservation_drift(), Bound::AtMost, 1e-3);
    let peak = run.snapshots[0].sup_norm();
    out.push("specular_defect", run.last.specular_defect() / peak, Bound::AtMost, 1e-6);
    out.table("decay.tsv", run.report.to_tsv());
    out.table("conservation.tsv", run.report.conservation_tsv());
    Ok((out, run))
}

/// First iterate after which every contraction ratio stays below one;
/// infinite when the last ratio does not.
pub fn contraction_onset(ratios: &[f64]) -> f64 {
    match ratios.iter().rposition(|&r| !(r < 1.0)) {
        None => 1.0,
        Some(k) if k + 1 == ratios.len() => f64::INFINITY,
        // ratios[k] compares iterates k + 2 and k + 1
        Some(k) => (k + 2) as f64,
    }
}

/// Nonlinear decay by Picard iteration: zero fixed point, contraction,
/// sup-norm decay fit, conservation, and optionally the density sandwich.
pub fn nonlinear_decay_study(cfg: &DecayStudyConfig, with_density: bool) -> Result<Outcome> {
    let mut out = Outcome::default();
    let params = cfg.params;

    let coarse = Arc::new(PhaseGrid::new(SpatialGrid::new(5)?, VelocityGrid::new(7, params.eta_max)?));
    let small = LinearConfig::new(cfg.tau_fraction * params.tau_max(), 24);
    let solver = LinearSolver::new(params, coarse, small)?;
    let (zero, _, _) = picard_solve(&solver, &InitialData::function(|_, _| 0.0), &cfg.picard)?;
    out.push("zero_fixed_point", zero.sup_norm(), Bound::AtMost, 0.0);

    let grid = cfg.grid()?;
    let w0 = burnette_initial_data(&grid, &params, cfg.amplitude)?;
    let solver = LinearSolver::new(params, grid, cfg.linear_config()?)?;
    let (_, report, state) = picard_solve(&solver, &w0, &cfg.picard)?;
    let mut picard = String::from("iterate\tdifference\tratio\n");
    for (k, d) in state.differences.iter().enumerate() {
        let ratio = if k == 0 { f64::NAN } else { state.ratios[k - 1] };
        let _ = writeln!(picard, "{}\t{d:.9e}\t{ratio:.6e}", k + 1);
    }
    out.push("contraction_onset_iterate", contraction_onset(&state.ratios), Bound::AtMost, 5.0);
    let fit = decay_fit(&report)?;
    out.push("sup_decay_rate", fit.lambda, Bound::Above, 0.0);
    out.push("conservation_drift", report.conservation_drift(), Bound::AtMost, 1e-3);
    out.table("decay.tsv", report.to_tsv());
    out.table("conservation.tsv", report.conservation_tsv());
    let _ = writeln!(picard, "# sup fit lambda {:.6e} r2 {:.6}", fit.lambda, fit.r_squared);
    out.table("picard.tsv", picard);

    if with_density {
        let samples = density_series(&state.snapshots, &params);
        let bounds = density_bounds_check(&samples, &params)?;
        let floor = (-0.5 * params.h * params.h).exp();
        out.push("density_lower", bounds.lower, Bound::AtLeast, 0.5 * floor);
        out.push("density_upper", bounds.upper, Bound::AtMost, 2.0);
        let mut body = String::from("t\tx\ty\tz\trho\trho_r3\n");
        for s in &samples {
            let r3 = radius(s.t, params.h).powi(3);
            let _ = writeln!(
                body,
                "{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.12e}\t{:.12e}",
                s.t,
                s.x.x,
                s.x.y,
                s.x.z,
                s.rho,
                s.rho * r3
            );
        }
        let _ = writeln!(body, "# envelope [{floor:.12e}, 1]; observed [{:.12e}, {:.12e}]", bounds.lower, bounds.upper);
        out.table("density.tsv", body);
    }
    Ok(out)
}
