//! Characteristics of `d/dtau + eta . grad_y - h^2 y . grad_eta` in the unit
//! ball with specular reflection.
//!
//! Backward tracing follows the convention that a bounce stores the
//! velocity after reflection, i.e. the velocity with which the earlier
//! segment is entered when time runs backward.

use crate::error::{invalid, Error, Result};
use crate::vec3::{rotate, Vec3};
use rand::Rng;
use std::f64::consts::PI;

/// Tolerance on `e - m - h^2` below which a trajectory counts as grazing.
pub const GRAZING_TOL: f64 = 1e-12;
/// Tolerance on `|y| - 1` for boundary points.
pub const BOUNDARY_TOL: f64 = 1e-12;
/// Hard cap on the number of bounces in an explicit path.
pub const MAX_BOUNCES_CAP: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhasePoint {
    pub y: Vec3,
    pub eta: Vec3,
}

impl PhasePoint {
    pub fn new(y: Vec3, eta: Vec3) -> Self {
        PhasePoint { y, eta }
    }

    pub fn on_boundary(&self) -> bool {
        (self.y.norm() - 1.0).abs() <= BOUNDARY_TOL
    }
}

/// Whole-space flow from `tau0` to `tau`.
pub fn advance_free(p: PhasePoint, tau0: f64, tau: f64, h: f64) -> PhasePoint {
    let (s, c) = (h * (tau - tau0)).sin_cos();
    PhasePoint {
        y: p.y * c + p.eta * (s / h),
        eta: p.y * (-h * s) + p.eta * c,
    }
}

/// Backward flow by a duration `s >= 0`.
pub fn retreat_free(p: PhasePoint, s: f64, h: f64) -> PhasePoint {
    advance_free(p, s, 0.0, h)
}

/// Conserved quantities of the free flow.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryInvariants {
    /// `|eta|^2 + h^2 |y|^2`
    pub e: f64,
    /// `|eta x y|^2`
    pub m: f64,
    pub l_max: f64,
    pub l_min: f64,
}

impl TrajectoryInvariants {
    /// `sqrt(e^2 - 4 h^2 m)`.
    pub fn discriminant(&self, h: f64) -> f64 {
        (self.e * self.e - 4.0 * h * h * self.m).max(0.0).sqrt()
    }
}

pub fn invariants(p: PhasePoint, h: f64) -> TrajectoryInvariants {
    let e = p.eta.norm2() + h * h * p.y.norm2();
    let m = p.eta.cross(p.y).norm2();
    let d = (e * e - 4.0 * h * h * m).max(0.0).sqrt();
    let l_max2 = (e + d) / (2.0 * h * h);
    // (e - d)(e + d) = 4 h^2 m keeps the small root accurate
    let l_min2 = if e + d > 0.0 { 2.0 * m / (e + d) } else { 0.0 };
    TrajectoryInvariants {
        e,
        m,
        l_max: l_max2.sqrt(),
        l_min: l_min2.sqrt(),
    }
}

/// `e - m - h^2`, evaluated as `(|eta|^2 - h^2)(1 - |y|^2) + (y.eta)^2`.
pub fn crossing_margin(p: PhasePoint, h: f64) -> f64 {
    let ye = p.y.dot(p.eta);
    (p.eta.norm2() - h * h) * (1.0 - p.y.norm2()) + ye * ye
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrajectoryClass {
    /// The backward path reaches the wall and reflects.
    Crossing,
    /// The orbit touches the wall tangentially.
    Grazing,
    /// The orbit stays inside the open ball.
    Interior,
}

impl TrajectoryClass {
    pub fn name(self) -> &'static str {
        match self {
            TrajectoryClass::Crossing => "crossing",
            TrajectoryClass::Grazing => "grazing",
            TrajectoryClass::Interior => "interior",
        }
    }
}

pub fn classify_trajectory(p: PhasePoint, h: f64) -> TrajectoryClass {
    let margin = crossing_margin(p, h);
    if margin.abs() <= GRAZING_TOL {
        TrajectoryClass::Grazing
    } else if margin > 0.0 {
        TrajectoryClass::Crossing
    } else {
        TrajectoryClass::Interior
    }
}

/// `arccos((e - 2h^2) / sqrt(e^2 - 4h^2 m))`, evaluated without cancellation.
fn chord_angle(p: PhasePoint, h: f64) -> f64 {
    let inv = invariants(p, h);
    let margin = crossing_margin(p, h).max(0.0);
    (2.0 * h * margin.sqrt()).atan2(inv.e - 2.0 * h * h)
}

/// Time between two successive bounces of a crossing trajectory.
pub fn chord_time(p: PhasePoint, h: f64) -> f64 {
    chord_angle(p, h) / h
}

/// Result of tracing back to the wall.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackwardExit {
    /// Duration `tau_b` of the backward flight.
    pub tau_b: f64,
    /// Position on the wall.
    pub y: Vec3,
    /// Velocity on arrival, before reflection (`y . eta < 0`).
    pub eta: Vec3,
}

/// Duration of backward flight from `p` to the wall (crossing class only).
///
/// Points on the wall with `y . eta < 0` are reflected first, so that
/// their backward flight spans a full chord.
pub fn backward_exit_time(p: PhasePoint, h: f64) -> Result<f64> {
    let class = classify_trajectory(p, h);
    if class != TrajectoryClass::Crossing {
        return Err(Error::NoExit(class.name()));
    }
    let r = p.y.norm();
    if r > 1.0 + BOUNDARY_TOL {
        return Err(Error::OutsideDomain(format!("|y| = {r} > 1")));
    }
    if r >= 1.0 - BOUNDARY_TOL {
        return Ok(chord_time(p, h));
    }
    let theta = (2.0 * h * p.y.dot(p.eta)).atan2(p.eta.norm2() - h * h * p.y.norm2());
    let mut phase = chord_angle(p, h) + theta;
    if phase <= 0.0 {
        phase += 2.0 * PI;
    }
    Ok(phase / (2.0 * h))
}

pub fn backward_exit(p: PhasePoint, tau0: f64, h: f64) -> Result<BackwardExit> {
    let tau_b = backward_exit_time(p, h)?;
    let start = if p.on_boundary() && p.y.dot(p.eta) < 0.0 {
        PhasePoint::new(p.y, reflect_unchecked(p.y, p.eta))
    } else {
        p
    };
    let q = advance_free(start, tau0, tau0 - tau_b, h);
    Ok(BackwardExit {
        tau_b,
        y: q.y * (1.0 / q.y.norm()),
        eta: q.eta,
    })
}

fn reflect_unchecked(y: Vec3, eta: Vec3) -> Vec3 {
    eta - y * (2.0 * eta.dot(y))
}

/// Specular reflection `eta - 2 (eta . y) y` at the wall point `y`.
pub fn reflect_specular(y: Vec3, eta: Vec3) -> Result<Vec3> {
    if (y.norm() - 1.0).abs() > 1e-10 {
        return Err(Error::OutsideDomain(format!(
            "reflection needs |y| = 1, got {}",
            y.norm()
        )));
    }
    Ok(reflect_unchecked(y, eta))
}

/// Boundary rule applied at each bounce.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ReflectionLaw {
    Specular,
    /// `eta -> -eta`; used only to exhibit discontinuity.
    Reverse,
}

impl ReflectionLaw {
    fn apply(self, y: Vec3, eta: Vec3) -> Vec3 {
        match self {
            ReflectionLaw::Specular => reflect_unchecked(y, eta),
            ReflectionLaw::Reverse => -eta,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BoundaryClass {
    GammaPlus,
    GammaMinus,
    /// Tangential with `|eta| < h`: the orbit curves back into the ball.
    Gamma00,
    /// Tangential with `|eta| >= h`: the singular grazing set.
    Gamma01,
    Interior,
}

pub fn classify_boundary(p: PhasePoint, h: f64) -> BoundaryClass {
    if !p.on_boundary() {
        return BoundaryClass::Interior;
    }
    let normal = p.y.dot(p.eta) / p.y.norm();
    let tol = GRAZING_TOL * p.eta.norm().max(1.0);
    if normal > tol {
        BoundaryClass::GammaPlus
    } else if normal < -tol {
        BoundaryClass::GammaMinus
    } else if p.eta.norm() < h {
        BoundaryClass::Gamma00
    } else {
        BoundaryClass::Gamma01
    }
}

/// A reflection on the backward path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BounceEvent {
    pub tau: f64,
    pub y: Vec3,
    /// Velocity arriving at the wall (before reflection).
    pub eta_in: Vec3,
    /// Velocity after reflection; the segment below `tau` starts here.
    pub eta: Vec3,
}

/// How the backward path ends.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathTerminal {
    /// Reached `tau = 0` while crossing.
    Start,
    /// The last segment never meets the wall.
    Interior,
    /// The last segment only touches the wall (no velocity change).
    Grazing,
    /// Started tangential on the wall with `|eta| >= h`: the path slides
    /// along a great circle, the limit of vanishing chords.
    Glide,
}

/// Piecewise free flow from `(tau0, origin)` down to `tau = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct BackwardPath {
    pub tau0: f64,
    pub origin: PhasePoint,
    /// State used on the first segment: the origin, or its reflection
    /// for an incoming wall point.
    pub start: PhasePoint,
    pub events: Vec<BounceEvent>,
    pub terminal: PathTerminal,
    pub h: f64,
    pub law: ReflectionLaw,
}

impl BackwardPath {
    pub fn bounce_count(&self) -> usize {
        self.events.len()
    }

    /// Segment-entry times and states, from `tau0` downward.
    pub fn segments(&self) -> impl Iterator<Item = (f64, f64, PhasePoint)> + '_ {
        let n = self.events.len();
        (0..=n).map(move |k| {
            let (top, state) = if k == 0 {
                (self.tau0, self.start)
            } else {
                let ev = &self.events[k - 1];
                (ev.tau, PhasePoint::new(ev.y, ev.eta))
            };
            let bottom = if k < n { self.events[k].tau } else { 0.0 };
            (top, bottom, state)
        })
    }

    /// State at time `tau` in `[0, tau0]`; at a bounce time the
    /// reflected velocity is returned.
    pub fn state_at(&self, tau: f64) -> PhasePoint {
        if self.terminal == PathTerminal::Glide {
            return glide(self.start, self.tau0 - tau);
        }
        // events are sorted by decreasing tau; find the last with tau_k >= tau
        let k = self.events.partition_point(|ev| ev.tau >= tau);
        let (top, state) = if k == 0 {
            (self.tau0, self.start)
        } else {
            let ev = &self.events[k - 1];
            (ev.tau, PhasePoint::new(ev.y, ev.eta))
        };
        advance_free(state, top, tau, self.h)
    }

    /// Plain-text dump, one line per event: `tau y[3] eta[3]`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for ev in &self.events {
            out.push_str(&format!(
                "{:.15e} {:.15e} {:.15e} {:.15e} {:.15e} {:.15e} {:.15e}\n",
                ev.tau, ev.y.x, ev.y.y, ev.y.z, ev.eta.x, ev.eta.y, ev.eta.z
            ));
        }
        out
    }
}

/// Trace the backward characteristic of `(tau0, p)` down to `tau = 0`.
pub fn backward_path(
    tau0: f64,
    p: PhasePoint,
    h: f64,
    max_bounces: usize,
    law: ReflectionLaw,
) -> Result<BackwardPath> {
    if !(h > 0.0) {
        return Err(invalid("h", format!("must be positive, got {h}")));
    }
    if !(tau0 > 0.0 && tau0 < PI / (2.0 * h)) {
        return Err(invalid("tau0", format!("must lie in (0, pi/(2h)), got {tau0}")));
    }
    if p.y.norm() > 1.0 + BOUNDARY_TOL {
        return Err(Error::OutsideDomain(format!("|y| = {} > 1", p.y.norm())));
    }
    let limit = max_bounces.min(MAX_BOUNCES_CAP);
    let start = if p.on_boundary() && classify_boundary(p, h) == BoundaryClass::GammaMinus {
        PhasePoint::new(p.y, law.apply(p.y * (1.0 / p.y.norm()), p.eta))
    } else {
        p
    };
    if p.on_boundary() && classify_boundary(p, h) == BoundaryClass::Gamma01 {
        let y = p.y * (1.0 / p.y.norm());
        return Ok(BackwardPath {
            tau0,
            origin: p,
            start: PhasePoint::new(y, p.eta - y * y.dot(p.eta)),
            events: Vec::new(),
            terminal: PathTerminal::Glide,
            h,
            law,
        });
    }
    let mut events = Vec::new();
    let mut tau = tau0;
    let mut state = start;
    let terminal = loop {
        match classify_trajectory(state, h) {
            TrajectoryClass::Interior => break PathTerminal::Interior,
            TrajectoryClass::Grazing => break PathTerminal::Grazing,
            TrajectoryClass::Crossing => {}
        }
        let flight = backward_exit_time(state, h)?;
        if tau - flight <= 0.0 {
            break PathTerminal::Start;
        }
        if events.len() >= limit {
            return Err(Error::BounceLimit { limit });
        }
        let arrive = retreat_free(state, flight, h);
        let y = arrive.y * (1.0 / arrive.y.norm());
        let eta = law.apply(y, arrive.eta);
        tau -= flight;
        events.push(BounceEvent {
            tau,
            y,
            eta_in: arrive.eta,
            eta,
        });
        state = PhasePoint::new(y, eta);
    };
    Ok(BackwardPath {
        tau0,
        origin: p,
        start,
        events,
        terminal,
        h,
        law,
    })
}

/// Closed-form backward characteristic with O(1) evaluation at any depth.
///
/// After the first bounce every chord followed by its reflection is the
/// same rotation about the angular-momentum axis, so the state after `k`
/// chords is the first post-bounce state rotated by `k` times that angle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Characteristic {
    h: f64,
    kind: CharacteristicKind,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CharacteristicKind {
    /// No wall contact: interior or grazing orbit.
    Free { start: PhasePoint },
    /// Specular billiard: first flight, then identical chords.
    Billiard {
        start: PhasePoint,
        first: f64,
        chord: f64,
        entry: PhasePoint,
        axis: Vec3,
        turn: f64,
    },
    /// Tangential motion along a great circle of the wall with `|eta| >= h`,
    /// the limit of vanishing chords.
    Glide { start: PhasePoint, speed: f64 },
}

impl Characteristic {
    pub fn new(p: PhasePoint, h: f64) -> Self {
        let mut start = p;
        let r = p.y.norm();
        let on_wall = r >= 1.0 - BOUNDARY_TOL;
        if on_wall {
            start.y = p.y * (1.0 / r);
            if start.y.dot(start.eta) < 0.0 {
                start.eta = reflect_unchecked(start.y, start.eta);
            }
        }
        let margin = crossing_margin(start, h);
        let kind = if on_wall && margin <= GRAZING_TOL && start.eta.norm() >= h {
            let tangential = start.eta - start.y * start.y.dot(start.eta);
            CharacteristicKind::Glide {
                start: PhasePoint::new(start.y, tangential),
                speed: tangential.norm(),
            }
        } else if margin <= GRAZING_TOL {
            CharacteristicKind::Free { start }
        } else {
            let first = backward_exit_time(start, h).unwrap_or(0.0);
            let chord = chord_time(start, h);
            let arrive = retreat_free(start, first, h);
            let y1 = arrive.y * (1.0 / arrive.y.norm());
            let entry = PhasePoint::new(y1, reflect_unchecked(y1, arrive.eta));
            let back = retreat_free(entry, chord, h);
            let y2 = back.y * (1.0 / back.y.norm());
            let l = y1.cross(entry.eta);
            let (axis, turn) = if l.norm() <= 1e-12 * entry.eta.norm().max(1e-300) {
                (y1.any_orthogonal(), PI)
            } else {
                let axis = l * (1.0 / l.norm());
                (axis, axis.dot(y1.cross(y2)).atan2(y1.dot(y2)))
            };
            CharacteristicKind::Billiard {
                start,
                first,
                chord,
                entry,
                axis,
                turn,
            }
        };
        Characteristic { h, kind }
    }

    pub fn kind(&self) -> &CharacteristicKind {
        &self.kind
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Number of reflections within backward duration `s`.
    pub fn bounces_within(&self, s: f64) -> usize {
        match self.kind {
            CharacteristicKind::Billiard { first, chord, .. } => {
                if s < first {
                    0
                } else {
                    1 + ((s - first) / chord).floor() as usize
                }
            }
            _ => 0,
        }
    }

    /// State after tracing back by duration `s >= 0`.
    pub fn state_after(&self, s: f64) -> PhasePoint {
        let h = self.h;
        match self.kind {
            CharacteristicKind::Free { start } => retreat_free(start, s, h),
            CharacteristicKind::Glide { start, .. } => glide(start, s),
            CharacteristicKind::Billiard {
                start,
                first,
                chord,
                entry,
                axis,
                turn,
            } => {
                if s < first {
                    return retreat_free(start, s, h);
                }
                let rest = s - first;
                let k = (rest / chord).floor();
                let rem = rest - k * chord;
                let angle = (k * turn).rem_euclid(2.0 * PI);
                let seg = PhasePoint::new(rotate(entry.y, axis, angle), rotate(entry.eta, axis, angle));
                retreat_free(seg, rem, h)
            }
        }
    }
}

/// Backward motion by `s` along the great circle through the wall point
/// `start.y` with tangential velocity `start.eta`.
fn glide(start: PhasePoint, s: f64) -> PhasePoint {
    let speed = start.eta.norm();
    if speed == 0.0 {
        return start;
    }
    let t_hat = start.eta * (1.0 / speed);
    let (sn, cs) = (speed * s).sin_cos();
    PhasePoint::new(start.y * cs - t_hat * sn, start.eta * cs + start.y * (speed * sn))
}

/// Parameters of the uniformly non-grazing set used by the Velocity Lemma.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ASetParams {
    pub kappa: f64,
    /// Velocity cap `N`.
    pub n_cap: f64,
}

impl ASetParams {
    pub fn new(kappa: f64, n_cap: f64) -> Result<Self> {
        if !(kappa > 0.0) {
            return Err(invalid("kappa", format!("must be positive, got {kappa}")));
        }
        if !(n_cap >= 1.0) {
            return Err(invalid("n_cap", format!("must be >= 1, got {n_cap}")));
        }
        Ok(ASetParams { kappa, n_cap })
    }

    /// Window half-width `h^2 kappa / N^2`.
    pub fn delta(&self, h: f64) -> f64 {
        h * h * self.kappa / (self.n_cap * self.n_cap)
    }

    /// Bounce bound `pi N^2 / (h kappa)`.
    pub fn bounce_bound(&self, h: f64) -> f64 {
        PI * self.n_cap * self.n_cap / (h * self.kappa)
    }

    /// Default guard: four times the bounce bound, capped.
    pub fn default_max_bounces(&self, h: f64) -> usize {
        let b = 4.0 * self.bounce_bound(h).ceil();
        if b >= MAX_BOUNCES_CAP as f64 {
            MAX_BOUNCES_CAP
        } else {
            b as usize
        }
    }

    pub fn contains(&self, p: PhasePoint, h: f64) -> bool {
        let speed = p.eta.norm();
        p.y.norm() < 1.0
            && crossing_margin(p, h) >= self.kappa * self.kappa
            && speed >= 2.0 * h
            && speed <= 2.0 * self.n_cap
    }

    /// Uniform sample of the set by rejection (`y` uniform in the ball,
    /// `eta` uniform in the shell).
    pub fn sample(&self, h: f64, rng: &mut impl Rng) -> PhasePoint {
        loop {
            let y = uniform_in_ball(rng);
            let dir = uniform_on_sphere(rng);
            let lo = (2.0 * h).powi(3);
            let hi = (2.0 * self.n_cap).powi(3);
            let speed = (lo + (hi - lo) * rng.gen::<f64>()).cbrt();
            let p = PhasePoint::new(y, dir * speed);
            if self.contains(p, h) {
                return p;
            }
        }
    }
}

pub fn uniform_on_sphere(rng: &mut impl Rng) -> Vec3 {
    let z: f64 = 2.0 * rng.gen::<f64>() - 1.0;
    let phi = 2.0 * PI * rng.gen::<f64>();
    let s = (1.0 - z * z).max(0.0).sqrt();
    Vec3::new(s * phi.cos(), s * phi.sin(), z)
}

pub fn uniform_in_ball(rng: &mut impl Rng) -> Vec3 {
    uniform_on_sphere(rng) * rng.gen::<f64>().cbrt()
}

/// Outcome of checking the four Velocity-Lemma clauses at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityLemmaReport {
    pub chord: f64,
    pub chord_lower: f64,
    pub chord_upper: f64,
    pub bounces: usize,
    pub bounce_bound: f64,
    /// Smallest `e' - m'` seen over the sampled windows and test velocities.
    pub min_window_margin: f64,
    /// Required `h^2 + h^4 kappa^2 / N^2`.
    pub window_target: f64,
    pub excluded_measure: f64,
    pub measure_bound: f64,
}

impl VelocityLemmaReport {
    pub fn chord_ok(&self) -> bool {
        self.chord >= self.chord_lower && self.chord <= self.chord_upper
    }

    pub fn bounces_ok(&self) -> bool {
        self.bounces as f64 <= self.bounce_bound
    }

    pub fn window_ok(&self) -> bool {
        self.min_window_margin >= self.window_target
    }

    pub fn measure_ok(&self) -> bool {
        self.excluded_measure <= self.measure_bound
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    /// Names of the clauses that failed.
    pub fn failures(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if !self.chord_ok() {
            out.push("chord-bounds");
        }
        if !self.bounces_ok() {
            out.push("bounce-count");
        }
        if !self.window_ok() {
            out.push("window-margin");
        }
        if !self.measure_ok() {
            out.push("excluded-measure");
        }
        out
    }
}

/// Evaluate the Velocity-Lemma clauses along the backward path of `(tau0, p)`.
///
/// `probes` random test velocities with `2h <= |eta'| <= 2N` are drawn per
/// sampled time; every window is sampled at its ends and midpoint.
pub fn velocity_lemma_report(
    tau0: f64,
    p: PhasePoint,
    h: f64,
    aset: &ASetParams,
    probes: usize,
    rng: &mut impl Rng,
) -> Result<VelocityLemmaReport> {
    if !aset.contains(p, h) {
        return Err(invalid("p", "point is not in the A-set"));
    }
    let n = aset.n_cap;
    let delta = aset.delta(h);
    let path = backward_path(tau0, p, h, aset.default_max_bounces(h), ReflectionLaw::Specular)?;
    let chord = chord_time(p, h);

    // windows (tau_k + delta, tau_{k-1} - delta) with tau_0 the origin and a
    // virtual bounce below zero closing the last window
    let mut tops = vec![tau0];
    tops.extend(path.events.iter().map(|e| e.tau));
    let mut min_margin = f64::INFINITY;
    for (k, &top) in tops.iter().enumerate() {
        let bottom = tops.get(k + 1).copied();
        let hi = top - delta;
        let lo = match bottom {
            Some(b) => b + delta,
            None => 0.0,
        };
        if hi <= lo {
            continue;
        }
        let probe_lo = lo + 1e-9 * (hi - lo);
        let probe_hi = hi - 1e-9 * (hi - lo);
        for &tau in &[probe_lo, 0.5 * (lo + hi), probe_hi] {
            let y = path.state_at(tau).y;
            for _ in 0..probes {
                let dir = uniform_on_sphere(rng);
                let speed = 2.0 * h + (2.0 * n - 2.0 * h) * rng.gen::<f64>();
                let trial = PhasePoint::new(y, dir * speed);
                let e = trial.eta.norm2() + h * h * y.norm2();
                let m = trial.eta.cross(y).norm2();
                min_margin = min_margin.min(e - m);
            }
            // the smallest margin over the shell is at |eta'| = 2h, eta' orthogonal to y
            let worst = y.any_orthogonal() * (2.0 * h);
            let e = worst.norm2() + h * h * y.norm2();
            let m = worst.cross(y).norm2();
            min_margin = min_margin.min(e - m);
        }
    }

    // measure of the union of (tau_k - delta, tau_k + delta) inside (0, tau0)
    let mut intervals: Vec<(f64, f64)> = path
        .events
        .iter()
        .map(|e| ((e.tau - delta).max(0.0), (e.tau + delta).min(tau0)))
        .collect();
    intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut measure = 0.0;
    let mut current: Option<(f64, f64)> = None;
    for (a, b) in intervals {
        match current {
            Some((ca, cb)) if a <= cb => current = Some((ca, cb.max(b))),
            Some((ca, cb)) => {
                measure += cb - ca;
                current = Some((a, b));
            }
            None => current = Some((a, b)),
        }
    }
    if let Some((ca, cb)) = current {
        measure += cb - ca;
    }

    Ok(VelocityLemmaReport {
        chord,
        chord_lower: aset.kappa / (2.0 * n * n),
        chord_upper: PI / (2.0 * h),
        bounces: path.bounce_count(),
        bounce_bound: aset.bounce_bound(h),
        min_window_margin: if min_margin.is_finite() { min_margin } else { f64::INFINITY },
        window_target: h * h + h.powi(4) * aset.kappa * aset.kappa / (n * n),
        excluded_measure: measure,
        measure_bound: 2.0 * PI * h,
    })
}

/// Largest position gap between two backward paths, sampled on a uniform
/// time grid plus every bounce time of either path.
pub fn path_distance(a: &BackwardPath, b: &BackwardPath, samples: usize) -> f64 {
    let tau0 = a.tau0.min(b.tau0);
    let mut times: Vec<f64> = (0..=samples)
        .map(|i| tau0 * i as f64 / samples as f64)
        .collect();
    times.extend(a.events.iter().chain(&b.events).map(|e| e.tau).filter(|&t| t <= tau0));
    times
        .iter()
        .map(|&t| (a.state_at(t).y - b.state_at(t).y).norm())
        .fold(0.0, f64::max)
}

/// Unit perturbation directions in phase space: the twelve signed axis
/// directions of `y` and `eta` plus diagonal mixes.
fn perturbation_directions() -> Vec<(Vec3, Vec3)> {
    let axes = [
        Vec3::new(1.0, 0.0, 0.0),
        Vec3::new(0.0, 1.0, 0.0),
        Vec3::new(0.0, 0.0, 1.0),
    ];
    let mut dirs = Vec::new();
    for a in axes {
        for s in [1.0, -1.0] {
            dirs.push((a * s, Vec3::ZERO));
            dirs.push((Vec3::ZERO, a * s));
        }
    }
    let r = 0.5f64.sqrt();
    for (i, a) in axes.iter().enumerate() {
        for (j, b) in axes.iter().enumerate() {
            for s in [1.0, -1.0] {
                if i != j || s > 0.0 {
                    dirs.push((*a * r, *b * (s * r)));
                }
            }
        }
    }
    dirs
}

fn clamp_to_ball(y: Vec3) -> Vec3 {
    let r = y.norm();
    if r > 1.0 {
        y * (1.0 / r)
    } else {
        y
    }
}

/// Continuity moduli: for each `eps`, the largest ratio
/// `sup_tau |y_pert(tau) - y_center(tau)| / eps` over a fixed set of
/// perturbation directions. Perturbed positions are pulled back into the
/// closed ball.
pub fn continuity_probe(
    tau0: f64,
    center: PhasePoint,
    eps_list: &[f64],
    h: f64,
    law: ReflectionLaw,
) -> Result<Vec<f64>> {
    let guard = 1_000_000;
    let base = backward_path(tau0, center, h, guard, law)?;
    let dirs = perturbation_directions();
    let mut ratios = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let mut worst: f64 = 0.0;
        for &(dy, de) in &dirs {
            let q = PhasePoint::new(clamp_to_ball(center.y + dy * eps), center.eta + de * eps);
            let path = backward_path(tau0, q, h, guard, law)?;
            worst = worst.max(path_distance(&base, &path, 400) / eps);
        }
        ratios.push(worst);
    }
    Ok(ratios)
}

/// Gaps between paired backward paths near a tangential wall point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReversalGaps {
    pub eps: f64,
    /// One path bounces and the other does not, reverse law.
    pub straddle: f64,
    /// Same pair under specular reflection.
    pub straddle_specular: f64,
    /// Both paths leave the wall without bouncing.
    pub both_free: f64,
    /// Both paths bounce immediately, reverse law.
    pub both_bounce: f64,
}

/// Pairs at distance `eps` around the tangential wall point `(n, eta_t)`
/// (with `|eta_t| < h`), placed `eps^2 / (12 h^2)` inside the wall so that
/// a normal velocity of `-eps/2` bounces and `+eps/2` does not.
pub fn reverse_reflection_probe(
    tau0: f64,
    normal: Vec3,
    eta_t: Vec3,
    eps_list: &[f64],
    h: f64,
) -> Result<Vec<ReversalGaps>> {
    let n = normal
        .normalized()
        .ok_or_else(|| invalid("normal", "zero vector"))?;
    if eta_t.dot(n).abs() > 1e-12 || eta_t.norm() >= h {
        return Err(invalid(
            "eta_t",
            "must be tangential with |eta_t| < h (a gamma_00 point)",
        ));
    }
    let guard = 1_000_000;
    let mut out = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let y = n * (1.0 - eps * eps / (12.0 * h * h));
        let at = |vn: f64, law| backward_path(tau0, PhasePoint::new(y, eta_t + n * vn), h, guard, law);
        let gap = |a: &BackwardPath, b: &BackwardPath| path_distance(a, b, 400);
        let out_r = at(-0.5 * eps, ReflectionLaw::Reverse)?;
        let in_r = at(0.5 * eps, ReflectionLaw::Reverse)?;
        let out_s = at(-0.5 * eps, ReflectionLaw::Specular)?;
        let in_s = at(0.5 * eps, ReflectionLaw::Specular)?;
        let in_far = at(1.5 * eps, ReflectionLaw::Reverse)?;
        let out_far = at(-1.5 * eps, ReflectionLaw::Reverse)?;
        out.push(ReversalGaps {
            eps,
            straddle: gap(&out_r, &in_r),
            straddle_specular: gap(&out_s, &in_s),
            both_free: gap(&in_r, &in_far),
            both_bounce: gap(&out_r, &out_far),
        });
    }
    Ok(out)
}

/// Central-difference `det(d y2 / d eta')` for `y2 = Y(tau2; tau1, y1, eta')`,
/// where `y1` is the backward path of `(tau, p)` at `tau1`.
pub fn double_backtrack_jacobian(
    tau: f64,
    p: PhasePoint,
    tau1: f64,
    tau2: f64,
    eta_prime: Vec3,
    h: f64,
) -> Result<f64> {
    if !(tau1 <= tau && tau2 <= tau1 && tau2 >= 0.0) {
        return Err(invalid("tau2", "need 0 <= tau2 <= tau1 <= tau"));
    }
    let y1 = backward_path(tau, p, h, MAX_BOUNCES_CAP, ReflectionLaw::Specular)?
        .state_at(tau1)
        .y;
    let span = tau1 - tau2;
    let second = PhasePoint::new(y1, eta_prime);
    if span > 0.0 && classify_trajectory(second, h) == TrajectoryClass::Crossing {
        let reach = if second.on_boundary() && second.y.dot(second.eta) < 0.0 {
            0.0
        } else {
            backward_exit_time(second, h)?
        };
        if reach < span {
            return Err(Error::BounceInSpan);
        }
    }
    let step = 1e-3 * eta_prime.norm().max(1.0);
    let mut jac = [[0.0; 3]; 3];
    for j in 0..3 {
        let mut e = [0.0; 3];
        e[j] = step;
        let d = Vec3::from_array(e);
        let plus = advance_free(PhasePoint::new(y1, eta_prime + d), tau1, tau2, h).y;
        let minus = advance_free(PhasePoint::new(y1, eta_prime - d), tau1, tau2, h).y;
        let col = (plus - minus) * (0.5 / step);
        for i in 0..3 {
            jac[i][j] = col[i];
        }
    }
    Ok(jac[0][0] * (jac[1][1] * jac[2][2] - jac[1][2] * jac[2][1])
        - jac[0][1] * (jac[1][0] * jac[2][2] - jac[1][2] * jac[2][0])
        + jac[0][2] * (jac[1][0] * jac[2][1] - jac[1][1] * jac[2][0]))
}
