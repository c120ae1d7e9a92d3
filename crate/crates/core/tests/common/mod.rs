//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use kinetics_core::trajectories::PhasePoint;
use kinetics_core::Vec3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One classical RK4 step of `y' = eta, eta' = -h^2 y`; `dt` may be negative.
pub fn rk4_step(p: PhasePoint, h: f64, dt: f64) -> PhasePoint {
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

/// RK4 flow over `span` with steps no longer than `step`.
pub fn rk4_flow(p: PhasePoint, h: f64, span: f64, step: f64) -> PhasePoint {
    let n = (span.abs() / step).ceil().max(1.0) as usize;
    let dt = span / n as f64;
    (0..n).fold(p, |q, _| rk4_step(q, h, dt))
}

/// Backward flight time to the wall by marching RK4 backward with `step`
/// and bisecting the crossing interval with single RK4 substeps.
///
/// An incoming wall point is reflected first. Returns `None` when the wall
/// is not reached within `horizon`.
pub fn bisect_exit(p: PhasePoint, h: f64, step: f64, horizon: f64) -> Option<f64> {
    let mut q = p;
    if p.y.norm() >= 1.0 - 1e-12 && p.y.dot(p.eta) < 0.0 {
        let n = p.y * (1.0 / p.y.norm());
        q = PhasePoint::new(p.y, p.eta - n * (2.0 * p.eta.dot(n)));
    }
    let mut s = 0.0;
    // leave the wall before watching for the crossing
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

/// Largest `|Y|` along an RK4 orbit of duration `span`.
pub fn rk4_max_radius(p: PhasePoint, h: f64, span: f64, step: f64) -> f64 {
    let n = (span / step).ceil() as usize;
    let mut q = p;
    let mut r = q.y.norm();
    for _ in 0..n {
        q = rk4_step(q, h, step);
        r = r.max(q.y.norm());
    }
    r
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

pub fn vec_rel_err(a: Vec3, b: Vec3) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}
