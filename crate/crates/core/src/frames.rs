//! Expanding-ball and fixed-ball coordinates, reference Maxwellians,
//! velocity moments, the weight `phi_beta` and the time change `alpha`.

use crate::error::{invalid, Error, Result};
use crate::quadrature::VelocityGrid;
use crate::vec3::Vec3;
use std::f64::consts::PI;

/// Physical and numerical parameters shared by every module.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimParams {
    /// Pulling-speed parameter; the radius is `sqrt(1 + h^2 t^2)`.
    pub h: f64,
    /// Exponent of the polynomial weight, `beta > 3/2`.
    pub beta: f64,
    /// Truncation radius of the velocity lattice.
    pub eta_max: f64,
    /// Seed for every Monte Carlo stream.
    pub seed: u64,
}

impl SimParams {
    pub fn new(h: f64, beta: f64, eta_max: f64, seed: u64) -> Result<Self> {
        let p = SimParams {
            h,
            beta,
            eta_max,
            seed,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(invalid("h", format!("must be positive, got {}", self.h)));
        }
        if !(self.beta > 1.5 && self.beta.is_finite()) {
            return Err(invalid("beta", format!("must exceed 3/2, got {}", self.beta)));
        }
        if !(self.eta_max > 0.0 && self.eta_max.is_finite()) {
            return Err(invalid(
                "eta_max",
                format!("must be positive, got {}", self.eta_max),
            ));
        }
        Ok(())
    }

    /// Right end of the fixed-frame time interval, `pi / (2h)`.
    pub fn tau_max(&self) -> f64 {
        PI / (2.0 * self.h)
    }
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            h: 0.5,
            beta: 2.0,
            eta_max: 6.0,
            seed: 20_240_601,
        }
    }
}

/// A point of the expanding domain: `|x| <= R(t)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabPoint {
    pub t: f64,
    pub x: Vec3,
    pub xi: Vec3,
}

/// A point of the fixed unit ball with time in `[0, pi/(2h))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixedPoint {
    pub tau: f64,
    pub y: Vec3,
    pub eta: Vec3,
}

/// Density, bulk velocity and temperature of a velocity profile.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MacroState {
    pub rho: f64,
    pub v: Vec3,
    pub theta: f64,
    /// Set when the mass fell below the quadrature floor and the
    /// other fields were zeroed instead of divided.
    pub degenerate: bool,
}

const BOUNDARY_TOL: f64 = 1e-12;
const VACUUM_FLOOR: f64 = 1e-14;

/// Ball radius `R(t) = sqrt(1 + h^2 t^2)`.
pub fn radius(t: f64, h: f64) -> f64 {
    (1.0 + h * h * t * t).sqrt()
}

/// Wall speed `R'(t)`.
pub fn radius_rate(t: f64, h: f64) -> f64 {
    h * h * t / radius(t, h)
}

/// Fixed-frame time of lab time `t`.
pub fn tau_of_t(t: f64, h: f64) -> f64 {
    (h * t).atan() / h
}

/// Lab time of fixed-frame time `tau`.
pub fn t_of_tau(tau: f64, h: f64) -> f64 {
    (h * tau).tan() / h
}

pub fn to_fixed_frame(p: &LabPoint, params: &SimParams) -> Result<FixedPoint> {
    let h = params.h;
    if !(p.t >= 0.0) {
        return Err(invalid("t", format!("lab time must be >= 0, got {}", p.t)));
    }
    let r = radius(p.t, h);
    if p.x.norm() > r * (1.0 + BOUNDARY_TOL) {
        return Err(Error::OutsideDomain(format!(
            "|x| = {} exceeds R(t) = {r}",
            p.x.norm()
        )));
    }
    Ok(FixedPoint {
        tau: tau_of_t(p.t, h),
        y: p.x * (1.0 / r),
        eta: p.xi * r - p.x * (h * h * p.t / r),
    })
}

pub fn to_lab_frame(q: &FixedPoint, params: &SimParams) -> Result<LabPoint> {
    let h = params.h;
    if !(q.tau >= 0.0 && q.tau < params.tau_max()) {
        return Err(invalid(
            "tau",
            format!("must lie in [0, pi/(2h)), got {}", q.tau),
        ));
    }
    if q.y.norm() > 1.0 + BOUNDARY_TOL {
        return Err(Error::OutsideDomain(format!("|y| = {} > 1", q.y.norm())));
    }
    let t = t_of_tau(q.tau, h);
    let r = radius(t, h);
    Ok(LabPoint {
        t,
        x: q.y * r,
        xi: (q.eta + q.y * (h * h * t)) * (1.0 / r),
    })
}

/// Standard Maxwellian `(2 pi)^{-3/2} exp(-|eta|^2 / 2)`.
pub fn mu(eta: Vec3) -> f64 {
    (2.0 * PI).powf(-1.5) * (-0.5 * eta.norm2()).exp()
}

/// Square root of [`mu`].
pub fn sqrt_mu(eta: Vec3) -> f64 {
    (2.0 * PI).powf(-0.75) * (-0.25 * eta.norm2()).exp()
}

/// Spatial factor `exp(-h^2 |y|^2 / 2)` of the fixed-frame equilibrium.
pub fn mu_tilde(y: Vec3, h: f64) -> f64 {
    (-0.5 * h * h * y.norm2()).exp()
}

/// The traveling Maxwellian in lab variables.
pub fn traveling_maxwellian(p: &LabPoint, params: &SimParams) -> f64 {
    let h = params.h;
    let drift = p.x - p.xi * p.t;
    (2.0 * PI).powf(-1.5) * (-0.5 * p.xi.norm2() - 0.5 * h * h * drift.norm2()).exp()
}

/// Mass density of the traveling Maxwellian, `R^{-3} exp(-h^2 |x|^2 / (2 R^2))`.
pub fn maxwellian_density(t: f64, x: Vec3, h: f64) -> f64 {
    let r = radius(t, h);
    r.powi(-3) * (-0.5 * h * h * x.norm2() / (r * r)).exp()
}

/// Bulk velocity of the traveling Maxwellian, `R'(t) x / R(t)`.
pub fn maxwellian_bulk_velocity(t: f64, x: Vec3, h: f64) -> Vec3 {
    x * (radius_rate(t, h) / radius(t, h))
}

/// Temperature of the traveling Maxwellian, `3 / (2 R^2)`.
pub fn maxwellian_temperature(t: f64, h: f64) -> f64 {
    let r = radius(t, h);
    1.5 / (r * r)
}

/// Mass, bulk velocity and temperature (`rho theta = int |xi - v|^2/2 f`)
/// of a profile sampled on `grid`.
pub fn moments(f_slice: &[f64], grid: &VelocityGrid) -> Result<MacroState> {
    if f_slice.len() != grid.len() {
        return Err(Error::GridMismatch {
            expected: grid.len(),
            got: f_slice.len(),
        });
    }
    let mut rho = 0.0;
    let mut flux = Vec3::ZERO;
    for ((&f, &w), &v) in f_slice.iter().zip(grid.weights()).zip(grid.nodes()) {
        rho += w * f;
        flux += v * (w * f);
    }
    if rho < VACUUM_FLOOR {
        return Ok(MacroState {
            rho: 0.0,
            v: Vec3::ZERO,
            theta: 0.0,
            degenerate: true,
        });
    }
    let v = flux * (1.0 / rho);
    let mut heat = 0.0;
    for ((&f, &w), &node) in f_slice.iter().zip(grid.weights()).zip(grid.nodes()) {
        heat += w * f * 0.5 * (node - v).norm2();
    }
    Ok(MacroState {
        rho,
        v,
        theta: heat / rho,
        degenerate: false,
    })
}

/// `alpha(tau) = int_0^tau cos^2(h s) ds`.
pub fn alpha(tau: f64, h: f64) -> f64 {
    0.5 * tau + (2.0 * h * tau).sin() / (4.0 * h)
}

/// Polynomial weight `(1 + |eta|^2 + h^2 |y|^2)^{beta/2}`.
pub fn weight_phi(y: Vec3, eta: Vec3, h: f64, beta: f64) -> f64 {
    (1.0 + eta.norm2() + h * h * y.norm2()).powf(0.5 * beta)
}

/// One density sample from a run, in lab variables.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensitySample {
    pub t: f64,
    pub x: Vec3,
    pub rho: f64,
}

/// Extremes of `rho R^3` over a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityBounds {
    pub lower: f64,
    pub upper: f64,
    pub pass: bool,
}

/// Infimum and supremum of `rho(t, x) R(t)^3`; `pass` when both are
/// finite and positive.
pub fn density_bounds_check(samples: &[DensitySample], params: &SimParams) -> Result<DensityBounds> {
    if samples.is_empty() {
        return Err(Error::Degenerate("empty density series".into()));
    }
    let mut lower = f64::INFINITY;
    let mut upper = f64::NEG_INFINITY;
    for s in samples {
        if !(s.rho > 0.0) {
            return Err(Error::Degenerate(format!(
                "non-positive density {} at t = {}",
                s.rho, s.t
            )));
        }
        let scaled = s.rho * radius(s.t, params.h).powi(3);
        lower = lower.min(scaled);
        upper = upper.max(scaled);
    }
    Ok(DensityBounds {
        lower,
        upper,
        pass: lower.is_finite() && upper.is_finite() && lower > 0.0 && upper > 0.0,
    })
}
