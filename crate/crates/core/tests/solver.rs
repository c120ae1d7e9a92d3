mod common;

use common::rng;
use kinetics_core::collision::{nu, nu_at, InvariantBasis};
use kinetics_core::frames::{alpha, maxwellian_density, mu, mu_tilde, radius, sqrt_mu, weight_phi};
use kinetics_core::macro_micro::{PhaseGrid, SpatialGrid};
use kinetics_core::quadrature::{adaptive_simpson, VelocityGrid};
use kinetics_core::solver::*;
use kinetics_core::trajectories::{advance_free, backward_path, ReflectionLaw, MAX_BOUNCES_CAP};
use kinetics_core::trajectories::{uniform_in_ball, uniform_on_sphere, PhasePoint};
use kinetics_core::{Error, SimParams, Vec3};
use rand::Rng;
use std::sync::Arc;
use std::time::Instant;

fn params(h: f64) -> SimParams {
    SimParams::new(h, 2.0, 5.0, 7).unwrap()
}

fn grid(spatial: usize, velocity: usize, eta_max: f64) -> Arc<PhaseGrid> {
    Arc::new(PhaseGrid::new(
        SpatialGrid::new(spatial).unwrap(),
        VelocityGrid::new(velocity, eta_max).unwrap(),
    ))
}

/// Specular because it depends on `η` only through `|η|` and `(η·y)²`.
fn specular_bump(y: Vec3, eta: Vec3) -> f64 {
    (-0.3 * eta.norm2()).exp() * (1.0 + 0.5 * y.norm2() + 0.2 * eta.dot(y).powi(2))
}

/// Microscopic at every point: `(|η|⁴ - 10|η|² + 15) μ^{1/2}` is orthogonal
/// to `1` and `|η|²` and even in `η`.
fn microscopic_u(y: Vec3, eta: Vec3) -> f64 {
    let r2 = eta.norm2();
    (1.0 - 0.5 * y.norm2()) * (r2 * r2 - 10.0 * r2 + 15.0) * sqrt_mu(eta)
}

/// Microscopic Burnette mix vanishing on the wall.
fn burnette_u(y: Vec3, eta: Vec3) -> f64 {
    let b = InvariantBasis;
    (1.0 - y.norm2()).max(0.0) * (b.burnette_a(1, eta) + 0.5 * b.burnette_b(1, 2, eta) + 0.3 * y.y * b.burnette_a(3, eta))
}

#[test]
fn attenuation_of_an_empty_span_is_one() {
    let h = 0.5;
    let path = backward_path(1.0, PhasePoint::new(Vec3::new(0.2, 0.1, 0.0), Vec3::new(1.0, 0.5, -0.3)), h, 100, ReflectionLaw::Specular).unwrap();
    assert_eq!(duhamel_attenuation(&path, 0.4, 0.4).unwrap(), 1.0);
    assert!(duhamel_attenuation(&path, 0.5, 0.4).is_err());
    assert!(duhamel_attenuation(&path, 0.0, 1.5).is_err());
}

#[test]
fn attenuation_at_rest_is_closed_form() {
    // (0, 0) is a fixed point of the flow
    for h in [0.05, 0.5, 1.0] {
        let tau = 1.2 / h;
        let path = backward_path(tau, PhasePoint::new(Vec3::ZERO, Vec3::ZERO), h, 10, ReflectionLaw::Specular).unwrap();
        for tau1 in [0.0, 0.3 * tau, 0.9 * tau] {
            let expect = (-nu(0.0) * (alpha(tau, h) - alpha(tau1, h))).exp();
            let got = duhamel_attenuation(&path, tau1, tau).unwrap();
            assert!((got - expect).abs() <= 1e-10 * expect.max(1e-300), "{got} vs {expect}");
        }
    }
}

#[test]
fn attenuation_matches_adaptive_quadrature() {
    let h = 0.5;
    let mut r = rng(51);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let p = PhasePoint::new(uniform_in_ball(&mut r), uniform_on_sphere(&mut r) * (4.0 * r.gen::<f64>()));
        let tau = r.gen_range(0.1..3.0);
        let tau1 = r.gen_range(0.0..tau);
        let path = backward_path(tau, p, h, MAX_BOUNCES_CAP, ReflectionLaw::Specular).unwrap();
        let mut exponent = 0.0;
        for (top, bottom, state) in path.segments() {
            let (lo, hi) = (bottom.max(tau1), top.min(tau));
            if hi > lo {
                let mut f = |s: f64| {
                    let q = advance_free(state, top, s, h);
                    mu_tilde(q.y, h) * (h * s).cos().powi(2) * nu_at(q.eta)
                };
                exponent += adaptive_simpson(&mut f, lo, hi, 1e-13);
            }
        }
        let got = duhamel_attenuation(&path, tau1, tau).unwrap();
        worst = worst.max((got - (-exponent).exp()).abs());
    }
    assert!(worst <= 1e-9, "{worst:e}");
}

#[test]
fn zero_data_stays_zero() {
    let g = grid(5, 7, 4.0);
    let p = params(0.5);
    let solver = LinearSolver::new(p, g.clone(), LinearConfig::new(0.5 * p.tau_max(), 20)).unwrap();
    let run = solver.solve(&InitialData::Grid(vec![0.0; g.len()]), &SourceTerm::zero()).unwrap();
    for snap in run.snapshots.iter().chain(std::iter::once(&run.last)) {
        assert!(snap.values.iter().all(|v| v.to_bits() == 0));
    }
    let (last, report, state) = picard_solve(&solver, &InitialData::function(|_, _| 0.0), &PicardConfig::default()).unwrap();
    assert!(last.values.iter().all(|v| v.to_bits() == 0));
    assert_eq!(state.differences[0], 0.0);
    assert!(report.samples.iter().all(|s| s.l2 == 0.0 && s.linf == 0.0));
}

fn closed_form_error(config: LinearConfig, attenuate: bool) -> f64 {
    let p = params(0.5);
    let g = grid(5, 7, 4.0);
    let run = solve_linear(p, g.clone(), &InitialData::function(specular_bump), &SourceTerm::zero(), config).unwrap();
    let tau = config.tau_end;
    let nv = g.velocity.len();
    let mut worst: f64 = 0.0;
    for (i, &y) in g.spatial.nodes().iter().enumerate() {
        for (j, &eta) in g.velocity.nodes().iter().enumerate() {
            let path = backward_path(tau, PhasePoint::new(y, eta), p.h, MAX_BOUNCES_CAP, ReflectionLaw::Specular).unwrap();
            let foot = path.state_at(0.0);
            let damp = if attenuate { duhamel_attenuation(&path, 0.0, tau).unwrap() } else { 1.0 };
            let expect = specular_bump(foot.y, foot.eta) * damp;
            worst = worst.max((run.last.values[i * nv + j] - expect).abs());
        }
    }
    worst
}

#[test]
fn transport_only_matches_backtracked_data() {
    let tau = 0.8 * params(0.5).tau_max();
    let err = closed_form_error(LinearConfig::transport_only(tau, 40), false);
    assert!(err <= 1e-6, "{err:e}");
    let damped = LinearConfig {
        kernel: KernelMode::Off,
        ..LinearConfig::new(tau, 40)
    };
    let err = closed_form_error(damped, true);
    assert!(err <= 1e-6, "{err:e}");
}

#[test]
fn linear_run_decays_and_conserves() {
    let p = params(0.1);
    let g = grid(5, 9, 5.0);
    let w0 = InitialData::function(move |y, eta| 1e-3 * weight_phi(y, eta, 0.1, 2.0) * burnette_u(y, eta));
    let config = LinearConfig::new(0.9 * p.tau_max(), 400);
    let t = Instant::now();
    let solver = LinearSolver::new(p, g.clone(), config).unwrap();
    let run = solver.solve(&w0, &SourceTerm::zero()).unwrap();
    let fit = decay_fit_l2(&run.report).unwrap();
    eprintln!(
        "lambda {:.4} r2 {:.4} drift {:.2e} in {:?}",
        fit.lambda,
        fit.r_squared,
        run.report.conservation_drift(),
        t.elapsed()
    );
    assert!(fit.lambda > 0.0 && fit.r_squared >= 0.9);
    let first = run.report.samples.first().unwrap().l2;
    let last = run.report.samples.last().unwrap().l2;
    assert!(last < first);
    assert!(run.report.samples.windows(2).all(|w| w[1].tau > w[0].tau));
    assert!(run.report.conservation_drift() <= 1e-3);
    assert!(run.last.specular_defect() <= 1e-6 * run.snapshots[0].sup_norm());
    // same inputs, same bits
    let again = solver.solve(&w0, &SourceTerm::zero()).unwrap();
    assert_eq!(again.report.to_tsv(), run.report.to_tsv());
    assert_eq!(run.report.to_tsv().lines().count(), run.report.samples.len() + 1);
    assert_eq!(run.report.conservation_tsv().lines().count(), run.report.samples.len() + 1);
}

#[test]
fn linear_solver_rejects_bad_input() {
    let p = params(0.5);
    let g = grid(3, 5, 4.0);
    assert!(matches!(
        LinearSolver::new(p, g.clone(), LinearConfig::new(p.tau_max(), 10)),
        Err(Error::InvalidParameter { name: "tau_end", .. })
    ));
    assert!(matches!(
        LinearSolver::new(p, g.clone(), LinearConfig::new(1.0, 0)),
        Err(Error::InvalidParameter { name: "steps", .. })
    ));
    let solver = LinearSolver::new(p, g.clone(), LinearConfig::new(1.0, 4)).unwrap();
    // odd in η·y: not specular at wall nodes
    let skew = InitialData::function(|y, eta| eta.dot(y) * (-eta.norm2()).exp());
    assert!(matches!(solver.solve(&skew, &SourceTerm::zero()), Err(Error::InvalidParameter { name: "w0", .. })));
    let macro_source = SourceTerm::new(|_, _, eta| sqrt_mu(eta), true);
    assert!(matches!(
        solver.solve(&InitialData::function(|_, _| 0.0), &macro_source),
        Err(Error::InvalidParameter { name: "g", .. })
    ));
    assert!(solver.solve(&InitialData::Grid(vec![0.0; 3]), &SourceTerm::zero()).is_err());
    let big = InitialData::function(|_, _| 0.5);
    assert!(matches!(
        picard_solve(&solver, &big, &PicardConfig::default()),
        Err(Error::InvalidParameter { name: "w0", .. })
    ));
    let cfg = PicardConfig { m_max: 0, ..PicardConfig::default() };
    assert!(picard_solve(&solver, &InitialData::function(|_, _| 0.0), &cfg).is_err());
}

#[test]
fn microscopic_source_check() {
    // the |η|⁸ tail needs a wide box
    let vg = VelocityGrid::new(31, 9.0).unwrap();
    let ys = [Vec3::ZERO, Vec3::new(0.5, 0.0, 0.0)];
    let micro = SourceTerm::new(|_, y, eta| microscopic_u(y, eta), true);
    assert!(micro.check_microscopic(&vg, &[0.0, 1.0], &ys, 1e-6).is_ok());
    assert!(micro.macroscopic_content(&vg, &[0.0], &ys) <= 1e-8);
    let basis = InvariantBasis;
    let leaky = SourceTerm::new(move |_, _, eta| basis.chi(4, eta), true);
    assert!(leaky.check_microscopic(&vg, &[0.0], &ys, 1e-6).is_err());
    // unflagged sources are not checked
    let loose = SourceTerm::new(move |_, _, eta| basis.chi(4, eta), false);
    assert!(loose.check_microscopic(&vg, &[0.0], &ys, 1e-6).is_ok());
    assert!(SourceTerm::zero().is_zero() && SourceTerm::zero().value(0.0, Vec3::ZERO, Vec3::ZERO) == 0.0);
}

#[test]
fn field_conversions_round_trip() {
    let p = params(0.3);
    let g = grid(5, 7, 4.0);
    let w = g.sample(|y, eta| 1e-2 * specular_bump(y, eta));
    let field = DistributionField::new(g.clone(), 0.4, FieldKind::W, w.clone()).unwrap();
    let back = field.convert(FieldKind::F, &p).convert(FieldKind::U, &p).convert(FieldKind::W, &p);
    assert!(back.values.iter().zip(&w).all(|(a, b)| (a - b).abs() <= 1e-14));
    assert_eq!(back.kind, FieldKind::W);
    assert!(field.specular_defect() <= 1e-12);
    let mut bad = w.clone();
    bad[3] = f64::NAN;
    assert!(DistributionField::new(g.clone(), 0.0, FieldKind::W, bad).is_err());
    assert!(DistributionField::new(g, 0.0, FieldKind::W, vec![0.0; 2]).is_err());
}

#[test]
fn density_of_the_equilibrium() {
    let p = params(0.5);
    let g = grid(5, 21, 7.0);
    let snaps: Vec<DistributionField> = [0.0, 1.0, 2.5]
        .iter()
        .map(|&tau| DistributionField::new(g.clone(), tau, FieldKind::U, vec![0.0; g.len()]).unwrap())
        .collect();
    let series = density_series(&snaps, &p);
    assert_eq!(series.len(), 3 * g.spatial.len());
    for s in &series {
        let expect = maxwellian_density(s.t, s.x, p.h);
        assert!((s.rho / expect - 1.0).abs() <= 1e-6, "{} vs {expect}", s.rho);
        assert!(s.x.norm() <= radius(s.t, p.h) * (1.0 + 1e-12));
    }
}

#[test]
fn synthetic_decay_fits() {
    let h = 0.5;
    let taus: Vec<f64> = (0..50).map(|k| 0.06 * k as f64).collect();
    let xs: Vec<f64> = taus.iter().map(|&t| alpha(t, h)).collect();
    let exact: Vec<f64> = xs.iter().map(|&a| 3.0 * (-0.7 * a).exp()).collect();
    let fit = fit_log_linear(&xs, &exact).unwrap();
    assert!((fit.lambda - 0.7).abs() <= 1e-10);
    assert!((fit.intercept - 3f64.ln()).abs() <= 1e-10);
    assert!((fit.r_squared - 1.0).abs() <= 1e-12);

    let mut r = rng(52);
    let noisy: Vec<f64> = exact.iter().map(|v| v * (1.0 + 0.01 * (2.0 * r.gen::<f64>() - 1.0))).collect();
    let fit = fit_log_linear(&xs, &noisy).unwrap();
    assert!((fit.lambda / 0.7 - 1.0).abs() <= 0.05, "{}", fit.lambda);

    let flat = vec![2.0; xs.len()];
    assert_eq!(fit_log_linear(&xs, &flat).unwrap().lambda, 0.0);
    assert!(matches!(fit_log_linear(&xs, &vec![0.0; xs.len()]), Err(Error::Degenerate(_))));
    assert!(fit_log_linear(&xs[..5], &exact[..5]).is_err());
    assert!(fit_log_linear(&xs, &exact[1..]).is_err());

    // the report-level fit goes through α(τ)
    let report = DecayReport {
        h,
        samples: taus
            .iter()
            .zip(&exact)
            .map(|(&tau, &v)| DecaySample {
                tau,
                l2: v,
                linf: 2.0 * v,
                conservation: Default::default(),
            })
            .collect(),
        scale: 1.0,
        contraction: vec![],
    };
    assert!((decay_fit(&report).unwrap().lambda - 0.7).abs() <= 1e-10);
    assert!((decay_fit_l2(&report).unwrap().lambda - 0.7).abs() <= 1e-10);
    assert_eq!(report.conservation_drift(), 0.0);
}

fn maxwellian(g: &PhaseGrid, h: f64) -> Vec<f64> {
    g.sample(|y, eta| mu_tilde(y, h) * mu(eta))
}

#[test]
fn positivity_keeps_the_equilibrium() {
    let p = params(0.5);
    let g = grid(5, 9, 5.0);
    let m = maxwellian(&g, p.h);
    let cfg = PositivityConfig {
        tau_end: 0.5 * p.tau_max(),
        steps: 10,
        m_max: 2,
        samples: 64,
    };
    let run = positivity_iterate(&p, g, &m, &cfg).unwrap();
    for level in &run.series {
        let worst = level.values.iter().zip(&m).map(|(a, b)| (a - b).abs() / b).fold(0.0, f64::max);
        assert!(worst <= 1e-12, "{worst:e}");
    }
    assert!(run.mass_drift.iter().all(|&d| d <= 1e-12));
}

fn bump_run(velocity: usize) -> PositivityRun {
    let p = params(0.5);
    let g = grid(5, velocity, 5.0);
    let f0 = g.sample(|y, eta| {
        let bump = (-4.0 * (eta - Vec3::new(1.0, 0.0, 0.0)).norm2()).exp() - 0.9 * (-3.0 * eta.norm2()).exp();
        mu_tilde(y, p.h) * mu(eta) * (1.0 + 0.8 * bump * (1.0 - y.norm2()))
    });
    assert!(f0.iter().all(|&v| v >= 0.0));
    let cfg = PositivityConfig {
        tau_end: 0.5 * p.tau_max(),
        steps: 10,
        m_max: 3,
        samples: 64,
    };
    positivity_iterate(&p, g, &f0, &cfg).unwrap()
}

#[test]
fn positivity_of_a_bump() {
    let coarse = bump_run(9);
    let fine = bump_run(13);
    for run in [&coarse, &fine] {
        assert!(run.minima.iter().all(|&m| m >= 0.0), "{:?}", run.minima);
        assert!(run.series.iter().all(|f| f.kind == FieldKind::F));
    }
    let (a, b) = (coarse.mass_drift.last().unwrap(), fine.mass_drift.last().unwrap());
    eprintln!("mass drift {a:.3e} -> {b:.3e}");
    assert!(b < a);
    assert!(*a <= 0.05);
}

#[test]
fn positivity_rejects_negative_data() {
    let p = params(0.5);
    let g = grid(3, 5, 4.0);
    let mut f0 = maxwellian(&g, p.h);
    f0[7] = -1e-3;
    let cfg = PositivityConfig {
        tau_end: 1.0,
        steps: 2,
        m_max: 1,
        samples: 8,
    };
    assert!(matches!(positivity_iterate(&p, g, &f0, &cfg), Err(Error::Negativity { node: 7, .. })));
}
