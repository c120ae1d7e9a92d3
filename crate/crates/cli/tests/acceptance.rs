//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 1 and 2 use oracles built here (RK4 marching and bisection);
//! the rest go through the audit suites and the binary.

use kinetics_cli::{presets, Experiment, RunConfig};
use kinetics_core::audit::{
    elliptic_audit, linear_decay_study, operator_audit, trajectory_audit, EllipticAuditConfig, OperatorAuditConfig,
    Outcome, TrajectoryAuditConfig,
};
use kinetics_core::trajectories::{
    advance_free, backward_exit_time, backward_path, invariants, uniform_in_ball, uniform_on_sphere, ASetParams,
    PhasePoint, ReflectionLaw,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::fs;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

struct Verdict {
    id: u32,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn rk4(p: PhasePoint, h: f64, dt: f64) -> PhasePoint {
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

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let h = 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut flow: f64 = 0.0;
    for _ in 0..1000 {
        let p = PhasePoint::new(uniform_in_ball(&mut rng), uniform_on_sphere(&mut rng) * (4.0 * rng.gen::<f64>()));
        let span = 2.0 * PI / h * rng.gen::<f64>();
        let n = (span / 1e-4).ceil().max(1.0) as usize;
        let oracle = (0..n).fold(p, |q, _| rk4(q, h, span / n as f64));
        let exact = advance_free(p, 0.0, span, h);
        let rel = |a: kinetics_core::Vec3, b: kinetics_core::Vec3| (a - b).norm() / b.norm().max(1.0);
        flow = flow.max(rel(exact.y, oracle.y)).max(rel(exact.eta, oracle.eta));
    }
    let aset = ASetParams::new(0.1, 2.0).unwrap();
    let mut drift: f64 = 0.0;
    for _ in 0..1000 {
        let p = aset.sample(h, &mut rng);
        let tau0 = PI / (2.0 * h) * (0.05 + 0.94 * rng.gen::<f64>());
        let path = backward_path(tau0, p, h, aset.default_max_bounces(h), ReflectionLaw::Specular).unwrap();
        for (top, bottom, state) in path.segments() {
            let a = invariants(state, h);
            let b = invariants(advance_free(state, top, bottom, h), h);
            drift = drift.max((a.e - b.e).abs() / a.e.max(1.0)).max((a.m - b.m).abs() / a.m.max(1.0));
        }
    }
    let took = start.elapsed();
    Verdict {
        id: 1,
        title: "characteristic exactness",
        pass: flow <= 1e-8 && drift <= 1e-10 && took < Duration::from_secs(10),
        detail: format!("flow {flow:.2e} <= 1e-8, invariants {drift:.2e} <= 1e-10, {took:.1?} < 10s"),
    }
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let h = 0.5;
    let aset = ASetParams::new(0.1, 2.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let step = 1e-3;
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let p = aset.sample(h, &mut rng);
        let closed = backward_exit_time(p, h).unwrap();
        // march backward until the first step that leaves the ball, then bisect
        let mut q = p;
        let mut s = 0.0;
        let mut oracle = f64::INFINITY;
        while s < 10.0 {
            let next = rk4(q, h, -step);
            if next.y.norm() >= 1.0 {
                let (mut lo, mut hi) = (0.0, step);
                for _ in 0..80 {
                    let mid = 0.5 * (lo + hi);
                    if rk4(q, h, -mid).y.norm() >= 1.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                oracle = s + 0.5 * (lo + hi);
                break;
            }
            q = next;
            s += step;
        }
        worst = worst.max((closed - oracle).abs());
    }
    let took = start.elapsed();
    Verdict {
        id: 2,
        title: "exit-time closed form",
        pass: worst <= 1e-9 && took < Duration::from_secs(30),
        detail: format!("max |dtau_b| {worst:.2e} <= 1e-9, {took:.1?} < 30s"),
    }
}

fn from_checks(id: u32, title: &'static str, out: &Outcome, names: &[&str], extra: Option<(bool, String)>) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for name in names {
        match out.check(name) {
            Some(c) => {
                pass &= c.pass;
                parts.push(format!("{name} {:.3e}{}", c.value, if c.pass { "" } else { " (fail)" }));
            }
            None => {
                pass = false;
                parts.push(format!("{name} missing"));
            }
        }
    }
    if let Some((ok, text)) = extra {
        pass &= ok;
        parts.push(text);
    }
    Verdict {
        id,
        title,
        pass,
        detail: parts.join(", "),
    }
}

fn main() -> ExitCode {
    let mut verdicts = vec![criterion_1(), criterion_2()];

    let traj = trajectory_audit(&TrajectoryAuditConfig::default()).expect("trajectory audit");
    verdicts.push(from_checks(
        3,
        "velocity lemma certification",
        &traj,
        &[
            "velocity_lemma_chord_bounds_violations",
            "velocity_lemma_bounce_count_violations",
            "velocity_lemma_window_margin_violations",
            "velocity_lemma_excluded_measure_violations",
        ],
        None,
    ));
    verdicts.push(from_checks(
        4,
        "continuity dichotomy",
        &traj,
        &[
            "continuity_drift_interior",
            "continuity_drift_gamma00",
            "reverse_reflection_gap",
        ],
        None,
    ));
    verdicts.push(from_checks(5, "jacobian identity", &traj, &["jacobian_rel_err"], None));

    let start = Instant::now();
    let ops = operator_audit(&OperatorAuditConfig::default()).expect("operator audit");
    let took = start.elapsed();
    verdicts.push(from_checks(
        6,
        "operator audit",
        &ops,
        &[
            "kernel_symmetry",
            "kernel_row_integral_max",
            "invariant_residual_rises",
            "invariant_residual_at_21",
            "dissipation_max",
            "mc_disagreements",
        ],
        Some((took < Duration::from_secs(300), format!("{took:.1?} < 300s"))),
    ));
    verdicts.push(from_checks(7, "burnette gram table", &ops, &["gram_max_deviation"], None));

    let ell = elliptic_audit(&EllipticAuditConfig::default()).expect("elliptic audit");
    verdicts.push(from_checks(
        8,
        "elliptic audit",
        &ell,
        &[
            "neumann_bump_order",
            "neumann_cubic_order",
            "tangential_vanishing_order",
            "tangential_rotation_order",
            "boundary_term_c_symmetric",
            "boundary_term_a_symmetric",
            "boundary_term_b_symmetric",
            "boundary_term_negative_control",
        ],
        None,
    ));

    let linear_cfg = |spatial_n, velocity_n, steps| {
        let mut cfg = RunConfig::defaults(Experiment::LinearDecay);
        cfg.spatial_n = spatial_n;
        cfg.velocity_n = velocity_n;
        cfg.steps = steps;
        cfg
    };
    let default_linear = RunConfig::defaults(Experiment::LinearDecay);
    let lin = presets::execute(&default_linear).expect("linear decay");
    verdicts.push(from_checks(
        9,
        "linear solver",
        &lin,
        &["transport_closed_form", "l2_decay_rate", "l2_fit_r_squared"],
        None,
    ));

    let start = Instant::now();
    let nonlinear = presets::execute(&RunConfig::defaults(Experiment::DensitySandwich)).expect("nonlinear decay");
    let took = start.elapsed();
    verdicts.push(from_checks(
        10,
        "nonlinear picard",
        &nonlinear,
        &["zero_fixed_point", "contraction_onset_iterate", "sup_decay_rate"],
        Some((took <= Duration::from_secs(600), format!("{took:.1?} <= 600s"))),
    ));
    verdicts.push(from_checks(11, "density sandwich", &nonlinear, &["density_lower", "density_upper"], None));

    let coarse = linear_decay_study(&decay_study(&linear_cfg(5, 7, 200))).expect("coarse linear").0;
    let drift = |o: &Outcome| o.check("conservation_drift").map(|c| c.value).unwrap_or(f64::NAN);
    let (fine, rough) = (drift(&lin), drift(&coarse));
    verdicts.push(from_checks(
        12,
        "conservation",
        &nonlinear,
        &["conservation_drift"],
        Some((
            fine <= 1e-3 && fine < rough,
            format!("linear {fine:.3e} <= 1e-3, coarser grid {rough:.3e} > {fine:.3e}"),
        )),
    ));

    verdicts.push(criterion_13());

    let mut all = true;
    for v in &verdicts {
        all &= v.pass;
        println!(
            "criterion {:>2} {:<30} {}  {}",
            v.id,
            v.title,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    let failed: Vec<_> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id.to_string()).collect();
    if all {
        println!("acceptance: all {} criteria pass", verdicts.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failing criteria {}", failed.join(", "));
        ExitCode::FAILURE
    }
}

fn decay_study(cfg: &RunConfig) -> kinetics_core::audit::DecayStudyConfig {
    kinetics_core::audit::DecayStudyConfig {
        params: cfg.params,
        spatial_n: cfg.spatial_n,
        velocity_n: cfg.velocity_n,
        steps: cfg.steps,
        tau_fraction: cfg.tau_fraction,
        amplitude: cfg.amplitude,
        picard: Default::default(),
    }
}

fn criterion_13() -> Verdict {
    let dir = std::env::temp_dir().join(format!("kinetics-acceptance-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    let cfg = dir.join("run.cfg");
    fs::write(
        &cfg,
        "experiment = nonlinear-decay\nspatial_n = 5\nvelocity_n = 7\nsteps = 60\nseed = 4242\n",
    )
    .unwrap();
    let mut tables = Vec::new();
    for run in ["first", "second"] {
        let out = dir.join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_kinetics"))
            .args(["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .output()
            .expect("spawn kinetics");
        tables.push((status.status.code(), fs::read(out.join("decay.tsv")).unwrap_or_default()));
    }
    let same = !tables[0].1.is_empty() && tables[0].1 == tables[1].1;
    let _ = fs::remove_dir_all(&dir);
    Verdict {
        id: 13,
        title: "determinism",
        pass: same,
        detail: format!("decay.tsv {} bytes, identical: {same}", tables[0].1.len()),
    }
}
