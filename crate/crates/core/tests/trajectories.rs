mod common;

use approx::assert_relative_eq;
use common::{bisect_exit, rk4_flow, rk4_max_radius, rng, vec_rel_err};
use kinetics_core::trajectories::*;
use kinetics_core::{Error, Vec3};
use proptest::prelude::*;
use rand::Rng;
use std::f64::consts::PI;

fn pt(y: [f64; 3], eta: [f64; 3]) -> PhasePoint {
    PhasePoint::new(Vec3::from_array(y), Vec3::from_array(eta))
}

fn aset() -> ASetParams {
    ASetParams::new(0.1, 2.0).unwrap()
}

#[test]
fn zero_span_is_identity() {
    let p = pt([0.1, 0.2, 0.3], [1.0, -1.0, 2.0]);
    assert_eq!(advance_free(p, 0.4, 0.4, 0.5), p);
}

#[test]
fn quarter_period() {
    let q = advance_free(pt([0.0; 3], [1.0, 0.0, 0.0]), 0.0, PI / 2.0, 1.0);
    assert!((q.y - Vec3::new(1.0, 0.0, 0.0)).norm() <= 1e-15);
    assert!(q.eta.norm() <= 1e-15);
}

#[test]
fn free_flow_matches_rk4() {
    let mut r = rng(21);
    for _ in 0..100 {
        let h = 0.2 + r.gen::<f64>();
        let p = PhasePoint::new(uniform_in_ball(&mut r), uniform_on_sphere(&mut r) * (3.0 * r.gen::<f64>()));
        let span = PI / h * r.gen::<f64>();
        let exact = advance_free(p, 0.0, span, h);
        let oracle = rk4_flow(p, h, span, 1e-4);
        assert!(vec_rel_err(exact.y, oracle.y) <= 1e-8);
        assert!(vec_rel_err(exact.eta, oracle.eta) <= 1e-8);
        let back = retreat_free(exact, span, h);
        assert!((back.y - p.y).norm() <= 1e-12 && (back.eta - p.eta).norm() <= 1e-12);
    }
}

#[test]
fn invariant_examples() {
    let inv = invariants(pt([0.0; 3], [3.0, 4.0, 0.0]), 0.5);
    assert_eq!((inv.e, inv.m), (25.0, 0.0));
    assert_relative_eq!(inv.l_max, 10.0, max_relative = 1e-15);
    assert_eq!(inv.l_min, 0.0);
    let inv = invariants(pt([0.6, 0.0, 0.0], [0.0, 0.8, 0.0]), 1.0);
    assert_relative_eq!(inv.e, 1.0, max_relative = 1e-15);
    assert_relative_eq!(inv.m, 0.2304, max_relative = 1e-14);
    // planar ellipse with semi-axes 0.6 and 0.8
    assert_relative_eq!(inv.l_max, 0.8, max_relative = 1e-14);
    assert_relative_eq!(inv.l_min, 0.6, max_relative = 1e-14);
}

#[test]
fn invariants_conserved_by_flow() {
    let mut r = rng(22);
    for _ in 0..1000 {
        let h = 0.05 + r.gen::<f64>();
        let p = PhasePoint::new(uniform_in_ball(&mut r), uniform_on_sphere(&mut r) * (4.0 * r.gen::<f64>()));
        let a = invariants(p, h);
        let b = invariants(advance_free(p, 0.0, -10.0 * r.gen::<f64>(), h), h);
        assert!((a.e - b.e).abs() <= 1e-10 * a.e.max(1.0));
        assert!((a.m - b.m).abs() <= 1e-10 * a.m.max(1.0));
    }
}

#[test]
fn fast_points_cross() {
    let mut r = rng(23);
    for _ in 0..1000 {
        let h = 0.05 + r.gen::<f64>();
        let speed = 2.0 * h * (1.0 + r.gen::<f64>());
        let p = PhasePoint::new(uniform_in_ball(&mut r) * 0.999, uniform_on_sphere(&mut r) * speed);
        assert_eq!(classify_trajectory(p, h), TrajectoryClass::Crossing);
    }
}

#[test]
fn interior_orbit_stays_inside() {
    let p = pt([0.6, 0.0, 0.0], [0.0, 0.8, 0.0]);
    assert_eq!(classify_trajectory(p, 1.0), TrajectoryClass::Interior);
    assert!(rk4_max_radius(p, 1.0, 2.0 * PI, 1e-3) < 1.0);
    assert!(matches!(backward_exit(p, 1.0, 1.0), Err(Error::NoExit("interior"))));
}

#[test]
fn constructed_grazing_point() {
    // (|eta|^2 - h^2)(1 - 0.36) = 0 at |eta| = h for eta orthogonal to y
    let h = 0.5;
    let p = pt([0.6, 0.0, 0.0], [0.0, h, 0.0]);
    assert_eq!(classify_trajectory(p, h), TrajectoryClass::Grazing);
    assert!(matches!(backward_exit_time(p, h), Err(Error::NoExit("grazing"))));
}

#[test]
fn exit_from_centre() {
    let ex = backward_exit(pt([0.0; 3], [2.0, 0.0, 0.0]), 1.0, 1.0).unwrap();
    assert_relative_eq!(ex.tau_b, PI / 6.0, max_relative = 1e-14);
    assert!((ex.y - Vec3::new(-1.0, 0.0, 0.0)).norm() <= 1e-14);
    assert!((ex.eta - Vec3::new(3f64.sqrt(), 0.0, 0.0)).norm() <= 1e-14);
    let oracle = bisect_exit(pt([0.0; 3], [2.0, 0.0, 0.0]), 1.0, 1e-3, 5.0).unwrap();
    assert!((oracle - PI / 6.0).abs() <= 1e-9);
}

#[test]
fn exit_from_incoming_wall_point_is_a_full_chord() {
    // e = |eta|^2 + h^2 |y|^2 = 5, m = 0
    let p = pt([1.0, 0.0, 0.0], [-2.0, 0.0, 0.0]);
    let tau_b = backward_exit_time(p, 1.0).unwrap();
    assert_relative_eq!(tau_b, (0.6f64).acos(), max_relative = 1e-14);
    assert_relative_eq!(tau_b, chord_time(p, 1.0), max_relative = 1e-14);
    let oracle = bisect_exit(p, 1.0, 1e-3, 5.0).unwrap();
    assert!((oracle - tau_b).abs() <= 1e-9, "{oracle} vs {tau_b}");
}

#[test]
fn exit_time_matches_bisection() {
    let mut r = rng(24);
    let a = aset();
    let h = 0.5;
    for _ in 0..1000 {
        let p = a.sample(h, &mut r);
        let closed = backward_exit_time(p, h).unwrap();
        let oracle = bisect_exit(p, h, 1e-3, 10.0).unwrap();
        assert!((closed - oracle).abs() <= 1e-9, "{closed} vs {oracle}");
    }
}

#[test]
fn reflection_examples() {
    let y = Vec3::new(0.0, 0.6, 0.8);
    let eta = y * -3.0;
    assert!((reflect_specular(y, eta).unwrap() - y * 3.0).norm() <= 1e-15);
    let tangent = Vec3::new(1.0, 0.8, -0.6);
    assert_eq!(reflect_specular(y, tangent).unwrap(), tangent);
    assert!(matches!(
        reflect_specular(Vec3::new(0.5, 0.0, 0.0), tangent),
        Err(Error::OutsideDomain(_))
    ));
    let mut r = rng(25);
    for _ in 0..1000 {
        let n = uniform_on_sphere(&mut r);
        let eta = uniform_on_sphere(&mut r) * (5.0 * r.gen::<f64>());
        let twice = reflect_specular(n, reflect_specular(n, eta).unwrap()).unwrap();
        assert!((twice - eta).norm() <= 1e-14 * eta.norm().max(1.0));
    }
}

#[test]
fn boundary_classes() {
    let h = 0.5;
    let y = [1.0, 0.0, 0.0];
    assert_eq!(classify_boundary(pt(y, [1.0, 0.0, 0.0]), h), BoundaryClass::GammaPlus);
    assert_eq!(classify_boundary(pt(y, [-1.0, 0.0, 0.0]), h), BoundaryClass::GammaMinus);
    assert_eq!(classify_boundary(pt(y, [0.0, h / 2.0, 0.0]), h), BoundaryClass::Gamma00);
    assert_eq!(classify_boundary(pt(y, [0.0, 2.0 * h, 0.0]), h), BoundaryClass::Gamma01);
    assert_eq!(classify_boundary(pt([0.5, 0.0, 0.0], [1.0, 0.0, 0.0]), h), BoundaryClass::Interior);
}

#[test]
fn interior_start_has_no_bounce() {
    let p = pt([0.2, 0.0, 0.0], [0.0, 0.1, 0.0]);
    let path = backward_path(2.0, p, 0.5, 10, ReflectionLaw::Specular).unwrap();
    assert_eq!(path.bounce_count(), 0);
    assert_eq!(path.terminal, PathTerminal::Interior);
    assert_eq!(path.segments().count(), 1);
    assert!(path.dump().is_empty());
}

#[test]
fn aset_paths_have_equal_chords() {
    let mut r = rng(26);
    let a = aset();
    let h = 0.5;
    let tau0 = 0.999 * PI / (2.0 * h);
    for _ in 0..200 {
        let p = a.sample(h, &mut r);
        let path = backward_path(tau0, p, h, a.default_max_bounces(h), ReflectionLaw::Specular).unwrap();
        assert!(path.bounce_count() as f64 <= a.bounce_bound(h));
        let chord = chord_time(p, h);
        let base = invariants(p, h);
        for w in path.events.windows(2) {
            assert!((w[0].tau - w[1].tau - chord).abs() <= 1e-10);
        }
        for (_, _, state) in path.segments() {
            let inv = invariants(state, h);
            assert!((inv.e - base.e).abs() <= 1e-10 * base.e);
            assert!((inv.m - base.m).abs() <= 1e-10 * base.e);
        }
        for ev in &path.events {
            assert!((ev.y.norm() - 1.0).abs() <= 1e-12);
            assert!(ev.eta_in.dot(ev.y) <= 1e-12 && ev.eta.dot(ev.y) >= -1e-12);
        }
        assert_eq!(path.dump().lines().count(), path.bounce_count());
    }
}

#[test]
fn path_errors() {
    let p = pt([0.0; 3], [3.0, 0.0, 0.0]);
    assert!(matches!(
        backward_path(3.0, p, 0.5, 1, ReflectionLaw::Specular),
        Err(Error::BounceLimit { limit: 1 })
    ));
    assert!(matches!(
        backward_path(PI, p, 0.5, 10, ReflectionLaw::Specular),
        Err(Error::InvalidParameter { name: "tau0", .. })
    ));
    assert!(matches!(
        backward_path(1.0, pt([1.5, 0.0, 0.0], [0.0; 3]), 0.5, 10, ReflectionLaw::Specular),
        Err(Error::OutsideDomain(_))
    ));
}

#[test]
fn closed_form_characteristic_matches_path() {
    let mut r = rng(27);
    let h = 0.5;
    let a = aset();
    let tau0 = 3.0;
    for k in 0..300 {
        let p = if k % 3 == 0 {
            PhasePoint::new(uniform_in_ball(&mut r), uniform_on_sphere(&mut r) * (0.5 * r.gen::<f64>()))
        } else {
            a.sample(h, &mut r)
        };
        let path = backward_path(tau0, p, h, MAX_BOUNCES_CAP, ReflectionLaw::Specular).unwrap();
        let ch = Characteristic::new(p, h);
        for _ in 0..10 {
            let s = tau0 * r.gen::<f64>();
            let a = path.state_at(tau0 - s);
            let b = ch.state_after(s);
            assert!((a.y - b.y).norm() <= 1e-9, "y gap {}", (a.y - b.y).norm());
            assert!((a.eta - b.eta).norm() <= 1e-9 * a.eta.norm().max(1.0));
            assert!(ch.bounces_within(s) <= path.bounce_count());
        }
    }
}

#[test]
fn velocity_lemma_on_random_points() {
    let mut r = rng(28);
    let a = aset();
    let h = 0.5;
    for _ in 0..100 {
        let p = a.sample(h, &mut r);
        let tau0 = (0.05 + 0.949 * r.gen::<f64>()) * PI / (2.0 * h);
        let rep = velocity_lemma_report(tau0, p, h, &a, 4, &mut r).unwrap();
        assert!(rep.passed(), "{:?}", rep.failures());
    }
    let outside = pt([0.0; 3], [0.1, 0.0, 0.0]);
    assert!(velocity_lemma_report(1.0, outside, h, &a, 4, &mut r).is_err());
}

#[test]
fn diametral_chord() {
    let h = 0.5;
    let p = pt([0.0; 3], [4.0 * h, 0.0, 0.0]);
    let e0 = 16.0 * h * h;
    let expected = (1.0 - 2.0 * h * h / e0).acos() / h;
    assert_relative_eq!(chord_time(p, h), expected, max_relative = 1e-13);
    let path = backward_path(3.0, p, h, 100, ReflectionLaw::Specular).unwrap();
    assert!(path.bounce_count() >= 2);
    for w in path.events.windows(2) {
        assert!((w[0].tau - w[1].tau - expected).abs() <= 1e-12);
    }
}

#[test]
fn chord_approaches_quarter_period() {
    let h = 0.5;
    let mut prev = 0.0;
    for k in 0..12 {
        let e0 = 2.0 * h * h * (1.0 + 10f64.powi(-k));
        let c = chord_time(pt([0.0; 3], [e0.sqrt(), 0.0, 0.0]), h);
        assert!(c > prev && c < PI / (2.0 * h));
        prev = c;
    }
    assert!(PI / (2.0 * h) - prev < 1e-5);
}

#[test]
fn aset_parameters() {
    let a = aset();
    assert_relative_eq!(a.bounce_bound(0.5), 80.0 * PI, max_relative = 1e-15);
    assert_relative_eq!(a.delta(0.5), 0.25 * 0.1 / 4.0, max_relative = 1e-15);
    assert!(ASetParams::new(0.0, 2.0).is_err());
    assert!(ASetParams::new(0.1, 0.5).is_err());
}

#[test]
fn continuity_off_the_singular_set() {
    let eps = [1e-2, 1e-3, 1e-4];
    let h = 0.5;
    for center in [
        pt([0.2, 0.0, 0.0], [0.0, 0.1, 0.0]),
        pt([1.0, 0.0, 0.0], [0.0, h / 2.0, 0.0]),
    ] {
        let ratios = continuity_probe(1.0, center, &eps, h, ReflectionLaw::Specular).unwrap();
        let (lo, hi) = ratios.iter().fold((f64::MAX, 0.0f64), |(l, u), &x| (l.min(x), u.max(x)));
        assert!(hi < 2.0 * lo, "ratios {ratios:?}");
    }
}

#[test]
fn continuity_fails_on_the_singular_set() {
    let h = 0.5;
    let center = pt([1.0, 0.0, 0.0], [0.0, 2.0 * h, 0.0]);
    let ratios = continuity_probe(1.0, center, &[1e-2, 1e-3, 1e-4], h, ReflectionLaw::Specular).unwrap();
    assert!(ratios[2] > 10.0 * ratios[0], "ratios {ratios:?}");
}

#[test]
fn reverse_reflection_is_discontinuous() {
    let h = 0.5;
    let gaps = reverse_reflection_probe(
        1.0,
        Vec3::new(1.0, 0.0, 0.0),
        Vec3::new(0.0, h / 2.0, 0.0),
        &[1e-2, 1e-3, 1e-4],
        h,
    )
    .unwrap();
    for g in &gaps {
        assert!(g.both_free <= 50.0 * g.eps, "{g:?}");
        assert!(g.both_bounce <= 50.0 * g.eps, "{g:?}");
        assert!(g.straddle_specular <= 50.0 * g.eps, "{g:?}");
    }
    assert!(gaps[2].straddle >= 0.1, "{:?}", gaps[2]);
    assert!(reverse_reflection_probe(1.0, Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, h, 0.0), &[1e-3], h).is_err());
}

#[test]
fn jacobian_examples() {
    let p = pt([0.0; 3], [0.1, 0.0, 0.0]);
    let eta = Vec3::new(0.2, 0.1, 0.0);
    let det = double_backtrack_jacobian(1.0, p, 0.9, 0.9 - PI / 6.0, eta, 1.0).unwrap();
    assert!((det.abs() - 0.125).abs() <= 1e-6 * 0.125, "det {det}");
    assert_eq!(double_backtrack_jacobian(1.0, p, 0.9, 0.9, eta, 1.0).unwrap(), 0.0);
    let det = double_backtrack_jacobian(0.5, p, 0.4, 0.4 - PI / 12.0, eta, 2.0).unwrap();
    assert!((det.abs() - 1.0 / 64.0).abs() <= 1e-6 / 64.0, "det {det}");
    assert!(matches!(
        double_backtrack_jacobian(1.0, p, 0.9, 0.9 - PI / 6.0, Vec3::new(5.0, 0.0, 0.0), 1.0),
        Err(Error::BounceInSpan)
    ));
    assert!(double_backtrack_jacobian(1.0, p, 0.5, 0.6, eta, 1.0).is_err());
}

proptest! {
    #[test]
    fn flow_is_a_group(
        y in prop::array::uniform3(-0.5f64..0.5),
        eta in prop::array::uniform3(-3.0f64..3.0),
        s in -5.0f64..5.0,
        t in -5.0f64..5.0,
        h in 0.05f64..2.0,
    ) {
        let p = pt(y, eta);
        let a = advance_free(advance_free(p, 0.0, s, h), s, s + t, h);
        let b = advance_free(p, 0.0, s + t, h);
        prop_assert!((a.y - b.y).norm() <= 1e-11 * (1.0 + b.y.norm() + b.eta.norm() / h));
        prop_assert!((a.eta - b.eta).norm() <= 1e-11 * (1.0 + b.eta.norm() + h * b.y.norm()));
    }

    #[test]
    fn reflection_preserves_speed_and_tangent(
        n in prop::array::uniform3(-1.0f64..1.0),
        eta in prop::array::uniform3(-4.0f64..4.0),
    ) {
        let n = Vec3::from_array(n);
        prop_assume!(n.norm() > 0.1);
        let n = n * (1.0 / n.norm());
        let eta = Vec3::from_array(eta);
        let out = reflect_specular(n, eta).unwrap();
        prop_assert!((out.norm() - eta.norm()).abs() <= 1e-12 * eta.norm().max(1.0));
        prop_assert!((out.dot(n) + eta.dot(n)).abs() <= 1e-12 * eta.norm().max(1.0));
    }
}

#[test]
fn singular_grazing_start_glides_on_the_wall() {
    let h = 0.5;
    let p = pt([0.0, 1.0, 0.0], [1.5, 0.0, 0.0]);
    let path = backward_path(2.0, p, h, 100, ReflectionLaw::Specular).unwrap();
    assert_eq!(path.terminal, PathTerminal::Glide);
    let ch = Characteristic::new(p, h);
    for k in 0..=20 {
        let tau = 0.1 * k as f64;
        let q = path.state_at(tau);
        assert!((q.y.norm() - 1.0).abs() <= 1e-12);
        assert!((q.eta.norm() - 1.5).abs() <= 1e-12);
        let r = ch.state_after(2.0 - tau);
        assert!((q.y - r.y).norm() <= 1e-12 && (q.eta - r.eta).norm() <= 1e-12);
    }
}
