use kinetics_core::audit::{
    contraction_onset, elliptic_audit, reverse_reflection_demo, trajectory_audit, Bound, Check, EllipticAuditConfig,
    TrajectoryAuditConfig,
};

fn report(name: &str, out: &kinetics_core::audit::Outcome) {
    eprintln!("{name}\n{}", out.checks_tsv());
}

#[test]
fn check_relations() {
    assert!(Check::new("a", 1.0, Bound::AtMost, 1.0).pass);
    assert!(!Check::new("a", 1.0, Bound::Below, 1.0).pass);
    assert!(Check::new("a", 1.0, Bound::AtLeast, 1.0).pass);
    assert!(!Check::new("a", 1.0, Bound::Above, 1.0).pass);
    assert!(!Check::new("a", f64::NAN, Bound::AtMost, 1.0).pass);
    assert!(Check::new("a", 2.0, Bound::AtLeast, 1.0).row().ends_with("PASS"));
}

#[test]
fn contraction_onset_counts_iterates() {
    assert_eq!(contraction_onset(&[0.5, 0.4]), 1.0);
    assert_eq!(contraction_onset(&[1.5, 0.4, 0.3]), 2.0);
    assert_eq!(contraction_onset(&[0.5, 1.2, 0.3]), 3.0);
    assert!(contraction_onset(&[0.5, 1.2]).is_infinite());
}

#[test]
fn trajectory_audit_passes() {
    let cfg = TrajectoryAuditConfig {
        exit_samples: 2000,
        ..TrajectoryAuditConfig::default()
    };
    let out = trajectory_audit(&cfg).unwrap();
    report("trajectory", &out);
    assert!(out.passed());
    assert!(out.tables.iter().any(|t| t.file == "velocity_lemma.tsv"));
}

#[test]
fn elliptic_audit_passes() {
    let out = elliptic_audit(&EllipticAuditConfig::default()).unwrap();
    report("elliptic", &out);
    assert!(out.passed());
}

#[test]
fn reverse_reflection_demo_passes() {
    let out = reverse_reflection_demo(0.5, 1.0, &[1e-2, 1e-3, 1e-4]).unwrap();
    report("reverse", &out);
    assert!(out.passed());
}
