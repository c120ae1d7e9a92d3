use kinetics_cli::{parse_config, serialize, ConfigError, Experiment, RunConfig};

#[test]
fn minimal_file_takes_defaults() {
    let cfg = parse_config("experiment = trajectory-audit\n").unwrap();
    assert_eq!(cfg, RunConfig::defaults(Experiment::TrajectoryAudit));
    assert_eq!(cfg.params.h, 0.5);
    assert_eq!(cfg.exit_samples, 10_000);
}

#[test]
fn decay_presets_default_to_small_h() {
    let cfg = parse_config("experiment = nonlinear-decay").unwrap();
    assert_eq!(cfg.params.h, 0.05);
    assert_eq!(cfg.amplitude, 1e-3);
    let lin = parse_config("experiment = linear-decay").unwrap();
    assert_eq!(lin.params.h, 0.1);
}

#[test]
fn comments_and_blank_lines() {
    let text = "# header\n\nexperiment = elliptic-audit # trailing\n  h = 0.25  \n";
    let cfg = parse_config(text).unwrap();
    assert_eq!(cfg.params.h, 0.25);
    assert_eq!(cfg.experiment, Experiment::EllipticAudit);
}

#[test]
fn negative_h_is_a_range_error_naming_h() {
    let err = parse_config("experiment = trajectory-audit\nh = -1\n").unwrap_err();
    assert!(matches!(err, ConfigError::Range { .. }), "{err:?}");
    assert_eq!(err.field(), Some("h"));
    assert!(err.to_string().contains("`h`"));
}

#[test]
fn errors_name_the_field() {
    let cases = [
        ("experiment = trajectory-audit\nbogus = 3", "bogus"),
        ("experiment = trajectory-audit\nsteps = many", "steps"),
        ("experiment = trajectory-audit\nbeta = 1.0", "beta"),
        ("experiment = trajectory-audit\nvelocity_n = 8", "velocity_n"),
        ("experiment = trajectory-audit\ntau_fraction = 1.5", "tau_fraction"),
        ("experiment = trajectory-audit\nresidual_levels = 15, x", "residual_levels"),
        ("experiment = trajectory-audit\nelliptic_levels = 4, 2", "elliptic_levels"),
        ("experiment = trajectory-audit\nh = 0.5\nh = 0.6", "h"),
        ("experiment = warp-drive", "experiment"),
        ("h = 0.5", "experiment"),
    ];
    for (text, field) in cases {
        let err = parse_config(text).unwrap_err();
        assert_eq!(err.field(), Some(field), "{text:?} gave {err}");
        assert!(err.to_string().contains(field), "{err}");
    }
}

#[test]
fn malformed_lines_are_rejected() {
    let err = parse_config("experiment = trajectory-audit\njust words\n").unwrap_err();
    assert_eq!(
        err,
        ConfigError::Syntax {
            line: 2,
            text: "just words".into()
        }
    );
}

#[test]
fn empty_file_is_a_usage_error() {
    assert_eq!(parse_config(""), Err(ConfigError::Empty));
    assert_eq!(parse_config("# nothing here\n\n"), Err(ConfigError::Empty));
}

#[test]
fn inconsistent_dtau_is_rejected() {
    let err = parse_config("experiment = linear-decay\ndtau = 1.0").unwrap_err();
    assert_eq!(err.field(), Some("dtau"));
}

#[test]
fn serialize_round_trips() {
    for e in Experiment::ALL {
        let cfg = RunConfig::defaults(e);
        assert_eq!(parse_config(&serialize(&cfg)).unwrap(), cfg);
    }
    let text = "experiment = density-sandwich\nh = 0.07\nseed = 99\nsteps = 123\nresidual_levels = 9, 13\n\
                amplitude = 0.000123456789\noutput = /tmp/x y\n";
    let cfg = parse_config(text).unwrap();
    let again = parse_config(&serialize(&cfg)).unwrap();
    assert_eq!(again, cfg);
    assert_eq!(serialize(&again), serialize(&cfg));
}

#[test]
fn every_experiment_name_parses() {
    for e in Experiment::ALL {
        assert_eq!(e.name().parse::<Experiment>(), Ok(e));
    }
}
