use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("kinetics-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn kinetics(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kinetics"))
        .args(args)
        .env_remove("KINETICS_THREADS")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn lists_every_preset() {
    let out = kinetics(&["list-experiments"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in [
        "trajectory-audit",
        "operator-audit",
        "elliptic-audit",
        "linear-decay",
        "nonlinear-decay",
        "density-sandwich",
        "reverse-reflection-demo",
    ] {
        assert!(text.lines().any(|l| l.starts_with(name)), "{name} missing");
    }
}

#[test]
fn empty_config_is_a_usage_error() {
    let dir = scratch("empty");
    let cfg = write_config(&dir, "");
    let out = kinetics(&["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
}

#[test]
fn range_error_names_the_field() {
    let dir = scratch("range");
    let cfg = write_config(&dir, "experiment = trajectory-audit\nh = -1\n");
    let out = kinetics(&["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`h`"));
}

#[test]
fn bad_thread_variable_is_a_usage_error() {
    let dir = scratch("threads");
    let cfg = write_config(&dir, "experiment = reverse-reflection-demo\n");
    let out = Command::new(env!("CARGO_BIN_EXE_kinetics"))
        .args(["run", "--config", &cfg])
        .env("KINETICS_THREADS", "lots")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("KINETICS_THREADS"));
}

#[test]
fn trajectory_audit_with_defaults_passes() {
    let dir = scratch("trajectory");
    let cfg = write_config(&dir, "experiment = trajectory-audit\n");
    let out_dir = dir.join("out");
    let out = kinetics(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap(), "--threads", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = fs::read_to_string(out_dir.join("manifest.txt")).unwrap();
    assert!(manifest.trim_end().ends_with("status = PASS"));
    for clause in ["chord_bounds", "bounce_count", "window_margin", "excluded_measure"] {
        let line = manifest
            .lines()
            .find(|l| l.starts_with(&format!("velocity_lemma_{clause}_violations")))
            .unwrap();
        assert!(line.ends_with("PASS"), "{line}");
    }
    for file in ["velocity_lemma.tsv", "continuity.tsv", "reverse_reflection.tsv", "checks.tsv"] {
        assert!(out_dir.join(file).is_file(), "{file}");
        assert!(manifest.lines().any(|l| l == file), "{file} not listed");
    }
    // the echoed config re-parses
    let section = manifest.split("[config]\n").nth(1).unwrap().split("\n[checks]").next().unwrap();
    let echoed = kinetics_cli::parse_config(section).unwrap();
    assert_eq!(echoed.output, out_dir);
    assert!(!out_dir.join(".manifest.txt.tmp").exists());
}

#[test]
fn reverse_reflection_demo_writes_its_table() {
    let dir = scratch("reverse");
    let cfg = write_config(&dir, &format!("experiment = reverse-reflection-demo\noutput = {}\n", dir.join("o").display()));
    let out = kinetics(&["run", "--config", &cfg]);
    assert!(out.status.success());
    let table = fs::read_to_string(dir.join("o/reverse_reflection.tsv")).unwrap();
    assert!(table.starts_with("eps\t"));
    assert_eq!(table.lines().count(), 4);
}

#[test]
fn failing_checks_give_a_nonzero_exit() {
    // lattices this coarse miss the null-space residual target
    let dir = scratch("fail");
    let cfg = write_config(
        &dir,
        "experiment = operator-audit\nresidual_levels = 5, 7\nslices = 2\nmc_velocities = 1\nmc_samples = 2000\n",
    );
    let out = kinetics(&["run", "--config", &cfg, "--out", dir.join("o").to_str().unwrap()]);
    let manifest = fs::read_to_string(dir.join("o/manifest.txt")).unwrap();
    let failed = manifest.lines().any(|l| l.ends_with("\tFAIL"));
    assert!(failed);
    assert_eq!(out.status.code(), Some(1));
    assert!(manifest.trim_end().ends_with("status = FAIL"));
}

#[test]
fn identical_configs_give_identical_tables() {
    let dir = scratch("determinism");
    let cfg = write_config(&dir, "experiment = linear-decay\nspatial_n = 3\nvelocity_n = 5\nsteps = 40\n");
    let mut bodies = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.join(run);
        let _ = kinetics(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
        bodies.push(fs::read(out_dir.join("decay.tsv")).unwrap());
    }
    assert!(!bodies[0].is_empty());
    assert_eq!(bodies[0], bodies[1]);
}
