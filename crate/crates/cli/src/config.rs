//! `key = value` run configuration.

use kinetics_core::SimParams;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("configuration is empty")]
    Empty,
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("missing required key `{key}`")]
    Missing { key: &'static str },
    #[error("`{key}`: expected {expected}, got `{value}`")]
    Type {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("`{key}` out of range: {reason}")]
    Range { key: String, reason: String },
}

impl ConfigError {
    /// The offending key, if the error concerns one.
    pub fn field(&self) -> Option<&str> {
        match self {
            ConfigError::UnknownKey { key, .. } | ConfigError::Duplicate { key, .. } => Some(key),
            ConfigError::Type { key, .. } | ConfigError::Range { key, .. } => Some(key),
            ConfigError::Missing { key } => Some(key),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Experiment {
    TrajectoryAudit,
    OperatorAudit,
    EllipticAudit,
    LinearDecay,
    NonlinearDecay,
    DensitySandwich,
    ReverseReflectionDemo,
}

impl Experiment {
    pub const ALL: [Experiment; 7] = [
        Experiment::TrajectoryAudit,
        Experiment::OperatorAudit,
        Experiment::EllipticAudit,
        Experiment::LinearDecay,
        Experiment::NonlinearDecay,
        Experiment::DensitySandwich,
        Experiment::ReverseReflectionDemo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::TrajectoryAudit => "trajectory-audit",
            Experiment::OperatorAudit => "operator-audit",
            Experiment::EllipticAudit => "elliptic-audit",
            Experiment::LinearDecay => "linear-decay",
            Experiment::NonlinearDecay => "nonlinear-decay",
            Experiment::DensitySandwich => "density-sandwich",
            Experiment::ReverseReflectionDemo => "reverse-reflection-demo",
        }
    }

    pub fn summary(self) -> &'static str {
        match self {
            Experiment::TrajectoryAudit => "exact characteristics, exit times, velocity-lemma clauses, continuity, Jacobian",
            Experiment::OperatorAudit => "kernel symmetry and rows, null-space residuals, dissipation, Monte Carlo check, Gram table",
            Experiment::EllipticAudit => "Neumann and tangential Poisson convergence, boundary terms",
            Experiment::LinearDecay => "linear solver decay fit and conservation",
            Experiment::NonlinearDecay => "Picard iteration, contraction and sup-norm decay fit",
            Experiment::DensitySandwich => "nonlinear run mapped to the lab frame, density bounds",
            Experiment::ReverseReflectionDemo => "discontinuity of the reverse reflection law",
        }
    }

    fn is_decay(self) -> bool {
        matches!(
            self,
            Experiment::LinearDecay | Experiment::NonlinearDecay | Experiment::DensitySandwich
        )
    }
}

impl FromStr for Experiment {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        Experiment::ALL.into_iter().find(|e| e.name() == s).ok_or(())
    }
}

/// Everything a run needs. Grid and sample counts not used by the chosen
/// experiment are carried along so the file round-trips.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub params: SimParams,
    pub spatial_n: usize,
    pub velocity_n: usize,
    /// Time steps over `[0, tau_fraction τ_max]`; fixes `Δτ`.
    pub steps: usize,
    pub tau_fraction: f64,
    pub amplitude: f64,
    pub picard_max_iter: usize,
    pub picard_tol: f64,
    pub smallness: f64,
    pub gamma_samples: usize,
    pub gamma_stride: usize,
    pub kappa: f64,
    pub n_cap: f64,
    pub flow_samples: usize,
    pub exit_samples: usize,
    pub lemma_samples: usize,
    pub jacobian_samples: usize,
    pub residual_levels: Vec<usize>,
    pub slices: usize,
    pub mc_velocities: usize,
    pub mc_samples: usize,
    pub elliptic_levels: Vec<usize>,
    pub output: PathBuf,
}

impl RunConfig {
    pub fn defaults(experiment: Experiment) -> Self {
        let decay = experiment.is_decay();
        let linear = experiment == Experiment::LinearDecay;
        let h = match experiment {
            Experiment::LinearDecay => 0.1,
            Experiment::NonlinearDecay | Experiment::DensitySandwich => 0.05,
            _ => 0.5,
        };
        let base = SimParams::default();
        RunConfig {
            experiment,
            params: SimParams {
                h,
                eta_max: if decay { 5.0 } else { base.eta_max },
                ..base
            },
            spatial_n: if linear { 5 } else { 9 },
            velocity_n: if linear { 9 } else { 11 },
            steps: if linear { 400 } else { 360 },
            tau_fraction: 0.9,
            amplitude: 1e-3,
            picard_max_iter: 5,
            picard_tol: 1e-6,
            smallness: 1e-2,
            gamma_samples: 256,
            gamma_stride: 8,
            kappa: 0.1,
            n_cap: 2.0,
            flow_samples: 1000,
            exit_samples: 10_000,
            lemma_samples: 1000,
            jacobian_samples: 100,
            residual_levels: vec![15, 21, 27],
            slices: 100,
            mc_velocities: 10,
            mc_samples: 200_000,
            elliptic_levels: vec![2, 4, 8],
            output: PathBuf::from(format!("runs/{}", experiment.name())),
        }
    }

    /// `Δτ` implied by the step count.
    pub fn dtau(&self) -> f64 {
        self.tau_fraction * self.params.tau_max() / self.steps as f64
    }

    /// Range checks for every numeric field, before anything runs.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.params.validate().map_err(|e| match e {
            kinetics_core::Error::InvalidParameter { name, reason } => range(name, reason),
            other => range("params", other.to_string()),
        })?;
        let positive = [
            ("spatial_n", self.spatial_n),
            ("velocity_n", self.velocity_n),
            ("steps", self.steps),
            ("picard_max_iter", self.picard_max_iter),
            ("gamma_samples", self.gamma_samples),
            ("gamma_stride", self.gamma_stride),
            ("flow_samples", self.flow_samples),
            ("exit_samples", self.exit_samples),
            ("lemma_samples", self.lemma_samples),
            ("jacobian_samples", self.jacobian_samples),
            ("slices", self.slices),
            ("mc_velocities", self.mc_velocities),
            ("mc_samples", self.mc_samples),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(range(key, "must be at least 1".into()));
            }
        }
        for (key, v) in [("spatial_n", self.spatial_n), ("velocity_n", self.velocity_n)] {
            if v % 2 == 0 || v < 3 {
                return Err(range(key, format!("must be odd and at least 3, got {v}")));
            }
        }
        if self.steps < 20 {
            return Err(range("steps", format!("need at least 20 for a decay fit, got {}", self.steps)));
        }
        if !(self.tau_fraction > 0.0 && self.tau_fraction < 1.0) {
            return Err(range("tau_fraction", format!("must lie in (0, 1), got {}", self.tau_fraction)));
        }
        for (key, v) in [
            ("amplitude", self.amplitude),
            ("picard_tol", self.picard_tol),
            ("smallness", self.smallness),
            ("kappa", self.kappa),
            ("n_cap", self.n_cap),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(range(key, format!("must be positive, got {v}")));
            }
        }
        if self.amplitude > self.smallness {
            return Err(range(
                "amplitude",
                format!("{} exceeds smallness {}", self.amplitude, self.smallness),
            ));
        }
        if self.kappa >= 1.0 {
            return Err(range("kappa", format!("must be below 1, got {}", self.kappa)));
        }
        if self.n_cap <= self.params.h {
            return Err(range("n_cap", format!("must exceed h = {}", self.params.h)));
        }
        check_levels("residual_levels", &self.residual_levels, |n| n >= 3 && n % 2 == 1, "odd and at least 3")?;
        check_levels("elliptic_levels", &self.elliptic_levels, |n| n >= 2 && n % 2 == 0, "even and at least 2")?;
        if self.elliptic_levels.len() < 2 {
            return Err(range("elliptic_levels", "need at least two levels".into()));
        }
        Ok(())
    }
}

fn range(key: &str, reason: String) -> ConfigError {
    ConfigError::Range {
        key: key.to_string(),
        reason,
    }
}

fn check_levels(key: &str, levels: &[usize], ok: impl Fn(usize) -> bool, what: &str) -> Result<(), ConfigError> {
    if levels.is_empty() {
        return Err(range(key, "empty list".into()));
    }
    if let Some(&bad) = levels.iter().find(|&&n| !ok(n)) {
        return Err(range(key, format!("each level must be {what}, got {bad}")));
    }
    if levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(range(key, "levels must increase".into()));
    }
    Ok(())
}

const KEYS: [&str; 28] = [
    "experiment",
    "h",
    "beta",
    "eta_max",
    "seed",
    "spatial_n",
    "velocity_n",
    "steps",
    "tau_fraction",
    "amplitude",
    "picard_max_iter",
    "picard_tol",
    "smallness",
    "gamma_samples",
    "gamma_stride",
    "kappa",
    "n_cap",
    "flow_samples",
    "exit_samples",
    "lemma_samples",
    "jacobian_samples",
    "residual_levels",
    "slices",
    "mc_velocities",
    "mc_samples",
    "elliptic_levels",
    "output",
    // derived, accepted on input only if consistent
    "dtau",
];

fn typed<T: FromStr>(key: &str, value: &str, expected: &'static str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Type {
        key: key.to_string(),
        value: value.to_string(),
        expected,
    })
}

fn float(key: &str, value: &str) -> Result<f64, ConfigError> {
    let v: f64 = typed(key, value, "a number")?;
    if !v.is_finite() {
        return Err(range(key, format!("must be finite, got {value}")));
    }
    Ok(v)
}

fn list(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    value
        .split(',')
        .map(|s| typed(key, s.trim(), "a comma-separated list of integers"))
        .collect()
}

/// Parse `key = value` lines; `#` starts a comment. Keys left out take the
/// defaults of the named experiment.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut entries: Vec<(usize, &str, &str)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: raw.trim().to_string(),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey {
                line: i + 1,
                key: key.to_string(),
            });
        }
        if entries.iter().any(|(_, k, _)| *k == key) {
            return Err(ConfigError::Duplicate {
                line: i + 1,
                key: key.to_string(),
            });
        }
        entries.push((i + 1, key, value));
    }
    if entries.is_empty() {
        return Err(ConfigError::Empty);
    }
    let name = entries
        .iter()
        .find(|(_, k, _)| *k == "experiment")
        .map(|(_, _, v)| *v)
        .ok_or(ConfigError::Missing { key: "experiment" })?;
    let experiment: Experiment = name.parse().map_err(|_| ConfigError::Type {
        key: "experiment".into(),
        value: name.into(),
        expected: "an experiment name (see list-experiments)",
    })?;
    let mut cfg = RunConfig::defaults(experiment);
    let mut dtau = None;
    for &(_, key, value) in &entries {
        match key {
            "experiment" => {}
            "h" => cfg.params.h = float(key, value)?,
            "beta" => cfg.params.beta = float(key, value)?,
            "eta_max" => cfg.params.eta_max = float(key, value)?,
            "seed" => cfg.params.seed = typed(key, value, "a non-negative integer")?,
            "spatial_n" => cfg.spatial_n = typed(key, value, "a non-negative integer")?,
            "velocity_n" => cfg.velocity_n = typed(key, value, "a non-negative integer")?,
            "steps" => cfg.steps = typed(key, value, "a non-negative integer")?,
            "tau_fraction" => cfg.tau_fraction = float(key, value)?,
            "amplitude" => cfg.amplitude = float(key, value)?,
            "picard_max_iter" => cfg.picard_max_iter = typed(key, value, "a non-negative integer")?,
            "picard_tol" => cfg.picard_tol = float(key, value)?,
            "smallness" => cfg.smallness = float(key, value)?,
            "gamma_samples" => cfg.gamma_samples = typed(key, value, "a non-negative integer")?,
            "gamma_stride" => cfg.gamma_stride = typed(key, value, "a non-negative integer")?,
            "kappa" => cfg.kappa = float(key, value)?,
            "n_cap" => cfg.n_cap = float(key, value)?,
            "flow_samples" => cfg.flow_samples = typed(key, value, "a non-negative integer")?,
            "exit_samples" => cfg.exit_samples = typed(key, value, "a non-negative integer")?,
            "lemma_samples" => cfg.lemma_samples = typed(key, value, "a non-negative integer")?,
            "jacobian_samples" => cfg.jacobian_samples = typed(key, value, "a non-negative integer")?,
            "residual_levels" => cfg.residual_levels = list(key, value)?,
            "slices" => cfg.slices = typed(key, value, "a non-negative integer")?,
            "mc_velocities" => cfg.mc_velocities = typed(key, value, "a non-negative integer")?,
            "mc_samples" => cfg.mc_samples = typed(key, value, "a non-negative integer")?,
            "elliptic_levels" => cfg.elliptic_levels = list(key, value)?,
            "output" => cfg.output = PathBuf::from(value),
            "dtau" => dtau = Some(float(key, value)?),
            _ => unreachable!("key list and match arms agree"),
        }
    }
    cfg.validate()?;
    if let Some(d) = dtau {
        let implied = cfg.dtau();
        if (d - implied).abs() > 1e-9 * implied {
            return Err(range(
                "dtau",
                format!("{d} disagrees with tau_fraction, h and steps, which give {implied}"),
            ));
        }
    }
    Ok(cfg)
}

fn join(levels: &[usize]) -> String {
    levels.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(", ")
}

/// Every key, in a form `parse_config` reads back to an equal config.
pub fn serialize(cfg: &RunConfig) -> String {
    let mut s = String::new();
    let p = &cfg.params;
    let _ = writeln!(s, "experiment = {}", cfg.experiment.name());
    let _ = writeln!(s, "h = {:?}", p.h);
    let _ = writeln!(s, "beta = {:?}", p.beta);
    let _ = writeln!(s, "eta_max = {:?}", p.eta_max);
    let _ = writeln!(s, "seed = {}", p.seed);
    let _ = writeln!(s, "spatial_n = {}", cfg.spatial_n);
    let _ = writeln!(s, "velocity_n = {}", cfg.velocity_n);
    let _ = writeln!(s, "steps = {}", cfg.steps);
    let _ = writeln!(s, "tau_fraction = {:?}", cfg.tau_fraction);
    let _ = writeln!(s, "dtau = {:?}", cfg.dtau());
    let _ = writeln!(s, "amplitude = {:?}", cfg.amplitude);
    let _ = writeln!(s, "picard_max_iter = {}", cfg.picard_max_iter);
    let _ = writeln!(s, "picard_tol = {:?}", cfg.picard_tol);
    let _ = writeln!(s, "smallness = {:?}", cfg.smallness);
    let _ = writeln!(s, "gamma_samples = {}", cfg.gamma_samples);
    let _ = writeln!(s, "gamma_stride = {}", cfg.gamma_stride);
    let _ = writeln!(s, "kappa = {:?}", cfg.kappa);
    let _ = writeln!(s, "n_cap = {:?}", cfg.n_cap);
    let _ = writeln!(s, "flow_samples = {}", cfg.flow_samples);
    let _ = writeln!(s, "exit_samples = {}", cfg.exit_samples);
    let _ = writeln!(s, "lemma_samples = {}", cfg.lemma_samples);
    let _ = writeln!(s, "jacobian_samples = {}", cfg.jacobian_samples);
    let _ = writeln!(s, "residual_levels = {}", join(&cfg.residual_levels));
    let _ = writeln!(s, "slices = {}", cfg.slices);
    let _ = writeln!(s, "mc_velocities = {}", cfg.mc_velocities);
    let _ = writeln!(s, "mc_samples = {}", cfg.mc_samples);
    let _ = writeln!(s, "elliptic_levels = {}", join(&cfg.elliptic_levels));
    let _ = writeln!(s, "output = {}", cfg.output.display());
    s
}
