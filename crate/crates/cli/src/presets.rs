//! Map a config onto the audit suites.

use crate::config::{Experiment, RunConfig};
use kinetics_core::audit::{
    elliptic_audit, linear_decay_study, nonlinear_decay_study, operator_audit, reverse_reflection_demo,
    trajectory_audit, DecayStudyConfig, EllipticAuditConfig, OperatorAuditConfig, Outcome, TrajectoryAuditConfig,
};
use kinetics_core::solver::{GammaConfig, PicardConfig};
use kinetics_core::Result;

fn decay_config(cfg: &RunConfig) -> DecayStudyConfig {
    DecayStudyConfig {
        params: cfg.params,
        spatial_n: cfg.spatial_n,
        velocity_n: cfg.velocity_n,
        steps: cfg.steps,
        tau_fraction: cfg.tau_fraction,
        amplitude: cfg.amplitude,
        picard: PicardConfig {
            m_max: cfg.picard_max_iter,
            tol: cfg.picard_tol,
            smallness: cfg.smallness,
            gamma: GammaConfig {
                samples: cfg.gamma_samples,
                stride: cfg.gamma_stride,
            },
        },
    }
}

/// Run the experiment named in `cfg`.
pub fn execute(cfg: &RunConfig) -> Result<Outcome> {
    let p = &cfg.params;
    match cfg.experiment {
        Experiment::TrajectoryAudit => trajectory_audit(&TrajectoryAuditConfig {
            h: p.h,
            kappa: cfg.kappa,
            n_cap: cfg.n_cap,
            flow_samples: cfg.flow_samples,
            exit_samples: cfg.exit_samples,
            lemma_samples: cfg.lemma_samples,
            jacobian_samples: cfg.jacobian_samples,
            seed: p.seed,
        }),
        Experiment::OperatorAudit => {
            let levels = cfg.residual_levels.clone();
            let target_level = if levels.contains(&21) { 21 } else { levels[levels.len() / 2] };
            operator_audit(&OperatorAuditConfig {
                eta_max: p.eta_max,
                target_level,
                slice_level: levels[0],
                residual_levels: levels,
                slices: cfg.slices,
                mc_velocities: cfg.mc_velocities,
                mc_samples: cfg.mc_samples,
                seed: p.seed,
                ..OperatorAuditConfig::default()
            })
        }
        Experiment::EllipticAudit => elliptic_audit(&EllipticAuditConfig {
            levels: cfg.elliptic_levels.clone(),
            h: p.h,
            seed: p.seed,
        }),
        Experiment::LinearDecay => linear_decay_study(&decay_config(cfg)).map(|(out, _)| out),
        Experiment::NonlinearDecay => nonlinear_decay_study(&decay_config(cfg), false),
        Experiment::DensitySandwich => nonlinear_decay_study(&decay_config(cfg), true),
        Experiment::ReverseReflectionDemo => reverse_reflection_demo(p.h, 1.0, &[1e-2, 1e-3, 1e-4]),
    }
}
