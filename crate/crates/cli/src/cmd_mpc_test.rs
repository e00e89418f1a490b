use std::path::PathBuf;

use clap::Args;
use nalgebra::Vector3;

use quadstep::error::{Error, Result};
use quadstep::io::write_csv;
use quadstep::mpc::{pyramid_violation, MpcController, SrbmParams, SrbmState, UserCommand};
use quadstep::sim::{run_episode, EpisodeDeps, EpisodeSetup, GaitSchedule, MaskSource, NominalPlanner};
use quadstep::terrain::TerrainKind;

use crate::util;
use crate::util::fmt_f64;

/// MPC regression scenarios: steady-stand force split, closed-loop hover,
/// and flat-ground velocity tracking. Nonzero exit when a check fails.
#[derive(Args, Debug)]
pub struct MpcTestArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Optional CSV with one row per check.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

struct Check {
    scenario: &'static str,
    metric: &'static str,
    value: f64,
    threshold: f64,
    pass: bool,
}

impl Check {
    fn below(scenario: &'static str, metric: &'static str, value: f64, threshold: f64) -> Self {
        Self {
            scenario,
            metric,
            value,
            threshold,
            pass: value <= threshold,
        }
    }
}

pub fn run(args: &MpcTestArgs) -> Result<()> {
    let cfg = util::load_config(args.config.as_deref())?;
    let mut checks = Vec::new();

    // steady stand: all four feet loaded, command = hover at stand height
    let params = SrbmParams::from_config(&cfg.robot);
    let controller = MpcController::new(cfg.mpc.clone(), params.clone());
    let op = SrbmState::upright(Vector3::new(0.0, 0.0, cfg.robot.stand_height));
    let cmd = UserCommand::hover(cfg.robot.stand_height);
    let schedule = vec![[true; 4]; cfg.mpc.horizon];
    let footholds = [
        Vector3::new(cfg.robot.hip_x, cfg.robot.hip_y, 0.0),
        Vector3::new(cfg.robot.hip_x, -cfg.robot.hip_y, 0.0),
        Vector3::new(-cfg.robot.hip_x, cfg.robot.hip_y, 0.0),
        Vector3::new(-cfg.robot.hip_x, -cfg.robot.hip_y, 0.0),
    ];
    let sol = controller.control(&op, &cmd, &schedule, &footholds)?;
    if !sol.converged {
        return Err(Error::numerical("stand OCP did not converge"));
    }
    let quarter = params.mass * params.gravity.norm() / 4.0;
    let worst_split = sol.forces[0]
        .iter()
        .map(|f| (f.z - quarter).abs())
        .fold(0.0, f64::max);
    checks.push(Check::below("stand", "per_foot_fz_error_n", worst_split, 1e-3));
    let pyramid = pyramid_violation(
        &sol.forces,
        &schedule,
        params.friction,
        cfg.mpc.f_min,
        cfg.mpc.f_max,
    );
    checks.push(Check::below("stand", "pyramid_violation_n", pyramid, 1e-8));

    // closed-loop hover on flat ground
    let hover_deps = EpisodeDeps::new(
        &cfg,
        GaitSchedule::stand(&cfg.gait),
        MaskSource::None,
        None,
    )?;
    let hover = EpisodeSetup::hover(cfg.robot.stand_height, 10.0, 3);
    let m = run_episode(&hover_deps, &hover, &mut NominalPlanner)?;
    checks.push(Check::below("hover", "height_err_max_m", m.height_err_max, 5e-3));
    checks.push(Check::below("hover", "roll_pitch_max_rad", m.roll_pitch_max, 0.05));

    // flat walk at 0.3 m/s: loose tracking bound, no solver failures
    let walk_deps = EpisodeDeps::new(
        &cfg,
        GaitSchedule::trot(&cfg.gait),
        MaskSource::None,
        None,
    )?;
    let command = UserCommand {
        v_body: Vector3::new(0.3, 0.0, 0.0),
        yaw_rate: 0.0,
        height: cfg.robot.stand_height,
    };
    let walk = EpisodeSetup::walk(TerrainKind::Flat, 0.0, command, 16, 11);
    let m = run_episode(&walk_deps, &walk, &mut NominalPlanner)?;
    let mean_err = m.err_vx.iter().sum::<f64>() / m.err_vx.len().max(1) as f64;
    checks.push(Check::below("walk", "mean_err_vx_mps", mean_err, 0.25));
    checks.push(Check::below("walk", "mpc_failures", m.mpc_failures as f64, 0.0));
    let completed = matches!(m.cause, quadstep::sim::TerminationCause::Completed);
    checks.push(Check {
        scenario: "walk",
        metric: "completed",
        value: completed as u8 as f64,
        threshold: 1.0,
        pass: completed,
    });

    for c in &checks {
        println!(
            "{} {:<24} {:>14.9} (threshold {:>12.9}) {}",
            c.scenario,
            c.metric,
            c.value,
            c.threshold,
            if c.pass { "PASS" } else { "FAIL" }
        );
    }
    if let Some(out) = &args.out {
        let rows: Vec<Vec<String>> = checks
            .iter()
            .map(|c| {
                vec![
                    c.scenario.to_string(),
                    c.metric.to_string(),
                    fmt_f64(c.value),
                    fmt_f64(c.threshold),
                    (c.pass as u8).to_string(),
                ]
            })
            .collect();
        write_csv(out, &["scenario", "metric", "value", "threshold", "pass"], &rows)?;
    }
    if checks.iter().any(|c| !c.pass) {
        return Err(Error::numerical("one or more regression checks failed"));
    }
    Ok(())
}
