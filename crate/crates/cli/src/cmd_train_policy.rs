use std::path::PathBuf;

use clap::Args;

use quadstep::error::{Error, Result};
use quadstep::io::{load_classifier, save_policy, write_csv};
use quadstep::learner::ClassifierNet;
use quadstep::policy::{train_policy, TrainSchedule};
use quadstep::sim::MaskSource;

use crate::util;

/// Train a footstep policy, masked (rl-vfa) or unmasked (naive-rl).
#[derive(Args, Debug)]
pub struct TrainPolicyArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint output (.qspn).
    #[arg(long)]
    pub out: PathBuf,
    /// rl-vfa (masked) or naive-rl (mask off, shaped penalties on).
    #[arg(long, default_value = "rl-vfa")]
    pub mode: String,
    /// oracle, learned or none.
    #[arg(long, default_value = "oracle")]
    pub mask_source: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 40)]
    pub iters: usize,
    #[arg(long, default_value_t = 8)]
    pub episodes_per_iter: usize,
    #[arg(long, default_value_t = 60)]
    pub footsteps: usize,
    /// Comma-separated terrain kinds sampled during training.
    #[arg(long, default_value = "random-rough,steps")]
    pub kinds: String,
    /// Classifier checkpoint: the mask for --mask-source learned, and the
    /// latent source in either mode.
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    /// Training-curve CSV; defaults to the checkpoint path with a .csv
    /// extension.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

pub fn run(args: &TrainPolicyArgs) -> Result<()> {
    let cfg = util::load_config(args.config.as_deref())?;
    let mask = util::parse_mask(&args.mask_source)?;
    let naive = match args.mode.as_str() {
        "rl-vfa" => false,
        "naive-rl" => true,
        other => {
            return Err(Error::config(format!(
                "unknown mode {other:?} (expected rl-vfa or naive-rl)"
            )))
        }
    };
    if naive && mask != MaskSource::None {
        return Err(Error::config("naive-rl trains with --mask-source none"));
    }
    if !naive && mask == MaskSource::None {
        return Err(Error::config(
            "rl-vfa needs --mask-source oracle or learned",
        ));
    }
    let classifier: Option<(ClassifierNet, f64)> = match &args.classifier {
        Some(path) => Some(load_classifier(path)?),
        None => None,
    };
    if mask == MaskSource::Learned && classifier.is_none() {
        return Err(Error::missing(
            "--mask-source learned needs --classifier <checkpoint>",
        ));
    }
    let schedule = TrainSchedule {
        iterations: args.iters,
        episodes_per_iter: args.episodes_per_iter,
        footsteps_per_episode: args.footsteps,
        kinds: util::parse_kind_list(&args.kinds)?,
        ..TrainSchedule::default()
    };
    let (net, report) = train_policy(
        &cfg,
        classifier.as_ref().map(|(n, _)| n),
        mask,
        naive,
        &schedule,
        args.seed,
    )?;
    save_policy(&args.out, &net)?;

    let curve_path = args
        .curve
        .clone()
        .unwrap_or_else(|| args.out.with_extension("csv"));
    let rows: Vec<Vec<String>> = report
        .iterations
        .iter()
        .map(|s| {
            vec![
                s.iteration.to_string(),
                util::fmt_f64(s.difficulty),
                util::fmt_f64(s.success_rate),
                s.footsteps.to_string(),
                util::fmt_f64(s.tr_rate),
                util::fmt_f64(s.lc_rate),
                util::fmt_f64(s.kf_rate),
                util::fmt_f64(s.mean_track_err),
                util::fmt_f64(s.mean_reward),
                util::fmt_f64(s.loss),
                util::fmt_f64(s.entropy),
                util::fmt_f64(s.clip_fraction),
            ]
        })
        .collect();
    write_csv(
        &curve_path,
        &[
            "iteration",
            "difficulty",
            "success_rate",
            "footsteps",
            "tr_violation_pct",
            "lc_violation_pct",
            "kf_violation_pct",
            "mean_track_err",
            "mean_reward",
            "loss",
            "entropy",
            "clip_fraction",
        ],
        &rows,
    )?;

    let last = report.iterations.last().expect("at least one iteration");
    println!(
        "trained {} iterations ({} mode, {} mask); final success rate {:.2}, TR {:.2}%, LC {:.2}%, KF {:.2}%",
        report.iterations.len(),
        args.mode,
        args.mask_source,
        last.success_rate,
        last.tr_rate,
        last.lc_rate,
        last.kf_rate,
    );
    println!(
        "checkpoint {} | curve {}",
        args.out.display(),
        curve_path.display()
    );
    Ok(())
}
