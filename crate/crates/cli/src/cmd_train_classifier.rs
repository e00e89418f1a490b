use std::path::PathBuf;

use clap::Args;

use quadstep::error::{Error, Result};
use quadstep::io::{read_dataset, save_classifier, write_csv};
use quadstep::learner::{train, ClassifierNet, LossMode, Sample};

use crate::util;

/// Train the safety-mask classifier (or its autoencoder variant) on a
/// labeled dataset.
#[derive(Args, Debug)]
pub struct TrainClassifierArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Labeled dataset (.qsds).
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint output (.qscn).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// classify = safe-mask segmentation; reconstruct = heightmap
    /// autoencoder (the unmasked baseline's latent source).
    #[arg(long, default_value = "classify")]
    pub mode: String,
    /// Per-epoch metrics CSV; defaults to the checkpoint path with a
    /// .csv extension.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

pub fn run(args: &TrainClassifierArgs) -> Result<()> {
    let cfg = util::load_config(args.config.as_deref())?;
    let ds = read_dataset(&args.data)?;
    if ds.records.is_empty() {
        return Err(Error::config(format!(
            "{} holds no records",
            args.data.display()
        )));
    }
    let mode = match args.mode.as_str() {
        "classify" => LossMode::Classify {
            dice_weight: cfg.classifier.dice_weight,
            smoothing: cfg.classifier.dice_smoothing,
        },
        "reconstruct" => LossMode::Reconstruct,
        other => {
            return Err(Error::config(format!(
                "unknown mode {other:?} (expected classify or reconstruct)"
            )))
        }
    };
    let samples: Vec<Sample> = ds
        .records
        .iter()
        .map(|r| {
            let mut s = r.sample();
            if matches!(mode, LossMode::Reconstruct) {
                s.target = s.heights.clone();
            }
            s
        })
        .collect();

    let mut net = ClassifierNet::from_run_config(&cfg.classifier, ds.rows, ds.cols, args.seed)?;
    let history = train(&mut net, &samples, &cfg.classifier, mode, args.seed)?;
    save_classifier(&args.out, &net, cfg.classifier.decision_threshold)?;

    let metrics_path = args
        .metrics
        .clone()
        .unwrap_or_else(|| args.out.with_extension("csv"));
    let rows: Vec<Vec<String>> = history
        .epochs
        .iter()
        .map(|e| {
            vec![
                e.epoch.to_string(),
                util::fmt_f64(e.train_loss),
                util::fmt_f64(e.val_loss),
                util::fmt_f64(e.val_accuracy),
                util::fmt_f64(e.false_safe),
                util::fmt_f64(e.false_unsafe),
            ]
        })
        .collect();
    write_csv(
        &metrics_path,
        &[
            "epoch",
            "train_loss",
            "val_loss",
            "val_accuracy",
            "false_safe",
            "false_unsafe",
        ],
        &rows,
    )?;

    let last = history.epochs.last().expect("at least one epoch");
    println!(
        "trained on {} records ({} epochs); val accuracy {:.4}, false-safe {:.4}, false-unsafe {:.4}",
        ds.records.len(),
        history.epochs.len(),
        last.val_accuracy,
        last.false_safe,
        last.false_unsafe,
    );
    println!(
        "checkpoint {} | metrics {}",
        args.out.display(),
        metrics_path.display()
    );
    Ok(())
}
