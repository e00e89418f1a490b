use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use quadstep::config::RunConfig;
use quadstep::error::{Error, Result};
use quadstep::io::{file_checksum, load_classifier, load_policy, write_csv};
use quadstep::learner::ClassifierNet;
use quadstep::mpc::UserCommand;
use quadstep::policy::{PolicyNet, PolicyPlanner};
use quadstep::sim::{
    run_episode, Disturbance, EpisodeDeps, EpisodeMetrics, EpisodeSetup, GaitSchedule, MaskSource,
    NominalPlanner,
};
use quadstep::terrain::TerrainKind;

use crate::util;
use crate::util::fmt_f64;

/// Run the configured planner x disturbance x episode campaign and emit
/// the report tables.
#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Worker threads for episode-level parallelism (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlannerKind {
    /// Raibert nominal executed blindly, no mask.
    NominalRaibert,
    /// Raibert nominal remapped through the safety mask.
    MpcVfaNearest,
    /// Learned policy remapped through the safety mask.
    RlVfa,
    /// Learned policy, mask off.
    NaiveRl,
}

impl PlannerKind {
    fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "nominal-raibert" => Self::NominalRaibert,
            "mpc-vfa-nearest" => Self::MpcVfaNearest,
            "rl-vfa" => Self::RlVfa,
            "naive-rl" => Self::NaiveRl,
            other => {
                return Err(Error::config(format!(
                    "unknown planner {other:?} (expected nominal-raibert, mpc-vfa-nearest, rl-vfa or naive-rl)"
                )))
            }
        })
    }

    fn name(self) -> &'static str {
        match self {
            Self::NominalRaibert => "nominal-raibert",
            Self::MpcVfaNearest => "mpc-vfa-nearest",
            Self::RlVfa => "rl-vfa",
            Self::NaiveRl => "naive-rl",
        }
    }

    /// The masked planners follow the campaign's mask source; the
    /// baselines run unmasked by definition.
    fn mask(self, campaign: MaskSource) -> MaskSource {
        match self {
            Self::MpcVfaNearest | Self::RlVfa => campaign,
            Self::NominalRaibert | Self::NaiveRl => MaskSource::None,
        }
    }
}

struct EpisodeRow {
    planner: &'static str,
    disturbance: f64,
    episode: usize,
    seed: u64,
    kind: TerrainKind,
    metrics: EpisodeMetrics,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite metric"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn run(args: &EvalArgs) -> Result<()> {
    let cfg = util::load_config(args.config.as_deref())?;
    let campaign = &cfg.campaign;
    let planners: Vec<PlannerKind> = campaign
        .planners
        .iter()
        .map(|p| PlannerKind::parse(p))
        .collect::<Result<_>>()?;
    let kinds: Vec<TerrainKind> = campaign
        .kinds
        .iter()
        .map(|k| k.parse())
        .collect::<Result<_>>()?;
    let campaign_mask = util::parse_mask(&campaign.mask_source)?;

    let needs_learned_mask = campaign_mask == MaskSource::Learned
        && planners
            .iter()
            .any(|p| matches!(p, PlannerKind::MpcVfaNearest | PlannerKind::RlVfa));
    let classifier: Option<(ClassifierNet, f64)> = if campaign.classifier_checkpoint.is_empty() {
        if needs_learned_mask {
            return Err(Error::missing(
                "campaign.classifier_checkpoint (required by mask_source = learned)",
            ));
        }
        None
    } else {
        Some(load_classifier(&campaign.classifier_checkpoint)?)
    };
    let load_net = |path: &str, used_by: &str| -> Result<Option<PolicyNet>> {
        if path.is_empty() {
            return Err(Error::missing(format!(
                "campaign.{used_by} (required by the {used_by} planner)"
            )));
        }
        Ok(Some(load_policy(path)?))
    };
    let policy_net = if planners.contains(&PlannerKind::RlVfa) {
        load_net(&campaign.policy_checkpoint, "policy_checkpoint")?
    } else {
        None
    };
    let naive_net = if planners.contains(&PlannerKind::NaiveRl) {
        load_net(&campaign.naive_checkpoint, "naive_checkpoint")?
    } else {
        None
    };

    util::echo_config(&cfg, &args.out_dir)?;

    // one deps bundle per planner; immutable, shared across workers
    let deps: Vec<EpisodeDeps> = planners
        .iter()
        .map(|p| {
            EpisodeDeps::new(
                &cfg,
                GaitSchedule::trot(&cfg.gait),
                p.mask(campaign_mask),
                classifier.as_ref().map(|(n, _)| n),
            )
        })
        .collect::<Result<_>>()?;

    let mut tasks = Vec::new();
    for (pi, _) in planners.iter().enumerate() {
        for (di, _) in campaign.disturbances.iter().enumerate() {
            for ep in 0..campaign.episodes {
                tasks.push((pi, di, ep));
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(|e| Error::state(format!("thread pool: {e}")))?;
    let rows: Vec<EpisodeRow> = pool.install(|| {
        use rayon::prelude::*;
        tasks
            .par_iter()
            .map(|&(pi, di, ep)| {
                run_one(
                    &cfg,
                    &deps[pi],
                    planners[pi],
                    campaign.disturbances[di],
                    di,
                    ep,
                    &kinds,
                    policy_net.as_ref(),
                    naive_net.as_ref(),
                )
            })
            .collect::<Result<Vec<_>>>()
    })?;

    write_report(&args.out_dir, &planners, campaign, &rows)?;
    print_summary(&planners, &rows);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    cfg: &RunConfig,
    deps: &EpisodeDeps,
    planner: PlannerKind,
    magnitude: f64,
    dist_idx: usize,
    episode: usize,
    kinds: &[TerrainKind],
    policy_net: Option<&PolicyNet>,
    naive_net: Option<&PolicyNet>,
) -> Result<EpisodeRow> {
    let campaign = &cfg.campaign;
    let seed = util::derive_seed(
        campaign.seed,
        &[planner as u64, dist_idx as u64, episode as u64],
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let command = UserCommand {
        v_body: Vector3::new(
            rng.gen_range(0.1..0.35),
            rng.gen_range(-0.08..0.08),
            0.0,
        ),
        yaw_rate: rng.gen_range(-0.25..0.25),
        height: cfg.robot.stand_height,
    };
    let kind = kinds[episode % kinds.len()];
    let mut setup = EpisodeSetup::walk(
        kind,
        campaign.difficulty,
        command,
        campaign.footsteps,
        seed,
    );
    if magnitude > 0.0 && campaign.disturbance_count > 0 {
        let t1 = (setup.time_limit - 2.0).max(1.0);
        setup.disturbances =
            Disturbance::sample(&mut rng, campaign.disturbance_count, 0.5, t1, magnitude);
    }
    let metrics = match planner {
        PlannerKind::NominalRaibert | PlannerKind::MpcVfaNearest => {
            run_episode(deps, &setup, &mut NominalPlanner)?
        }
        PlannerKind::RlVfa => {
            let net = policy_net.expect("loaded before dispatch").clone();
            let mut p = PolicyPlanner::frozen(net, cfg.policy.clone(), false);
            run_episode(deps, &setup, &mut p)?
        }
        PlannerKind::NaiveRl => {
            let net = naive_net.expect("loaded before dispatch").clone();
            let mut p = PolicyPlanner::frozen(net, cfg.policy.clone(), true);
            run_episode(deps, &setup, &mut p)?
        }
    };
    Ok(EpisodeRow {
        planner: planner.name(),
        disturbance: magnitude,
        episode,
        seed,
        kind,
        metrics,
    })
}

fn write_report(
    dir: &Path,
    planners: &[PlannerKind],
    campaign: &quadstep::config::CampaignConfig,
    rows: &[EpisodeRow],
) -> Result<()> {
    let episode_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let m = &r.metrics;
            vec![
                r.planner.to_string(),
                fmt_f64(r.disturbance),
                r.episode.to_string(),
                r.seed.to_string(),
                r.kind.to_string(),
                (m.success as u8).to_string(),
                format!("{:?}", m.cause),
                m.footsteps.to_string(),
                m.queries.to_string(),
                m.remaps.to_string(),
                m.no_safe_cells.to_string(),
                m.tr_violations.to_string(),
                m.lc_violations.to_string(),
                m.kf_violations.to_string(),
                m.slips.to_string(),
                m.mpc_failures.to_string(),
                fmt_f64(m.sim_time),
                fmt_f64(mean(&m.err_vx)),
                fmt_f64(median(&m.err_vx)),
                fmt_f64(mean(&m.err_vy)),
                fmt_f64(mean(&m.err_wz)),
                fmt_f64(m.height_err_max),
            ]
        })
        .collect();
    let episodes_path = dir.join("episodes.csv");
    write_csv(
        &episodes_path,
        &[
            "planner",
            "disturbance",
            "episode",
            "seed",
            "kind",
            "success",
            "cause",
            "footsteps",
            "queries",
            "remaps",
            "no_safe_cells",
            "tr_violations",
            "lc_violations",
            "kf_violations",
            "slips",
            "mpc_failures",
            "sim_time",
            "mean_err_vx",
            "median_err_vx",
            "mean_err_vy",
            "mean_err_wz",
            "height_err_max",
        ],
        &episode_rows,
    )?;

    // Table-I analogue: violation percentages per planner over all footsteps
    let mut violation_rows = Vec::new();
    for p in planners {
        let sel: Vec<&EpisodeRow> = rows.iter().filter(|r| r.planner == p.name()).collect();
        let footsteps: usize = sel.iter().map(|r| r.metrics.footsteps).sum();
        let tr: usize = sel.iter().map(|r| r.metrics.tr_violations).sum();
        let lc: usize = sel.iter().map(|r| r.metrics.lc_violations).sum();
        let kf: usize = sel.iter().map(|r| r.metrics.kf_violations).sum();
        let pct = |v: usize| 100.0 * v as f64 / footsteps.max(1) as f64;
        violation_rows.push(vec![
            p.name().to_string(),
            footsteps.to_string(),
            tr.to_string(),
            lc.to_string(),
            kf.to_string(),
            fmt_f64(pct(tr)),
            fmt_f64(pct(lc)),
            fmt_f64(pct(kf)),
            fmt_f64(pct(tr + lc + kf)),
        ]);
    }
    write_csv(
        &dir.join("violations.csv"),
        &[
            "planner",
            "footsteps",
            "tr",
            "lc",
            "kf",
            "tr_pct",
            "lc_pct",
            "kf_pct",
            "total_pct",
        ],
        &violation_rows,
    )?;

    // Fig.-3 analogue: per-episode mean |error| distributions per axis
    let mut tracking_rows = Vec::new();
    for p in planners {
        for (axis, pick) in [
            ("vx", 0usize),
            ("vy", 1),
            ("wz", 2),
        ] {
            let per_episode: Vec<f64> = rows
                .iter()
                .filter(|r| r.planner == p.name())
                .map(|r| match pick {
                    0 => mean(&r.metrics.err_vx),
                    1 => mean(&r.metrics.err_vy),
                    _ => mean(&r.metrics.err_wz),
                })
                .collect();
            tracking_rows.push(vec![
                p.name().to_string(),
                axis.to_string(),
                fmt_f64(median(&per_episode)),
                fmt_f64(mean(&per_episode)),
                fmt_f64(variance(&per_episode)),
            ]);
        }
    }
    write_csv(
        &dir.join("tracking.csv"),
        &["planner", "axis", "median", "mean", "variance"],
        &tracking_rows,
    )?;

    // Fig.-4 analogue: success fraction per (planner, magnitude)
    let mut by_cell: BTreeMap<(String, String), (usize, usize)> = BTreeMap::new();
    for r in rows {
        let cell = by_cell
            .entry((r.planner.to_string(), fmt_f64(r.disturbance)))
            .or_insert((0, 0));
        cell.0 += 1;
        cell.1 += r.metrics.success as usize;
    }
    let mut disturbance_rows: Vec<Vec<String>> = Vec::new();
    for p in planners {
        for d in &campaign.disturbances {
            let (n, s) = by_cell
                .get(&(p.name().to_string(), fmt_f64(*d)))
                .copied()
                .unwrap_or((0, 0));
            disturbance_rows.push(vec![
                p.name().to_string(),
                fmt_f64(*d),
                n.to_string(),
                s.to_string(),
                fmt_f64(s as f64 / n.max(1) as f64),
            ]);
        }
    }
    write_csv(
        &dir.join("disturbance.csv"),
        &["planner", "magnitude", "episodes", "successes", "success_rate"],
        &disturbance_rows,
    )?;

    // aggregates above are recomputable from episodes.csv; record its hash
    let checksum = file_checksum(&episodes_path)?;
    write_csv(
        &dir.join("checksums.csv"),
        &["file", "fnv1a64"],
        &[vec!["episodes.csv".into(), format!("{checksum:016x}")]],
    )?;
    Ok(())
}

fn print_summary(planners: &[PlannerKind], rows: &[EpisodeRow]) {
    println!("planner            episodes success  TR%    LC%    KF%    med|err_vx|");
    for p in planners {
        let sel: Vec<&EpisodeRow> = rows.iter().filter(|r| r.planner == p.name()).collect();
        let n = sel.len();
        let ok = sel.iter().filter(|r| r.metrics.success).count();
        let footsteps: usize = sel.iter().map(|r| r.metrics.footsteps).sum::<usize>().max(1);
        let pct = |f: fn(&EpisodeMetrics) -> usize| {
            100.0 * sel.iter().map(|r| f(&r.metrics)).sum::<usize>() as f64 / footsteps as f64
        };
        let med: Vec<f64> = sel.iter().map(|r| mean(&r.metrics.err_vx)).collect();
        println!(
            "{:<18} {:>8} {:>7.2} {:>6.2} {:>6.2} {:>6.2} {:>11.4}",
            p.name(),
            n,
            ok as f64 / n.max(1) as f64,
            pct(|m| m.tr_violations),
            pct(|m| m.lc_violations),
            pct(|m| m.kf_violations),
            median(&med),
        );
    }
}
