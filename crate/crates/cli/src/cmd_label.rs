use std::path::PathBuf;

use clap::Args;
use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use quadstep::error::{Error, Result};
use quadstep::io::{DatasetRecord, DatasetWriter};
use quadstep::safety::{HipPose, SafetyEvaluator};
use quadstep::sim::swing_query;
use quadstep::terrain::{TerrainField, TerrainKind};

use crate::util;

/// How many records are drawn from one generated field before the next
/// is rolled; bounds the per-kind imbalance.
const RECORDS_PER_FIELD: u64 = 16;

/// Sample labeled foothold records into a .qsds dataset.
#[derive(Args, Debug)]
pub struct LabelArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of records to label.
    #[arg(long)]
    pub count: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Comma-separated terrain kinds to cycle through.
    #[arg(long, default_value = "flat,steps,stairs,gaps,random-rough")]
    pub kinds: String,
}

pub fn run(args: &LabelArgs) -> Result<()> {
    if args.count == 0 {
        return Err(Error::config("--count must be positive"));
    }
    let cfg = util::load_config(args.config.as_deref())?;
    let kinds = util::parse_kind_list(&args.kinds)?;
    if kinds.is_empty() {
        return Err(Error::config("--kinds must name at least one terrain kind"));
    }
    let evaluator = SafetyEvaluator::new(&cfg.robot, cfg.safety, cfg.gait);
    let mut writer = DatasetWriter::create(
        &args.out,
        cfg.patch.rows,
        cfg.patch.cols,
        cfg.patch.cell_size,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut field: Option<TerrainField> = None;

    // pose samples keep the patch window away from the field border
    let margin = 0.5 * cfg.patch.rows.max(cfg.patch.cols) as f64 * cfg.patch.cell_size + 0.4;
    let x_max = cfg.terrain.width as f64 * cfg.terrain.cell_size - margin;
    let y_max = cfg.terrain.depth as f64 * cfg.terrain.cell_size - margin;
    if x_max <= margin || y_max <= margin {
        return Err(Error::config("terrain too small for patch sampling"));
    }

    for n in 0..args.count {
        if n % RECORDS_PER_FIELD == 0 {
            let kind = kinds[(n / RECORDS_PER_FIELD) as usize % kinds.len()];
            let difficulty = match kind {
                TerrainKind::Flat => 0.0,
                _ => rng.gen_range(0.3..=1.0),
            };
            field = Some(TerrainField::generate(
                &cfg.terrain,
                kind,
                difficulty,
                rng.gen(),
            )?);
        }
        let terrain = field.as_ref().expect("field rolled above");
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > 200 {
                return Err(Error::state(
                    "could not sample a pose with a full patch window",
                ));
            }
            let leg = rng.gen_range(0..4usize);
            let offset = cfg.robot.hip_offset(leg);
            let body_x = rng.gen_range(margin..x_max);
            let body_y = rng.gen_range(margin..y_max);
            let yaw = rng.gen_range(0.0..std::f64::consts::TAU);
            let (s, c) = yaw.sin_cos();
            let hip_x = body_x + c * offset.x - s * offset.y;
            let hip_y = body_y + s * offset.x + c * offset.y;
            let Ok(ground) = terrain.height_at(hip_x, hip_y) else {
                continue;
            };
            let hip_z = ground + cfg.robot.stand_height + rng.gen_range(-0.04..0.04);
            let hip_pose = HipPose {
                pos: Vector3::new(hip_x, hip_y, hip_z),
                yaw,
            };
            let phase = rng.gen_range(0.0..1.0);
            let v_body = Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.3..0.3), 0.0);
            let yaw_rate = rng.gen_range(-0.6..0.6);
            let Ok(query) = swing_query(
                terrain,
                &cfg.patch,
                &cfg.gait,
                offset,
                hip_pose,
                leg,
                phase,
                v_body,
                yaw_rate,
            ) else {
                // nominal foothold left the field; resample the pose
                continue;
            };
            let mask = evaluator.evaluate(&query);
            let w_body = Vector3::new(0.0, 0.0, yaw_rate);
            writer.push(&DatasetRecord::from_query(&query, w_body, &mask))?;
            break;
        }
    }
    let written = writer.finish()?;
    println!("wrote {written} records to {}", args.out.display());
    Ok(())
}
