use std::path::PathBuf;

use clap::Args;
use quadstep::error::Result;
use quadstep::io::save_terrain;
use quadstep::terrain::{TerrainField, TerrainKind};

use crate::util;

/// Generate a terrain field and write it as a .qstf file.
#[derive(Args, Debug)]
pub struct GenTerrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// flat, steps, stairs, gaps or random-rough.
    #[arg(long, value_parser = util::parse_kind)]
    pub kind: TerrainKind,
    /// Difficulty in [0,1].
    #[arg(long, default_value_t = 0.5)]
    pub difficulty: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: &GenTerrainArgs) -> Result<()> {
    let cfg = util::load_config(args.config.as_deref())?;
    let field = TerrainField::generate(&cfg.terrain, args.kind, args.difficulty, args.seed)?;
    save_terrain(&args.out, &field)?;
    println!(
        "wrote {} ({}x{} cells, {:.0}x{:.1} m, kind {}, difficulty {}, seed {})",
        args.out.display(),
        field.width(),
        field.depth(),
        field.width() as f64 * field.cell_size(),
        field.depth() as f64 * field.cell_size(),
        field.kind(),
        args.difficulty,
        args.seed,
    );
    Ok(())
}
