//! Shared plumbing: config loading, config echo, and argument parsing
//! helpers used by several subcommands.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use quadstep::config::RunConfig;
use quadstep::error::{Error, Result};
use quadstep::sim::MaskSource;
use quadstep::terrain::TerrainKind;

/// Names the default config file when `--config` is absent.
pub const CONFIG_ENV: &str = "QUADSTEP_CONFIG";

/// Loads and validates the run configuration. Precedence: `--config`
/// flag, then `QUADSTEP_CONFIG`, then built-in defaults.
pub fn load_config(flag: Option<&Path>) -> Result<RunConfig> {
    let from_env = env::var_os(CONFIG_ENV).map(PathBuf::from);
    let path = flag.map(Path::to_path_buf).or(from_env);
    let cfg: RunConfig = match &path {
        None => RunConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::missing(format!("{}: {e}", p.display())))?;
            toml::from_str(&text)
                .map_err(|e| Error::parse(p.display().to_string(), e.message().to_string()))?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Writes the effective config into the output directory so any run can
/// be reproduced from its artifacts alone.
pub fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| Error::state(format!("config serialization: {e}")))?;
    fs::write(dir.join("effective-config.toml"), text)?;
    Ok(())
}

pub fn parse_kind(s: &str) -> std::result::Result<TerrainKind, String> {
    s.parse::<TerrainKind>().map_err(|e| e.to_string())
}

pub fn parse_kind_list(s: &str) -> Result<Vec<TerrainKind>> {
    s.split(',')
        .map(|k| k.trim().parse::<TerrainKind>())
        .collect()
}

pub fn parse_mask(s: &str) -> Result<MaskSource> {
    Ok(match s {
        "oracle" => MaskSource::Oracle,
        "learned" => MaskSource::Learned,
        "none" => MaskSource::None,
        other => {
            return Err(Error::config(format!(
                "unknown mask source {other:?} (expected oracle, learned or none)"
            )))
        }
    })
}

/// Stable seed for one work item; independent of execution order so
/// parallel campaigns stay reproducible.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for &t in tags {
        h ^= t;
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 27;
        h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        v.to_string()
    }
}
