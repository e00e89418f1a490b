//! Terrain fields: randomized generators, nearest-cell height queries, and
//! hip-centered heightmap patch extraction.
//!
//! World convention: cell (ix, iy) is centered at world
//! (ix * cell_size, iy * cell_size); x runs along the walking direction,
//! y across it. Fields are immutable once generated.

use nalgebra::{DMatrix, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{PatchConfig, TerrainConfig};
use crate::error::{Error, Result};

/// Generator family tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerrainKind {
    Flat,
    Steps,
    Stairs,
    Gaps,
    RandomRough,
}

impl TerrainKind {
    pub const ALL: [TerrainKind; 5] = [
        TerrainKind::Flat,
        TerrainKind::Steps,
        TerrainKind::Stairs,
        TerrainKind::Gaps,
        TerrainKind::RandomRough,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TerrainKind::Flat => "flat",
            TerrainKind::Steps => "steps",
            TerrainKind::Stairs => "stairs",
            TerrainKind::Gaps => "gaps",
            TerrainKind::RandomRough => "random-rough",
        }
    }
}

impl std::str::FromStr for TerrainKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(TerrainKind::Flat),
            "steps" => Ok(TerrainKind::Steps),
            "stairs" => Ok(TerrainKind::Stairs),
            "gaps" => Ok(TerrainKind::Gaps),
            "random-rough" => Ok(TerrainKind::RandomRough),
            other => Err(Error::config(format!(
                "unknown terrain kind '{other}' (expected flat|steps|stairs|gaps|random-rough)"
            ))),
        }
    }
}

impl std::fmt::Display for TerrainKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Difficulty maps for each generator, shared by the generators themselves
/// and by tests that derive expected feature sizes.
pub mod scale {
    /// Step-field block height amplitude (m): blocks uniform in [-h, h].
    pub fn step_height(difficulty: f64) -> f64 {
        0.02 + 0.10 * difficulty
    }

    /// Stair riser height (m).
    pub fn stair_riser(difficulty: f64) -> f64 {
        0.02 + 0.10 * difficulty
    }

    /// Gap (trench) width (m).
    pub fn gap_width(difficulty: f64) -> f64 {
        0.04 + 0.16 * difficulty
    }

    /// Pre-smoothing noise amplitude for rough fields (m).
    pub fn rough_amplitude(difficulty: f64) -> f64 {
        0.01 + 0.07 * difficulty
    }
}

/// Length of the flat pad at the low-x end of every generated field, so an
/// episode can start from a settled stand (m).
pub const START_PAD: f64 = 1.6;
/// Trench floor elevation for gap fields (m).
pub const GAP_DEPTH: f64 = -0.25;
/// Stair tread length (m).
pub const STAIR_TREAD: f64 = 0.24;

/// Immutable elevation grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TerrainField {
    cell_size: f64,
    width: usize,
    depth: usize,
    heights: Vec<f64>,
    kind: TerrainKind,
    rng_seed: u64,
}

impl TerrainField {
    /// Builds a field from an explicit grid (row-major, x-major:
    /// `heights[ix * depth + iy]`).
    pub fn from_heights(
        cell_size: f64,
        width: usize,
        depth: usize,
        heights: Vec<f64>,
        kind: TerrainKind,
        rng_seed: u64,
    ) -> Result<Self> {
        if !(cell_size > 0.0) {
            return Err(Error::config("cell_size must be positive"));
        }
        if heights.len() != width * depth {
            return Err(Error::config(format!(
                "height grid has {} entries, extent {}x{} needs {}",
                heights.len(),
                width,
                depth,
                width * depth
            )));
        }
        if heights.iter().any(|h| !h.is_finite()) {
            return Err(Error::domain("non-finite terrain height"));
        }
        Ok(Self {
            cell_size,
            width,
            depth,
            heights,
            kind,
            rng_seed,
        })
    }

    /// Deterministic generation: fixed (kind, difficulty, seed) gives a
    /// bit-identical grid.
    pub fn generate(
        cfg: &TerrainConfig,
        kind: TerrainKind,
        difficulty: f64,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if !difficulty.is_finite() || !(0.0..=1.0).contains(&difficulty) {
            return Err(Error::config("difficulty must be in [0,1]"));
        }
        let mut field = Self {
            cell_size: cfg.cell_size,
            width: cfg.width,
            depth: cfg.depth,
            heights: vec![0.0; cfg.width * cfg.depth],
            kind,
            rng_seed: seed,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match kind {
            TerrainKind::Flat => {}
            TerrainKind::Steps => field.fill_steps(difficulty, &mut rng),
            TerrainKind::Stairs => field.fill_stairs(difficulty),
            TerrainKind::Gaps => field.fill_gaps(difficulty, &mut rng),
            TerrainKind::RandomRough => field.fill_rough(difficulty, &mut rng),
        }
        let cap = cfg.max_elevation;
        for h in &mut field.heights {
            *h = h.clamp(-cap, cap);
        }
        field.clear_start_pad();
        Ok(field)
    }

    /// Random rectangular blocks on a lattice, heights uniform in
    /// [-step_height, step_height].
    fn fill_steps(&mut self, difficulty: f64, rng: &mut ChaCha8Rng) {
        let amp = scale::step_height(difficulty);
        let side = (0.30 / self.cell_size).round().max(1.0) as usize;
        let nx = self.width.div_ceil(side);
        let ny = self.depth.div_ceil(side);
        for bx in 0..nx {
            for by in 0..ny {
                let h = rng.gen_range(-amp..=amp);
                for ix in bx * side..((bx + 1) * side).min(self.width) {
                    for iy in by * side..((by + 1) * side).min(self.depth) {
                        self.heights[ix * self.depth + iy] = h;
                    }
                }
            }
        }
    }

    /// Ascending/descending staircase along x, constant across y. Riser
    /// count is capped so peaks stay well inside the elevation limit.
    fn fill_stairs(&mut self, difficulty: f64) {
        let riser = scale::stair_riser(difficulty);
        let tread_cells = (STAIR_TREAD / self.cell_size).round().max(1.0) as usize;
        let pad_cells = (START_PAD / self.cell_size).ceil() as usize;
        let max_level = ((0.4 / riser).floor() as i64).max(1);
        for ix in pad_cells..self.width {
            let stair = (ix - pad_cells) / tread_cells;
            // triangle wave over stair index: 0,1,..,max,max-1,..,1,0,...
            let phase = stair as i64 % (2 * max_level);
            let level = if phase <= max_level {
                phase
            } else {
                2 * max_level - phase
            };
            let h = riser * level as f64;
            for iy in 0..self.depth {
                self.heights[ix * self.depth + iy] = h;
            }
        }
    }

    /// Full-depth trenches of width gap_width at random spacings.
    fn fill_gaps(&mut self, difficulty: f64, rng: &mut ChaCha8Rng) {
        let gap_cells = (scale::gap_width(difficulty) / self.cell_size)
            .round()
            .max(1.0) as usize;
        let mut x = START_PAD + 0.4;
        let end = (self.width as f64 - 1.0) * self.cell_size - 0.4;
        while x < end {
            let ix0 = (x / self.cell_size).round() as usize;
            for ix in ix0..(ix0 + gap_cells).min(self.width) {
                for iy in 0..self.depth {
                    self.heights[ix * self.depth + iy] = GAP_DEPTH;
                }
            }
            x += gap_cells as f64 * self.cell_size + rng.gen_range(0.6..1.2);
        }
    }

    /// Smoothed per-cell noise: uniform [-amp, amp], then two 3x3 mean
    /// blur passes to correlate neighboring cells.
    fn fill_rough(&mut self, difficulty: f64, rng: &mut ChaCha8Rng) {
        let amp = scale::rough_amplitude(difficulty);
        for h in &mut self.heights {
            *h = rng.gen_range(-amp..=amp);
        }
        for _ in 0..2 {
            let src = self.heights.clone();
            for ix in 0..self.width {
                for iy in 0..self.depth {
                    let mut sum = 0.0;
                    let mut n = 0.0;
                    for dx in -1i64..=1 {
                        for dy in -1i64..=1 {
                            let jx = ix as i64 + dx;
                            let jy = iy as i64 + dy;
                            if jx >= 0
                                && jy >= 0
                                && (jx as usize) < self.width
                                && (jy as usize) < self.depth
                            {
                                sum += src[jx as usize * self.depth + jy as usize];
                                n += 1.0;
                            }
                        }
                    }
                    self.heights[ix * self.depth + iy] = sum / n;
                }
            }
        }
    }

    fn clear_start_pad(&mut self) {
        let pad_cells = (START_PAD / self.cell_size).ceil() as usize;
        for ix in 0..pad_cells.min(self.width) {
            for iy in 0..self.depth {
                self.heights[ix * self.depth + iy] = 0.0;
            }
        }
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn kind(&self) -> TerrainKind {
        self.kind
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    /// Height of cell (ix, iy); panics on out-of-range indices.
    pub fn height_cell(&self, ix: usize, iy: usize) -> f64 {
        assert!(ix < self.width && iy < self.depth, "cell index out of range");
        self.heights[ix * self.depth + iy]
    }

    /// World position of the center of cell (ix, iy).
    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (ix as f64 * self.cell_size, iy as f64 * self.cell_size)
    }

    /// Nearest cell to a world xy point. Ties at cell boundaries round
    /// toward negative indices: i = ceil(x / cell - 1/2).
    pub fn cell_at(&self, x: f64, y: f64) -> Result<(usize, usize)> {
        let ix = (x / self.cell_size - 0.5).ceil();
        let iy = (y / self.cell_size - 0.5).ceil();
        if ix < 0.0 || iy < 0.0 || ix >= self.width as f64 || iy >= self.depth as f64 {
            return Err(Error::domain(format!(
                "query ({x:.3}, {y:.3}) outside terrain bounds"
            )));
        }
        Ok((ix as usize, iy as usize))
    }

    /// Nearest-cell height lookup (no interpolation).
    pub fn height_at(&self, x: f64, y: f64) -> Result<f64> {
        let (ix, iy) = self.cell_at(x, y)?;
        Ok(self.heights[ix * self.depth + iy])
    }

    /// Extracts the patch-sized window centered on the nominal foothold,
    /// with every cell expressed relative to the hip height `z`. Windows
    /// that would clip the field edge are rejected, never zero-padded.
    pub fn extract_heightmap(
        &self,
        patch: &PatchConfig,
        p_foot: Vector3<f64>,
        z: f64,
    ) -> Result<Heightmap> {
        let (ci, cj) = self.cell_at(p_foot.x, p_foot.y)?;
        let hx = patch.rows;
        let hy = patch.cols;
        let half_x = hx / 2;
        let half_y = hy / 2;
        if ci < half_x || cj < half_y || ci + half_x >= self.width || cj + half_y >= self.depth
        {
            return Err(Error::domain(
                "heightmap window clipped by terrain edge",
            ));
        }
        let mut values = DMatrix::zeros(hx, hy);
        for i in 0..hx {
            for j in 0..hy {
                let ix = ci - half_x + i;
                let iy = cj - half_y + j;
                values[(i, j)] = self.heights[ix * self.depth + iy] - z;
            }
        }
        Ok(Heightmap {
            values,
            center_world: p_foot,
            center_cell: (ci, cj),
            cell_size: self.cell_size,
            hip_height: z,
        })
    }

    /// Center line of the field in y, where episodes walk.
    pub fn mid_y(&self) -> f64 {
        (self.depth - 1) as f64 * 0.5 * self.cell_size
    }

    /// Largest |height| in the grid.
    pub fn max_abs_height(&self) -> f64 {
        self.heights.iter().fold(0.0, |m, h| m.max(h.abs()))
    }
}

/// Hip-relative elevations on the patch window around a nominal foothold.
/// Row index i runs along world x, column j along world y.
#[derive(Debug, Clone)]
pub struct Heightmap {
    /// Elevation minus hip height, per cell.
    pub values: DMatrix<f64>,
    /// The nominal foothold this patch is centered on.
    pub center_world: Vector3<f64>,
    /// Field grid coordinates of the center cell.
    pub center_cell: (usize, usize),
    pub cell_size: f64,
    /// Hip height subtracted from every cell.
    pub hip_height: f64,
}

impl Heightmap {
    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    /// World xy of patch cell (i, j).
    pub fn cell_world(&self, i: usize, j: usize) -> (f64, f64) {
        let half_x = self.rows() / 2;
        let half_y = self.cols() / 2;
        let x = (self.center_cell.0 + i - half_x) as f64 * self.cell_size;
        let y = (self.center_cell.1 + j - half_y) as f64 * self.cell_size;
        (x, y)
    }

    /// Absolute terrain elevation at patch cell (i, j).
    pub fn elevation(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)] + self.hip_height
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg() -> TerrainConfig {
        TerrainConfig {
            width: 400,
            depth: 120,
            cell_size: 0.02,
            max_elevation: 0.5,
        }
    }

    #[test]
    fn flat_is_all_zero() {
        let f = TerrainField::generate(&cfg(), TerrainKind::Flat, 0.0, 7).unwrap();
        assert!(f.heights().iter().all(|&h| h == 0.0));
    }

    #[test]
    fn generation_is_bit_identical() {
        for kind in TerrainKind::ALL {
            let a = TerrainField::generate(&cfg(), kind, 1.0, 7).unwrap();
            let b = TerrainField::generate(&cfg(), kind, 1.0, 7).unwrap();
            let same = a
                .heights()
                .iter()
                .zip(b.heights())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "{kind} not deterministic");
        }
    }

    #[test]
    fn stairs_max_neighbor_diff_equals_riser() {
        let f = TerrainField::generate(&cfg(), TerrainKind::Stairs, 0.5, 3).unwrap();
        let mut max_diff: f64 = 0.0;
        for ix in 0..f.width() {
            for iy in 0..f.depth() {
                let h = f.height_cell(ix, iy);
                if ix + 1 < f.width() {
                    max_diff = max_diff.max((f.height_cell(ix + 1, iy) - h).abs());
                }
                if iy + 1 < f.depth() {
                    max_diff = max_diff.max((f.height_cell(ix, iy + 1) - h).abs());
                }
            }
        }
        assert_relative_eq!(max_diff, scale::stair_riser(0.5), epsilon = 1e-9);
    }

    #[test]
    fn height_at_cell_center_is_stored_height() {
        let mut heights = vec![0.0; 400 * 120];
        heights[37 * 120 + 45] = 0.123;
        let f =
            TerrainField::from_heights(0.02, 400, 120, heights, TerrainKind::Flat, 0).unwrap();
        let (x, y) = f.cell_center(37, 45);
        assert_eq!(f.height_at(x, y).unwrap(), 0.123);
    }

    /// Brute-force nearest-cell oracle with ties toward negative indices.
    /// Uses a binary-exact cell size so corner queries are exact ties.
    #[test]
    fn nearest_cell_matches_brute_force() {
        let cs = 0.25;
        let w = 9;
        let d = 7;
        let f = TerrainField::from_heights(
            cs,
            w,
            d,
            vec![0.0; w * d],
            TerrainKind::Flat,
            0,
        )
        .unwrap();
        let oracle = |x: f64, y: f64| -> (usize, usize) {
            let mut best = (f64::INFINITY, 0usize, 0usize);
            for ix in (0..w).rev() {
                for iy in (0..d).rev() {
                    let (cx, cy) = f.cell_center(ix, iy);
                    let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                    // <= keeps the lower index on exact ties
                    if d2 <= best.0 {
                        best = (d2, ix, iy);
                    }
                }
            }
            (best.1, best.2)
        };
        let queries = [
            (0.1, 0.1),
            (0.375, 0.5), // x exactly on a cell boundary
            (0.625, 0.875), // both on boundaries
            (1.3, 0.9),
            (2.0, 1.5),
            (-0.1, 0.2),
        ];
        for (x, y) in queries {
            assert_eq!(f.cell_at(x, y).unwrap(), oracle(x, y), "query ({x},{y})");
        }
    }

    #[test]
    fn out_of_bounds_queries_fail() {
        let f = TerrainField::generate(&cfg(), TerrainKind::Flat, 0.0, 1).unwrap();
        assert!(f.height_at(-1.0, 0.5).is_err());
        assert!(f.height_at(0.5, 1e6).is_err());
    }

    #[test]
    fn flat_patch_is_uniform_hip_offset() {
        let f = TerrainField::generate(&cfg(), TerrainKind::Flat, 0.0, 1).unwrap();
        let patch = PatchConfig::default();
        let hm = f
            .extract_heightmap(&patch, Vector3::new(3.0, 1.0, 0.0), 0.4)
            .unwrap();
        assert_eq!(hm.rows(), 15);
        assert_eq!(hm.cols(), 15);
        assert!(hm.values.iter().all(|&v| v == -0.4));
    }

    #[test]
    fn raised_block_shows_only_at_center() {
        let mut heights = vec![0.0; 400 * 120];
        let f0 = TerrainField::from_heights(0.02, 400, 120, heights.clone(), TerrainKind::Flat, 0)
            .unwrap();
        let (ci, cj) = f0.cell_at(3.0, 1.0).unwrap();
        heights[ci * 120 + cj] = 0.1;
        let f =
            TerrainField::from_heights(0.02, 400, 120, heights, TerrainKind::Flat, 0).unwrap();
        let hm = f
            .extract_heightmap(&PatchConfig::default(), Vector3::new(3.0, 1.0, 0.1), 0.4)
            .unwrap();
        for i in 0..15 {
            for j in 0..15 {
                let expect = if (i, j) == (7, 7) { 0.1 - 0.4 } else { -0.4 };
                assert_relative_eq!(hm.values[(i, j)], expect, epsilon = 1e-12);
            }
        }
    }

    /// Patch values must match direct per-cell height queries.
    #[test]
    fn patch_matches_per_cell_oracle() {
        let f = TerrainField::generate(&cfg(), TerrainKind::Stairs, 0.7, 11).unwrap();
        let p = Vector3::new(4.02, 1.2, 0.0);
        let z = 0.38;
        let hm = f.extract_heightmap(&PatchConfig::default(), p, z).unwrap();
        for i in 0..hm.rows() {
            for j in 0..hm.cols() {
                let (x, y) = hm.cell_world(i, j);
                assert_relative_eq!(
                    hm.values[(i, j)],
                    f.height_at(x, y).unwrap() - z,
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn patch_shifts_with_query() {
        let f = TerrainField::generate(&cfg(), TerrainKind::RandomRough, 0.9, 5).unwrap();
        let patch = PatchConfig::default();
        let p = Vector3::new(4.0, 1.2, 0.0);
        let a = f.extract_heightmap(&patch, p, 0.4).unwrap();
        let shift = Vector3::new(3.0 * 0.02, -2.0 * 0.02, 0.0);
        let b = f.extract_heightmap(&patch, p + shift, 0.4).unwrap();
        for i in 0..12 {
            for j in 2..15 {
                assert_eq!(a.values[(i + 3, j - 2)], b.values[(i, j)]);
            }
        }
    }

    #[test]
    fn clipped_window_rejected() {
        let f = TerrainField::generate(&cfg(), TerrainKind::Flat, 0.0, 1).unwrap();
        let r = f.extract_heightmap(&PatchConfig::default(), Vector3::new(0.05, 1.0, 0.0), 0.4);
        assert!(r.is_err());
    }

    #[test]
    fn difficulty_scales_features() {
        let c = cfg();
        let lo = TerrainField::generate(&c, TerrainKind::Steps, 0.2, 9).unwrap();
        let hi = TerrainField::generate(&c, TerrainKind::Steps, 0.9, 9).unwrap();
        assert!(hi.max_abs_height() > lo.max_abs_height());

        let lo = TerrainField::generate(&c, TerrainKind::Gaps, 0.2, 9).unwrap();
        let hi = TerrainField::generate(&c, TerrainKind::Gaps, 0.9, 9).unwrap();
        let count_gap =
            |f: &TerrainField| f.heights().iter().filter(|&&h| h < -0.1).count();
        assert!(count_gap(&hi) > count_gap(&lo));
    }

    #[test]
    fn elevations_stay_bounded() {
        let c = cfg();
        for kind in TerrainKind::ALL {
            let f = TerrainField::generate(&c, kind, 1.0, 13).unwrap();
            assert!(f.max_abs_height() <= c.max_elevation + 1e-12, "{kind}");
        }
    }

    #[test]
    fn start_pad_is_flat() {
        let c = cfg();
        for kind in TerrainKind::ALL {
            let f = TerrainField::generate(&c, kind, 1.0, 21).unwrap();
            let pad_cells = (START_PAD / c.cell_size).ceil() as usize;
            for ix in 0..pad_cells {
                for iy in 0..f.depth() {
                    assert_eq!(f.height_cell(ix, iy), 0.0, "{kind} pad not flat");
                }
            }
        }
    }
}
