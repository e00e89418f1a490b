//! Run configuration: every tunable parameter of the stack, with documented
//! defaults. All sections deserialize from structured text (TOML via the CLI)
//! with unknown keys rejected, and validate before any run starts.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Heightmap patch geometry. 15x15 cells at 0.02 m covers a 30 cm square
/// adaptation window around the nominal foothold.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    /// Patch rows (world x direction).
    pub rows: usize,
    /// Patch columns (world y direction).
    pub cols: usize,
    /// Cell edge length in meters (shared with the terrain field).
    pub cell_size: f64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            rows: 15,
            cols: 15,
            cell_size: 0.02,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows < 3 || self.cols < 3 {
            return Err(Error::config("patch must be at least 3x3 cells"));
        }
        if self.rows % 2 == 0 || self.cols % 2 == 0 {
            return Err(Error::config("patch dimensions must be odd (centered)"));
        }
        if !(self.cell_size > 0.0) {
            return Err(Error::config("patch cell_size must be positive"));
        }
        Ok(())
    }
}

/// Terrain field generation parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerrainConfig {
    /// Field extent in cells (width = x cells, depth = y cells).
    pub width: usize,
    pub depth: usize,
    /// Cell edge length in meters.
    pub cell_size: f64,
    /// Hard cap on |height|; generators stay within it and loaders reject
    /// fields that exceed it.
    pub max_elevation: f64,
}

impl Default for TerrainConfig {
    fn default() -> Self {
        Self {
            // 40 m x 8 m strip: long enough for 250 footsteps at the top
            // commanded speed plus disturbance drift, with patch margins.
            width: 2000,
            depth: 400,
            cell_size: 0.02,
            max_elevation: 0.5,
        }
    }
}

impl TerrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 32 || self.depth < 32 {
            return Err(Error::config("terrain extent must be at least 32x32 cells"));
        }
        if !(self.cell_size > 0.0) {
            return Err(Error::config("terrain cell_size must be positive"));
        }
        if !(self.max_elevation > 0.0) {
            return Err(Error::config("max_elevation must be positive"));
        }
        Ok(())
    }
}

/// Robot body and leg geometry. Defaults approximate a mid-size electric
/// quadruped; they are config values, not measured constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobotConfig {
    /// Trunk mass in kg.
    pub mass: f64,
    /// Body-frame inertia diagonal (kg m^2).
    pub inertia_diag: [f64; 3],
    /// Hip offsets from the base center, body frame, legs ordered
    /// LF, RF, LH, RH (x forward, y left, z up).
    pub hip_x: f64,
    pub hip_y: f64,
    /// Upper and lower link lengths in m.
    pub l_upper: f64,
    pub l_lower: f64,
    /// Joint limits (rad): abduction, hip flexion, knee.
    pub abduction_limits: [f64; 2],
    pub hip_limits: [f64; 2],
    /// Knee limits include 0 so the fully extended pose is the reachable
    /// boundary of the workspace.
    pub knee_limits: [f64; 2],
    /// Shin bounding-capsule radius in m.
    pub shin_radius: f64,
    /// Ground friction coefficient used by the MPC pyramid.
    pub friction: f64,
    /// Nominal standing hip height in m.
    pub stand_height: f64,
}

impl Default for RobotConfig {
    fn default() -> Self {
        Self {
            mass: 20.0,
            inertia_diag: [0.15, 0.35, 0.40],
            hip_x: 0.24,
            hip_y: 0.13,
            l_upper: 0.25,
            l_lower: 0.25,
            abduction_limits: [-0.8, 0.8],
            hip_limits: [-2.0, 2.0],
            knee_limits: [-2.6, 0.0],
            shin_radius: 0.02,
            friction: 0.6,
            stand_height: 0.40,
        }
    }
}

impl RobotConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0) {
            return Err(Error::config("mass must be positive"));
        }
        if self.inertia_diag.iter().any(|&i| !(i > 0.0)) {
            return Err(Error::config("inertia diagonal must be positive"));
        }
        if !(self.l_upper > 0.0) || !(self.l_lower > 0.0) {
            return Err(Error::config("link lengths must be positive"));
        }
        for (name, lim) in [
            ("abduction", &self.abduction_limits),
            ("hip", &self.hip_limits),
            ("knee", &self.knee_limits),
        ] {
            if !(lim[0] < lim[1]) {
                return Err(Error::config(format!("{name} joint limits degenerate")));
            }
        }
        if !(self.shin_radius > 0.0) {
            return Err(Error::config("shin radius must be positive"));
        }
        if !(self.friction > 0.0) {
            return Err(Error::config("friction must be positive"));
        }
        if !(self.stand_height > 0.0)
            || self.stand_height >= self.l_upper + self.l_lower
        {
            return Err(Error::config("stand_height must be in (0, leg reach)"));
        }
        Ok(())
    }

    /// Hip offset of leg `i` (0=LF, 1=RF, 2=LH, 3=RH) in the body frame.
    pub fn hip_offset(&self, leg: usize) -> Vector3<f64> {
        let sx = if leg < 2 { 1.0 } else { -1.0 };
        let sy = if leg % 2 == 0 { 1.0 } else { -1.0 };
        Vector3::new(sx * self.hip_x, sy * self.hip_y, 0.0)
    }

    pub fn gravity(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, -9.81)
    }
}

/// Safety-criteria thresholds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafetyConfig {
    /// Max |height difference| to any 8-neighbor for a cell to pass the
    /// roughness criterion (m).
    pub tr_threshold: f64,
    /// Required clearance between the shin capsule surface and terrain
    /// columns, beyond the capsule radius (m).
    pub lc_margin: f64,
    /// The shin is collision-checked from the knee down to this distance
    /// above the foot along the shin axis; the foot/ankle ball below it is
    /// the part meant to touch the ground.
    pub ankle_offset: f64,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        Self {
            tr_threshold: 0.03,
            lc_margin: 0.01,
            ankle_offset: 0.05,
        }
    }
}

impl SafetyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tr_threshold > 0.0) {
            return Err(Error::config("tr_threshold must be positive"));
        }
        if !(self.lc_margin >= 0.0) || !(self.ankle_offset >= 0.0) {
            return Err(Error::config("lc_margin and ankle_offset must be >= 0"));
        }
        Ok(())
    }
}

/// Trot gait timing.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaitConfig {
    /// Full gait cycle period in s.
    pub period: f64,
    /// Stance fraction of the cycle.
    pub duty: f64,
    /// Swing apex height above the higher endpoint (m).
    pub apex_height: f64,
}

impl Default for GaitConfig {
    fn default() -> Self {
        Self {
            period: 0.5,
            duty: 0.5,
            apex_height: 0.08,
        }
    }
}

impl GaitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.period > 0.0) {
            return Err(Error::config("gait period must be positive"));
        }
        if !(self.duty > 0.0 && self.duty < 1.0) {
            return Err(Error::config("duty factor must be in (0,1)"));
        }
        if !(self.apex_height > 0.0) {
            return Err(Error::config("apex height must be positive"));
        }
        Ok(())
    }

    pub fn t_stance(&self) -> f64 {
        self.period * self.duty
    }

    pub fn t_swing(&self) -> f64 {
        self.period * (1.0 - self.duty)
    }
}

/// MPC horizon, rate, cost weights, and force bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    /// Prediction horizon length (steps).
    pub horizon: usize,
    /// Prediction step in s (0.4 s lookahead with the default horizon).
    pub dt: f64,
    /// Diagonal state weights, order [p(3), v(3), xi(3), w(3)].
    pub q_weights: [f64; 12],
    /// Terminal state weights, same order.
    pub q_terminal: [f64; 12],
    /// Diagonal force weights per axis, applied to every leg.
    pub r_weights: [f64; 3],
    /// Vertical force bounds per stance foot (N).
    pub f_min: f64,
    pub f_max: f64,
    /// Interior-point tolerance on the KKT residual.
    pub qp_tolerance: f64,
    pub qp_max_iterations: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            dt: 0.04,
            q_weights: [
                50.0, 50.0, 800.0, // p
                60.0, 60.0, 120.0, // v
                600.0, 600.0, 200.0, // xi
                8.0, 8.0, 8.0, // w
            ],
            q_terminal: [
                100.0, 100.0, 1600.0, //
                120.0, 120.0, 240.0, //
                1200.0, 1200.0, 400.0, //
                16.0, 16.0, 16.0,
            ],
            r_weights: [1e-3, 1e-3, 1e-3],
            f_min: 5.0,
            f_max: 250.0,
            qp_tolerance: 1e-8,
            qp_max_iterations: 50,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::config("MPC horizon must be at least 1"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::config("MPC dt must be positive"));
        }
        if self.q_weights.iter().any(|&w| !(w >= 0.0))
            || self.q_terminal.iter().any(|&w| !(w >= 0.0))
        {
            return Err(Error::config("state weights must be >= 0"));
        }
        if self.r_weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::config("force weights must be > 0 (strict convexity)"));
        }
        if !(0.0 <= self.f_min && self.f_min < self.f_max) {
            return Err(Error::config("force bounds must satisfy 0 <= f_min < f_max"));
        }
        if !(self.qp_tolerance > 0.0) || self.qp_max_iterations == 0 {
            return Err(Error::config("invalid QP solver settings"));
        }
        Ok(())
    }
}

/// Simulator timing, termination thresholds, and violation consequences.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Integrator step in s.
    pub dt: f64,
    /// Sim steps between MPC replans (25 ms at the default dt).
    pub control_every: usize,
    /// Episode termination thresholds.
    pub max_roll_pitch: f64,
    pub min_trunk_clearance: f64,
    /// Stand-settle time before the gait starts, s.
    pub settle_time: f64,
    /// Effective friction multiplier for a foot standing on a
    /// roughness-unsafe cell (terrain edges give poor grip).
    pub edge_friction_factor: f64,
    /// Lateral velocity kick at touchdown when the shin strikes terrain
    /// (m/s).
    pub shin_strike_kick: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 2.5e-3,
            control_every: 10,
            max_roll_pitch: 0.6,
            min_trunk_clearance: 0.08,
            settle_time: 0.5,
            edge_friction_factor: 0.4,
            shin_strike_kick: 0.05,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || self.control_every == 0 {
            return Err(Error::config("invalid simulator timing"));
        }
        if !(self.max_roll_pitch > 0.0) || !(self.min_trunk_clearance > 0.0) {
            return Err(Error::config("invalid termination thresholds"));
        }
        Ok(())
    }
}

/// Classifier (mask predictor) architecture and training schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    /// Encoder conv channels (two layers, 3x3 kernels, stride 2).
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    /// Latent vector width.
    pub latent_dim: usize,
    /// Weight on the Dice term added to BCE.
    pub dice_weight: f64,
    /// Dice smoothing added to numerator and denominator.
    pub dice_smoothing: f64,
    /// Stddev of the Gaussian noise applied to the scaled cell inputs
    /// during training only (denoising corruption); 0.05 here is half a
    /// centimeter of relief.
    pub input_noise_std: f64,
    /// Momentum SGD schedule.
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop when validation loss has not improved for this many epochs.
    pub patience: usize,
    /// Fraction of the dataset held out for validation.
    pub val_fraction: f64,
    /// Sigmoid threshold for the deployed boolean mask.
    pub decision_threshold: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            conv1_channels: 8,
            conv2_channels: 16,
            latent_dim: 64,
            dice_weight: 1.0,
            dice_smoothing: 1e-6,
            input_noise_std: 0.05,
            learning_rate: 8e-2,
            momentum: 0.9,
            batch_size: 32,
            max_epochs: 150,
            patience: 25,
            val_fraction: 0.2,
            decision_threshold: 0.5,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv1_channels == 0 || self.conv2_channels == 0 || self.latent_dim == 0 {
            return Err(Error::config("classifier sizes must be positive"));
        }
        if !(self.dice_weight >= 0.0) || !(self.dice_smoothing > 0.0) {
            return Err(Error::config("invalid dice settings"));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("invalid optimizer settings"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch size and epochs must be positive"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config("val_fraction must be in (0,1)"));
        }
        if !(self.decision_threshold > 0.0 && self.decision_threshold < 1.0) {
            return Err(Error::config("decision threshold must be in (0,1)"));
        }
        Ok(())
    }
}

/// Footstep policy network and optimization settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Hidden width of the two tanh trunk layers.
    pub hidden: usize,
    /// Past joint snapshots in the observation and their spacing in
    /// control ticks.
    pub history_len: usize,
    pub history_stride: usize,
    /// Reward weights.
    pub w_track: f64,
    pub w_reg: f64,
    pub w_unsafe: f64,
    pub r_terminal: f64,
    /// Extra penalties used only by the naive (unmasked) mode.
    pub naive_kf_penalty: f64,
    pub naive_lc_penalty: f64,
    pub naive_edge_penalty: f64,
    /// Cells within this distance of a roughness-unsafe cell attract the
    /// naive edge penalty, scaled linearly to zero at the radius.
    pub naive_edge_radius: f64,
    /// Clipped-surrogate optimization.
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_epsilon: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub learning_rate: f64,
    pub value_coeff: f64,
    pub entropy_coeff: f64,
    /// Initial log standard deviation of the action distribution.
    pub init_log_std: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            history_len: 3,
            history_stride: 4,
            w_track: 1.0,
            w_reg: 0.1,
            w_unsafe: 0.05,
            r_terminal: -10.0,
            naive_kf_penalty: 0.5,
            naive_lc_penalty: 0.5,
            naive_edge_penalty: 0.5,
            naive_edge_radius: 3.0,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_epsilon: 0.2,
            epochs: 4,
            minibatch: 64,
            learning_rate: 3e-4,
            value_coeff: 0.5,
            entropy_coeff: 0.01,
            init_log_std: -0.7,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.history_len == 0 || self.history_stride == 0 {
            return Err(Error::config("invalid policy architecture settings"));
        }
        if !(0.0 < self.gamma && self.gamma <= 1.0) {
            return Err(Error::config("gamma must be in (0,1]"));
        }
        if !(0.0 <= self.gae_lambda && self.gae_lambda <= 1.0) {
            return Err(Error::config("gae_lambda must be in [0,1]"));
        }
        if !(self.clip_epsilon > 0.0) {
            return Err(Error::config("clip epsilon must be positive"));
        }
        if self.epochs == 0 || self.minibatch == 0 {
            return Err(Error::config("epochs and minibatch must be positive"));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::config("learning rate must be >= 0"));
        }
        Ok(())
    }
}

/// Evaluation campaign: which planners to run over which episode grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    /// Planner names: nominal-raibert, mpc-vfa-nearest, rl-vfa, naive-rl.
    pub planners: Vec<String>,
    /// Episodes per (planner, disturbance magnitude) pair.
    pub episodes: usize,
    /// Footstep placements per episode.
    pub footsteps: usize,
    /// Terrain kinds cycled across episodes.
    pub kinds: Vec<String>,
    pub difficulty: f64,
    /// Mask provider for the masked planners: oracle, learned, none.
    pub mask_source: String,
    /// Peak lateral push magnitudes (N); 0 means undisturbed.
    pub disturbances: Vec<f64>,
    /// Pushes per episode at each nonzero magnitude.
    pub disturbance_count: usize,
    pub seed: u64,
    /// Checkpoints consumed by the learned planners; empty = unset.
    pub classifier_checkpoint: String,
    pub policy_checkpoint: String,
    pub naive_checkpoint: String,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            planners: vec!["mpc-vfa-nearest".into()],
            episodes: 100,
            footsteps: 250,
            kinds: vec!["random-rough".into()],
            difficulty: 0.5,
            mask_source: "oracle".into(),
            disturbances: vec![0.0],
            disturbance_count: 2,
            seed: 7,
            classifier_checkpoint: String::new(),
            policy_checkpoint: String::new(),
            naive_checkpoint: String::new(),
        }
    }
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.planners.is_empty() {
            return Err(Error::config("campaign needs at least one planner"));
        }
        if self.episodes == 0 {
            return Err(Error::config("campaign episodes must be positive"));
        }
        if self.kinds.is_empty() {
            return Err(Error::config("campaign needs at least one terrain kind"));
        }
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(Error::config("campaign difficulty must be in [0,1]"));
        }
        if self.disturbances.is_empty() {
            return Err(Error::config("disturbance grid must not be empty"));
        }
        if self.disturbances.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::config("disturbance magnitudes must be >= 0"));
        }
        Ok(())
    }
}

/// Complete run configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub patch: PatchConfig,
    pub terrain: TerrainConfig,
    pub robot: RobotConfig,
    pub safety: SafetyConfig,
    pub gait: GaitConfig,
    pub mpc: MpcConfig,
    pub sim: SimConfig,
    pub classifier: ClassifierConfig,
    pub policy: PolicyConfig,
    pub campaign: CampaignConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        self.terrain.validate()?;
        self.robot.validate()?;
        self.safety.validate()?;
        self.gait.validate()?;
        self.mpc.validate()?;
        self.sim.validate()?;
        self.classifier.validate()?;
        self.policy.validate()?;
        self.campaign.validate()?;
        if (self.patch.cell_size - self.terrain.cell_size).abs() > 1e-12 {
            return Err(Error::config(
                "patch cell_size must match terrain cell_size (cell-discrete criteria)",
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_duty() {
        let mut cfg = RunConfig::default();
        cfg.gait.duty = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_mismatched_cell_sizes() {
        let mut cfg = RunConfig::default();
        cfg.patch.cell_size = 0.05;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hip_offsets_signs() {
        let robot = RobotConfig::default();
        assert_eq!(robot.hip_offset(0).x, 0.24);
        assert_eq!(robot.hip_offset(0).y, 0.13);
        assert_eq!(robot.hip_offset(3).x, -0.24);
        assert_eq!(robot.hip_offset(3).y, -0.13);
    }
}
