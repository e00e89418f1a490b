//! Closed-loop walking world. A trot scheduler decides which feet are on
//! the ground, swing feet follow two-segment Hermite splines toward planned
//! footholds, and the trunk is integrated under the MPC's ground-reaction
//! forces. Footstep planners are queried twice per swing (lift-off and
//! apex); executed footholds are audited against the ground-truth safety
//! criteria and violations feed back into the dynamics (lost load bearing,
//! poor grip, shin-strike kicks). Disturbance pushes act on the CoM.

use std::collections::VecDeque;

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{GaitConfig, PatchConfig, RunConfig};
use crate::error::{Error, Result};
use crate::kinematics::{JointState, LegSet, NUM_LEGS};
use crate::learner::{input_from_patch, ClassifierNet};
use crate::mpc::srbm::integrate_ext;
use crate::mpc::{MpcController, SrbmParams, SrbmState, UserCommand};
use crate::safety::{nearest_safe, BoolGrid, FootholdQuery, HipPose, SafetyEvaluator};
use crate::terrain::{TerrainField, TerrainKind};

/// Periodic stance/swing pattern. Phase offsets are fractions of the cycle;
/// a leg is in stance for the first `duty` fraction of its own cycle.
#[derive(Debug, Clone)]
pub struct GaitSchedule {
    pub period: f64,
    pub duty: f64,
    pub offsets: [f64; 4],
    /// All legs grounded at all times (settle phases, hover tests).
    pub standing: bool,
}

impl GaitSchedule {
    /// Diagonal pairs (LF, RH) and (RF, LH) half a cycle apart.
    pub fn trot(cfg: &GaitConfig) -> Self {
        Self {
            period: cfg.period,
            duty: cfg.duty,
            offsets: [0.0, 0.5, 0.5, 0.0],
            standing: false,
        }
    }

    pub fn stand(cfg: &GaitConfig) -> Self {
        Self {
            period: cfg.period,
            duty: cfg.duty,
            offsets: [0.0; 4],
            standing: true,
        }
    }

    fn cycle_pos(&self, leg: usize, t: f64) -> f64 {
        (t / self.period + self.offsets[leg]).rem_euclid(1.0)
    }

    /// Negative times are the stand lead-in before the gait starts.
    pub fn in_stance(&self, leg: usize, t: f64) -> bool {
        self.standing || t < 0.0 || self.cycle_pos(leg, t) < self.duty
    }

    /// Swing progress in [0,1): 0 at lift-off, 1 at the next touchdown.
    pub fn swing_phase(&self, leg: usize, t: f64) -> Option<f64> {
        if self.in_stance(leg, t) {
            return None;
        }
        Some((self.cycle_pos(leg, t) - self.duty) / (1.0 - self.duty))
    }

    pub fn stance_flags(&self, t: f64) -> [bool; 4] {
        std::array::from_fn(|leg| self.in_stance(leg, t))
    }

    /// Stance pattern over an MPC horizon, sampled at interval midpoints so
    /// a step is "stance" when most of it is.
    pub fn horizon(&self, t: f64, dt: f64, steps: usize) -> Vec<[bool; 4]> {
        (0..steps)
            .map(|k| self.stance_flags(t + (k as f64 + 0.5) * dt))
            .collect()
    }

    pub fn t_stance(&self) -> f64 {
        self.period * self.duty
    }

    pub fn t_swing(&self) -> f64 {
        self.period * (1.0 - self.duty)
    }
}

/// Cubic Hermite segment over u in [0,1]; tangents are du-parameterized.
#[derive(Debug, Clone, Copy)]
struct Hermite {
    p0: Vector3<f64>,
    v0: Vector3<f64>,
    p1: Vector3<f64>,
    v1: Vector3<f64>,
}

impl Hermite {
    fn position(&self, u: f64) -> Vector3<f64> {
        let u2 = u * u;
        let u3 = u2 * u;
        self.p0 * (2.0 * u3 - 3.0 * u2 + 1.0)
            + self.v0 * (u3 - 2.0 * u2 + u)
            + self.p1 * (-2.0 * u3 + 3.0 * u2)
            + self.v1 * (u3 - u2)
    }

    fn velocity(&self, u: f64) -> Vector3<f64> {
        let u2 = u * u;
        self.p0 * (6.0 * u2 - 6.0 * u)
            + self.v0 * (3.0 * u2 - 4.0 * u + 1.0)
            + self.p1 * (-6.0 * u2 + 6.0 * u)
            + self.v1 * (3.0 * u2 - 2.0 * u)
    }
}

/// Two Hermite segments joined at the apex (phase 0.5). The apex sits over
/// the lift-target midpoint at `apex_height` above the higher endpoint and
/// carries a horizontal tangent, so each segment's vertical profile is
/// monotone and the apex is the global peak. Retargeting after the apex
/// query rebuilds only the second segment from the same apex state, keeping
/// position and velocity continuous.
#[derive(Debug, Clone)]
pub struct SwingTrajectory {
    first: Hermite,
    second: Hermite,
}

impl SwingTrajectory {
    pub fn new(lift: Vector3<f64>, target: Vector3<f64>, apex_height: f64) -> Self {
        let apex = Vector3::new(
            0.5 * (lift.x + target.x),
            0.5 * (lift.y + target.y),
            lift.z.max(target.z) + apex_height,
        );
        let carry = Vector3::new(target.x - lift.x, target.y - lift.y, 0.0);
        Self {
            first: Hermite {
                p0: lift,
                v0: Vector3::zeros(),
                p1: apex,
                v1: carry,
            },
            second: Hermite {
                p0: apex,
                v0: carry,
                p1: target,
                v1: Vector3::zeros(),
            },
        }
    }

    /// Re-aims the post-apex half at a new target.
    pub fn retarget(&mut self, target: Vector3<f64>) {
        self.second.p1 = target;
    }

    pub fn target(&self) -> Vector3<f64> {
        self.second.p1
    }

    /// Foot position at swing phase s in [0,1].
    pub fn position(&self, s: f64) -> Vector3<f64> {
        let s = s.clamp(0.0, 1.0);
        if s <= 0.5 {
            self.first.position(2.0 * s)
        } else {
            self.second.position(2.0 * s - 1.0)
        }
    }

    /// Foot velocity in m/s given the swing duration.
    pub fn velocity(&self, s: f64, t_swing: f64) -> Vector3<f64> {
        let s = s.clamp(0.0, 1.0);
        let dv = if s <= 0.5 {
            self.first.velocity(2.0 * s)
        } else {
            self.second.velocity(2.0 * s - 1.0)
        };
        dv * (2.0 / t_swing)
    }
}

/// Heuristic touchdown point: the hip's ground projection at predicted
/// touchdown plus half a stance period of commanded travel, with the yaw
/// rate contributing through the hip lever arm.
pub fn raibert_foothold(
    hip_td: &HipPose,
    hip_offset: Vector3<f64>,
    v_body: Vector3<f64>,
    yaw_rate: f64,
    t_stance: f64,
) -> Vector2<f64> {
    let spin = Vector3::new(0.0, 0.0, yaw_rate);
    let v_hip = v_body + spin.cross(&hip_offset);
    let step = hip_td.to_world(0.5 * t_stance * Vector3::new(v_hip.x, v_hip.y, 0.0));
    Vector2::new(step.x, step.y)
}

/// Builds one swing leg's foothold query: Raibert nominal at the predicted
/// touchdown pose, a patch extracted around it, and the kinematic context
/// the criteria need. Shared by the simulator and the dataset labeler.
pub fn swing_query(
    terrain: &TerrainField,
    patch: &PatchConfig,
    gait: &GaitConfig,
    hip_offset: Vector3<f64>,
    hip_pose: HipPose,
    leg: usize,
    phase: f64,
    v_body: Vector3<f64>,
    yaw_rate: f64,
) -> Result<FootholdQuery> {
    let t_td = (1.0 - phase).max(0.0) * gait.t_swing();
    let hip_td = hip_pose.propagate(v_body, yaw_rate, t_td);
    let nominal = raibert_foothold(&hip_td, hip_offset, v_body, yaw_rate, gait.t_stance());
    let z = terrain.height_at(nominal.x, nominal.y)?;
    let map = terrain.extract_heightmap(patch, Vector3::new(nominal.x, nominal.y, z), hip_pose.pos.z)?;
    Ok(FootholdQuery {
        map,
        phase,
        v_body,
        yaw_rate,
        leg,
        hip_pose,
    })
}

/// Where the planner's candidate mask comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSource {
    /// Ground-truth criteria evaluated on the fly.
    Oracle,
    /// Classifier prediction at the configured threshold.
    Learned,
    /// No masking; raw picks are executed as-is.
    None,
}

/// Maps a raw action axis in [-1,1] onto a grid index.
pub fn action_to_index(a: f64, n: usize) -> usize {
    let x = (a.clamp(-1.0, 1.0) + 1.0) * 0.5 * (n - 1) as f64;
    (x.round() as usize).min(n - 1)
}

pub fn index_to_action(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    }
}

/// One swing leg's planning context at a query instant.
#[derive(Debug, Clone)]
pub struct LegQuery {
    pub leg: usize,
    pub query: FootholdQuery,
    /// Candidate mask; `None` when masking is disabled.
    pub mask: Option<BoolGrid>,
    /// Classifier latent for this leg's patch (zeros without a classifier).
    pub latent: Vec<f64>,
    /// Patch center, the nominal foothold's cell.
    pub nominal_cell: (usize, usize),
}

/// Everything a planner sees at one query: the swing legs' contexts plus
/// the flat observation vector learned policies consume.
#[derive(Debug, Clone)]
pub struct PolicyQuery {
    pub id: u64,
    pub t: f64,
    pub legs: Vec<LegQuery>,
    pub observation: Vec<f64>,
}

/// Ground-truth audit of one executed foothold.
#[derive(Debug, Clone, Copy)]
pub struct CellAudit {
    pub leg: usize,
    pub edge_ok: bool,
    pub clearance_ok: bool,
    pub reach_ok: bool,
    /// Distance in cells to the nearest roughness-unsafe cell (infinite if
    /// the whole patch passes); feeds the naive edge-proximity penalty.
    pub edge_distance: f64,
}

impl CellAudit {
    pub fn all_ok(&self) -> bool {
        self.edge_ok && self.clearance_ok && self.reach_ok
    }
}

/// Delayed result of a query, reported when its swing touches down (or the
/// episode ends first). Rewards are derived from these.
#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub id: u64,
    pub t: f64,
    /// |commanded - realized| for body vx, vy and yaw rate.
    pub track_err: [f64; 3],
    /// Executed-minus-nominal foothold distance (m), summed over legs.
    pub reg_distance: f64,
    /// Legs whose raw pick got remapped by the mask.
    pub remapped: usize,
    /// Executed-foothold audits; present only on the query that committed
    /// the touchdown (the apex query).
    pub audits: Vec<CellAudit>,
    pub terminal: bool,
}

/// Chooses foothold cells at query instants. Implementations range from
/// the fixed nominal pick to learned policies that also record transitions
/// through `observe`/`episode_end`.
pub trait FootstepPlanner {
    /// Raw per-leg (row, col) actions in [-1,1], ordered as `query.legs`.
    fn plan(&mut self, query: &PolicyQuery) -> Vec<[f64; 2]>;

    fn observe(&mut self, _outcome: &QueryOutcome) {}

    fn episode_end(&mut self, _metrics: &EpisodeMetrics) {}
}

/// Always picks the nominal cell; combined with a mask source this is the
/// nearest-safe projection baseline, without one it is pure Raibert.
#[derive(Debug, Clone, Default)]
pub struct NominalPlanner;

impl FootstepPlanner for NominalPlanner {
    fn plan(&mut self, query: &PolicyQuery) -> Vec<[f64; 2]> {
        query.legs.iter().map(|_| [0.0, 0.0]).collect()
    }
}

/// Horizontal CoM push over a time window.
#[derive(Debug, Clone, Copy)]
pub struct Disturbance {
    pub start: f64,
    pub duration: f64,
    pub force: Vector2<f64>,
}

impl Disturbance {
    /// Random pushes: uniform directions, magnitudes in [half, full] of
    /// `max_force`, 1-3 s long, starts spread over [t0, t1].
    pub fn sample(
        rng: &mut ChaCha8Rng,
        count: usize,
        t0: f64,
        t1: f64,
        max_force: f64,
    ) -> Vec<Disturbance> {
        (0..count)
            .map(|_| {
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let mag = rng.gen_range(0.5 * max_force..=max_force);
                Disturbance {
                    start: rng.gen_range(t0..t1),
                    duration: rng.gen_range(1.0..3.0),
                    force: Vector2::new(angle.cos(), angle.sin()) * mag,
                }
            })
            .collect()
    }

    fn active(&self, t: f64) -> bool {
        t >= self.start && t < self.start + self.duration
    }
}

/// One episode's scenario.
#[derive(Debug, Clone)]
pub struct EpisodeSetup {
    pub kind: TerrainKind,
    pub difficulty: f64,
    pub terrain_seed: u64,
    /// Commanded twist; `height` is the stand height above the local
    /// stance footprint, not an absolute world z.
    pub command: UserCommand,
    pub disturbances: Vec<Disturbance>,
    /// Episode ends successfully after this many touchdowns (0 = run to
    /// the time limit instead).
    pub max_footsteps: usize,
    pub time_limit: f64,
    /// Episode-local randomness (kick directions).
    pub seed: u64,
}

impl EpisodeSetup {
    pub fn walk(
        kind: TerrainKind,
        difficulty: f64,
        command: UserCommand,
        footsteps: usize,
        seed: u64,
    ) -> Self {
        Self {
            kind,
            difficulty,
            terrain_seed: seed ^ 0x7465_7272,
            command,
            disturbances: Vec::new(),
            max_footsteps: footsteps,
            // generous: 2x the nominal four-footsteps-per-cycle pace
            time_limit: 1.0 + 0.5 * footsteps as f64,
            seed,
        }
    }

    pub fn hover(height: f64, duration: f64, seed: u64) -> Self {
        Self {
            kind: TerrainKind::Flat,
            difficulty: 0.0,
            terrain_seed: seed,
            command: UserCommand::hover(height),
            disturbances: Vec::new(),
            max_footsteps: 0,
            time_limit: duration,
            seed,
        }
    }
}

/// Shared episode machinery: configs plus the controller, criteria
/// evaluator and optional mask classifier.
pub struct EpisodeDeps<'a> {
    pub cfg: &'a RunConfig,
    pub evaluator: SafetyEvaluator,
    pub mpc: MpcController,
    pub gait: GaitSchedule,
    pub mask_source: MaskSource,
    pub classifier: Option<&'a ClassifierNet>,
}

impl<'a> EpisodeDeps<'a> {
    pub fn new(
        cfg: &'a RunConfig,
        gait: GaitSchedule,
        mask_source: MaskSource,
        classifier: Option<&'a ClassifierNet>,
    ) -> Result<Self> {
        cfg.validate()?;
        if mask_source == MaskSource::Learned && classifier.is_none() {
            return Err(Error::config("learned mask source needs a classifier"));
        }
        Ok(Self {
            evaluator: SafetyEvaluator::new(&cfg.robot, cfg.safety, cfg.gait),
            mpc: MpcController::new(cfg.mpc.clone(), SrbmParams::from_config(&cfg.robot)),
            cfg,
            gait,
            mask_source,
            classifier,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationCause {
    /// Reached the footstep goal.
    Completed,
    /// Ran to the time limit (the goal for goalless episodes).
    TimeLimit,
    RollPitchLimit,
    TrunkClearance,
    NumericalFault,
}

#[derive(Debug, Clone)]
pub struct EpisodeMetrics {
    pub footsteps: usize,
    pub queries: usize,
    pub remaps: usize,
    /// Queries where the patch held no safe cell at all.
    pub no_safe_cells: usize,
    /// Audited criterion failures of executed footholds.
    pub tr_violations: usize,
    pub lc_violations: usize,
    pub kf_violations: usize,
    /// Stance periods in which a foot's tangential force had to be capped.
    pub slips: usize,
    pub mpc_failures: usize,
    pub success: bool,
    pub cause: TerminationCause,
    pub sim_time: f64,
    /// |commanded - realized| per control tick after the gait starts.
    pub err_vx: Vec<f64>,
    pub err_vy: Vec<f64>,
    pub err_wz: Vec<f64>,
    pub height_err_max: f64,
    pub roll_pitch_max: f64,
}

impl EpisodeMetrics {
    pub fn violations(&self) -> usize {
        self.tr_violations + self.lc_violations + self.kf_violations
    }
}

/// Observation vector length for a given configuration: commanded twist,
/// measured twist, joint history, rotation, per-leg phase, previous action
/// and per-leg mask latents.
pub fn observation_dim(cfg: &RunConfig) -> usize {
    12 + 24 * cfg.policy.history_len
        + 9
        + NUM_LEGS
        + NUM_LEGS
        + NUM_LEGS * cfg.classifier.latent_dim
}

struct SwingPlan {
    traj: SwingTrajectory,
    /// Query context of the latest (committing) query; audits reuse it.
    query: FootholdQuery,
    executed_cell: (usize, usize),
    apex_done: bool,
}

struct PendingOutcome {
    id: u64,
    t: f64,
    reg_distance: f64,
    remapped: usize,
}

struct World<'a, 'b> {
    deps: &'b EpisodeDeps<'a>,
    setup: &'b EpisodeSetup,
    terrain: TerrainField,
    rng: ChaCha8Rng,
    t: f64,
    state: SrbmState,
    joints: JointState,
    legs: LegSet,
    feet: [Vector3<f64>; 4],
    stance: [bool; 4],
    swings: [Option<SwingPlan>; 4],
    forces: [Vector3<f64>; 4],
    /// Violation consequences, cleared at the leg's next lift-off.
    no_force: [bool; 4],
    low_grip: [bool; 4],
    slipped: [bool; 4],
    hist_cap: usize,
    q_hist: VecDeque<[f64; 24]>,
    prev_action: [f64; 4],
    pending: Vec<PendingOutcome>,
    next_query_id: u64,
    height_ref: f64,
    metrics: EpisodeMetrics,
}

/// Runs one episode to termination. Configuration problems surface as
/// errors; in-run numerical trouble terminates the episode with a fault
/// cause instead.
pub fn run_episode(
    deps: &EpisodeDeps,
    setup: &EpisodeSetup,
    planner: &mut dyn FootstepPlanner,
) -> Result<EpisodeMetrics> {
    let mut world = World::new(deps, setup)?;
    let cause = world.run(planner);
    let mut metrics = world.metrics;
    metrics.cause = cause;
    metrics.sim_time = world.t;
    metrics.success = match cause {
        TerminationCause::Completed => true,
        TerminationCause::TimeLimit => setup.max_footsteps == 0,
        _ => false,
    };
    // Queries still in flight when the episode ended never touched down.
    let track = world_track_err(&world.state, &setup.command);
    for p in world.pending.drain(..) {
        planner.observe(&QueryOutcome {
            id: p.id,
            t: p.t,
            track_err: track,
            reg_distance: p.reg_distance,
            remapped: p.remapped,
            audits: Vec::new(),
            terminal: true,
        });
    }
    planner.episode_end(&metrics);
    Ok(metrics)
}

fn world_track_err(state: &SrbmState, cmd: &UserCommand) -> [f64; 3] {
    let v_b = state.r.transpose() * state.v;
    [
        (v_b.x - cmd.v_body.x).abs(),
        (v_b.y - cmd.v_body.y).abs(),
        (state.w.z - cmd.yaw_rate).abs(),
    ]
}

impl<'a, 'b> World<'a, 'b> {
    fn new(deps: &'b EpisodeDeps<'a>, setup: &'b EpisodeSetup) -> Result<Self> {
        let cfg = deps.cfg;
        let terrain = TerrainField::generate(
            &cfg.terrain,
            setup.kind,
            setup.difficulty,
            setup.terrain_seed,
        )?;
        let legs = LegSet::from_config(&cfg.robot);
        let p0 = Vector3::new(
            0.5 * crate::terrain::START_PAD,
            terrain.mid_y(),
            setup.command.height,
        );
        let state = SrbmState::upright(p0);
        let mut joints = JointState::zero();
        let mut feet = [Vector3::zeros(); 4];
        for leg in 0..4 {
            let hip = p0 + cfg.robot.hip_offset(leg);
            let ground = terrain.height_at(hip.x, hip.y)?;
            feet[leg] = Vector3::new(hip.x, hip.y, ground);
            let q = legs.leg(leg)
                .inverse_kinematics(Vector3::new(0.0, 0.0, ground - hip.z))
                .ok_or_else(|| Error::config("initial stand pose is outside the workspace"))?;
            joints.set_leg_q(leg, q);
        }
        let hist_capacity = cfg.policy.history_len * cfg.policy.history_stride + 1;
        let mut q_hist = VecDeque::with_capacity(hist_capacity);
        let snap = joint_snapshot(&joints);
        for _ in 0..hist_capacity {
            q_hist.push_back(snap);
        }
        Ok(Self {
            deps,
            setup,
            terrain,
            rng: ChaCha8Rng::seed_from_u64(setup.seed),
            t: 0.0,
            state,
            joints,
            legs,
            feet,
            stance: [true; 4],
            swings: [None, None, None, None],
            forces: [Vector3::zeros(); 4],
            no_force: [false; 4],
            low_grip: [false; 4],
            slipped: [false; 4],
            hist_cap: hist_capacity,
            q_hist,
            prev_action: [0.0; 4],
            pending: Vec::new(),
            next_query_id: 0,
            height_ref: setup.command.height,
            metrics: EpisodeMetrics {
                footsteps: 0,
                queries: 0,
                remaps: 0,
                no_safe_cells: 0,
                tr_violations: 0,
                lc_violations: 0,
                kf_violations: 0,
                slips: 0,
                mpc_failures: 0,
                success: false,
                cause: TerminationCause::TimeLimit,
                sim_time: 0.0,
                err_vx: Vec::new(),
                err_vy: Vec::new(),
                err_wz: Vec::new(),
                height_err_max: 0.0,
                roll_pitch_max: 0.0,
            },
        })
    }

    fn gait_t(&self) -> f64 {
        self.t - self.deps.cfg.sim.settle_time
    }

    /// Commanded twist: zero while settling, the episode command after.
    fn command(&self) -> UserCommand {
        let mut cmd = if self.gait_t() < 0.0 {
            UserCommand::hover(self.setup.command.height)
        } else {
            self.setup.command.clone()
        };
        cmd.height = self.height_ref;
        cmd
    }

    fn hip_pose(&self, leg: usize) -> HipPose {
        let hip = self.state.p + self.state.r * self.deps.cfg.robot.hip_offset(leg);
        HipPose {
            pos: hip,
            yaw: self.state.yaw(),
        }
    }

    fn run(&mut self, planner: &mut dyn FootstepPlanner) -> TerminationCause {
        let dt = self.deps.cfg.sim.dt;
        let control_every = self.deps.cfg.sim.control_every;
        let mut tick: usize = 0;
        loop {
            if let Some(cause) = self.process_events(planner) {
                return cause;
            }
            if self.apex_requery(planner).is_err() {
                return TerminationCause::NumericalFault;
            }
            if tick % control_every == 0 {
                self.push_history();
                if let Some(cause) = self.replan() {
                    return cause;
                }
                if self.gait_t() >= 0.0 {
                    let e = world_track_err(&self.state, &self.setup.command);
                    self.metrics.err_vx.push(e[0]);
                    self.metrics.err_vy.push(e[1]);
                    self.metrics.err_wz.push(e[2]);
                }
            }
            self.integrate_tick(dt);
            tick += 1;
            self.t = tick as f64 * dt;
            self.move_swing_feet();
            if let Some(cause) = self.check_termination() {
                return cause;
            }
            if self.t >= self.setup.time_limit {
                return TerminationCause::TimeLimit;
            }
        }
    }

    /// Touchdowns first (pin, audit, report), then lift-offs (plan new
    /// swings); in a trot both can land on the same tick.
    fn process_events(&mut self, planner: &mut dyn FootstepPlanner) -> Option<TerminationCause> {
        let gt = self.gait_t();
        let now = self.deps.gait.stance_flags(gt);
        let mut landed = Vec::new();
        let mut lifted = Vec::new();
        for leg in 0..4 {
            if now[leg] && !self.stance[leg] {
                landed.push(leg);
            }
            if !now[leg] && self.stance[leg] {
                lifted.push(leg);
            }
        }
        if !landed.is_empty() {
            if let Some(cause) = self.touchdown(&landed, planner) {
                return Some(cause);
            }
        }
        if !lifted.is_empty() {
            for &leg in &lifted {
                self.stance[leg] = false;
                self.no_force[leg] = false;
                self.low_grip[leg] = false;
                self.slipped[leg] = false;
            }
            if self.plan_pair(&lifted, planner).is_err() {
                return Some(TerminationCause::NumericalFault);
            }
        }
        None
    }

    fn touchdown(
        &mut self,
        landed: &[usize],
        planner: &mut dyn FootstepPlanner,
    ) -> Option<TerminationCause> {
        let mut audits = Vec::new();
        for &leg in landed {
            self.stance[leg] = true;
            let Some(plan) = self.swings[leg].take() else {
                continue;
            };
            self.feet[leg] = plan.traj.target();
            let mask = self.deps.evaluator.evaluate(&plan.query);
            let (i, j) = plan.executed_cell;
            let audit = CellAudit {
                leg,
                edge_ok: mask.edge.get(i, j),
                clearance_ok: mask.clearance.get(i, j),
                reach_ok: mask.reach.get(i, j),
                edge_distance: nearest_false_distance(&mask.edge, (i, j)),
            };
            if !audit.edge_ok {
                self.metrics.tr_violations += 1;
                self.low_grip[leg] = true;
            }
            if !audit.clearance_ok {
                self.metrics.lc_violations += 1;
                let angle = self.rng.gen_range(0.0..std::f64::consts::TAU);
                let kick = self.deps.cfg.sim.shin_strike_kick;
                self.state.v.x += kick * angle.cos();
                self.state.v.y += kick * angle.sin();
            }
            if !audit.reach_ok {
                self.metrics.kf_violations += 1;
                self.no_force[leg] = true;
            }
            audits.push(audit);
            self.metrics.footsteps += 1;
        }
        let track = world_track_err(&self.state, &self.setup.command);
        let n = self.pending.len();
        for (k, p) in self.pending.drain(..).enumerate() {
            planner.observe(&QueryOutcome {
                id: p.id,
                t: p.t,
                track_err: track,
                reg_distance: p.reg_distance,
                remapped: p.remapped,
                audits: if k + 1 == n { audits.clone() } else { Vec::new() },
                terminal: false,
            });
        }
        if self.setup.max_footsteps > 0 && self.metrics.footsteps >= self.setup.max_footsteps {
            return Some(TerminationCause::Completed);
        }
        None
    }

    /// Queries the planner for the given swing legs and (re)builds their
    /// trajectories. Used at lift-off and again at the apex.
    fn query_legs(
        &mut self,
        leg_ids: &[usize],
        phase: f64,
        planner: &mut dyn FootstepPlanner,
    ) -> Result<Vec<(usize, FootholdQuery, (usize, usize))>> {
        let cfg = self.deps.cfg;
        let cmd = self.setup.command.clone();
        let mut legs = Vec::new();
        for &leg in leg_ids {
            let query = swing_query(
                &self.terrain,
                &cfg.patch,
                &cfg.gait,
                cfg.robot.hip_offset(leg),
                self.hip_pose(leg),
                leg,
                phase,
                cmd.v_body,
                cmd.yaw_rate,
            )?;
            let mask = match self.deps.mask_source {
                MaskSource::Oracle => Some(self.deps.evaluator.evaluate(&query).safe),
                MaskSource::Learned => {
                    let net = self.deps.classifier.expect("checked in EpisodeDeps::new");
                    let (heights, state) = input_from_patch(
                        &query.map,
                        leg,
                        phase,
                        cmd.v_body,
                        Vector3::new(0.0, 0.0, cmd.yaw_rate),
                        query.hip_pose.yaw,
                    );
                    Some(net.predict_mask(&heights, &state, cfg.classifier.decision_threshold)?)
                }
                MaskSource::None => None,
            };
            let latent = self.leg_latent(&query)?;
            let nominal_cell = (query.map.rows() / 2, query.map.cols() / 2);
            legs.push(LegQuery {
                leg,
                query,
                mask,
                latent,
                nominal_cell,
            });
        }
        let observation = self.build_observation(&legs)?;
        let query = PolicyQuery {
            id: self.next_query_id,
            t: self.t,
            legs,
            observation,
        };
        self.next_query_id += 1;
        self.metrics.queries += 1;
        let actions = planner.plan(&query);
        assert_eq!(actions.len(), query.legs.len(), "one action per swing leg");

        let mut reg_distance = 0.0;
        let mut remapped = 0;
        let mut out = Vec::new();
        self.prev_action = [0.0; 4];
        for (k, lq) in query.legs.iter().enumerate() {
            let rows = lq.query.map.rows();
            let cols = lq.query.map.cols();
            let mut cell = (
                action_to_index(actions[k][0], rows),
                action_to_index(actions[k][1], cols),
            );
            if let Some(mask) = &lq.mask {
                if !mask.get(cell.0, cell.1) {
                    match nearest_safe(mask, cell) {
                        Some(safe) => {
                            cell = safe;
                            remapped += 1;
                        }
                        None => self.metrics.no_safe_cells += 1,
                    }
                }
            }
            let target = lq.query.candidate(cell.0, cell.1);
            let nominal = lq.query.candidate(lq.nominal_cell.0, lq.nominal_cell.1);
            reg_distance += (target - nominal).xy().norm();
            if k < 2 {
                self.prev_action[2 * k] = actions[k][0];
                self.prev_action[2 * k + 1] = actions[k][1];
            }
            out.push((lq.leg, lq.query.clone(), cell));
        }
        self.metrics.remaps += remapped;
        self.pending.push(PendingOutcome {
            id: query.id,
            t: self.t,
            reg_distance,
            remapped,
        });
        Ok(out)
    }

    fn plan_pair(&mut self, lifted: &[usize], planner: &mut dyn FootstepPlanner) -> Result<()> {
        let phase = self
            .deps
            .gait
            .swing_phase(lifted[0], self.gait_t())
            .unwrap_or(0.0);
        let plans = self.query_legs(lifted, phase, planner)?;
        let apex = self.deps.cfg.gait.apex_height;
        for (leg, query, cell) in plans {
            let target = query.candidate(cell.0, cell.1);
            self.swings[leg] = Some(SwingPlan {
                traj: SwingTrajectory::new(self.feet[leg], target, apex),
                query,
                executed_cell: cell,
                apex_done: false,
            });
        }
        Ok(())
    }

    fn apex_requery(&mut self, planner: &mut dyn FootstepPlanner) -> Result<()> {
        let gt = self.gait_t();
        let due: Vec<usize> = (0..4)
            .filter(|&leg| {
                self.swings[leg].as_ref().is_some_and(|p| !p.apex_done)
                    && self.deps.gait.swing_phase(leg, gt).is_some_and(|s| s >= 0.5)
            })
            .collect();
        if due.is_empty() {
            return Ok(());
        }
        let phase = self.deps.gait.swing_phase(due[0], gt).unwrap();
        let plans = self.query_legs(&due, phase, planner)?;
        for (leg, query, cell) in plans {
            let target = query.candidate(cell.0, cell.1);
            let plan = self.swings[leg].as_mut().expect("queried an active swing");
            plan.traj.retarget(target);
            plan.query = query;
            plan.executed_cell = cell;
            plan.apex_done = true;
        }
        Ok(())
    }

    /// Classifier latent for one query patch; zeros when no classifier is
    /// attached so the observation layout stays fixed.
    fn leg_latent(&self, query: &FootholdQuery) -> Result<Vec<f64>> {
        match self.deps.classifier {
            Some(net) => {
                let cmd = &self.setup.command;
                let (heights, state) = input_from_patch(
                    &query.map,
                    query.leg,
                    query.phase,
                    cmd.v_body,
                    Vector3::new(0.0, 0.0, cmd.yaw_rate),
                    query.hip_pose.yaw,
                );
                net.encode(&heights, &state)
            }
            None => Ok(vec![0.0; self.deps.cfg.classifier.latent_dim]),
        }
    }

    fn build_observation(&self, queried: &[LegQuery]) -> Result<Vec<f64>> {
        let cfg = self.deps.cfg;
        let cmd = self.command();
        let mut obs = Vec::with_capacity(observation_dim(cfg));
        obs.extend_from_slice(&[cmd.v_body.x, cmd.v_body.y, cmd.v_body.z]);
        obs.extend_from_slice(&[0.0, 0.0, cmd.yaw_rate]);
        let v_b = self.state.r.transpose() * self.state.v;
        obs.extend_from_slice(&[v_b.x, v_b.y, v_b.z]);
        obs.extend_from_slice(&[self.state.w.x, self.state.w.y, self.state.w.z]);
        for k in 1..=cfg.policy.history_len {
            let lag = k * cfg.policy.history_stride;
            let idx = self.q_hist.len().saturating_sub(1 + lag);
            obs.extend_from_slice(&self.q_hist[idx]);
        }
        for r in 0..3 {
            for c in 0..3 {
                obs.push(self.state.r[(r, c)]);
            }
        }
        let gt = self.gait_t();
        for leg in 0..4 {
            obs.push(self.deps.gait.swing_phase(leg, gt).unwrap_or(0.0));
        }
        obs.extend_from_slice(&self.prev_action);
        // Swing legs use their fresh query patches; stance legs a patch at
        // the current foothold with zero phase.
        for leg in 0..4 {
            if let Some(lq) = queried.iter().find(|lq| lq.leg == leg) {
                obs.extend_from_slice(&lq.latent);
                continue;
            }
            let latent = match self.stance_latent(leg) {
                Ok(l) => l,
                // off-field patches degrade to zeros rather than faulting
                Err(_) => vec![0.0; cfg.classifier.latent_dim],
            };
            obs.extend_from_slice(&latent);
        }
        debug_assert_eq!(obs.len(), observation_dim(cfg));
        Ok(obs)
    }

    fn stance_latent(&self, leg: usize) -> Result<Vec<f64>> {
        match self.deps.classifier {
            Some(net) => {
                let cmd = &self.setup.command;
                let pose = self.hip_pose(leg);
                let map = self.terrain.extract_heightmap(
                    &self.deps.cfg.patch,
                    self.feet[leg],
                    pose.pos.z,
                )?;
                let (heights, state) = input_from_patch(
                    &map,
                    leg,
                    0.0,
                    cmd.v_body,
                    Vector3::new(0.0, 0.0, cmd.yaw_rate),
                    pose.yaw,
                );
                net.encode(&heights, &state)
            }
            None => Ok(vec![0.0; self.deps.cfg.classifier.latent_dim]),
        }
    }

    fn push_history(&mut self) {
        if self.q_hist.len() >= self.hist_cap {
            self.q_hist.pop_front();
        }
        self.q_hist.push_back(joint_snapshot(&self.joints));
    }

    fn replan(&mut self) -> Option<TerminationCause> {
        let cfg = self.deps.cfg;
        // reference height rides on the mean stance foothold
        let mut ground = 0.0;
        let mut n = 0.0;
        for leg in 0..4 {
            if self.stance[leg] {
                ground += self.feet[leg].z;
                n += 1.0;
            }
        }
        if n > 0.0 {
            self.height_ref = ground / n + self.setup.command.height;
        }
        let cmd = self.command();
        let mut schedule = self
            .deps
            .gait
            .horizon(self.gait_t(), cfg.mpc.dt, cfg.mpc.horizon);
        // A leg that landed on an unreachable cell bears no load for the
        // rest of this stance; the horizon is masked conservatively.
        for step in &mut schedule {
            for leg in 0..4 {
                if self.no_force[leg] {
                    step[leg] = false;
                }
            }
        }
        let footholds = std::array::from_fn(|leg| match &self.swings[leg] {
            Some(plan) => plan.traj.target(),
            None => self.feet[leg],
        });
        match self.deps.mpc.control(&self.state, &cmd, &schedule, &footholds) {
            Ok(sol) => {
                if !sol.converged {
                    self.metrics.mpc_failures += 1;
                }
                self.forces = sol.forces[0];
                self.clip_slipping_forces();
                None
            }
            Err(_) => Some(TerminationCause::NumericalFault),
        }
    }

    /// Feet on roughness-unsafe cells grip poorly: their tangential force
    /// is capped at the reduced friction cone and the excess shows up as a
    /// slip event instead of thrust.
    fn clip_slipping_forces(&mut self) {
        let mu = self.deps.mpc.params.friction;
        let factor = self.deps.cfg.sim.edge_friction_factor;
        for leg in 0..4 {
            if !self.stance[leg] || self.no_force[leg] || !self.low_grip[leg] {
                continue;
            }
            let f = &mut self.forces[leg];
            let cap = mu * factor * f.z.max(0.0);
            let tangential = f.xy().norm();
            if tangential > cap + 1e-12 {
                let scale = if tangential > 0.0 { cap / tangential } else { 0.0 };
                f.x *= scale;
                f.y *= scale;
                if !self.slipped[leg] {
                    self.slipped[leg] = true;
                    self.metrics.slips += 1;
                }
            }
        }
    }

    fn integrate_tick(&mut self, dt: f64) {
        let mut f_ext = Vector3::zeros();
        for d in &self.setup.disturbances {
            if d.active(self.gait_t()) {
                f_ext.x += d.force.x;
                f_ext.y += d.force.y;
            }
        }
        let mut stance = self.stance;
        for leg in 0..4 {
            if self.no_force[leg] {
                stance[leg] = false;
            }
        }
        self.state = integrate_ext(
            &self.state,
            &self.forces,
            &self.feet,
            stance,
            &self.deps.mpc.params,
            f_ext,
            dt,
        );
    }

    fn move_swing_feet(&mut self) {
        let gt = self.gait_t();
        let dt = self.deps.cfg.sim.dt;
        for leg in 0..4 {
            if let Some(plan) = &self.swings[leg] {
                if let Some(s) = self.deps.gait.swing_phase(leg, gt) {
                    self.feet[leg] = plan.traj.position(s);
                }
            }
            let hip_body = self.deps.cfg.robot.hip_offset(leg);
            let foot_body = self.state.r.transpose() * (self.feet[leg] - self.state.p);
            let q_old = self.joints.leg_q(leg);
            if let Some(q) = self.legs.leg(leg).inverse_kinematics(foot_body - hip_body) {
                self.joints.set_leg_q(leg, q);
                self.joints.set_leg_dq(leg, (q - q_old) / dt);
            }
        }
    }

    fn check_termination(&mut self) -> Option<TerminationCause> {
        let s = &self.state;
        let finite = s.p.iter().all(|v| v.is_finite())
            && s.v.iter().all(|v| v.is_finite())
            && s.w.iter().all(|v| v.is_finite())
            && s.r.iter().all(|v| v.is_finite());
        if !finite {
            return Some(TerminationCause::NumericalFault);
        }
        let (roll, pitch) = s.roll_pitch();
        self.metrics.roll_pitch_max = self
            .metrics
            .roll_pitch_max
            .max(roll.abs())
            .max(pitch.abs());
        if roll.abs() > self.deps.cfg.sim.max_roll_pitch
            || pitch.abs() > self.deps.cfg.sim.max_roll_pitch
        {
            return Some(TerminationCause::RollPitchLimit);
        }
        let Ok(ground) = self.terrain.height_at(s.p.x, s.p.y) else {
            return Some(TerminationCause::NumericalFault);
        };
        if s.p.z - ground < self.deps.cfg.sim.min_trunk_clearance {
            return Some(TerminationCause::TrunkClearance);
        }
        if self.gait_t() >= 0.0 {
            self.metrics.height_err_max = self
                .metrics
                .height_err_max
                .max((s.p.z - self.height_ref).abs());
        }
        None
    }
}

fn joint_snapshot(joints: &JointState) -> [f64; 24] {
    let mut snap = [0.0; 24];
    for leg in 0..4 {
        let q = joints.leg_q(leg);
        let dq = joints.leg_dq(leg);
        for k in 0..3 {
            snap[3 * leg + k] = q[k];
            snap[12 + 3 * leg + k] = dq[k];
        }
    }
    snap
}

/// Distance in cells from `cell` to the nearest `false` entry (infinite if
/// the grid is all true).
pub fn nearest_false_distance(grid: &BoolGrid, cell: (usize, usize)) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..grid.rows() {
        for j in 0..grid.cols() {
            if !grid.get(i, j) {
                let di = i as f64 - cell.0 as f64;
                let dj = j as f64 - cell.1 as f64;
                best = best.min((di * di + dj * dj).sqrt());
            }
        }
    }
    best
}
