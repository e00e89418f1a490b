//! 3-DoF leg kinematics: hip abduction about x, hip flexion about y, knee
//! about y. The zero pose points the leg straight down, so the foot sits at
//! (0, 0, -(l_upper + l_lower)) in the hip frame. The knee bends one way
//! (q_knee <= 0); with the abduction limits well inside +-pi/2 the inverse
//! map is single-valued on the reachable set.

use nalgebra::{DMatrix, Matrix3, Rotation3, SVector, Vector3};

use crate::config::RobotConfig;

pub const NUM_LEGS: usize = 4;
pub const JOINTS_PER_LEG: usize = 3;
pub const NUM_JOINTS: usize = NUM_LEGS * JOINTS_PER_LEG;

/// Leg order used everywhere: left-front, right-front, left-hind,
/// right-hind.
pub const LEG_NAMES: [&str; 4] = ["LF", "RF", "LH", "RH"];

/// Geometry of one leg.
#[derive(Debug, Clone)]
pub struct LegModel {
    /// Hip position in the body frame.
    pub hip_offset: Vector3<f64>,
    pub l_upper: f64,
    pub l_lower: f64,
    /// (min, max) per joint: abduction, hip flexion, knee.
    pub joint_limits: [(f64, f64); 3],
    pub shin_radius: f64,
}

/// Full-robot joint positions and velocities, 3 per leg in leg order.
#[derive(Debug, Clone, Copy)]
pub struct JointState {
    pub q: SVector<f64, NUM_JOINTS>,
    pub dq: SVector<f64, NUM_JOINTS>,
}

impl JointState {
    pub fn zero() -> Self {
        Self {
            q: SVector::zeros(),
            dq: SVector::zeros(),
        }
    }

    pub fn leg_q(&self, leg: usize) -> Vector3<f64> {
        self.q.fixed_rows::<3>(leg * 3).into()
    }

    pub fn leg_dq(&self, leg: usize) -> Vector3<f64> {
        self.dq.fixed_rows::<3>(leg * 3).into()
    }

    pub fn set_leg_q(&mut self, leg: usize, q: Vector3<f64>) {
        self.q.fixed_rows_mut::<3>(leg * 3).copy_from(&q);
    }

    pub fn set_leg_dq(&mut self, leg: usize, dq: Vector3<f64>) {
        self.dq.fixed_rows_mut::<3>(leg * 3).copy_from(&dq);
    }
}

/// Knee-to-foot bounding capsule, hip frame.
#[derive(Debug, Clone, Copy)]
pub struct Capsule {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub radius: f64,
}

impl LegModel {
    pub fn from_config(cfg: &RobotConfig, leg: usize) -> Self {
        Self {
            hip_offset: cfg.hip_offset(leg),
            l_upper: cfg.l_upper,
            l_lower: cfg.l_lower,
            joint_limits: [
                (cfg.abduction_limits[0], cfg.abduction_limits[1]),
                (cfg.hip_limits[0], cfg.hip_limits[1]),
                (cfg.knee_limits[0], cfg.knee_limits[1]),
            ],
            shin_radius: cfg.shin_radius,
        }
    }

    pub fn reach(&self) -> f64 {
        self.l_upper + self.l_lower
    }

    /// Knee position in the hip frame.
    pub fn knee_position(&self, q: Vector3<f64>) -> Vector3<f64> {
        let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), q[0]);
        let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), q[1]);
        rx * ry * Vector3::new(0.0, 0.0, -self.l_upper)
    }

    /// Foot position in the hip frame.
    pub fn forward_kinematics(&self, q: Vector3<f64>) -> Vector3<f64> {
        let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), q[0]);
        let ry2 = Rotation3::from_axis_angle(&Vector3::y_axis(), q[1]);
        let ry3 = Rotation3::from_axis_angle(&Vector3::y_axis(), q[2]);
        let shank = ry3 * Vector3::new(0.0, 0.0, -self.l_lower);
        rx * ry2 * (Vector3::new(0.0, 0.0, -self.l_upper) + shank)
    }

    fn within_limits(&self, q: Vector3<f64>) -> bool {
        (0..3).all(|i| {
            let (lo, hi) = self.joint_limits[i];
            q[i] >= lo - 1e-12 && q[i] <= hi + 1e-12
        })
    }

    /// Closed-form inverse kinematics on the fixed knee branch. Returns
    /// None when the target is out of reach or violates joint limits.
    pub fn inverse_kinematics(&self, foot: Vector3<f64>) -> Option<Vector3<f64>> {
        if !foot.iter().all(|c| c.is_finite()) {
            return None;
        }
        let (l1, l2) = (self.l_upper, self.l_lower);
        let r2 = foot.norm_squared();
        let r = r2.sqrt();
        if r > l1 + l2 + 1e-12 || r < (l1 - l2).abs() - 1e-12 {
            return None;
        }
        if r2 < 1e-24 {
            return None;
        }
        let c3 = ((r2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
        let q3 = -c3.acos();
        let s3 = q3.sin();
        let a = l1 + l2 * c3;
        let b = l2 * s3;

        let x = foot.x;
        let r_yz = foot.y.hypot(foot.z);
        // two abduction angles pi apart align the leg plane: one places the
        // in-plane target below the hip, one above. At most one can satisfy
        // the abduction limits.
        let q1_down = if r_yz == 0.0 {
            0.0
        } else {
            foot.y.atan2(-foot.z)
        };
        let q1_up = q1_down - std::f64::consts::PI * q1_down.signum();
        for (q1, zt) in [(q1_down, -r_yz), (q1_up, r_yz)] {
            let s2 = (-a * x + b * zt) / r2;
            let c2 = (-b * x - a * zt) / r2;
            let q = Vector3::new(q1, s2.atan2(c2), q3);
            if self.within_limits(q) {
                return Some(q);
            }
        }
        None
    }

    /// True iff the target is reachable under the joint limits.
    pub fn in_workspace(&self, foot: Vector3<f64>) -> bool {
        self.inverse_kinematics(foot).is_some()
    }

    /// The shin capsule, knee to foot, hip frame.
    pub fn shin_segment(&self, q: Vector3<f64>) -> Capsule {
        Capsule {
            a: self.knee_position(q),
            b: self.forward_kinematics(q),
            radius: self.shin_radius,
        }
    }

    /// Analytic foot Jacobian d(foot)/d(q), hip frame. Columns are axis
    /// cross offset: abduction about x through the hip, flexion and knee
    /// about the (abducted) y axis through the hip and knee.
    pub fn foot_jacobian(&self, q: Vector3<f64>) -> Matrix3<f64> {
        let foot = self.forward_kinematics(q);
        let knee = self.knee_position(q);
        let axis_flex = Vector3::new(0.0, q[0].cos(), q[0].sin());
        let c1 = Vector3::x().cross(&foot);
        let c2 = axis_flex.cross(&foot);
        let c3 = axis_flex.cross(&(foot - knee));
        Matrix3::from_columns(&[c1, c2, c3])
    }
}

/// All four legs of the robot.
#[derive(Debug, Clone)]
pub struct LegSet {
    pub legs: [LegModel; 4],
}

impl LegSet {
    pub fn from_config(cfg: &RobotConfig) -> Self {
        Self {
            legs: std::array::from_fn(|i| LegModel::from_config(cfg, i)),
        }
    }

    pub fn leg(&self, i: usize) -> &LegModel {
        &self.legs[i]
    }

    /// Foot positions in the body frame.
    pub fn foot_positions_body(&self, state: &JointState) -> [Vector3<f64>; 4] {
        std::array::from_fn(|i| {
            self.legs[i].hip_offset + self.legs[i].forward_kinematics(state.leg_q(i))
        })
    }

    /// Stacked contact Jacobian mapping all 12 joint velocities to stance
    /// foot velocities (body frame): one 3-row band per stance leg, in leg
    /// order, zeros outside that leg's columns.
    pub fn contact_jacobian(&self, state: &JointState, stance: [bool; 4]) -> DMatrix<f64> {
        let n_stance = stance.iter().filter(|s| **s).count();
        let mut j = DMatrix::zeros(3 * n_stance, NUM_JOINTS);
        let mut row = 0;
        for (leg, &on) in stance.iter().enumerate() {
            if !on {
                continue;
            }
            let jl = self.legs[leg].foot_jacobian(state.leg_q(leg));
            j.view_mut((row, leg * 3), (3, 3)).copy_from(&jl);
            row += 3;
        }
        j
    }
}
