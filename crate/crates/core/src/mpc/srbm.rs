//! Single-rigid-body trunk dynamics. The trunk is a floating rigid body
//! driven by ground-reaction forces at the stance feet:
//!
//!     p''  = (1/m) sum f_i + g
//!     R'   = R w^
//!     I w' = R' (sum r_i^ f_i) - w^ I w     (body frame, r_i = c_i - p)

use nalgebra::{Matrix3, Vector3};

use crate::config::RobotConfig;
use crate::error::{Error, Result};

pub fn skew(v: Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inertial parameters of the trunk plus the ground friction the
/// controller may rely on.
#[derive(Debug, Clone, Copy)]
pub struct SrbmParams {
    pub mass: f64,
    /// Body-frame inertia diagonal.
    pub inertia: Vector3<f64>,
    pub gravity: Vector3<f64>,
    pub friction: f64,
}

impl SrbmParams {
    pub fn from_config(cfg: &RobotConfig) -> Self {
        Self {
            mass: cfg.mass,
            inertia: Vector3::from(cfg.inertia_diag),
            gravity: cfg.gravity(),
            friction: cfg.friction,
        }
    }

    pub fn inertia_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&self.inertia)
    }
}

/// Trunk state: world position/velocity, orientation, body angular rate.
#[derive(Debug, Clone, Copy)]
pub struct SrbmState {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub r: Matrix3<f64>,
    pub w: Vector3<f64>,
}

impl SrbmState {
    pub fn upright(p: Vector3<f64>) -> Self {
        Self {
            p,
            v: Vector3::zeros(),
            r: Matrix3::identity(),
            w: Vector3::zeros(),
        }
    }

    /// Frobenius distance of R'R from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        (self.r.transpose() * self.r - Matrix3::identity()).norm()
    }

    pub fn check_rotation(&self) -> Result<()> {
        if self.orthonormality_error() > 1e-9 || (self.r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::state("rotation matrix drifted from SO(3)"));
        }
        Ok(())
    }

    /// Roll and pitch extracted from the rotation (zyx convention).
    pub fn roll_pitch(&self) -> (f64, f64) {
        let roll = self.r[(2, 1)].atan2(self.r[(2, 2)]);
        let pitch = (-self.r[(2, 0)]).clamp(-1.0, 1.0).asin();
        (roll, pitch)
    }

    pub fn yaw(&self) -> f64 {
        self.r[(1, 0)].atan2(self.r[(0, 0)])
    }
}

/// Time derivative of (p, v, w) plus the angular-velocity matrix for R.
#[derive(Debug, Clone, Copy)]
pub struct SrbmDerivative {
    pub dp: Vector3<f64>,
    pub dv: Vector3<f64>,
    /// R' = R * w^ ; integrate with the caller's scheme.
    pub dw: Vector3<f64>,
}

/// World-frame torque about the CoM from the stance forces.
pub fn com_torque(
    p_com: Vector3<f64>,
    forces: &[Vector3<f64>; 4],
    footholds: &[Vector3<f64>; 4],
    stance: [bool; 4],
) -> Vector3<f64> {
    let mut tau = Vector3::zeros();
    for i in 0..4 {
        if stance[i] {
            tau += (footholds[i] - p_com).cross(&forces[i]);
        }
    }
    tau
}

pub fn srbm_derivative(
    state: &SrbmState,
    forces: &[Vector3<f64>; 4],
    footholds: &[Vector3<f64>; 4],
    stance: [bool; 4],
    params: &SrbmParams,
) -> SrbmDerivative {
    let mut f_total = Vector3::zeros();
    for i in 0..4 {
        if stance[i] {
            f_total += forces[i];
        }
    }
    let dv = f_total / params.mass + params.gravity;
    let tau_w = com_torque(state.p, forces, footholds, stance);
    let i_b = params.inertia_matrix();
    let i_inv = Matrix3::from_diagonal(&params.inertia.map(|x| 1.0 / x));
    let dw = i_inv * (state.r.transpose() * tau_w - skew(state.w) * (i_b * state.w));
    SrbmDerivative {
        dp: state.v,
        dv,
        dw,
    }
}

/// Gram-Schmidt re-orthonormalization of the rotation columns.
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let c0 = r.column(0).normalize();
    let mut c1: Vector3<f64> = r.column(1).into();
    c1 -= c0 * c0.dot(&c1);
    let c1 = c1.normalize();
    let c2 = c0.cross(&c1);
    Matrix3::from_columns(&[c0, c1, c2])
}

/// One semi-implicit Euler step: velocities first, then positions with the
/// updated velocities; R is advanced with its first-order update and
/// re-orthonormalized.
pub fn integrate(
    state: &SrbmState,
    forces: &[Vector3<f64>; 4],
    footholds: &[Vector3<f64>; 4],
    stance: [bool; 4],
    params: &SrbmParams,
    dt: f64,
) -> SrbmState {
    integrate_ext(state, forces, footholds, stance, params, Vector3::zeros(), dt)
}

/// Semi-implicit Euler step with an extra force applied at the CoM
/// (disturbance pushes; no torque contribution).
pub fn integrate_ext(
    state: &SrbmState,
    forces: &[Vector3<f64>; 4],
    footholds: &[Vector3<f64>; 4],
    stance: [bool; 4],
    params: &SrbmParams,
    f_ext: Vector3<f64>,
    dt: f64,
) -> SrbmState {
    let d = srbm_derivative(state, forces, footholds, stance, params);
    let v = state.v + (d.dv + f_ext / params.mass) * dt;
    let w = state.w + d.dw * dt;
    let p = state.p + v * dt;
    let r = orthonormalize(&(state.r + state.r * skew(w) * dt));
    SrbmState { p, v, r, w }
}

/// Forward Euler step (used by the linearization error analysis, which
/// compares against the same discretization the OCP uses).
pub fn integrate_forward_euler(
    state: &SrbmState,
    forces: &[Vector3<f64>; 4],
    footholds: &[Vector3<f64>; 4],
    stance: [bool; 4],
    params: &SrbmParams,
    dt: f64,
) -> SrbmState {
    let d = srbm_derivative(state, forces, footholds, stance, params);
    SrbmState {
        p: state.p + d.dp * dt,
        v: state.v + d.dv * dt,
        r: state.r + state.r * skew(state.w) * dt,
        w: state.w + d.dw * dt,
    }
}
