//! Variation-based linearization of the trunk dynamics.
//!
//! The 12-dim state is x = [p, v, xi, w] where xi is the rotation
//! variation: R = R_op exp(xi^). Around an operating point (xi = 0) the
//! exact coordinate dynamics
//!
//!     p'  = v
//!     v'  = (1/m) sum f_i + g
//!     xi' = Jr(xi)^-1 w
//!     w'  = I^-1 (R' tau_w - w^ I w)
//!
//! are differentiated analytically and discretized by forward Euler:
//! A_k = I + A dt, B_k = B dt, c_k = (f(x_op,u_op) - A x_op - B u_op) dt.

use nalgebra::{Matrix3, Rotation3, SMatrix, SVector, Vector3};

use super::srbm::{com_torque, skew, SrbmParams, SrbmState};
use crate::error::{Error, Result};

pub const NX: usize = 12;
pub const NU: usize = 12;

pub type StateVec = SVector<f64, NX>;
pub type InputVec = SVector<f64, NU>;

/// One forward-Euler step of the linearized dynamics:
/// x_{k+1} = a x_k + b u_k + c.
#[derive(Debug, Clone)]
pub struct LinearStep {
    pub a: SMatrix<f64, NX, NX>,
    pub b: SMatrix<f64, NX, NU>,
    pub c: StateVec,
}

/// Operating-point coordinates [p, v, 0, w].
pub fn state_coords(op: &SrbmState) -> StateVec {
    let mut x = StateVec::zeros();
    x.fixed_rows_mut::<3>(0).copy_from(&op.p);
    x.fixed_rows_mut::<3>(3).copy_from(&op.v);
    x.fixed_rows_mut::<3>(9).copy_from(&op.w);
    x
}

pub fn forces_to_vec(f: &[Vector3<f64>; 4]) -> InputVec {
    let mut u = InputVec::zeros();
    for i in 0..4 {
        u.fixed_rows_mut::<3>(3 * i).copy_from(&f[i]);
    }
    u
}

pub fn vec_to_forces(u: &InputVec) -> [Vector3<f64>; 4] {
    std::array::from_fn(|i| u.fixed_rows::<3>(3 * i).into())
}

/// Equal split of the weight among stance legs, vertical only. This is the
/// force operating point for the linearization.
pub fn gravity_distribution(stance: [bool; 4], params: &SrbmParams) -> [Vector3<f64>; 4] {
    let n = stance.iter().filter(|s| **s).count().max(1);
    let fz = params.mass * params.gravity.norm() / n as f64;
    std::array::from_fn(|i| {
        if stance[i] {
            Vector3::new(0.0, 0.0, fz)
        } else {
            Vector3::zeros()
        }
    })
}

/// Inverse of the right Jacobian of SO(3); maps body angular velocity to
/// the variation rate: xi' = jr_inv(xi) w.
pub fn right_jacobian_inv(xi: Vector3<f64>) -> Matrix3<f64> {
    let theta = xi.norm();
    let x = skew(xi);
    if theta < 1e-9 {
        return Matrix3::identity() + 0.5 * x + x * x / 12.0;
    }
    let coef = 1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + 0.5 * x + coef * (x * x)
}

/// Rotation variation xi with R = R_op exp(xi^).
pub fn rotation_variation(r_op: &Matrix3<f64>, r: &Matrix3<f64>) -> Vector3<f64> {
    let rel = Rotation3::from_matrix_unchecked(r_op.transpose() * r);
    rel.scaled_axis()
}

/// Exact nonlinear dynamics in variation coordinates around R_op. Used by
/// the linearization error analysis; `linearize_step` is its first-order
/// Taylor expansion.
pub fn coords_derivative(
    x: &StateVec,
    u: &InputVec,
    r_op: &Matrix3<f64>,
    footholds: &[Vector3<f64>; 4],
    stance: [bool; 4],
    params: &SrbmParams,
) -> StateVec {
    let p: Vector3<f64> = x.fixed_rows::<3>(0).into();
    let v: Vector3<f64> = x.fixed_rows::<3>(3).into();
    let xi: Vector3<f64> = x.fixed_rows::<3>(6).into();
    let w: Vector3<f64> = x.fixed_rows::<3>(9).into();
    let r = r_op * Rotation3::from_scaled_axis(xi).into_inner();
    let forces = vec_to_forces(u);
    let mut f_total = Vector3::zeros();
    for i in 0..4 {
        if stance[i] {
            f_total += forces[i];
        }
    }
    let masked: [Vector3<f64>; 4] =
        std::array::from_fn(|i| if stance[i] { forces[i] } else { Vector3::zeros() });
    let tau_w = com_torque(p, &masked, footholds, stance);
    let i_b = params.inertia_matrix();
    let i_inv = Matrix3::from_diagonal(&params.inertia.map(|e| 1.0 / e));

    let mut dx = StateVec::zeros();
    dx.fixed_rows_mut::<3>(0).copy_from(&v);
    dx.fixed_rows_mut::<3>(3)
        .copy_from(&(f_total / params.mass + params.gravity));
    dx.fixed_rows_mut::<3>(6)
        .copy_from(&(right_jacobian_inv(xi) * w));
    dx.fixed_rows_mut::<3>(9)
        .copy_from(&(i_inv * (r.transpose() * tau_w - skew(w) * (i_b * w))));
    dx
}

/// Continuous Jacobians (A, B) and drift f(x_op, u_op) at the operating
/// point.
pub fn continuous_jacobians(
    op: &SrbmState,
    u_op: &[Vector3<f64>; 4],
    footholds: &[Vector3<f64>; 4],
    stance: [bool; 4],
    params: &SrbmParams,
) -> (SMatrix<f64, NX, NX>, SMatrix<f64, NX, NU>, StateVec) {
    let i_b = params.inertia_matrix();
    let i_inv = Matrix3::from_diagonal(&params.inertia.map(|e| 1.0 / e));
    let rt = op.r.transpose();

    let masked: [Vector3<f64>; 4] =
        std::array::from_fn(|i| if stance[i] { u_op[i] } else { Vector3::zeros() });
    let mut f_total = Vector3::zeros();
    for i in 0..4 {
        f_total += masked[i];
    }
    let tau_w = com_torque(op.p, &masked, footholds, stance);
    let m_body = rt * tau_w;

    let mut a = SMatrix::<f64, NX, NX>::zeros();
    // p' = v
    a.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    // xi' = w - 1/2 w_op^ xi
    a.fixed_view_mut::<3, 3>(6, 6).copy_from(&(-0.5 * skew(op.w)));
    a.fixed_view_mut::<3, 3>(6, 9).copy_from(&Matrix3::identity());
    // w' sensitivities
    a.fixed_view_mut::<3, 3>(9, 0)
        .copy_from(&(i_inv * rt * skew(f_total)));
    a.fixed_view_mut::<3, 3>(9, 6)
        .copy_from(&(i_inv * skew(m_body)));
    a.fixed_view_mut::<3, 3>(9, 9)
        .copy_from(&(i_inv * (skew(i_b * op.w) - skew(op.w) * i_b)));

    let mut b = SMatrix::<f64, NX, NU>::zeros();
    for i in 0..4 {
        if !stance[i] {
            continue;
        }
        let r_i = footholds[i] - op.p;
        b.fixed_view_mut::<3, 3>(3, 3 * i)
            .copy_from(&(Matrix3::identity() / params.mass));
        b.fixed_view_mut::<3, 3>(9, 3 * i)
            .copy_from(&(i_inv * rt * skew(r_i)));
    }

    let x_op = state_coords(op);
    let u_vec = forces_to_vec(&masked);
    let f_op = coords_derivative(&x_op, &u_vec, &op.r, footholds, stance, params);
    (a, b, f_op)
}

/// Forward-Euler discretization at the operating point.
pub fn linearize_step(
    op: &SrbmState,
    u_op: &[Vector3<f64>; 4],
    footholds: &[Vector3<f64>; 4],
    stance: [bool; 4],
    params: &SrbmParams,
    dt: f64,
) -> Result<LinearStep> {
    op.check_rotation()
        .map_err(|_| Error::state("operating point rotation not orthonormal"))?;
    let (a, b, f_op) = continuous_jacobians(op, u_op, footholds, stance, params);
    let x_op = state_coords(op);
    let u_vec = forces_to_vec(u_op);
    let a_k = SMatrix::<f64, NX, NX>::identity() + a * dt;
    let b_k = b * dt;
    let c_k = (f_op - a * x_op - b * u_vec) * dt;
    Ok(LinearStep {
        a: a_k,
        b: b_k,
        c: c_k,
    })
}

/// Per-step linearization over a contact schedule. All steps share the
/// operating state; the stance pattern (and with it the gravity-split
/// operating force) changes per step.
pub fn linearize_schedule(
    op: &SrbmState,
    schedule: &[[bool; 4]],
    footholds: &[Vector3<f64>; 4],
    params: &SrbmParams,
    dt: f64,
) -> Result<Vec<LinearStep>> {
    schedule
        .iter()
        .map(|&stance| {
            let u_op = gravity_distribution(stance, params);
            linearize_step(op, &u_op, footholds, stance, params, dt)
        })
        .collect()
}
