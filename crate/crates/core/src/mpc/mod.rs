//! Trunk model-predictive controller: single-rigid-body dynamics,
//! variation-based linearization, OCP assembly, and a dense interior-point
//! QP solver. Solved ground-reaction forces map to joint torques through
//! the contact Jacobian.

pub mod linearize;
pub mod ocp;
pub mod qp;
pub mod srbm;

pub use linearize::{LinearStep, StateVec};
pub use ocp::{build_ocp, pyramid_violation, OcpProblem, OcpSolution, UserCommand};
pub use qp::{solve_qp, QpProblem, QpSolution, QpStatus};
pub use srbm::{integrate, orthonormalize, srbm_derivative, SrbmParams, SrbmState};

use nalgebra::{SVector, Vector3};

use crate::config::MpcConfig;
use crate::error::Result;
use crate::kinematics::{JointState, LegSet, NUM_JOINTS};

/// Stance-leg torques from ground-reaction forces: tau = -J'(q) f, with
/// forces expressed in the same (body) frame as the Jacobian. Swing legs
/// get zeros; their torques come from the swing tracker.
pub fn grf_to_torques(
    legs: &LegSet,
    state: &JointState,
    stance: [bool; 4],
    forces_body: &[Vector3<f64>; 4],
) -> SVector<f64, NUM_JOINTS> {
    let mut tau = SVector::<f64, NUM_JOINTS>::zeros();
    for leg in 0..4 {
        if !stance[leg] {
            continue;
        }
        let j = legs.leg(leg).foot_jacobian(state.leg_q(leg));
        let t = -j.transpose() * forces_body[leg];
        tau.fixed_rows_mut::<3>(3 * leg).copy_from(&t);
    }
    tau
}

/// Replan-rate MPC wrapper around the condensed OCP solve.
#[derive(Debug, Clone)]
pub struct MpcController {
    pub cfg: MpcConfig,
    pub params: SrbmParams,
}

impl MpcController {
    pub fn new(cfg: MpcConfig, params: SrbmParams) -> Self {
        Self { cfg, params }
    }

    /// Solves the horizon problem and returns the full solution; callers
    /// apply the first force set.
    pub fn control(
        &self,
        op: &SrbmState,
        cmd: &UserCommand,
        schedule: &[[bool; 4]],
        footholds: &[Vector3<f64>; 4],
    ) -> Result<OcpSolution> {
        let ocp = build_ocp(op, cmd, schedule, footholds, &self.cfg, &self.params)?;
        ocp.solve_condensed(self.cfg.qp_tolerance, self.cfg.qp_max_iterations)
    }
}
