//! Optimal control problem over the linearized trunk dynamics: quadratic
//! tracking cost on the commanded twist and posture, friction-pyramid force
//! constraints, dynamics as equalities.
//!
//! Two equivalent assemblies are provided. The stacked form keeps states
//! and all 12 force components as variables with explicit equality rows;
//! the condensed form eliminates states through the dynamics and drops
//! swing force variables, leaving a small inequality-only QP that the
//! controller solves at replan rate.

use nalgebra::{DMatrix, DVector, Rotation3, Vector2, Vector3};

use super::linearize::{
    forces_to_vec, gravity_distribution, linearize_schedule, state_coords, InputVec, LinearStep,
    StateVec, NX,
};
use super::qp::{solve_qp, QpProblem, QpStatus};
use super::srbm::{SrbmParams, SrbmState};
use crate::config::MpcConfig;
use crate::error::{Error, Result};

/// Commanded planar twist plus trunk height target.
#[derive(Debug, Clone, Copy)]
pub struct UserCommand {
    /// Body-frame linear velocity (z ignored by the reference builder).
    pub v_body: Vector3<f64>,
    pub yaw_rate: f64,
    /// World z the CoM should hold.
    pub height: f64,
}

impl UserCommand {
    pub fn hover(height: f64) -> Self {
        Self {
            v_body: Vector3::zeros(),
            yaw_rate: 0.0,
            height,
        }
    }
}

/// Position reached by riding the commanded planar twist for time t.
fn twist_arc(
    p0: Vector2<f64>,
    yaw0: f64,
    vbody: Vector2<f64>,
    yaw_rate: f64,
    t: f64,
) -> Vector2<f64> {
    if yaw_rate.abs() < 1e-9 {
        p0 + nalgebra::Rotation2::new(yaw0) * vbody * t
    } else {
        let r1 = nalgebra::Rotation2::new(yaw0 + yaw_rate * t);
        let r0 = nalgebra::Rotation2::new(yaw0);
        let diff = r1 * vbody - r0 * vbody;
        p0 + Vector2::new(diff.y, -diff.x) / yaw_rate
    }
}

#[derive(Debug, Clone)]
pub struct OcpProblem {
    pub dt: f64,
    pub steps: Vec<LinearStep>,
    pub schedule: Vec<[bool; 4]>,
    pub footholds: [Vector3<f64>; 4],
    pub q_diag: StateVec,
    pub q_term: StateVec,
    pub r_diag: InputVec,
    pub f_min: f64,
    pub f_max: f64,
    pub mu: f64,
    pub x_op: StateVec,
    /// Per-step operating forces (equal gravity split over stance legs);
    /// the force cost penalizes deviation from these.
    pub u_op: Vec<InputVec>,
    /// References for x_1..x_N.
    pub x_ref: Vec<StateVec>,
}

#[derive(Debug, Clone)]
pub struct OcpSolution {
    /// GRFs per step; swing legs carry exact zeros.
    pub forces: Vec<[Vector3<f64>; 4]>,
    /// Predicted states x_1..x_N in variation coordinates.
    pub states: Vec<StateVec>,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// 6 inequality rows for one leg's force (fx, fy, fz):
/// |fx| <= mu fz, |fy| <= mu fz, f_min <= fz <= f_max.
pub fn pyramid_rows(mu: f64, f_min: f64, f_max: f64) -> ([[f64; 3]; 6], [f64; 6]) {
    (
        [
            [1.0, 0.0, -mu],
            [-1.0, 0.0, -mu],
            [0.0, 1.0, -mu],
            [0.0, -1.0, -mu],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, -1.0],
        ],
        [0.0, 0.0, 0.0, 0.0, f_max, -f_min],
    )
}

/// Worst pyramid-constraint violation over all stance forces (negative
/// values mean slack).
pub fn pyramid_violation(
    forces: &[[Vector3<f64>; 4]],
    schedule: &[[bool; 4]],
    mu: f64,
    f_min: f64,
    f_max: f64,
) -> f64 {
    let (rows, h) = pyramid_rows(mu, f_min, f_max);
    let mut worst = f64::NEG_INFINITY;
    for (k, stance) in schedule.iter().enumerate() {
        for leg in 0..4 {
            if !stance[leg] {
                continue;
            }
            let f = forces[k][leg];
            for (row, hh) in rows.iter().zip(h.iter()) {
                worst = worst.max(row[0] * f.x + row[1] * f.y + row[2] * f.z - hh);
            }
        }
    }
    worst
}

pub fn build_ocp(
    op: &SrbmState,
    cmd: &UserCommand,
    schedule: &[[bool; 4]],
    footholds: &[Vector3<f64>; 4],
    cfg: &MpcConfig,
    params: &SrbmParams,
) -> Result<OcpProblem> {
    if schedule.is_empty() {
        return Err(Error::config("OCP horizon must be at least 1"));
    }
    let dt = cfg.dt;
    let steps = linearize_schedule(op, schedule, footholds, params, dt)?;
    let u_op: Vec<InputVec> = schedule
        .iter()
        .map(|&st| forces_to_vec(&gravity_distribution(st, params)))
        .collect();

    let yaw0 = op.yaw();
    let p0 = Vector2::new(op.p.x, op.p.y);
    let vxy = Vector2::new(cmd.v_body.x, cmd.v_body.y);
    let mut x_ref = Vec::with_capacity(schedule.len());
    for k in 1..=schedule.len() {
        let t = k as f64 * dt;
        let yaw_k = yaw0 + cmd.yaw_rate * t;
        let pos = twist_arc(p0, yaw0, vxy, cmd.yaw_rate, t);
        let r_ref = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw_k).into_inner();
        let xi_ref = super::linearize::rotation_variation(&op.r, &r_ref);
        let v_world = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw_k)
            * Vector3::new(cmd.v_body.x, cmd.v_body.y, 0.0);
        let mut r = StateVec::zeros();
        r.fixed_rows_mut::<3>(0)
            .copy_from(&Vector3::new(pos.x, pos.y, cmd.height));
        r.fixed_rows_mut::<3>(3).copy_from(&v_world);
        r.fixed_rows_mut::<3>(6).copy_from(&xi_ref);
        r.fixed_rows_mut::<3>(9)
            .copy_from(&Vector3::new(0.0, 0.0, cmd.yaw_rate));
        x_ref.push(r);
    }

    let mut r_diag = InputVec::zeros();
    for leg in 0..4 {
        for axis in 0..3 {
            r_diag[3 * leg + axis] = cfg.r_weights[axis];
        }
    }

    Ok(OcpProblem {
        dt,
        steps,
        schedule: schedule.to_vec(),
        footholds: *footholds,
        q_diag: StateVec::from_row_slice(&cfg.q_weights),
        q_term: StateVec::from_row_slice(&cfg.q_terminal),
        r_diag,
        f_min: cfg.f_min,
        f_max: cfg.f_max,
        mu: params.friction,
        x_op: state_coords(op),
        u_op,
        x_ref,
    })
}

impl OcpProblem {
    pub fn horizon(&self) -> usize {
        self.schedule.len()
    }

    fn state_weight(&self, k: usize) -> &StateVec {
        if k == self.horizon() {
            &self.q_term
        } else {
            &self.q_diag
        }
    }

    /// Stacked form: z = [x_1..x_N, u_0..u_{N-1}]; dynamics and swing-zero
    /// rows as equalities, pyramid rows as inequalities.
    pub fn assemble_stacked(&self) -> QpProblem {
        let n_steps = self.horizon();
        let nx_tot = NX * n_steps;
        let nu_tot = NX * n_steps; // 12 force components per step
        let n = nx_tot + nu_tot;

        let mut p = DMatrix::zeros(n, n);
        let mut q = DVector::zeros(n);
        for k in 1..=n_steps {
            let w = self.state_weight(k);
            let xr = &self.x_ref[k - 1];
            for i in 0..NX {
                let idx = NX * (k - 1) + i;
                p[(idx, idx)] = 2.0 * w[i];
                q[idx] = -2.0 * w[i] * xr[i];
            }
        }
        for k in 0..n_steps {
            for i in 0..NX {
                let idx = nx_tot + NX * k + i;
                p[(idx, idx)] = 2.0 * self.r_diag[i];
                q[idx] = -2.0 * self.r_diag[i] * self.u_op[k][i];
            }
        }

        let n_swing: usize = self
            .schedule
            .iter()
            .map(|st| st.iter().filter(|s| !**s).count() * 3)
            .sum();
        let me = NX * n_steps + n_swing;
        let mut a = DMatrix::zeros(me, n);
        let mut b = DVector::zeros(me);
        for k in 0..n_steps {
            let row = NX * k;
            let step = &self.steps[k];
            // x_{k+1} - A_k x_k - B_k u_k = c_k  (x_0 folded into rhs)
            for i in 0..NX {
                a[(row + i, NX * k + i)] = 1.0;
            }
            if k > 0 {
                for i in 0..NX {
                    for j in 0..NX {
                        a[(row + i, NX * (k - 1) + j)] = -step.a[(i, j)];
                    }
                }
            }
            for i in 0..NX {
                for j in 0..NX {
                    a[(row + i, nx_tot + NX * k + j)] = -step.b[(i, j)];
                }
            }
            let rhs = if k == 0 {
                step.a * self.x_op + step.c
            } else {
                step.c
            };
            for i in 0..NX {
                b[row + i] = rhs[i];
            }
        }
        let mut row = NX * n_steps;
        for (k, stance) in self.schedule.iter().enumerate() {
            for leg in 0..4 {
                if stance[leg] {
                    continue;
                }
                for axis in 0..3 {
                    a[(row, nx_tot + NX * k + 3 * leg + axis)] = 1.0;
                    row += 1;
                }
            }
        }

        let n_stance: usize = self
            .schedule
            .iter()
            .map(|st| st.iter().filter(|s| **s).count())
            .sum();
        let mi = 6 * n_stance;
        let mut g = DMatrix::zeros(mi, n);
        let mut h = DVector::zeros(mi);
        let (rows, hh) = pyramid_rows(self.mu, self.f_min, self.f_max);
        let mut r0 = 0;
        for (k, stance) in self.schedule.iter().enumerate() {
            for leg in 0..4 {
                if !stance[leg] {
                    continue;
                }
                for (ri, row) in rows.iter().enumerate() {
                    for axis in 0..3 {
                        g[(r0 + ri, nx_tot + NX * k + 3 * leg + axis)] = row[axis];
                    }
                    h[r0 + ri] = hh[ri];
                }
                r0 += 6;
            }
        }

        QpProblem { p, q, g, h, a, b }
    }

    /// Condensed form: only stance forces are variables; states are
    /// recovered from the rollout X = gamma U + d.
    pub fn assemble_condensed(&self) -> (QpProblem, CondensedMap) {
        let n_steps = self.horizon();
        // column layout of stance force variables
        let mut col_of = vec![[usize::MAX; 4]; n_steps];
        let mut nu = 0;
        for (k, stance) in self.schedule.iter().enumerate() {
            for leg in 0..4 {
                if stance[leg] {
                    col_of[k][leg] = nu;
                    nu += 3;
                }
            }
        }

        let nxt = NX * n_steps;
        let mut gamma = DMatrix::zeros(nxt, nu);
        let mut d = DVector::zeros(nxt);
        let mut prev_rows: Option<usize> = None;
        for k in 0..n_steps {
            let step = &self.steps[k];
            let row = NX * k;
            if let Some(prev) = prev_rows {
                // gamma_k = A_k gamma_{k-1}, d_k = A_k d_{k-1} + c_k
                let gk = step.a * gamma.rows(prev, NX);
                gamma.rows_mut(row, NX).copy_from(&gk);
                let dk = step.a * d.rows(prev, NX) + step.c;
                d.rows_mut(row, NX).copy_from(&dk);
            } else {
                let dk = step.a * self.x_op + step.c;
                d.rows_mut(row, NX).copy_from(&dk);
            }
            for leg in 0..4 {
                let col = col_of[k][leg];
                if col == usize::MAX {
                    continue;
                }
                gamma
                    .view_mut((row, col), (NX, 3))
                    .copy_from(&step.b.fixed_view::<NX, 3>(0, 3 * leg));
            }
            prev_rows = Some(row);
        }

        // P = 2 (gamma' Qbar gamma + Rbar), q = 2 (gamma' Qbar (d - ref) - Rbar u_op)
        let mut qbar = DVector::zeros(nxt);
        let mut dev = DVector::zeros(nxt);
        for k in 1..=n_steps {
            let w = self.state_weight(k);
            for i in 0..NX {
                qbar[NX * (k - 1) + i] = w[i];
                dev[NX * (k - 1) + i] = d[NX * (k - 1) + i] - self.x_ref[k - 1][i];
            }
        }
        let wg = DMatrix::from_fn(nxt, nu, |i, j| qbar[i] * gamma[(i, j)]);
        let mut p = gamma.transpose() * &wg;
        let mut q = gamma.transpose() * qbar.component_mul(&dev);
        for (k, cols) in col_of.iter().enumerate() {
            for leg in 0..4 {
                let col = cols[leg];
                if col == usize::MAX {
                    continue;
                }
                for axis in 0..3 {
                    let r = self.r_diag[3 * leg + axis];
                    p[(col + axis, col + axis)] += r;
                    q[col + axis] -= r * self.u_op[k][3 * leg + axis];
                }
            }
        }
        p *= 2.0;
        q *= 2.0;
        // exact symmetry despite accumulation order
        let pt = p.transpose();
        p = (&p + pt) * 0.5;

        let n_stance: usize = col_of
            .iter()
            .map(|c| c.iter().filter(|&&v| v != usize::MAX).count())
            .sum();
        let mi = 6 * n_stance;
        let mut g = DMatrix::zeros(mi, nu);
        let mut h = DVector::zeros(mi);
        let (rows, hh) = pyramid_rows(self.mu, self.f_min, self.f_max);
        let mut r0 = 0;
        for cols in &col_of {
            for leg in 0..4 {
                let col = cols[leg];
                if col == usize::MAX {
                    continue;
                }
                for (ri, row) in rows.iter().enumerate() {
                    for axis in 0..3 {
                        g[(r0 + ri, col + axis)] = row[axis];
                    }
                    h[r0 + ri] = hh[ri];
                }
                r0 += 6;
            }
        }

        (
            QpProblem {
                p,
                q,
                g,
                h,
                a: DMatrix::zeros(0, nu),
                b: DVector::zeros(0),
            },
            CondensedMap { col_of, gamma, d },
        )
    }

    pub fn solve_condensed(&self, tol: f64, max_iter: usize) -> Result<OcpSolution> {
        let (qp, map) = self.assemble_condensed();
        let sol = solve_qp(&qp, tol, max_iter)?;
        let x_stack = &map.gamma * &sol.x + &map.d;
        let n_steps = self.horizon();
        let mut forces = Vec::with_capacity(n_steps);
        for k in 0..n_steps {
            let mut f = [Vector3::zeros(); 4];
            for leg in 0..4 {
                let col = map.col_of[k][leg];
                if col != usize::MAX {
                    f[leg] = Vector3::new(sol.x[col], sol.x[col + 1], sol.x[col + 2]);
                }
            }
            forces.push(f);
        }
        let states = (0..n_steps)
            .map(|k| StateVec::from_iterator(x_stack.rows(NX * k, NX).iter().copied()))
            .collect();
        Ok(OcpSolution {
            forces,
            states,
            kkt_residual: sol.kkt_residual,
            iterations: sol.iterations,
            converged: sol.status == QpStatus::Converged,
        })
    }

    pub fn solve_stacked(&self, tol: f64, max_iter: usize) -> Result<OcpSolution> {
        let qp = self.assemble_stacked();
        let sol = solve_qp(&qp, tol, max_iter)?;
        let n_steps = self.horizon();
        let nx_tot = NX * n_steps;
        let mut forces = Vec::with_capacity(n_steps);
        for k in 0..n_steps {
            let mut f = [Vector3::zeros(); 4];
            for leg in 0..4 {
                if self.schedule[k][leg] {
                    let base = nx_tot + NX * k + 3 * leg;
                    f[leg] = Vector3::new(sol.x[base], sol.x[base + 1], sol.x[base + 2]);
                }
            }
            forces.push(f);
        }
        let states = (0..n_steps)
            .map(|k| StateVec::from_iterator(sol.x.rows(NX * k, NX).iter().copied()))
            .collect();
        Ok(OcpSolution {
            forces,
            states,
            kkt_residual: sol.kkt_residual,
            iterations: sol.iterations,
            converged: sol.status == QpStatus::Converged,
        })
    }
}

/// State rollout data for recovering trajectories from condensed solves.
#[derive(Debug, Clone)]
pub struct CondensedMap {
    pub col_of: Vec<[usize; 4]>,
    pub gamma: DMatrix<f64>,
    pub d: DVector<f64>,
}
