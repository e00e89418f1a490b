//! Ground-truth foothold safety. Each cell of a hip-centered heightmap
//! patch is scored by three criteria and their logical AND:
//!
//! * edge: the cell is far enough from height discontinuities (max
//!   8-neighbor difference within a threshold),
//! * reach: the foothold stays inside the leg workspace at the predicted
//!   touchdown hip pose and at the next lift-off pose,
//! * clearance: the shin capsule at the touchdown configuration clears
//!   every terrain column by a margin.
//!
//! `nearest_safe` then remaps a nominal cell to the closest safe one.

use nalgebra::{Rotation2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::config::{GaitConfig, RobotConfig, SafetyConfig};
use crate::kinematics::LegSet;
use crate::terrain::Heightmap;

/// Dense boolean grid with patch dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoolGrid {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl BoolGrid {
    pub fn filled(rows: usize, cols: usize, value: bool) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.cols + j] = v;
    }

    pub fn and(&self, other: &BoolGrid) -> BoolGrid {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        BoolGrid {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| *a && *b)
                .collect(),
        }
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    /// 0/1 floats in row-major order, the classifier's target layout.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
    }

    pub fn from_f64(rows: usize, cols: usize, vals: &[f64], threshold: f64) -> Self {
        assert_eq!(vals.len(), rows * cols);
        Self {
            rows,
            cols,
            data: vals.iter().map(|&v| v > threshold).collect(),
        }
    }
}

/// Per-criterion masks plus their AND.
#[derive(Debug, Clone)]
pub struct SafetyMask {
    pub edge: BoolGrid,
    pub clearance: BoolGrid,
    pub reach: BoolGrid,
    pub safe: BoolGrid,
}

/// Hip position and heading used to predict where the leg will be.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HipPose {
    pub pos: Vector3<f64>,
    pub yaw: f64,
}

impl HipPose {
    /// Constant-twist extrapolation: body-frame velocity v plus yaw rate,
    /// integrated exactly over t (circular arc; straight line when the
    /// yaw rate vanishes).
    pub fn propagate(&self, v_body: Vector3<f64>, yaw_rate: f64, t: f64) -> HipPose {
        let v_xy = Vector2::new(v_body.x, v_body.y);
        let delta = if yaw_rate.abs() < 1e-9 {
            Rotation2::new(self.yaw) * v_xy * t
        } else {
            // integral of R(yaw + w s) v ds over [0, t]
            let r1 = Rotation2::new(self.yaw + yaw_rate * t);
            let r0 = Rotation2::new(self.yaw);
            let diff = r1 * v_xy - r0 * v_xy;
            Vector2::new(diff.y, -diff.x) / yaw_rate
        };
        HipPose {
            pos: Vector3::new(
                self.pos.x + delta.x,
                self.pos.y + delta.y,
                self.pos.z + v_body.z * t,
            ),
            yaw: self.yaw + yaw_rate * t,
        }
    }

    /// World point expressed in this pose's frame (yaw-only rotation).
    pub fn to_local(&self, p_world: Vector3<f64>) -> Vector3<f64> {
        let d = p_world - self.pos;
        let (s, c) = self.yaw.sin_cos();
        Vector3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    /// Local point expressed in world coordinates.
    pub fn to_world(&self, p_local: Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.yaw.sin_cos();
        self.pos + Vector3::new(c * p_local.x - s * p_local.y, s * p_local.x + c * p_local.y, p_local.z)
    }
}

/// Everything needed to judge one swing foot's candidate footholds.
#[derive(Debug, Clone)]
pub struct FootholdQuery {
    /// Hip-relative heightmap patch around the nominal foothold.
    pub map: Heightmap,
    /// Swing phase in [0,1]; 0 = lift-off, 1 = touchdown.
    pub phase: f64,
    /// Commanded body-frame linear velocity (m/s).
    pub v_body: Vector3<f64>,
    /// Commanded yaw rate (rad/s).
    pub yaw_rate: f64,
    /// Swing leg index.
    pub leg: usize,
    /// Current world pose of that leg's hip.
    pub hip_pose: HipPose,
}

impl FootholdQuery {
    /// Predicted hip pose at touchdown of the current swing.
    pub fn touchdown_pose(&self, gait: &GaitConfig) -> HipPose {
        let t = (1.0 - self.phase).max(0.0) * gait.t_swing();
        self.hip_pose.propagate(self.v_body, self.yaw_rate, t)
    }

    /// Predicted hip pose at the next lift-off (touchdown + one stance).
    pub fn liftoff_pose(&self, gait: &GaitConfig) -> HipPose {
        let t = (1.0 - self.phase).max(0.0) * gait.t_swing() + gait.t_stance();
        self.hip_pose.propagate(self.v_body, self.yaw_rate, t)
    }

    /// World-frame candidate foothold at patch cell (i, j).
    pub fn candidate(&self, i: usize, j: usize) -> Vector3<f64> {
        let (x, y) = self.map.cell_world(i, j);
        Vector3::new(x, y, self.map.elevation(i, j))
    }
}

/// Evaluates the three criteria against a fixed robot and gait.
#[derive(Debug, Clone)]
pub struct SafetyEvaluator {
    pub legs: LegSet,
    pub safety: SafetyConfig,
    pub gait: GaitConfig,
}

impl SafetyEvaluator {
    pub fn new(robot: &RobotConfig, safety: SafetyConfig, gait: GaitConfig) -> Self {
        Self {
            legs: LegSet::from_config(robot),
            safety,
            gait,
        }
    }

    /// Edge criterion: a cell passes iff its height differs from every
    /// existing 8-neighbor by at most the threshold.
    pub fn edge_criterion(map: &Heightmap, threshold: f64) -> BoolGrid {
        let (rows, cols) = (map.rows(), map.cols());
        let mut grid = BoolGrid::filled(rows, cols, true);
        for i in 0..rows {
            for j in 0..cols {
                let h = map.values[(i, j)];
                let mut ok = true;
                'scan: for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        if di == 0 && dj == 0 {
                            continue;
                        }
                        let ni = i as i64 + di;
                        let nj = j as i64 + dj;
                        if ni < 0 || nj < 0 || ni >= rows as i64 || nj >= cols as i64 {
                            continue;
                        }
                        if (map.values[(ni as usize, nj as usize)] - h).abs() > threshold {
                            ok = false;
                            break 'scan;
                        }
                    }
                }
                grid.set(i, j, ok);
            }
        }
        grid
    }

    /// Reach criterion: the candidate must be IK-feasible from the
    /// predicted touchdown hip pose and again from the next lift-off pose.
    pub fn reach_criterion(&self, query: &FootholdQuery, i: usize, j: usize) -> bool {
        let foot = query.candidate(i, j);
        let leg = self.legs.leg(query.leg);
        let td = query.touchdown_pose(&self.gait);
        let lo = query.liftoff_pose(&self.gait);
        leg.in_workspace(td.to_local(foot)) && leg.in_workspace(lo.to_local(foot))
    }

    /// Clearance criterion: place the leg by IK at the touchdown pose and
    /// require the knee-to-ankle capsule to clear every terrain column by
    /// margin. IK-infeasible candidates are unsafe by convention.
    pub fn clearance_criterion(&self, query: &FootholdQuery, i: usize, j: usize) -> bool {
        let td = query.touchdown_pose(&self.gait);
        self.clearance_at_pose(query, &td, i, j)
    }

    fn clearance_at_pose(
        &self,
        query: &FootholdQuery,
        td: &HipPose,
        i: usize,
        j: usize,
    ) -> bool {
        let foot = query.candidate(i, j);
        let leg = self.legs.leg(query.leg);
        let Some(q) = leg.inverse_kinematics(td.to_local(foot)) else {
            return false;
        };
        let cap = leg.shin_segment(q);
        // truncate at the ankle: the ball below it is the contact body
        let t_ankle = 1.0 - (self.safety.ankle_offset / leg.l_lower).min(1.0);
        let a = td.to_world(cap.a);
        let b_full = td.to_world(cap.b);
        let b = a + (b_full - a) * t_ankle;
        let need = cap.radius + self.safety.lc_margin;

        let map = &query.map;
        let cs = map.cell_size;
        let half = cs * 0.5;
        // only columns within `need` of the segment's xy projection can
        // violate the margin
        let min_x = a.x.min(b.x) - need - half;
        let max_x = a.x.max(b.x) + need + half;
        let min_y = a.y.min(b.y) - need - half;
        let max_y = a.y.max(b.y) + need + half;
        for ci in 0..map.rows() {
            for cj in 0..map.cols() {
                let (cx, cy) = map.cell_world(ci, cj);
                if cx < min_x || cx > max_x || cy < min_y || cy > max_y {
                    continue;
                }
                let top = map.elevation(ci, cj);
                if a.z.min(b.z) - top >= need {
                    continue;
                }
                if segment_column_distance(a, b, cx, cy, half, top) < need {
                    return false;
                }
            }
        }
        true
    }

    /// Full mask for one query. Cells are independent, so the result does
    /// not depend on evaluation order.
    pub fn evaluate(&self, query: &FootholdQuery) -> SafetyMask {
        let map = &query.map;
        let (rows, cols) = (map.rows(), map.cols());
        let edge = Self::edge_criterion(map, self.safety.tr_threshold);
        let mut reach = BoolGrid::filled(rows, cols, false);
        let mut clearance = BoolGrid::filled(rows, cols, false);
        let td = query.touchdown_pose(&self.gait);
        let lo = query.liftoff_pose(&self.gait);
        let leg = self.legs.leg(query.leg);
        for i in 0..rows {
            for j in 0..cols {
                let foot = query.candidate(i, j);
                let ok_td = leg.in_workspace(td.to_local(foot));
                let ok_lo = leg.in_workspace(lo.to_local(foot));
                reach.set(i, j, ok_td && ok_lo);
                clearance.set(i, j, self.clearance_at_pose(query, &td, i, j));
            }
        }
        let safe = edge.and(&clearance).and(&reach);
        SafetyMask {
            edge,
            clearance,
            reach,
            safe,
        }
    }
}

/// Distance from segment [a,b] to the half-infinite square column
/// {|x-cx| <= half, |y-cy| <= half, z <= top}. The point-to-column
/// distance is convex along the segment, so ternary search converges.
pub fn segment_column_distance(
    a: Vector3<f64>,
    b: Vector3<f64>,
    cx: f64,
    cy: f64,
    half: f64,
    top: f64,
) -> f64 {
    let point_dist = |p: Vector3<f64>| -> f64 {
        let dx = ((p.x - cx).abs() - half).max(0.0);
        let dy = ((p.y - cy).abs() - half).max(0.0);
        let dz = (p.z - top).max(0.0);
        (dx * dx + dy * dy + dz * dz).sqrt()
    };
    let mut lo = 0.0_f64;
    let mut hi = 1.0_f64;
    for _ in 0..80 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if point_dist(a + (b - a) * m1) <= point_dist(a + (b - a) * m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    point_dist(a + (b - a) * (0.5 * (lo + hi)))
}

/// Closest safe cell to the target under Euclidean distance in cell
/// units; ties prefer the smaller row, then the smaller column. The
/// target itself wins when safe. None means no safe cell exists.
pub fn nearest_safe(mask: &BoolGrid, target: (usize, usize)) -> Option<(usize, usize)> {
    assert!(target.0 < mask.rows() && target.1 < mask.cols());
    let mut best: Option<(u64, usize, usize)> = None;
    for i in 0..mask.rows() {
        for j in 0..mask.cols() {
            if !mask.get(i, j) {
                continue;
            }
            let di = i as i64 - target.0 as i64;
            let dj = j as i64 - target.1 as i64;
            let d2 = (di * di + dj * dj) as u64;
            let key = (d2, i, j);
            if best.map_or(true, |b| key < b) {
                best = Some(key);
            }
        }
    }
    best.map(|(_, i, j)| (i, j))
}
