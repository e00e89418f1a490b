//! Safety-masked footstep planning for a quadruped robot, end to end:
//!
//! * [`terrain`] — randomized rough-terrain generation, height queries, and
//!   hip-centered heightmap patches.
//! * [`kinematics`] — a 3-DoF leg model with forward/inverse kinematics,
//!   workspace tests, a shin bounding capsule, and the contact Jacobian.
//! * [`safety`] — the foothold safety criteria (terrain roughness, leg
//!   collision, kinematic feasibility), their AND-combined mask, and
//!   nearest-safe lookup.
//! * [`learner`] — a compact convolutional encoder-decoder that predicts the
//!   safety mask from a heightmap plus robot state, trained with BCE +
//!   generalized Dice losses; all gradients are hand-derived.
//! * [`mpc`] — single-rigid-body model predictive control: variation-based
//!   linearization about the operating point, a stacked convex QP, a dense
//!   primal-dual interior-point solver, and the GRF-to-torque map.
//! * [`sim`] — the training/evaluation world: trot gait scheduling, swing
//!   splines, disturbance injection, foothold auditing, and episode metrics.
//! * [`policy`] — the masked footstep planner: observation assembly, a
//!   squashed-Gaussian policy network, nearest-safe action remapping, rewards,
//!   and clipped-surrogate policy optimization.
//! * [`io`] — binary terrain/dataset/checkpoint formats and CSV metrics.
//!
//! Everything is deterministic under fixed seeds and runs on a single machine
//! with no external solver or ML framework.

pub mod config;
pub mod error;
pub mod io;
pub mod kinematics;
pub mod learner;
pub mod mpc;
pub mod policy;
pub mod safety;
pub mod sim;
pub mod terrain;

pub use error::{Error, Result};
