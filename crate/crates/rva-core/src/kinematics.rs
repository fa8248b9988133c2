//! Forward/inverse kinematics and Jacobian for the 9-DoF chain: six revolute
//! arm joints plus a 3-DoF end-effector (prismatic probe slide, revolute
//! needle pitch, prismatic needle insertion).
//!
//! Joints are described in Denavit-Hartenberg form. For a revolute joint the
//! variable adds to `theta_offset_rad`; for a prismatic joint it adds to
//! `d_mm`. The per-joint transform is
//! `RotZ(theta) * TransZ(d) * TransX(a) * RotX(alpha)`.
//!
//! Units are millimeters and radians throughout. Where rotations and
//! translations must share a norm (IK error, joint-space distances), one
//! radian is costed like 100 mm.

use nalgebra::{Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transform::RigidTransform;

pub const JOINT_COUNT: usize = 9;
/// Joints contributing to the probe pose (arm + probe slide).
pub const PROBE_JOINT_COUNT: usize = 7;
/// mm of prismatic travel costed like one radian of revolute motion.
pub const MM_PER_RAD: f64 = 100.0;

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("joint vector has {got} components, expected {expected}")]
    InvalidJointVector { expected: usize, got: usize },
    #[error("invalid kinematic chain: {0}")]
    InvalidChain(String),
    #[error("inverse kinematics did not converge after {iterations} iterations (residual {residual_mm:.6} mm-equivalent)")]
    NoConvergence { iterations: usize, residual_mm: f64 },
    #[error("target reachable only outside joint limits")]
    JointLimitViolation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointType {
    Revolute,
    Prismatic,
}

/// One Denavit-Hartenberg row plus travel limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointDescriptor {
    #[serde(rename = "type")]
    pub joint_type: JointType,
    pub a_mm: f64,
    pub alpha_rad: f64,
    pub d_mm: f64,
    pub theta_offset_rad: f64,
    /// rad for revolute, mm for prismatic
    pub limit_min: f64,
    pub limit_max: f64,
}

impl JointDescriptor {
    fn local_transform(&self, q: f64) -> RigidTransform {
        let (theta, d) = match self.joint_type {
            JointType::Revolute => (self.theta_offset_rad + q, self.d_mm),
            JointType::Prismatic => (self.theta_offset_rad, self.d_mm + q),
        };
        let (st, ct) = theta.sin_cos();
        let (sa, ca) = self.alpha_rad.sin_cos();
        let rotation = Matrix3::new(
            ct, -st * ca, st * sa, //
            st, ct * ca, -ct * sa, //
            0.0, sa, ca,
        );
        let translation = Vector3::new(self.a_mm * ct, self.a_mm * st, d);
        RigidTransform::new(rotation, translation)
    }
}

/// Joint state, length 9: rad for revolute joints, mm for prismatic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointVector(pub Vec<f64>);

impl JointVector {
    pub fn zeros() -> Self {
        JointVector(vec![0.0; JOINT_COUNT])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    fn checked(&self) -> Result<&[f64], KinematicsError> {
        if self.0.len() == JOINT_COUNT {
            Ok(&self.0)
        } else {
            Err(KinematicsError::InvalidJointVector {
                expected: JOINT_COUNT,
                got: self.0.len(),
            })
        }
    }

    /// Weighted joint-space distance in rad-equivalents (prismatic mm / 100).
    pub fn distance_to(&self, other: &JointVector, chain: &KinematicChain) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .zip(&chain.joints)
            .map(|((a, b), j)| {
                let d = a - b;
                match j.joint_type {
                    JointType::Revolute => d * d,
                    JointType::Prismatic => (d / MM_PER_RAD) * (d / MM_PER_RAD),
                }
            })
            .sum::<f64>()
            .sqrt()
    }
}

impl From<[f64; JOINT_COUNT]> for JointVector {
    fn from(q: [f64; JOINT_COUNT]) -> Self {
        JointVector(q.to_vec())
    }
}

/// The 9-joint serial chain plus the fixed probe mount and home posture.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicChain {
    pub joints: Vec<JointDescriptor>,
    /// Fixed transform from the frame after the probe-slide joint to the
    /// ultrasound image plane (origin at the probe face, x lateral, y depth,
    /// z elevation).
    pub probe_mount: RigidTransform,
    pub q_home: JointVector,
}

impl KinematicChain {
    pub fn new(
        joints: Vec<JointDescriptor>,
        probe_mount: RigidTransform,
        q_home: JointVector,
    ) -> Result<Self, KinematicsError> {
        if joints.len() != JOINT_COUNT {
            return Err(KinematicsError::InvalidChain(format!(
                "expected {JOINT_COUNT} joints, got {}",
                joints.len()
            )));
        }
        let expected_types = [
            (0..6).map(|_| JointType::Revolute).collect::<Vec<_>>(),
            vec![JointType::Prismatic, JointType::Revolute, JointType::Prismatic],
        ]
        .concat();
        for (i, (j, want)) in joints.iter().zip(&expected_types).enumerate() {
            if j.joint_type != *want {
                return Err(KinematicsError::InvalidChain(format!(
                    "joint {} must be {:?}",
                    i + 1,
                    want
                )));
            }
            if !(j.limit_min < j.limit_max) {
                return Err(KinematicsError::InvalidChain(format!(
                    "joint {} limits must satisfy min < max",
                    i + 1
                )));
            }
        }
        let q_home_slice = q_home.checked()?.to_vec();
        for (i, (q, j)) in q_home_slice.iter().zip(&joints).enumerate() {
            if *q < j.limit_min || *q > j.limit_max {
                return Err(KinematicsError::InvalidChain(format!(
                    "q_home[{i}] = {q} outside joint limits [{}, {}]",
                    j.limit_min, j.limit_max
                )));
            }
        }
        Ok(Self {
            joints,
            probe_mount,
            q_home,
        })
    }

    /// Tabletop 6-DoF arm (anthropomorphic with spherical wrist, links in the
    /// 200-400 mm range) plus the probe-slide / pitch / insertion end-effector.
    /// All tests and shipped configs use this chain.
    pub fn default_chain() -> Self {
        use JointType::*;
        let deg = |d: f64| d.to_radians();
        let joints = vec![
            JointDescriptor { joint_type: Revolute, a_mm: 0.0, alpha_rad: deg(90.0), d_mm: 240.0, theta_offset_rad: 0.0, limit_min: deg(-170.0), limit_max: deg(170.0) },
            JointDescriptor { joint_type: Revolute, a_mm: 300.0, alpha_rad: 0.0, d_mm: 0.0, theta_offset_rad: 0.0, limit_min: deg(-170.0), limit_max: deg(170.0) },
            JointDescriptor { joint_type: Revolute, a_mm: 0.0, alpha_rad: deg(90.0), d_mm: 0.0, theta_offset_rad: 0.0, limit_min: deg(-170.0), limit_max: deg(170.0) },
            JointDescriptor { joint_type: Revolute, a_mm: 0.0, alpha_rad: deg(-90.0), d_mm: 280.0, theta_offset_rad: 0.0, limit_min: deg(-360.0), limit_max: deg(360.0) },
            JointDescriptor { joint_type: Revolute, a_mm: 0.0, alpha_rad: deg(90.0), d_mm: 0.0, theta_offset_rad: 0.0, limit_min: deg(-170.0), limit_max: deg(170.0) },
            JointDescriptor { joint_type: Revolute, a_mm: 0.0, alpha_rad: 0.0, d_mm: 90.0, theta_offset_rad: 0.0, limit_min: deg(-360.0), limit_max: deg(360.0) },
            // probe slide: fore-aft translation of the carriage along the
            // pre-slide z axis
            JointDescriptor { joint_type: Prismatic, a_mm: 0.0, alpha_rad: deg(-90.0), d_mm: 0.0, theta_offset_rad: 0.0, limit_min: -30.0, limit_max: 30.0 },
            // needle pitch about the carriage axis perpendicular to the
            // insertion plane; the pivot sits at the joint origin
            JointDescriptor { joint_type: Revolute, a_mm: 0.0, alpha_rad: deg(90.0), d_mm: 0.0, theta_offset_rad: 0.0, limit_min: 0.0, limit_max: deg(70.0) },
            // needle insertion along the needle shaft, 15 mm hub standoff
            JointDescriptor { joint_type: Prismatic, a_mm: 0.0, alpha_rad: 0.0, d_mm: 15.0, theta_offset_rad: 0.0, limit_min: 0.0, limit_max: 60.0 },
        ];
        // Image-plane frame relative to the pitch-pivot frame (after the
        // slide): the probe face sits 27.5 mm ahead of and 8 mm below the
        // pivot, with x lateral, y depth, z elevation.
        let probe_mount = RigidTransform::new(
            Matrix3::new(
                0.0, 1.0, 0.0, //
                0.0, 0.0, 1.0, //
                1.0, 0.0, 0.0,
            ),
            Vector3::new(8.0, -27.5, 0.0),
        );
        let q_home = JointVector(vec![
            0.0,
            10f64.to_radians(),
            -10f64.to_radians(),
            180f64.to_radians(),
            -90f64.to_radians(),
            0.0,
            0.0,
            20f64.to_radians(),
            0.0,
        ]);
        Self::new(joints, probe_mount, q_home).expect("default chain is valid")
    }

    pub fn clamp_to_limits(&self, q: &mut [f64]) {
        for (qi, j) in q.iter_mut().zip(&self.joints) {
            // A revolute joint whose travel covers a full turn is free:
            // wrap instead of clamping so iterative solvers never stall
            // against an artificial bound.
            if j.joint_type == JointType::Revolute
                && j.limit_max - j.limit_min >= 2.0 * std::f64::consts::PI
            {
                let tau = 2.0 * std::f64::consts::PI;
                let mut w = (*qi + std::f64::consts::PI).rem_euclid(tau) - std::f64::consts::PI;
                w = w.clamp(j.limit_min, j.limit_max);
                *qi = w;
            } else {
                *qi = qi.clamp(j.limit_min, j.limit_max);
            }
        }
    }

    pub fn within_limits(&self, q: &JointVector) -> bool {
        q.0.iter()
            .zip(&self.joints)
            .all(|(qi, j)| *qi >= j.limit_min && *qi <= j.limit_max)
    }

    /// Midpoint of every joint's travel range.
    pub fn limits_midpoint(&self) -> JointVector {
        JointVector(
            self.joints
                .iter()
                .map(|j| 0.5 * (j.limit_min + j.limit_max))
                .collect(),
        )
    }
}

/// Cumulative frames: `frames[0]` is the base (identity), `frames[i]` the
/// pose after joint `i`.
pub fn joint_frames(
    chain: &KinematicChain,
    q: &JointVector,
) -> Result<Vec<RigidTransform>, KinematicsError> {
    let qs = q.checked()?;
    let mut frames = Vec::with_capacity(JOINT_COUNT + 1);
    let mut t = RigidTransform::identity();
    frames.push(t);
    for (joint, qi) in chain.joints.iter().zip(qs) {
        t = t.compose(&joint.local_transform(*qi));
        frames.push(t);
    }
    Ok(frames)
}

/// Needle-tip pose with the nominal (identity) tool transform.
pub fn forward_kinematics(
    chain: &KinematicChain,
    q: &JointVector,
) -> Result<RigidTransform, KinematicsError> {
    forward_kinematics_with_tool(chain, q, &RigidTransform::identity())
}

/// Needle-tip pose with an explicit tool transform appended after the last
/// joint frame (used to apply a calibrated or true needle offset).
pub fn forward_kinematics_with_tool(
    chain: &KinematicChain,
    q: &JointVector,
    tool: &RigidTransform,
) -> Result<RigidTransform, KinematicsError> {
    let frames = joint_frames(chain, q)?;
    Ok(frames[JOINT_COUNT].compose(tool))
}

/// Ultrasound image-plane pose: the frame after the probe-slide joint
/// composed with the fixed probe mount. Pitch and insertion do not move it.
pub fn probe_pose(
    chain: &KinematicChain,
    q: &JointVector,
) -> Result<RigidTransform, KinematicsError> {
    let frames = joint_frames(chain, q)?;
    Ok(frames[PROBE_JOINT_COUNT].compose(&chain.probe_mount))
}

/// 6x9 geometric Jacobian of the needle-tip pose at `q`: rows are linear
/// velocity (mm) over angular velocity (rad), columns are per-joint twist
/// contributions in the world frame.
pub fn jacobian(
    chain: &KinematicChain,
    q: &JointVector,
) -> Result<SMatrix<f64, 6, 9>, KinematicsError> {
    jacobian_with_tool(chain, q, &RigidTransform::identity())
}

pub fn jacobian_with_tool(
    chain: &KinematicChain,
    q: &JointVector,
    tool: &RigidTransform,
) -> Result<SMatrix<f64, 6, 9>, KinematicsError> {
    let frames = joint_frames(chain, q)?;
    let tip = frames[JOINT_COUNT].compose(tool).translation;
    Ok(jacobian_at(chain, &frames, JOINT_COUNT, &tip))
}

/// Jacobian for the end point `end` of the subchain made of the first
/// `n_joints` joints. Columns beyond `n_joints` are zero.
fn jacobian_at(
    chain: &KinematicChain,
    frames: &[RigidTransform],
    n_joints: usize,
    end: &Vector3<f64>,
) -> SMatrix<f64, 6, 9> {
    let mut j = SMatrix::<f64, 6, 9>::zeros();
    for i in 0..n_joints {
        let axis = frames[i].rotation.column(2).into_owned();
        let origin = frames[i].translation;
        let (linear, angular) = match chain.joints[i].joint_type {
            JointType::Revolute => (axis.cross(&(end - origin)), axis),
            JointType::Prismatic => (axis, Vector3::zeros()),
        };
        for r in 0..3 {
            j[(r, i)] = linear[r];
            j[(r + 3, i)] = angular[r];
        }
    }
    j
}

/// Which frame an IK solve targets.
#[derive(Debug, Clone, Copy)]
pub enum IkFrame {
    /// Full 9-joint chain to the needle tip, with a tool transform.
    NeedleTip { tool: RigidTransform },
    /// First 7 joints to the image plane; pitch and insertion stay put.
    Probe,
}

#[derive(Debug, Clone, Copy)]
pub struct IkParams {
    pub lambda0: f64,
    pub max_iterations: usize,
    pub tol_translation_mm: f64,
    pub tol_rotation_rad: f64,
}

impl Default for IkParams {
    fn default() -> Self {
        Self {
            lambda0: 1e-3,
            max_iterations: 200,
            tol_translation_mm: 1e-4,
            tol_rotation_rad: 1e-6,
        }
    }
}

/// Damped-least-squares IK for the needle tip with the nominal tool.
///
/// The returned solution satisfies the pose tolerances of [`IkParams`],
/// lies within joint limits, and among nearby solutions is the one closest
/// to `seed_q` in the weighted joint norm.
pub fn inverse_kinematics(
    chain: &KinematicChain,
    target: &RigidTransform,
    seed_q: &JointVector,
) -> Result<JointVector, KinematicsError> {
    solve_ik(
        chain,
        target,
        seed_q,
        IkFrame::NeedleTip {
            tool: RigidTransform::identity(),
        },
        &IkParams::default(),
    )
}

fn fk_for_frame(
    chain: &KinematicChain,
    frames: &[RigidTransform],
    frame: &IkFrame,
) -> RigidTransform {
    match frame {
        IkFrame::NeedleTip { tool } => frames[JOINT_COUNT].compose(tool),
        IkFrame::Probe => frames[PROBE_JOINT_COUNT].compose(&chain.probe_mount),
    }
}

fn active_joints(frame: &IkFrame) -> usize {
    match frame {
        IkFrame::NeedleTip { .. } => JOINT_COUNT,
        IkFrame::Probe => PROBE_JOINT_COUNT,
    }
}

/// World-frame pose error from `current` to `target`: translation in mm and
/// the axis-angle of `R_target * R_current^T`, rotation rows premultiplied by
/// [`MM_PER_RAD`] so the whole 6-vector is in mm-equivalents.
fn pose_error(current: &RigidTransform, target: &RigidTransform) -> SMatrix<f64, 6, 1> {
    let dp = target.translation - current.translation;
    let rel = target.rotation * current.rotation.transpose();
    let angle = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
    let axis_term = Vector3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    );
    let w = if angle < 1e-9 {
        // sin x ~ x: vee(R - R^T)/2 is already axis*angle to first order
        axis_term * 0.5
    } else if angle > std::f64::consts::PI - 1e-6 {
        // Near pi the skew part vanishes; recover the axis from the symmetric
        // part instead.
        let m = (rel + Matrix3::identity()) * 0.5;
        let axis = Vector3::new(m[(0, 0)].max(0.0).sqrt(), m[(1, 1)].max(0.0).sqrt(), m[(2, 2)].max(0.0).sqrt());
        let mut axis = axis;
        // Fix signs from the off-diagonal terms.
        if m[(0, 1)] < 0.0 {
            axis.y = -axis.y;
        }
        if m[(0, 2)] < 0.0 {
            axis.z = -axis.z;
        }
        let n = axis.norm();
        if n > 0.0 {
            axis * (angle / n)
        } else {
            Vector3::zeros()
        }
    } else {
        axis_term * (angle / (2.0 * angle.sin()))
    };
    let mut e = SMatrix::<f64, 6, 1>::zeros();
    for r in 0..3 {
        e[r] = dp[r];
        e[r + 3] = MM_PER_RAD * w[r];
    }
    e
}

fn error_components(e: &SMatrix<f64, 6, 1>) -> (f64, f64) {
    let trans = (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt();
    let rot = (e[3] * e[3] + e[4] * e[4] + e[5] * e[5]).sqrt() / MM_PER_RAD;
    (trans, rot)
}

/// Levenberg-Marquardt iteration on the weighted twist error.
///
/// Joint columns are scaled so one radian of revolute motion and 100 mm of
/// prismatic travel cost the same, which both conditions the solve and
/// realizes the nearest-to-seed tie-break. When `clamp` is set every iterate
/// is clamped to joint limits.
fn lm_iterate(
    chain: &KinematicChain,
    target: &RigidTransform,
    start: &[f64],
    frame: &IkFrame,
    params: &IkParams,
    budget: &mut usize,
    clamp: bool,
) -> Result<Vec<f64>, (f64, Vec<f64>)> {
    const STEP_CLAMP: f64 = 50.0; // mm-equivalents per iteration
    const LAMBDA_MAX: f64 = 1e8;

    let n_active = active_joints(frame);
    let mut q = start.to_vec();
    if clamp {
        chain.clamp_to_limits(&mut q);
    }
    let mut lambda = params.lambda0;
    let qv = JointVector(q.clone());
    let frames = joint_frames(chain, &qv).expect("length checked");
    let mut err = pose_error(&fk_for_frame(chain, &frames, frame), target);
    let mut best_q = q.clone();
    let mut best_norm = err.norm();

    while *budget > 0 {
        let (trans, rot) = error_components(&err);
        if trans <= params.tol_translation_mm && rot <= params.tol_rotation_rad {
            return Ok(q);
        }
        *budget -= 1;

        let qv = JointVector(q.clone());
        let frames = joint_frames(chain, &qv).expect("length checked");
        let end = fk_for_frame(chain, &frames, frame);
        let mut jac = jacobian_at(chain, &frames, n_active, &end.translation);
        // Row scaling (rotation to mm-equivalents) and column scaling
        // (prismatic mm to rad-equivalents).
        for c in 0..JOINT_COUNT {
            let col_w = if c < n_active {
                match chain.joints[c].joint_type {
                    JointType::Revolute => 1.0,
                    JointType::Prismatic => MM_PER_RAD,
                }
            } else {
                0.0
            };
            for r in 0..6 {
                let row_w = if r < 3 { 1.0 } else { MM_PER_RAD };
                jac[(r, c)] *= row_w * col_w;
            }
        }

        // dq_tilde = J^T (J J^T + lambda^2 I)^-1 e
        let jjt = jac * jac.transpose();
        let damped = jjt + SMatrix::<f64, 6, 6>::identity() * (lambda * lambda);
        let rhs = match damped.cholesky() {
            Some(ch) => ch.solve(&err),
            None => {
                lambda = (lambda * 10.0).min(LAMBDA_MAX);
                continue;
            }
        };
        let mut dq = jac.transpose() * rhs;
        let step = dq.norm();
        if step > STEP_CLAMP {
            dq *= STEP_CLAMP / step;
        }

        let mut q_new = q.clone();
        for i in 0..n_active {
            let w = match chain.joints[i].joint_type {
                JointType::Revolute => 1.0,
                JointType::Prismatic => MM_PER_RAD,
            };
            q_new[i] += w * dq[i];
        }
        if clamp {
            chain.clamp_to_limits(&mut q_new);
        }

        let qv_new = JointVector(q_new.clone());
        let frames_new = joint_frames(chain, &qv_new).expect("length checked");
        let err_new = pose_error(&fk_for_frame(chain, &frames_new, frame), target);

        if err_new.norm() < err.norm() {
            q = q_new;
            err = err_new;
            lambda = (lambda / 3.0).max(params.lambda0);
            if err.norm() < best_norm {
                best_norm = err.norm();
                best_q = q.clone();
            }
        } else {
            lambda *= 10.0;
            if lambda > LAMBDA_MAX {
                // Stuck in a local minimum; caller may restart elsewhere.
                return Err((best_norm, best_q));
            }
        }
    }
    let (trans, rot) = error_components(&err);
    if trans <= params.tol_translation_mm && rot <= params.tol_rotation_rad {
        Ok(q)
    } else {
        Err((best_norm, best_q))
    }
}

/// General IK entry point used by the procedure layer.
pub fn solve_ik(
    chain: &KinematicChain,
    target: &RigidTransform,
    seed_q: &JointVector,
    frame: IkFrame,
    params: &IkParams,
) -> Result<JointVector, KinematicsError> {
    let seed = seed_q.checked()?.to_vec();

    // Seed already solves the target: return it untouched (no wrapping).
    if chain.within_limits(seed_q) {
        let frames = joint_frames(chain, seed_q)?;
        let err = pose_error(&fk_for_frame(chain, &frames, &frame), target);
        let (trans, rot) = error_components(&err);
        if trans <= params.tol_translation_mm && rot <= params.tol_rotation_rad {
            return Ok(seed_q.clone());
        }
    }

    // Deterministic restart postures: the seed, a few canonical blends, and
    // seeded random postures spanning the wrist-orientation space. Each
    // start gets the full iteration budget; most solves exit on the first.
    let mid = chain.limits_midpoint().0;
    let mixed: Vec<f64> = seed
        .iter()
        .zip(chain.q_home.0.iter())
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    let mut wrist_flip = seed.clone();
    for i in 3..6 {
        wrist_flip[i] = -wrist_flip[i];
    }
    let mut starts = vec![seed.clone(), chain.q_home.0.clone(), mixed, mid, wrist_flip];
    // Base-azimuth-informed postures: the first joint of an anthropomorphic
    // arm tracks the target azimuth (or its half-turn flip).
    let azimuth = target.translation.y.atan2(target.translation.x);
    for base in [azimuth, azimuth + std::f64::consts::PI, azimuth - std::f64::consts::PI] {
        let mut s = chain.q_home.0.clone();
        s[0] = base;
        starts.push(s);
    }
    {
        use rand::Rng as _;
        use rand::SeedableRng as _;
        let mut restart_rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x1c_5eed);
        for _ in 0..10 {
            starts.push(
                chain
                    .joints
                    .iter()
                    .map(|j| {
                        let lo = j.limit_min.max(-std::f64::consts::PI);
                        let hi = j.limit_max.min(std::f64::consts::PI);
                        if lo < hi {
                            restart_rng.random_range(lo..hi)
                        } else {
                            0.5 * (j.limit_min + j.limit_max)
                        }
                    })
                    .collect(),
            );
        }
    }

    let mut best: Option<(f64, Vec<f64>)> = None;
    for start in &starts {
        let mut budget = params.max_iterations;
        match lm_iterate(chain, target, start, &frame, params, &mut budget, true) {
            Ok(q) => return Ok(JointVector(q)),
            Err((norm, q)) => {
                if best.as_ref().is_none_or(|(b, _)| norm < *b) {
                    best = Some((norm, q));
                }
            }
        }
    }

    // Limits blocked every start. If the unconstrained problem converges the
    // target is reachable only outside the limits.
    for start in &starts {
        let mut free_budget = params.max_iterations;
        if lm_iterate(chain, target, start, &frame, params, &mut free_budget, false).is_ok() {
            return Err(KinematicsError::JointLimitViolation);
        }
    }
    Err(KinematicsError::NoConvergence {
        iterations: params.max_iterations,
        residual_mm: best.map(|(n, _)| n).unwrap_or(f64::INFINITY),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_chain() -> KinematicChain {
        let joints: Vec<JointDescriptor> = (0..9)
            .map(|i| {
                let joint_type = match i {
                    6 | 8 => JointType::Prismatic,
                    _ => JointType::Revolute,
                };
                JointDescriptor {
                    joint_type,
                    a_mm: 0.0,
                    alpha_rad: 0.0,
                    d_mm: 0.0,
                    theta_offset_rad: 0.0,
                    limit_min: -100.0,
                    limit_max: 100.0,
                }
            })
            .collect();
        KinematicChain::new(joints, RigidTransform::identity(), JointVector::zeros()).unwrap()
    }

    fn random_in_limit_q(chain: &KinematicChain, rng: &mut ChaCha8Rng) -> JointVector {
        JointVector(
            chain
                .joints
                .iter()
                .map(|j| rng.random_range(j.limit_min..j.limit_max))
                .collect(),
        )
    }

    #[test]
    fn all_zero_chain_gives_identity() {
        let chain = zero_chain();
        let t = forward_kinematics(&chain, &JointVector::zeros()).unwrap();
        assert_relative_eq!(t.translation.norm(), 0.0, epsilon = 1e-15);
        assert_relative_eq!((t.rotation - Matrix3::identity()).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn wrong_length_is_rejected() {
        let chain = KinematicChain::default_chain();
        let err = forward_kinematics(&chain, &JointVector(vec![0.0; 5])).unwrap_err();
        assert!(matches!(
            err,
            KinematicsError::InvalidJointVector { expected: 9, got: 5 }
        ));
    }

    #[test]
    fn insertion_advance_translates_along_needle_axis() {
        let chain = KinematicChain::default_chain();
        let home = forward_kinematics(&chain, &chain.q_home).unwrap();
        let mut q = chain.q_home.clone();
        q.0[8] += 10.0;
        let advanced = forward_kinematics(&chain, &q).unwrap();
        let axis = home.rotation.column(2).into_owned();
        let expected = home.translation + axis * 10.0;
        assert_relative_eq!((advanced.translation - expected).norm(), 0.0, epsilon = 1e-9);
        assert_relative_eq!((advanced.rotation - home.rotation).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn jacobian_insertion_column_is_needle_axis() {
        let chain = KinematicChain::default_chain();
        let q = chain.q_home.clone();
        let j = jacobian(&chain, &q).unwrap();
        let tip = forward_kinematics(&chain, &q).unwrap();
        let axis = tip.rotation.column(2).into_owned();
        for r in 0..3 {
            assert_relative_eq!(j[(r, 8)], axis[r], epsilon = 1e-12);
            assert_relative_eq!(j[(r + 3, 8)], 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn jacobian_zero_chain_has_zero_revolute_translation_columns() {
        let chain = zero_chain();
        let j = jacobian(&chain, &JointVector::zeros()).unwrap();
        for c in [0usize, 1, 2, 3, 4, 5, 7] {
            for r in 0..3 {
                assert_relative_eq!(j[(r, c)], 0.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn jacobian_matches_central_finite_differences() {
        let chain = KinematicChain::default_chain();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let q = random_in_limit_q(&chain, &mut rng);
            let j = jacobian(&chain, &q).unwrap();
            let h = 1e-7;
            for c in 0..JOINT_COUNT {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp.0[c] += h;
                qm.0[c] -= h;
                let tp = forward_kinematics(&chain, &qp).unwrap();
                let tm = forward_kinematics(&chain, &qm).unwrap();
                let dv = (tp.translation - tm.translation) / (2.0 * h);
                // Angular velocity from the rotation difference:
                // dR R^T ~ skew(w).
                let dr = (tp.rotation - tm.rotation) / (2.0 * h);
                let wx = dr * forward_kinematics(&chain, &q).unwrap().rotation.transpose();
                let w = Vector3::new(wx[(2, 1)], wx[(0, 2)], wx[(1, 0)]);
                let scale = 1.0f64.max(j.column(c).norm());
                for r in 0..3 {
                    assert!(
                        (j[(r, c)] - dv[r]).abs() / scale <= 1e-6,
                        "linear row {r} col {c}: analytic {} vs fd {}",
                        j[(r, c)],
                        dv[r]
                    );
                    assert!(
                        (j[(r + 3, c)] - w[r]).abs() / scale <= 1e-6,
                        "angular row {r} col {c}: analytic {} vs fd {}",
                        j[(r + 3, c)],
                        w[r]
                    );
                }
            }
        }
    }

    #[test]
    fn ik_fixed_point_returns_seed() {
        let chain = KinematicChain::default_chain();
        let q0 = chain.q_home.clone();
        let target = forward_kinematics(&chain, &q0).unwrap();
        let solved = inverse_kinematics(&chain, &target, &q0).unwrap();
        assert!(q0.distance_to(&solved, &chain) < 1e-6);
    }

    #[test]
    fn ik_round_trip_small_perturbation() {
        let chain = KinematicChain::default_chain();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mut q = chain.q_home.clone();
            for qi in q.0.iter_mut() {
                *qi += rng.random_range(-0.05..0.05);
            }
            chain.clamp_to_limits(&mut q.0);
            let target = forward_kinematics(&chain, &q).unwrap();
            let solved = inverse_kinematics(&chain, &target, &chain.q_home).unwrap();
            let achieved = forward_kinematics(&chain, &solved).unwrap();
            assert!((achieved.translation - target.translation).norm() <= 0.01);
            assert!(achieved.rotation_angle_to(&target) <= 1e-4);
            assert!(chain.within_limits(&solved));
        }
    }

    #[test]
    fn ik_unreachable_target_reports_no_convergence() {
        let chain = KinematicChain::default_chain();
        let mut target = forward_kinematics(&chain, &chain.q_home).unwrap();
        target.translation += Vector3::new(10_000.0, 0.0, 0.0);
        let err = inverse_kinematics(&chain, &target, &chain.q_home).unwrap_err();
        assert!(matches!(err, KinematicsError::NoConvergence { .. }));
    }

    #[test]
    fn ik_limit_blocked_target_reports_limit_violation() {
        // Pin every joint to a narrow band around home so redundancy cannot
        // compensate, then ask for a pose that needs J2 outside the band.
        let mut chain = KinematicChain::default_chain();
        let mut q = chain.q_home.clone();
        q.0[1] += 0.3;
        let target = forward_kinematics(&chain, &q).unwrap();
        for (j, home) in chain.joints.iter_mut().zip(&chain.q_home.0) {
            j.limit_min = home - 0.02;
            j.limit_max = home + 0.02;
        }
        let err = inverse_kinematics(&chain, &target, &chain.q_home).unwrap_err();
        assert!(matches!(err, KinematicsError::JointLimitViolation));
    }

    #[test]
    fn fk_is_bit_deterministic() {
        let chain = KinematicChain::default_chain();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let q = random_in_limit_q(&chain, &mut rng);
            let a = forward_kinematics(&chain, &q).unwrap();
            let b = forward_kinematics(&chain, &q).unwrap();
            assert_eq!(a.translation, b.translation);
            assert_eq!(a.rotation, b.rotation);
        }
    }

    #[test]
    fn fk_rotations_stay_orthonormal() {
        let chain = KinematicChain::default_chain();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let q = random_in_limit_q(&chain, &mut rng);
            assert!(forward_kinematics(&chain, &q).unwrap().rotation_is_orthonormal());
        }
    }
}
