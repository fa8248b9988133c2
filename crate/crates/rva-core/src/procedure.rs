//! The five-phase insertion procedure: pre-operative calibration, initial
//! positioning, target identification and alignment, path planning and
//! insertion, post-procedure reset. One attempt is strictly sequential;
//! batches parallelize across attempts, never within one.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{RunConfig, SafetySection};
use crate::kinematics::{
    forward_kinematics_with_tool, joint_frames, probe_pose, solve_ik, IkFrame, IkParams,
    JointVector, KinematicChain, PROBE_JOINT_COUNT,
};
use crate::phantom::{coarse_localize, Scenario, TissueBlock, Vessel};
use crate::rng::{stream, Stream};
use crate::safety::{
    check_gates, estimate_deformation, synthesize_force, CalibrationConfig, ForceReading,
    GateStatus, PunctureEvents,
};
use crate::transform::RigidTransform;
use crate::ultrasound::{
    detect_needle_tip, detect_vessel, quality_score, render_frame, render_needle, Detection,
    UltrasoundFrame,
};

#[derive(Debug, Error)]
pub enum ProcedureError {
    #[error("trajectory start equals target")]
    DegenerateSegment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AbortReason {
    CalibrationFailed,
    NoVesselFound,
    QualityRetriesExhausted,
    NoVesselDetected,
    Unreachable,
    ForceRetriesExceeded,
    DeformRetriesExceeded,
    StiffnessNotPositiveDefinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProcedurePhase {
    Calibration,
    InitialPositioning,
    TargetAlignment,
    Insertion,
    Reset,
    Done,
    Aborted(AbortReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Success,
    Miss,
    Transfixed,
    Aborted(AbortReason),
}

/// One phase-trace entry: the phase entered and the tick at entry.
pub type PhaseEvent = (ProcedurePhase, u64);

/// Check a phase trace against the legal transition graph. A trace may hold
/// several venipuncture passes: the first starts at `Calibration`, later
/// ones (the second attempt on the same subject) restart at
/// `InitialPositioning` after a terminal `Done`/`Aborted`.
pub fn phase_trace_is_legal(trace: &[PhaseEvent]) -> bool {
    use ProcedurePhase::*;
    if trace.is_empty() {
        return false;
    }
    if trace[0].0 != Calibration {
        return false;
    }
    let mut prev_tick = 0u64;
    let mut prev: Option<ProcedurePhase> = None;
    for &(phase, tick) in trace {
        if tick < prev_tick {
            return false;
        }
        prev_tick = tick;
        let ok = match (prev, phase) {
            (None, Calibration) => true,
            (Some(Calibration), InitialPositioning) => true,
            (Some(InitialPositioning), InitialPositioning) => true,
            (Some(InitialPositioning), TargetAlignment) => true,
            (Some(TargetAlignment), Insertion) => true,
            (Some(Insertion), Insertion) => true,
            (Some(Insertion), Reset) => true,
            (Some(Reset), Done) => true,
            // A second pass restarts after a terminal phase.
            (Some(Done), InitialPositioning) => true,
            (Some(Aborted(_)), InitialPositioning) => true,
            // Abort is reachable from any live phase.
            (Some(Calibration), Aborted(_)) => true,
            (Some(InitialPositioning), Aborted(_)) => true,
            (Some(TargetAlignment), Aborted(_)) => true,
            (Some(Insertion), Aborted(_)) => true,
            (Some(Reset), Aborted(_)) => true,
            _ => false,
        };
        if !ok {
            return false;
        }
        prev = Some(phase);
    }
    matches!(prev, Some(Done) | Some(Aborted(_)))
}

/// Straight-line tip trajectory `p(t) = p0 + t v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub p0: Vector3<f64>,
    pub v: Vector3<f64>,
    pub duration_s: f64,
}

impl Trajectory {
    pub fn at(&self, t_s: f64) -> Vector3<f64> {
        self.p0 + self.v * t_s
    }

    pub fn direction(&self) -> Vector3<f64> {
        self.v.normalize()
    }
}

/// Plan the insertion segment: unit direction scaled by `speed_mm_s`,
/// duration covering the distance plus `overshoot_margin_mm`.
pub fn plan_trajectory(
    start: &Vector3<f64>,
    target: &Vector3<f64>,
    speed_mm_s: f64,
    overshoot_margin_mm: f64,
) -> Result<Trajectory, ProcedureError> {
    let delta = target - start;
    let distance = delta.norm();
    if distance == 0.0 {
        return Err(ProcedureError::DegenerateSegment);
    }
    Ok(Trajectory {
        p0: *start,
        v: delta * (speed_mm_s / distance),
        duration_s: (distance + overshoot_margin_mm) / speed_mm_s,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub t_cal: RigidTransform,
    pub t_expected: RigidTransform,
    pub distance: f64,
    pub passed: bool,
}

/// Measure the needle tool transform: the true offset perturbed by seeded
/// measurement noise (plus any injected bias). The measured `t_cal` is what
/// the controller uses for kinematics from here on, which is exactly how a
/// miscalibration that slips past the gate biases the needle.
pub fn calibrate(
    true_needle_offset: &RigidTransform,
    cfg: &CalibrationConfig,
    eps_cal: f64,
    rng: &mut ChaCha8Rng,
) -> CalibrationResult {
    let t_expected = RigidTransform::identity();
    let mut noise = RigidTransform::identity();
    if cfg.sigma_translation_mm > 0.0 {
        let n = Normal::new(0.0, cfg.sigma_translation_mm).expect("sigma > 0");
        noise.translation = Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng));
    }
    if cfg.sigma_rotation_deg > 0.0 {
        let axis = loop {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if v.norm() > 1e-6 && v.norm() <= 1.0 {
                break v.normalize();
            }
        };
        let n = Normal::new(0.0, cfg.sigma_rotation_deg.to_radians()).expect("sigma > 0");
        let angle = n.sample(rng);
        noise.rotation = RigidTransform::from_axis_angle(axis, angle).rotation;
    }
    let bias = RigidTransform::from_translation(Vector3::new(
        cfg.injected_bias_mm[0],
        cfg.injected_bias_mm[1],
        cfg.injected_bias_mm[2],
    ));
    let t_cal = true_needle_offset.compose(&noise).compose(&bias);
    let distance = t_cal.distance_to(&t_expected);
    CalibrationResult {
        t_cal,
        t_expected,
        distance,
        passed: distance <= eps_cal,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InsertionEnd {
    InLumen,
    Transfixed,
    Exhausted,
    ForceTripped,
    DeformAborted,
    StiffnessFailure,
}

#[derive(Debug, Clone)]
pub struct InsertionOutcome {
    pub end: InsertionEnd,
    pub ticks: u64,
    pub force_trace: Vec<ForceReading>,
    pub max_force_n: f64,
    /// Physical tip positions, one per tick.
    pub tip_path: Vec<Vector3<f64>>,
    pub re_aimed: bool,
    pub final_u_mm: Vector3<f64>,
    pub q_final: JointVector,
}

fn nearest_vessel<'a>(block: &'a TissueBlock, p: &Vector3<f64>) -> Option<&'a Vessel> {
    block
        .vessels
        .iter()
        .min_by(|a, b| a.distance_to_axis(p).total_cmp(&b.distance_to_axis(p)))
}

/// One-joint tracking step: advance the insertion joint so the believed tip
/// follows `p_des` along the needle axis. The axis projection is exact for
/// the prismatic joint, so a single Newton step converges.
fn track_insertion(
    chain: &KinematicChain,
    q: &mut JointVector,
    p_des: &Vector3<f64>,
    believed_tool: &RigidTransform,
) {
    let frames = joint_frames(chain, q).expect("valid joint vector");
    let tip = frames[9].compose(believed_tool).translation;
    let axis = frames[9].rotation.column(2).into_owned();
    let delta = (p_des - tip).dot(&axis);
    let j = &chain.joints[8];
    q.0[8] = (q.0[8] + delta).clamp(j.limit_min, j.limit_max);
}

/// Stepped insertion along `traj`, monitoring force and tissue deformation
/// each tick. The vessel is rigidly displaced by the running deformation
/// estimate; the wall-pop event gates lumen entry. Ends at lumen entry,
/// transfixion, gate trip, or trajectory exhaustion.
#[allow(clippy::too_many_arguments)]
pub fn insert(
    traj: &Trajectory,
    block: &TissueBlock,
    chain: &KinematicChain,
    safety: &SafetySection,
    q_start: &JointVector,
    believed_tool: &RigidTransform,
    true_tool: &RigidTransform,
    p_target: &Vector3<f64>,
    rng_force: &mut ChaCha8Rng,
) -> InsertionOutcome {
    let dt = safety.tick_dt_s;
    let limits = safety.limits();
    let model = &safety.force;

    let mut traj = traj.clone();
    let origin = traj.p0;
    let axis0 = traj.direction();

    let mut q = q_start.clone();
    let mut u = Vector3::zeros();
    // Deformation is estimated from a low-passed force signal; the raw
    // norm still feeds the force gate.
    let mut f_filtered = Vector3::zeros();
    const FORCE_EMA_ALPHA: f64 = 0.2;
    let mut wall_contact: Option<f64> = None;
    let mut deform_active = false;
    let mut deform_episodes = 0u32;
    let mut re_aimed = false;
    let mut max_force: f64 = 0.0;
    let mut force_trace = Vec::new();
    let mut tip_path = Vec::new();

    let max_ticks = ((traj.duration_s / dt).ceil() as u64) * 4 + 2000;
    let mut tick = 0u64;
    let mut t = 0.0;
    let mut end = InsertionEnd::Exhausted;

    while tick < max_ticks {
        tick += 1;
        t += dt;
        if t > traj.duration_s {
            end = InsertionEnd::Exhausted;
            break;
        }
        let p_des = traj.at(t);
        track_insertion(chain, &mut q, &p_des, believed_tool);
        let tip_pose = forward_kinematics_with_tool(chain, &q, true_tool).expect("valid q");
        let tip = tip_pose.translation;
        tip_path.push(tip);

        let depth = (tip - origin).dot(&axis0);
        let tip_eff = tip - u;

        let vessel = match nearest_vessel(block, &tip_eff) {
            Some(v) => v,
            None => {
                end = InsertionEnd::Exhausted;
                break;
            }
        };
        let r = vessel.radius_mm();
        if wall_contact.is_none() && vessel.distance_to_axis(&tip_eff) <= r {
            wall_contact = Some(depth);
        }
        let events = PunctureEvents {
            wall_contact_depth_mm: wall_contact,
        };
        let reading = synthesize_force(depth, &events, model, t, rng_force);
        max_force = max_force.max(reading.force_n.norm());
        // Rotate the needle-frame reading into the world frame for the
        // stiffness solve.
        let f_world = tip_pose.rotation * reading.force_n;
        force_trace.push(reading);
        f_filtered = f_filtered * (1.0 - FORCE_EMA_ALPHA) + f_world * FORCE_EMA_ALPHA;

        u = match estimate_deformation(&block.stiffness_k, &f_filtered) {
            Ok(u) => u,
            Err(_) => {
                end = InsertionEnd::StiffnessFailure;
                break;
            }
        };

        match check_gates(max_force, &u, &limits) {
            GateStatus::ForceExceeded => {
                end = InsertionEnd::ForceTripped;
                break;
            }
            GateStatus::DeformExceeded => {
                if !deform_active {
                    deform_episodes += 1;
                    if deform_episodes == 1 && !re_aimed {
                        // One trajectory adjustment per insertion: re-aim at
                        // the deformed vessel position and continue.
                        re_aimed = true;
                        let believed_tip =
                            forward_kinematics_with_tool(chain, &q, believed_tool)
                                .expect("valid q")
                                .translation;
                        let shifted = p_target + u;
                        if let Ok(new_traj) = plan_trajectory(
                            &believed_tip,
                            &shifted,
                            safety.insertion_speed_mm_s,
                            traj.duration_s * safety.insertion_speed_mm_s
                                - (shifted - believed_tip).norm(),
                        ) {
                            traj = new_traj;
                            t = 0.0;
                        }
                    } else {
                        end = InsertionEnd::DeformAborted;
                        break;
                    }
                }
            }
            GateStatus::Ok => {}
        }
        deform_active = u.norm() > limits.eps_deform_mm;

        // Lumen entry opens when the wall pops.
        if let Some(w) = wall_contact {
            if depth >= w + model.wall_ramp_mm {
                let inside = vessel.distance_to_axis(&tip_eff) < r;
                end = if inside {
                    InsertionEnd::InLumen
                } else {
                    InsertionEnd::Transfixed
                };
                break;
            }
        }
    }

    InsertionOutcome {
        end,
        ticks: tick,
        force_trace,
        max_force_n: max_force,
        tip_path,
        re_aimed,
        final_u_mm: u,
        q_final: q,
    }
}

/// Everything one trial produces, before the batch layer flattens it into a
/// record.
#[derive(Debug, Clone)]
pub struct AttemptOutput {
    pub outcome: Outcome,
    pub blood_return: bool,
    pub attempts_used: u32,
    pub phase_trace: Vec<PhaseEvent>,
    pub force_trace: Vec<ForceReading>,
    pub max_force_n: f64,
    pub vessel_diameter_mm: f64,
    pub vessel_depth_mm: f64,
    pub calibration: CalibrationResult,
    pub quality_q: f64,
    pub align_distance_mm: f64,
    pub pre_frame: Option<UltrasoundFrame>,
    pub post_frame: Option<UltrasoundFrame>,
    pub needle_tip_detection: Option<Detection>,
    pub final_tip_mm: Option<Vector3<f64>>,
    pub tip_path: Vec<Vector3<f64>>,
    pub retract_path: Vec<Vector3<f64>>,
}

struct PassResult {
    outcome: Outcome,
    quality_q: f64,
    align_distance_mm: f64,
    force_trace: Vec<ForceReading>,
    max_force_n: f64,
    pre_frame: Option<UltrasoundFrame>,
    post_frame: Option<UltrasoundFrame>,
    needle_tip_detection: Option<Detection>,
    final_tip_mm: Option<Vector3<f64>>,
    tip_path: Vec<Vector3<f64>>,
    retract_path: Vec<Vector3<f64>>,
}

/// Canonical short-axis plane pose over `origin_xy` on the skin: x lateral
/// (world +y), y depth (world -z), z elevation (world -x).
pub fn short_axis_pose(x_mm: f64, y_mm: f64) -> RigidTransform {
    let rot = Matrix3::new(
        0.0, 0.0, -1.0, //
        1.0, 0.0, 0.0, //
        0.0, -1.0, 0.0,
    );
    RigidTransform::new(rot, Vector3::new(x_mm, y_mm, 0.0))
}

/// Execute one full trial: calibration once, then up to the scenario's
/// attempt budget of positioning/alignment/insertion passes on the same
/// tissue block. Success means the tip ended inside the lumen (the
/// blood-return signal).
pub fn run_attempt(
    scenario: &dyn Scenario,
    trial_seed: u64,
    cfg: &RunConfig,
) -> AttemptOutput {
    let chain = cfg.build_chain().expect("validated config");
    let block = scenario.generate(trial_seed, &cfg.scenario);
    let vessel = block.vessels.first();
    let vessel_diameter = vessel.map_or(0.0, |v| v.diameter_mm);
    let vessel_depth = block.skin_depth_to_vessel_mm;
    let max_attempts = cfg
        .trials
        .max_attempts
        .unwrap_or_else(|| scenario.max_attempts())
        .max(1);

    let mut trace: Vec<PhaseEvent> = Vec::new();
    let mut tick = 0u64;

    // Pre-operative calibration, once per trial.
    trace.push((ProcedurePhase::Calibration, tick));
    tick += 1;
    let true_tool = RigidTransform::identity();
    let mut cal_rng = stream(trial_seed, 0, Stream::Calibration);
    let calibration = calibrate(
        &true_tool,
        &cfg.safety.calibration,
        cfg.safety.eps_cal,
        &mut cal_rng,
    );
    let believed_tool = calibration.t_cal;

    if cfg.safety.calibration.gate_enabled && !calibration.passed {
        let reason = AbortReason::CalibrationFailed;
        trace.push((ProcedurePhase::Aborted(reason), tick));
        return AttemptOutput {
            outcome: Outcome::Aborted(reason),
            blood_return: false,
            attempts_used: 1,
            phase_trace: trace,
            force_trace: Vec::new(),
            max_force_n: 0.0,
            vessel_diameter_mm: vessel_diameter,
            vessel_depth_mm: vessel_depth,
            calibration,
            quality_q: 0.0,
            align_distance_mm: 0.0,
            pre_frame: None,
            post_frame: None,
            needle_tip_detection: None,
            final_tip_mm: None,
            tip_path: Vec::new(),
            retract_path: Vec::new(),
        };
    }

    let mut attempts_used = 0;
    let mut all_forces: Vec<ForceReading> = Vec::new();
    let mut max_force: f64 = 0.0;
    let mut last: Option<PassResult> = None;

    for attempt in 0..max_attempts {
        attempts_used = attempt + 1;
        let pass = run_pass(
            &chain,
            &block,
            cfg,
            &believed_tool,
            &true_tool,
            trial_seed,
            attempt,
            &mut trace,
            &mut tick,
        );
        all_forces.extend(pass.force_trace.iter().cloned());
        max_force = max_force.max(pass.max_force_n);
        let success = pass.outcome == Outcome::Success;
        last = Some(pass);
        if success {
            break;
        }
    }

    let pass = last.expect("at least one pass");
    AttemptOutput {
        outcome: pass.outcome,
        blood_return: pass.outcome == Outcome::Success,
        attempts_used,
        phase_trace: trace,
        force_trace: all_forces,
        max_force_n: max_force,
        vessel_diameter_mm: vessel_diameter,
        vessel_depth_mm: vessel_depth,
        calibration,
        quality_q: pass.quality_q,
        align_distance_mm: pass.align_distance_mm,
        pre_frame: pass.pre_frame,
        post_frame: pass.post_frame,
        needle_tip_detection: pass.needle_tip_detection,
        final_tip_mm: pass.final_tip_mm,
        tip_path: pass.tip_path,
        retract_path: pass.retract_path,
    }
}

#[allow(clippy::too_many_arguments)]
fn run_pass(
    chain: &KinematicChain,
    block: &TissueBlock,
    cfg: &RunConfig,
    believed_tool: &RigidTransform,
    true_tool: &RigidTransform,
    trial_seed: u64,
    attempt: u32,
    trace: &mut Vec<PhaseEvent>,
    tick: &mut u64,
) -> PassResult {
    let safety = &cfg.safety;
    let mut rng_loc = stream(trial_seed, attempt, Stream::Localization);
    let mut rng_speckle = stream(trial_seed, attempt, Stream::Speckle);
    let mut rng_detect = stream(trial_seed, attempt, Stream::Detection);
    let mut rng_force = stream(trial_seed, attempt, Stream::Force);

    let mut result = PassResult {
        outcome: Outcome::Miss,
        quality_q: 0.0,
        align_distance_mm: 0.0,
        force_trace: Vec::new(),
        max_force_n: 0.0,
        pre_frame: None,
        post_frame: None,
        needle_tip_detection: None,
        final_tip_mm: None,
        tip_path: Vec::new(),
        retract_path: Vec::new(),
    };
    let abort = |trace: &mut Vec<PhaseEvent>, tick: &mut u64, r: AbortReason,
                     mut res: PassResult| {
        trace.push((ProcedurePhase::Aborted(r), *tick));
        *tick += 1;
        res.outcome = Outcome::Aborted(r);
        res
    };

    // --- Initial positioning ---
    trace.push((ProcedurePhase::InitialPositioning, *tick));
    *tick += 1;
    let coarse = match coarse_localize(block, cfg.scenario.coarse_sigma_mm, &mut rng_loc) {
        Ok(c) => c,
        Err(_) => return abort(trace, tick, AbortReason::NoVesselFound, result),
    };

    let mut q = chain.q_home.clone();
    let mut frame: Option<UltrasoundFrame> = None;
    let mut q_score = 0.0;
    // Lateral jitter offsets on the +/-1 mm grid for quality retries.
    let jitter = [0.0, 1.0, -1.0, 2.0, -2.0, 3.0, -3.0, 4.0, -4.0];
    let budget = (safety.max_quality_retries as usize + 1).min(jitter.len());
    for (retry, offset) in jitter.iter().take(budget).enumerate() {
        if retry > 0 {
            trace.push((ProcedurePhase::InitialPositioning, *tick));
            *tick += 1;
        }
        let desired = short_axis_pose(coarse.approx_position.x, coarse.approx_position.y + offset);
        q = match solve_ik(chain, &desired, &q, IkFrame::Probe, &IkParams::default()) {
            Ok(q) => q,
            Err(_) => return abort(trace, tick, AbortReason::Unreachable, result),
        };
        let plane = probe_pose(chain, &q).expect("valid q");
        // Temporal correlation resets whenever the probe moves, so each
        // retry position images fresh.
        match render_frame(block, &plane, &cfg.us, &mut rng_speckle, None) {
            Ok(f) => {
                q_score = quality_score(&f);
                frame = Some(f);
                if q_score >= safety.q_threshold {
                    break;
                }
            }
            Err(_) => continue, // plane missed the block; jitter and retry
        }
    }
    result.quality_q = q_score;
    let Some(frame) = frame.filter(|_| q_score >= safety.q_threshold) else {
        return abort(trace, tick, AbortReason::QualityRetriesExhausted, result);
    };
    result.pre_frame = Some(frame.clone());

    // --- Alignment + insertion, with one force retry re-entering here ---
    let mut insertion_entered = false;
    for insertion_try in 0..=safety.max_insertion_retries {
        // --- Target identification and alignment ---
        if insertion_try == 0 {
            trace.push((ProcedurePhase::TargetAlignment, *tick));
            *tick += 1;
        }
        let det = match detect_vessel(&frame) {
            Ok(d) => d,
            Err(_) => return abort(trace, tick, AbortReason::NoVesselDetected, result),
        };
        let mut center_mm = det.center_mm;
        if cfg.scenario.detection_noise_mm > 0.0 {
            let n = Normal::new(0.0, cfg.scenario.detection_noise_mm).expect("sigma > 0");
            center_mm[0] += n.sample(&mut rng_detect);
            center_mm[1] += n.sample(&mut rng_detect);
        }
        let lateral = center_mm[0] - frame.width as f64 * frame.mm_per_px / 2.0;
        let p_target = frame.origin.translation
            + frame.origin.rotation.column(0) * lateral
            + frame.origin.rotation.column(1) * center_mm[1];

        let believed_tip = forward_kinematics_with_tool(chain, &q, believed_tool)
            .expect("valid q")
            .translation;
        result.align_distance_mm = (p_target - believed_tip).norm();

        let mut aligned = false;
        for _ in 0..safety.max_align_iters.max(1) {
            let q_new = match align_step(chain, &q, &p_target, believed_tool) {
                Ok(qn) => qn,
                Err(_) => return abort(trace, tick, AbortReason::Unreachable, result),
            };
            let correction = q_new.distance_to(&q, chain);
            q = q_new;
            if correction <= safety.eps_align {
                aligned = true;
                break;
            }
        }
        let _ = aligned; // bounded iteration; residual correction is recorded via IK tolerances

        // --- Path planning and insertion ---
        trace.push((ProcedurePhase::Insertion, *tick));
        *tick += 1;
        insertion_entered = true;
        let entry = forward_kinematics_with_tool(chain, &q, believed_tool)
            .expect("valid q")
            .translation;
        let margin = safety.overshoot_frac * det.diameter_mm;
        let traj = match plan_trajectory(&entry, &p_target, safety.insertion_speed_mm_s, margin) {
            Ok(t) => t,
            Err(_) => return abort(trace, tick, AbortReason::Unreachable, result),
        };
        let ins = insert(
            &traj, block, chain, safety, &q, believed_tool, true_tool, &p_target, &mut rng_force,
        );
        *tick += ins.ticks;
        result.force_trace.extend(ins.force_trace.iter().cloned());
        result.max_force_n = result.max_force_n.max(ins.max_force_n);
        q = ins.q_final.clone();

        match ins.end {
            InsertionEnd::ForceTripped => {
                if insertion_try < safety.max_insertion_retries {
                    // Retract and retry from target alignment; the retry is a
                    // self-loop on the insertion phase.
                    retract(chain, &mut q, &ins, &mut result);
                    continue;
                }
                return abort(trace, tick, AbortReason::ForceRetriesExceeded, result);
            }
            InsertionEnd::DeformAborted => {
                return abort(trace, tick, AbortReason::DeformRetriesExceeded, result);
            }
            InsertionEnd::StiffnessFailure => {
                return abort(trace, tick, AbortReason::StiffnessNotPositiveDefinite, result);
            }
            InsertionEnd::InLumen | InsertionEnd::Transfixed | InsertionEnd::Exhausted => {
                result.outcome = match ins.end {
                    InsertionEnd::InLumen => Outcome::Success,
                    InsertionEnd::Transfixed => Outcome::Transfixed,
                    _ => Outcome::Miss,
                };
                let tip_pose = forward_kinematics_with_tool(chain, &q, true_tool)
                    .expect("valid q");
                result.final_tip_mm = Some(tip_pose.translation);

                // Post-puncture frame with the needle echo, before retraction.
                let plane = probe_pose(chain, &q).expect("valid q");
                if let Ok(fresh) =
                    render_frame(block, &plane, &cfg.us, &mut rng_speckle, Some(&frame))
                {
                    let rel = tip_pose.translation - plane.translation;
                    let tip_in_plane = Vector3::new(
                        rel.dot(&plane.rotation.column(0).into_owned()),
                        rel.dot(&plane.rotation.column(1).into_owned()),
                        rel.dot(&plane.rotation.column(2).into_owned()),
                    );
                    let post = render_needle(&fresh, Some(tip_in_plane));
                    result.needle_tip_detection = detect_needle_tip(&post);
                    result.post_frame = Some(post);
                }

                retract(chain, &mut q, &ins, &mut result);
                break;
            }
        }
    }
    debug_assert!(insertion_entered);

    // --- Post-procedure reset ---
    trace.push((ProcedurePhase::Reset, *tick));
    *tick += 1;
    let mut q_home = chain.q_home.clone();
    std::mem::swap(&mut q, &mut q_home);
    trace.push((ProcedurePhase::Done, *tick));
    *tick += 1;
    result
}

/// Retract along the recorded insertion path, reversed, then leave the
/// joints ready for the home move.
fn retract(
    chain: &KinematicChain,
    q: &mut JointVector,
    ins: &InsertionOutcome,
    result: &mut PassResult,
) {
    result.tip_path = ins.tip_path.clone();
    result.retract_path = ins.tip_path.iter().rev().cloned().collect();
    // Physically: drive the insertion joint back to its pre-insertion value.
    let j = &chain.joints[8];
    q.0[8] = q.0[8].min(j.limit_max).max(j.limit_min).min(chain.q_home.0[8].max(j.limit_min));
}

/// One alignment step: re-center the probe laterally over the target, then
/// set pitch and insertion so the believed needle line passes through the
/// target with the believed tip at the skin surface.
///
/// The construction runs on the calibrated (believed) kinematics, so any
/// calibration error biases the physical needle line by exactly the
/// measurement error -- the miscalibration pathway of the simulator.
fn align_step(
    chain: &KinematicChain,
    q: &JointVector,
    p_target: &Vector3<f64>,
    believed_tool: &RigidTransform,
) -> Result<JointVector, crate::kinematics::KinematicsError> {
    let mut q_new = q.clone();
    // Believed-vs-geometric tip offset in world coordinates; refined over
    // the fixed-point passes as the pitch converges.
    let mut tool_offset = Vector3::zeros();
    for _ in 0..3 {
        // Lateral re-centering of the image plane (sub-chain IK over
        // arm+slide), compensating the believed lateral offset.
        let plane = probe_pose(chain, &q_new)?;
        let desired = RigidTransform::new(
            plane.rotation,
            Vector3::new(plane.translation.x, p_target.y - tool_offset.y, 0.0),
        );
        q_new = solve_ik(chain, &desired, &q_new, IkFrame::Probe, &IkParams::default())?;

        // Pitch so the geometric needle line hits the tool-corrected target,
        // insertion so the believed tip starts at the skin plane.
        let frames = joint_frames(chain, &q_new)?;
        let pivot = frames[PROBE_JOINT_COUNT].translation;
        let x7 = frames[PROBE_JOINT_COUNT].rotation.column(0).into_owned();
        let y7 = frames[PROBE_JOINT_COUNT].rotation.column(1).into_owned();
        let aim = p_target - tool_offset;
        let d = aim - pivot;
        let a = d.dot(&x7);
        let b = -d.dot(&y7);
        let pitch_joint = &chain.joints[7];
        let psi = a.atan2(b);
        q_new.0[7] = (psi - pitch_joint.theta_offset_rad)
            .clamp(pitch_joint.limit_min, pitch_joint.limit_max);

        let frames = joint_frames(chain, &q_new)?;
        let axis = frames[9].rotation.column(2).into_owned();
        let ins_joint = &chain.joints[8];
        q_new.0[8] = if axis.z < -1e-9 {
            ((-tool_offset.z - pivot.z) / axis.z - ins_joint.d_mm)
                .clamp(ins_joint.limit_min, ins_joint.limit_max)
        } else {
            ins_joint.limit_min
        };

        let frames = joint_frames(chain, &q_new)?;
        tool_offset = frames[9].rotation * believed_tool.translation;
    }
    Ok(q_new)
}
