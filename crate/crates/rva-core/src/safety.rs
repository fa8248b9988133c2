//! Needle-tissue force synthesis, deformation estimation, and the
//! threshold monitors that gate the insertion loop.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SafetyError {
    #[error("stiffness matrix is not positive-definite")]
    NotPositiveDefinite,
}

/// One force-sensor sample. The force vector is in the needle frame:
/// x, y lateral, z axial (along the shaft).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceReading {
    pub t_s: f64,
    pub force_n: Vector3<f64>,
}

/// Gate thresholds. `eps_cal` is a combined transform distance
/// (`translation + 100 * rotation angle`, mm-equivalents); `eps_align` is a
/// weighted joint-space norm (rad-equivalents).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SafetyLimits {
    pub f_threshold_n: f64,
    pub eps_deform_mm: f64,
    pub eps_cal: f64,
    pub eps_align: f64,
    pub q_threshold: f64,
}

impl Default for SafetyLimits {
    fn default() -> Self {
        Self {
            f_threshold_n: 2.0,
            eps_deform_mm: 0.5,
            // 0.1 mm translation plus 0.5 degrees rotation, combined.
            eps_cal: 0.1 + 100.0 * 0.5f64.to_radians(),
            eps_align: 1e-3,
            q_threshold: 1.5,
        }
    }
}

impl SafetyLimits {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("f_threshold_n", self.f_threshold_n),
            ("eps_deform_mm", self.eps_deform_mm),
            ("eps_cal", self.eps_cal),
            ("eps_align", self.eps_align),
            ("q_threshold", self.q_threshold),
        ] {
            if !(v > 0.0) {
                return Err(format!("{name} must be > 0"));
            }
        }
        Ok(())
    }
}

/// Calibration measurement noise and test-injection knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub sigma_translation_mm: f64,
    pub sigma_rotation_deg: f64,
    /// Translation bias added to the measured tool transform; zero in
    /// normal operation, used to study miscalibration propagation.
    pub injected_bias_mm: [f64; 3],
    /// Disable the calibration-distance gate (bias studies only).
    pub gate_enabled: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            sigma_translation_mm: 0.02,
            sigma_rotation_deg: 0.05,
            injected_bias_mm: [0.0; 3],
            gate_enabled: true,
        }
    }
}

/// Parameters of the synthetic insertion-force model. All are simulation
/// constants, not physical claims, and all are config-exposed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForceModel {
    /// Shaft friction per mm of post-skin depth.
    pub k_friction_n_per_mm: f64,
    /// Peak of the skin membrane ramp.
    pub skin_pop_n: f64,
    /// Depth at which the skin membrane gives way.
    pub skin_pop_depth_mm: f64,
    /// Exponential decay length of the post-pop membrane remnant.
    pub skin_decay_mm: f64,
    /// Prominence of the vessel-wall pop.
    pub wall_pop_n: f64,
    /// Depth the wall deflects before giving way.
    pub wall_ramp_mm: f64,
    pub wall_decay_mm: f64,
    /// Additive Gaussian sensor noise per axis.
    pub noise_sigma_n: f64,
}

impl Default for ForceModel {
    fn default() -> Self {
        Self {
            k_friction_n_per_mm: 0.005,
            skin_pop_n: 0.8,
            skin_pop_depth_mm: 0.6,
            skin_decay_mm: 0.3,
            wall_pop_n: 0.15,
            wall_ramp_mm: 0.3,
            wall_decay_mm: 0.1,
            noise_sigma_n: 0.02,
        }
    }
}

impl ForceModel {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("k_friction_n_per_mm", self.k_friction_n_per_mm),
            ("skin_pop_n", self.skin_pop_n),
            ("wall_pop_n", self.wall_pop_n),
            ("noise_sigma_n", self.noise_sigma_n),
        ] {
            if v < 0.0 {
                return Err(format!("{name} must be >= 0"));
            }
        }
        for (name, v) in [
            ("skin_pop_depth_mm", self.skin_pop_depth_mm),
            ("skin_decay_mm", self.skin_decay_mm),
            ("wall_ramp_mm", self.wall_ramp_mm),
            ("wall_decay_mm", self.wall_decay_mm),
        ] {
            if !(v > 0.0) {
                return Err(format!("{name} must be > 0"));
            }
        }
        Ok(())
    }
}

/// Puncture milestones along the insertion path, expressed as tip depths.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PunctureEvents {
    /// Depth of first contact with the (displaced) vessel near wall; the
    /// wall pop ramps over `wall_ramp_mm` beyond it.
    pub wall_contact_depth_mm: Option<f64>,
}

/// Deterministic piecewise force model plus seeded sensor noise.
///
/// Axial force: zero before skin contact; a membrane ramp to `skin_pop_n`
/// that drops 50% at the pop and decays; shaft friction past the pop; and a
/// second, smaller ramp/pop at the vessel wall. Lateral components are pure
/// sensor noise.
pub fn synthesize_force<R: Rng>(
    depth_mm: f64,
    events: &PunctureEvents,
    model: &ForceModel,
    t_s: f64,
    rng: &mut R,
) -> ForceReading {
    let mut axial = 0.0;
    if depth_mm > 0.0 {
        let d_pop = model.skin_pop_depth_mm;
        axial += if depth_mm <= d_pop {
            model.skin_pop_n * depth_mm / d_pop
        } else {
            0.5 * model.skin_pop_n * (-(depth_mm - d_pop) / model.skin_decay_mm).exp()
        };
        axial += model.k_friction_n_per_mm * (depth_mm - d_pop).max(0.0);
        if let Some(wall) = events.wall_contact_depth_mm {
            let pop_at = wall + model.wall_ramp_mm;
            if depth_mm >= wall {
                axial += if depth_mm <= pop_at {
                    model.wall_pop_n * (depth_mm - wall) / model.wall_ramp_mm
                } else {
                    0.5 * model.wall_pop_n * (-(depth_mm - pop_at) / model.wall_decay_mm).exp()
                };
            }
        }
    }
    let noise = Normal::new(0.0, model.noise_sigma_n.max(f64::MIN_POSITIVE)).expect("sigma > 0");
    let sample = |rng: &mut R| {
        if model.noise_sigma_n > 0.0 {
            noise.sample(rng)
        } else {
            0.0
        }
    };
    ForceReading {
        t_s,
        force_n: Vector3::new(sample(rng), sample(rng), axial + sample(rng)),
    }
}

/// Solve `K u = F` for the tissue displacement `u` (mm) via Cholesky;
/// no explicit inversion.
pub fn estimate_deformation(
    k: &Matrix3<f64>,
    f: &Vector3<f64>,
) -> Result<Vector3<f64>, SafetyError> {
    let chol = k.cholesky().ok_or(SafetyError::NotPositiveDefinite)?;
    Ok(chol.solve(f))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateStatus {
    Ok,
    DeformExceeded,
    ForceExceeded,
}

/// Evaluate the insertion gates. The force gate compares the running
/// maximum of the force norm against the threshold and has priority over
/// the deformation gate.
pub fn check_gates(
    max_force_norm_n: f64,
    u_mm: &Vector3<f64>,
    limits: &SafetyLimits,
) -> GateStatus {
    if max_force_norm_n > limits.f_threshold_n {
        GateStatus::ForceExceeded
    } else if u_mm.norm() > limits.eps_deform_mm {
        GateStatus::DeformExceeded
    } else {
        GateStatus::Ok
    }
}
