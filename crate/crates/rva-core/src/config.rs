//! Strict JSON configuration: every knob of the simulator in one document,
//! defaults mirroring the published device parameterization, unknown keys
//! rejected.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{JointDescriptor, JointVector, KinematicChain};
use crate::phantom::ScenarioConfig;
use crate::safety::{CalibrationConfig, ForceModel, SafetyLimits};
use crate::transform::RigidTransform;
use crate::ultrasound::UsConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid config value at `{key}`: {message}")]
    Validation { key: String, message: String },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Validation {
        key: key.to_string(),
        message: message.into(),
    }
}

/// Kinematic chain description: nine joint records, the probe mount, and
/// the home posture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainConfig {
    pub joints: Vec<JointDescriptor>,
    pub probe_mount: MountConfig,
    pub q_home: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MountConfig {
    pub translation_mm: [f64; 3],
    /// Row-major rotation matrix; must be orthonormal with determinant +1.
    pub rotation_rows: [[f64; 3]; 3],
}

impl Default for ChainConfig {
    fn default() -> Self {
        let chain = KinematicChain::default_chain();
        let r = chain.probe_mount.rotation;
        Self {
            joints: chain.joints.clone(),
            probe_mount: MountConfig {
                translation_mm: [
                    chain.probe_mount.translation.x,
                    chain.probe_mount.translation.y,
                    chain.probe_mount.translation.z,
                ],
                rotation_rows: [
                    [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                    [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                    [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
                ],
            },
            q_home: chain.q_home.0.clone(),
        }
    }
}

impl Default for MountConfig {
    fn default() -> Self {
        ChainConfig::default().probe_mount
    }
}

impl ChainConfig {
    pub fn build(&self) -> Result<KinematicChain, ConfigError> {
        let rows = self.probe_mount.rotation_rows;
        let rotation = Matrix3::new(
            rows[0][0], rows[0][1], rows[0][2], //
            rows[1][0], rows[1][1], rows[1][2], //
            rows[2][0], rows[2][1], rows[2][2],
        );
        let t = self.probe_mount.translation_mm;
        let mount = RigidTransform::new(rotation, Vector3::new(t[0], t[1], t[2]));
        if !mount.rotation_is_orthonormal() {
            return Err(invalid(
                "chain.probe_mount.rotation_rows",
                "must be orthonormal with determinant +1",
            ));
        }
        KinematicChain::new(self.joints.clone(), mount, JointVector(self.q_home.clone()))
            .map_err(|e| invalid("chain", e.to_string()))
    }
}

/// Gate thresholds, retry budgets, motion parameters, calibration noise,
/// and the synthetic force model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SafetySection {
    pub f_threshold_n: f64,
    pub eps_deform_mm: f64,
    pub eps_cal: f64,
    pub eps_align: f64,
    pub q_threshold: f64,
    pub max_quality_retries: u32,
    pub max_insertion_retries: u32,
    pub max_align_iters: u32,
    pub insertion_speed_mm_s: f64,
    pub tick_dt_s: f64,
    /// Nominal home pitch of the needle; the alignment step solves the
    /// actual pitch so the needle line passes through the target.
    pub needle_pitch_deg: f64,
    /// Trajectory overshoot margin as a fraction of the detected diameter.
    pub overshoot_frac: f64,
    pub calibration: CalibrationConfig,
    pub force: ForceModel,
}

impl Default for SafetySection {
    fn default() -> Self {
        let limits = SafetyLimits::default();
        Self {
            f_threshold_n: limits.f_threshold_n,
            eps_deform_mm: limits.eps_deform_mm,
            eps_cal: limits.eps_cal,
            eps_align: limits.eps_align,
            q_threshold: limits.q_threshold,
            max_quality_retries: 5,
            max_insertion_retries: 1,
            max_align_iters: 10,
            insertion_speed_mm_s: 2.0,
            tick_dt_s: 0.01,
            needle_pitch_deg: 20.0,
            overshoot_frac: 0.3,
            calibration: CalibrationConfig::default(),
            force: ForceModel::default(),
        }
    }
}

impl SafetySection {
    pub fn limits(&self) -> SafetyLimits {
        SafetyLimits {
            f_threshold_n: self.f_threshold_n,
            eps_deform_mm: self.eps_deform_mm,
            eps_cal: self.eps_cal,
            eps_align: self.eps_align,
            q_threshold: self.q_threshold,
        }
    }
}

/// Batch parameters: scenario name resolved against the scenario registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrialsSection {
    pub n: u64,
    pub base_seed: u64,
    pub scenario: String,
    pub out_dir: Option<String>,
    pub keep_frames: bool,
    pub parallel: bool,
    /// Overrides the scenario's attempt budget when set.
    pub max_attempts: Option<u32>,
}

impl Default for TrialsSection {
    fn default() -> Self {
        Self {
            n: 10,
            base_seed: 1,
            scenario: "phantom".to_string(),
            out_dir: None,
            keep_frames: false,
            parallel: true,
            max_attempts: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub chain: ChainConfig,
    pub scenario: ScenarioConfig,
    pub us: UsConfig,
    pub safety: SafetySection,
    pub trials: TrialsSection,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.chain.build()?;
        self.us
            .validate()
            .map_err(|e| invalid(&format!("us.{}", first_token(&e.to_string())), e.to_string()))?;

        let s = &self.safety;
        for (key, v) in [
            ("safety.f_threshold_n", s.f_threshold_n),
            ("safety.eps_deform_mm", s.eps_deform_mm),
            ("safety.eps_cal", s.eps_cal),
            ("safety.eps_align", s.eps_align),
            ("safety.q_threshold", s.q_threshold),
            ("safety.insertion_speed_mm_s", s.insertion_speed_mm_s),
            ("safety.tick_dt_s", s.tick_dt_s),
        ] {
            if !(v > 0.0) {
                return Err(invalid(key, "must be > 0"));
            }
        }
        if !(0.0..90.0).contains(&s.needle_pitch_deg) {
            return Err(invalid("safety.needle_pitch_deg", "must be in [0, 90)"));
        }
        if s.overshoot_frac < 0.0 {
            return Err(invalid("safety.overshoot_frac", "must be >= 0"));
        }
        if s.calibration.sigma_translation_mm < 0.0 {
            return Err(invalid("safety.calibration.sigma_translation_mm", "must be >= 0"));
        }
        if s.calibration.sigma_rotation_deg < 0.0 {
            return Err(invalid("safety.calibration.sigma_rotation_deg", "must be >= 0"));
        }
        s.force
            .validate()
            .map_err(|e| invalid(&format!("safety.force.{}", first_token(&e)), e.clone()))?;

        let sc = &self.scenario;
        if !(sc.coarse_sigma_mm >= 0.0) {
            return Err(invalid("scenario.coarse_sigma_mm", "must be >= 0"));
        }
        if !(sc.detection_noise_mm >= 0.0) {
            return Err(invalid("scenario.detection_noise_mm", "must be >= 0"));
        }
        if !(sc.stiffness_n_per_mm > 0.0) {
            return Err(invalid("scenario.stiffness_n_per_mm", "must be > 0"));
        }
        if !(sc.phantom.diameter_mm > 0.0) {
            return Err(invalid("scenario.phantom.diameter_mm", "must be > 0"));
        }
        if !(sc.phantom.depth_mm > 0.0) {
            return Err(invalid("scenario.phantom.depth_mm", "must be > 0"));
        }
        let r = &sc.rat;
        if !(r.diameter_sd_mm > 0.0) {
            return Err(invalid("scenario.rat.diameter_sd_mm", "must be > 0"));
        }
        if !(r.diameter_min_mm > 0.0 && r.diameter_min_mm < r.diameter_max_mm) {
            return Err(invalid("scenario.rat.diameter_min_mm", "need 0 < min < max"));
        }
        if !(r.depth_min_mm > 0.0 && r.depth_min_mm < r.depth_max_mm) {
            return Err(invalid("scenario.rat.depth_min_mm", "need 0 < min < max"));
        }
        if r.sagitta_max_mm < 0.0 {
            return Err(invalid("scenario.rat.sagitta_max_mm", "must be >= 0"));
        }

        if self.trials.n < 1 {
            return Err(invalid("trials.n", "must be >= 1"));
        }
        Ok(())
    }

    pub fn build_chain(&self) -> Result<KinematicChain, ConfigError> {
        self.chain.build()
    }

    pub fn from_json(text: &str) -> Result<RunConfig, ConfigError> {
        let mut de = serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let inner = e.inner();
            let message = inner.to_string();
            if message.contains("unknown field") {
                // Strictness violations surface as validation errors naming
                // the offending key.
                // serde_path_to_error's path already ends at the unknown
                // field; fall back to the message for top-level keys.
                let path = e.path().to_string();
                let key = if path == "." {
                    message.split('`').nth(1).unwrap_or("?").to_string()
                } else {
                    path
                };
                invalid(&key, "unknown key")
            } else if inner.is_syntax() || inner.is_eof() {
                ConfigError::Parse {
                    line: inner.line(),
                    column: inner.column(),
                    message: message.clone(),
                }
            } else {
                invalid(&e.path().to_string(), message)
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn first_token(message: &str) -> &str {
    message.split_whitespace().next().unwrap_or("?")
}

/// Parse a config file; `{}` yields the full default configuration.
pub fn parse_config(path: &std::path::Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    RunConfig::from_json(&text)
}
