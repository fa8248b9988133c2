//! Virtual tissue world: block geometry, vessels, stiffness, a coarse
//! NIR-style localization oracle, and the ground-truth queries used for
//! outcome scoring and image rendering.
//!
//! World frame convention: the block's top surface (skin) lies in the
//! `z = 0` plane with `z` pointing up, vessels run along `x`.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transform::RigidTransform;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("tissue block has no vessels")]
    NoVesselFound,
    #[error("invalid tissue block: {0}")]
    InvalidBlock(String),
}

/// A vessel as a capsule swept along a polyline centerline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vessel {
    pub centerline: Vec<Vector3<f64>>,
    pub diameter_mm: f64,
    pub wall_thickness_mm: f64,
}

impl Vessel {
    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.diameter_mm <= 0.0 {
            return Err(PhantomError::InvalidBlock("vessel diameter must be > 0".into()));
        }
        if self.wall_thickness_mm < 0.0 {
            return Err(PhantomError::InvalidBlock("wall thickness must be >= 0".into()));
        }
        if self.centerline.len() < 2 {
            return Err(PhantomError::InvalidBlock("centerline needs >= 2 points".into()));
        }
        for pair in self.centerline.windows(2) {
            if (pair[1] - pair[0]).norm() <= 0.0 {
                return Err(PhantomError::InvalidBlock("zero-length centerline segment".into()));
            }
        }
        Ok(())
    }

    /// Minimum distance from `p` to the centerline polyline.
    pub fn distance_to_axis(&self, p: &Vector3<f64>) -> f64 {
        self.centerline
            .windows(2)
            .map(|seg| point_segment_distance(p, &seg[0], &seg[1]))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn radius_mm(&self) -> f64 {
        self.diameter_mm / 2.0
    }

    /// Point at half the total arc length.
    pub fn midpoint(&self) -> Vector3<f64> {
        let total: f64 = self
            .centerline
            .windows(2)
            .map(|seg| (seg[1] - seg[0]).norm())
            .sum();
        let mut remaining = total / 2.0;
        for seg in self.centerline.windows(2) {
            let len = (seg[1] - seg[0]).norm();
            if remaining <= len {
                return seg[0] + (seg[1] - seg[0]) * (remaining / len);
            }
            remaining -= len;
        }
        *self.centerline.last().unwrap()
    }
}

fn point_segment_distance(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Axis-aligned tissue block with vessels and a bulk stiffness matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueBlock {
    pub extent_min: Vector3<f64>,
    pub extent_max: Vector3<f64>,
    /// Depth from the skin surface to the near wall of the primary vessel.
    pub skin_depth_to_vessel_mm: f64,
    /// N/mm, symmetric positive-definite.
    pub stiffness_k: Matrix3<f64>,
    pub vessels: Vec<Vessel>,
}

impl TissueBlock {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let asym = (self.stiffness_k - self.stiffness_k.transpose()).norm();
        if asym > 1e-12 {
            return Err(PhantomError::InvalidBlock(format!(
                "stiffness matrix asymmetry {asym:e} exceeds 1e-12"
            )));
        }
        if self.stiffness_k.cholesky().is_none() {
            return Err(PhantomError::InvalidBlock(
                "stiffness matrix is not positive-definite".into(),
            ));
        }
        for v in &self.vessels {
            v.validate()?;
            for p in &v.centerline {
                if !self.contains(p) {
                    return Err(PhantomError::InvalidBlock(
                        "vessel centerline leaves the block".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.extent_min[i] && p[i] <= self.extent_max[i])
    }

    pub fn primary_vessel(&self) -> Result<&Vessel, PhantomError> {
        self.vessels.first().ok_or(PhantomError::NoVesselFound)
    }
}

/// Stand-in for the NIR localization pipeline: an approximate vessel
/// position projected to the skin plane (no depth information).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseLocalization {
    pub approx_position: Vector3<f64>,
    pub lateral_sigma_mm: f64,
}

/// One ellipse from a vessel/plane intersection, in image-plane coordinates
/// (x lateral from plane origin, y depth from plane origin).
#[derive(Debug, Clone, PartialEq)]
pub struct SectionEllipse {
    pub center: [f64; 2],
    pub minor_mm: f64,
    pub major_mm: f64,
    /// Angle of the major axis in the plane, radians from the +x axis.
    pub angle_rad: f64,
    pub vessel_index: usize,
}

/// Tip classification against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TipState {
    Outside,
    InTissue,
    InLumen,
    Transfixed(usize),
}

// ---------------------------------------------------------------------------
// Scenario configuration (the `scenario` section of the JSON config)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomParams {
    pub diameter_mm: f64,
    pub depth_mm: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            diameter_mm: 4.0,
            depth_mm: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RatTailParams {
    pub diameter_mean_mm: f64,
    pub diameter_sd_mm: f64,
    pub diameter_min_mm: f64,
    pub diameter_max_mm: f64,
    pub depth_min_mm: f64,
    pub depth_max_mm: f64,
    pub sagitta_max_mm: f64,
}

impl Default for RatTailParams {
    fn default() -> Self {
        Self {
            diameter_mean_mm: 0.7,
            diameter_sd_mm: 0.2,
            diameter_min_mm: 0.3,
            diameter_max_mm: 1.2,
            depth_min_mm: 1.0,
            depth_max_mm: 3.0,
            sagitta_max_mm: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Horizontal position of the block's top-surface center in the world
    /// frame (the arm base sits at the origin).
    pub block_center_mm: [f64; 2],
    /// Lateral sigma of the coarse (NIR-style) localization.
    pub coarse_sigma_mm: f64,
    /// Extra noise on the detected vessel center, per axis, models
    /// segmentation error beyond pure pixel quantization.
    pub detection_noise_mm: f64,
    /// Interpret the scenario depth as depth-to-centerline instead of
    /// depth-to-near-wall.
    pub depth_to_centerline: bool,
    /// Isotropic bulk stiffness; the block gets `k * I`.
    pub stiffness_n_per_mm: f64,
    pub phantom: PhantomParams,
    pub rat: RatTailParams,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            block_center_mm: [400.0, 0.0],
            coarse_sigma_mm: 1.0,
            detection_noise_mm: 0.10,
            depth_to_centerline: false,
            stiffness_n_per_mm: 0.5,
            phantom: PhantomParams::default(),
            rat: RatTailParams::default(),
        }
    }
}

// ---------------------------------------------------------------------------
// Scenario strategies
// ---------------------------------------------------------------------------

/// A tissue-scenario generator. Implementations are registered by name in a
/// [`ScenarioRegistry`] and selected at runtime via config or CLI flag.
pub trait Scenario: Send + Sync {
    fn name(&self) -> &'static str;
    /// Venipuncture attempts allowed per trial in this scenario.
    fn max_attempts(&self) -> u32;
    fn generate(&self, seed: u64, params: &ScenarioConfig) -> TissueBlock;
}

/// Polymer training phantom: one straight 4 mm channel, 3 mm of cover.
pub struct PhantomScenario;

impl Scenario for PhantomScenario {
    fn name(&self) -> &'static str {
        "phantom"
    }

    fn max_attempts(&self) -> u32 {
        1
    }

    fn generate(&self, _seed: u64, params: &ScenarioConfig) -> TissueBlock {
        let p = &params.phantom;
        build_block(
            params,
            p.diameter_mm,
            p.depth_mm,
            0.0, // straight channel
        )
    }
}

/// Small-animal tail vein: submillimeter diameter drawn from a truncated
/// normal, shallow depth, slight sag along the run.
pub struct RatTailScenario;

impl Scenario for RatTailScenario {
    fn name(&self) -> &'static str {
        "rat"
    }

    fn max_attempts(&self) -> u32 {
        2
    }

    fn generate(&self, seed: u64, params: &ScenarioConfig) -> TissueBlock {
        let mut rng = crate::rng::stream(seed, 0, crate::rng::Stream::Scenario);
        let p = &params.rat;
        let normal = Normal::new(p.diameter_mean_mm, p.diameter_sd_mm)
            .expect("validated sd > 0");
        // Rejection sampling of the truncated normal, with a clamp fallback
        // so degenerate bounds cannot stall the generator.
        let mut diameter = f64::NAN;
        for _ in 0..10_000 {
            let d = normal.sample(&mut rng);
            if d >= p.diameter_min_mm && d <= p.diameter_max_mm {
                diameter = d;
                break;
            }
        }
        if diameter.is_nan() {
            diameter = normal
                .sample(&mut rng)
                .clamp(p.diameter_min_mm, p.diameter_max_mm);
        }
        let depth = rng.random_range(p.depth_min_mm..p.depth_max_mm);
        let sagitta = rng.random_range(0.0..p.sagitta_max_mm);
        build_block(params, diameter, depth, sagitta)
    }
}

/// Block geometry shared by the built-in scenarios: a 100 x 50 x 25 mm slab
/// with one vessel along x. `depth` is measured to the near wall unless the
/// config says centerline.
fn build_block(params: &ScenarioConfig, diameter: f64, depth: f64, sagitta: f64) -> TissueBlock {
    let [cx, cy] = params.block_center_mm;
    let extent_min = Vector3::new(cx - 50.0, cy - 25.0, -25.0);
    let extent_max = Vector3::new(cx + 50.0, cy + 25.0, 0.0);
    let z_end = if params.depth_to_centerline {
        -depth
    } else {
        -(depth + diameter / 2.0)
    };
    let half_span = 45.0;
    let n_pts = 33;
    let mut centerline = Vec::with_capacity(n_pts);
    for i in 0..n_pts {
        let u = i as f64 / (n_pts - 1) as f64;
        let x = cx - half_span + 2.0 * half_span * u;
        let z = if sagitta > 0.0 {
            // Circular arc with chord 2*half_span and the given sagitta,
            // sagging downward.
            let r = (half_span * half_span) / (2.0 * sagitta) + sagitta / 2.0;
            let dx = x - cx;
            z_end - ((r * r - dx * dx).sqrt() - (r - sagitta))
        } else {
            z_end
        };
        centerline.push(Vector3::new(x, cy, z));
    }
    let block = TissueBlock {
        extent_min,
        extent_max,
        skin_depth_to_vessel_mm: depth,
        stiffness_k: Matrix3::identity() * params.stiffness_n_per_mm,
        vessels: vec![Vessel {
            centerline,
            diameter_mm: diameter,
            wall_thickness_mm: 0.1,
        }],
    };
    debug_assert!(block.validate().is_ok());
    block
}

/// Name-keyed registry of scenario strategies.
pub struct ScenarioRegistry {
    entries: Vec<Box<dyn Scenario>>,
}

impl ScenarioRegistry {
    /// Registry with the built-in scenarios (`phantom`, `rat`).
    pub fn builtin() -> Self {
        let mut reg = Self { entries: Vec::new() };
        reg.register(Box::new(PhantomScenario));
        reg.register(Box::new(RatTailScenario));
        reg
    }

    /// Later registrations shadow earlier ones with the same name.
    pub fn register(&mut self, scenario: Box<dyn Scenario>) {
        self.entries.retain(|s| s.name() != scenario.name());
        self.entries.push(scenario);
    }

    pub fn get(&self, name: &str) -> Option<&dyn Scenario> {
        self.entries
            .iter()
            .find(|s| s.name() == name)
            .map(|s| s.as_ref())
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|s| s.name()).collect()
    }
}

/// Default phantom block (default parameters).
pub fn make_phantom_scenario() -> TissueBlock {
    PhantomScenario.generate(0, &ScenarioConfig::default())
}

/// Default rat-tail block for `rng_seed`.
pub fn make_rat_tail_scenario(rng_seed: u64) -> TissueBlock {
    RatTailScenario.generate(rng_seed, &ScenarioConfig::default())
}

// ---------------------------------------------------------------------------
// Ground-truth queries
// ---------------------------------------------------------------------------

/// Approximate vessel position: arc-length midpoint of the primary vessel
/// plus lateral Gaussian noise, projected to the skin plane (depth zeroed).
pub fn coarse_localize<R: Rng>(
    block: &TissueBlock,
    sigma_mm: f64,
    rng: &mut R,
) -> Result<CoarseLocalization, PhantomError> {
    let vessel = block.primary_vessel()?;
    let mut p = vessel.midpoint();
    if sigma_mm > 0.0 {
        let n = Normal::new(0.0, sigma_mm).expect("sigma validated");
        p.x += n.sample(rng);
        p.y += n.sample(rng);
    }
    p.z = 0.0;
    Ok(CoarseLocalization {
        approx_position: p,
        lateral_sigma_mm: sigma_mm,
    })
}

/// Ellipses where vessels cross the image plane of `plane_pose` (x lateral,
/// y depth, z elevation normal). A plane exactly perpendicular to a straight
/// vessel yields a circle of the vessel's diameter.
pub fn cross_section(block: &TissueBlock, plane_pose: &RigidTransform) -> Vec<SectionEllipse> {
    let origin = plane_pose.translation;
    let x_axis = plane_pose.rotation.column(0).into_owned();
    let y_axis = plane_pose.rotation.column(1).into_owned();
    let normal = plane_pose.rotation.column(2).into_owned();

    let mut out = Vec::new();
    for (vi, vessel) in block.vessels.iter().enumerate() {
        let n_segs = vessel.centerline.len() - 1;
        for (si, seg) in vessel.centerline.windows(2).enumerate() {
            let (a, b) = (seg[0], seg[1]);
            let da = (a - origin).dot(&normal);
            let db = (b - origin).dot(&normal);
            if da == 0.0 && db == 0.0 {
                continue; // segment lies in the plane: no transverse section
            }
            let denom = da - db;
            if denom == 0.0 {
                continue;
            }
            let t = da / denom;
            let in_range = if si + 1 == n_segs {
                (0.0..=1.0).contains(&t)
            } else {
                (0.0..1.0).contains(&t)
            };
            if !in_range {
                continue;
            }
            let point = a + (b - a) * t;
            let dir = (b - a).normalize();
            let cos_tilt = dir.dot(&normal).abs();
            if cos_tilt < 1e-9 {
                continue;
            }
            // Major axis lies along the in-plane projection of the vessel axis.
            let proj = dir - normal * dir.dot(&normal);
            let angle_rad = if proj.norm() > 1e-12 {
                let px = proj.dot(&x_axis);
                let py = proj.dot(&y_axis);
                py.atan2(px)
            } else {
                0.0
            };
            let rel = point - origin;
            out.push(SectionEllipse {
                center: [rel.dot(&x_axis), rel.dot(&y_axis)],
                minor_mm: vessel.diameter_mm,
                major_mm: vessel.diameter_mm / cos_tilt,
                angle_rad,
                vessel_index: vi,
            });
        }
    }
    out
}

/// Classify the needle tip given the straight insertion path from
/// `path_start` to `tip`.
///
/// Priority: a tip strictly inside a lumen is `InLumen`; otherwise a path
/// that entered and exited a lumen leaves the tip `Transfixed`; otherwise
/// the tip is `InTissue` when inside the block and `Outside` when not.
pub fn tip_state(block: &TissueBlock, path_start: &Vector3<f64>, tip: &Vector3<f64>) -> TipState {
    for vessel in &block.vessels {
        if vessel.distance_to_axis(tip) < vessel.radius_mm() {
            return TipState::InLumen;
        }
    }
    // March the path and look for an enter/exit pair.
    let len = (tip - path_start).norm();
    for (vi, vessel) in block.vessels.iter().enumerate() {
        let r = vessel.radius_mm();
        let steps = ((len / 0.005).ceil() as usize).clamp(1, 20_000);
        let mut entered = false;
        for k in 0..=steps {
            let p = path_start + (tip - path_start) * (k as f64 / steps as f64);
            let inside = vessel.distance_to_axis(&p) < r;
            if inside {
                entered = true;
            } else if entered {
                return TipState::Transfixed(vi);
            }
        }
    }
    if block.contains(tip) {
        TipState::InTissue
    } else {
        TipState::Outside
    }
}
