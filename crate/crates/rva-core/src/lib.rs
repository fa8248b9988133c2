//! Deterministic simulator for ultrasound-guided robotic venipuncture.
//!
//! The crate models the full insertion workflow of a 9-DoF vascular-access
//! robot: a 6-DoF serial arm carrying a 3-DoF end-effector (probe slide,
//! needle pitch, needle insertion), imaging a virtual tissue block with a
//! synthetic short-axis B-mode renderer, and driving a five-phase
//! safety-gated procedure (calibration, initial positioning, target
//! alignment, insertion, reset). A Monte Carlo harness batches attempts and
//! reproduces phantom and small-animal success-rate experiments.
//!
//! Everything is a pure function of an explicit `u64` seed; see [`rng`] for
//! the stream-splitting scheme.

pub mod config;
pub mod kinematics;
pub mod phantom;
pub mod procedure;
pub mod rng;
pub mod safety;
pub mod transform;
pub mod trials;
pub mod ultrasound;

pub use transform::RigidTransform;
