//! Property tests for the persistence layer and rigid-transform algebra.

use nalgebra::Vector3;
use proptest::prelude::*;
use rva_core::procedure::{AbortReason, Outcome, ProcedurePhase};
use rva_core::transform::RigidTransform;
use rva_core::trials::{read_log, write_log, FramePaths, TrialRecord};

fn outcome_strategy() -> impl Strategy<Value = Outcome> {
    prop_oneof![
        Just(Outcome::Success),
        Just(Outcome::Miss),
        Just(Outcome::Transfixed),
        Just(Outcome::Aborted(AbortReason::CalibrationFailed)),
        Just(Outcome::Aborted(AbortReason::QualityRetriesExhausted)),
        Just(Outcome::Aborted(AbortReason::NoVesselDetected)),
        Just(Outcome::Aborted(AbortReason::ForceRetriesExceeded)),
        Just(Outcome::Aborted(AbortReason::DeformRetriesExceeded)),
        Just(Outcome::Aborted(AbortReason::Unreachable)),
        Just(Outcome::Aborted(AbortReason::NoVesselFound)),
    ]
}

fn record_strategy() -> impl Strategy<Value = TrialRecord> {
    (
        any::<u64>(),
        any::<u64>(),
        0.01f64..10.0,
        0.0f64..30.0,
        outcome_strategy(),
        1u32..4,
        0.0f64..5.0,
        proptest::option::of("[a-z0-9_/]{1,24}\\.pgm"),
    )
        .prop_map(
            |(trial_id, seed, diameter, depth, outcome, attempts, force, pre)| TrialRecord {
                trial_id,
                scenario_seed: seed,
                vessel_diameter_mm: diameter,
                vessel_depth_mm: depth,
                outcome,
                blood_return: outcome == Outcome::Success,
                attempts_used: attempts,
                phase_trace: vec![
                    (ProcedurePhase::Calibration, 0),
                    (ProcedurePhase::InitialPositioning, 1),
                    (ProcedurePhase::Aborted(AbortReason::NoVesselFound), 2),
                ],
                max_force_n: force,
                frames: pre.map(|p| FramePaths {
                    pre: Some(p),
                    post: None,
                }),
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn log_round_trip_is_identity(records in proptest::collection::vec(record_strategy(), 0..20)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        write_log(&records, &path).unwrap();
        let back = read_log(&path).unwrap();
        prop_assert_eq!(back, records);
    }

    #[test]
    fn transform_compose_inverse_is_identity(
        ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0,
        angle in -3.0f64..3.0,
        tx in -500.0f64..500.0, ty in -500.0f64..500.0, tz in -500.0f64..500.0,
    ) {
        prop_assume!(ax.abs() + ay.abs() + az.abs() > 1e-3);
        let mut t = RigidTransform::from_axis_angle(Vector3::new(ax, ay, az), angle);
        t.translation = Vector3::new(tx, ty, tz);
        let id = t.compose(&t.inverse());
        prop_assert!(id.translation.norm() < 1e-9);
        prop_assert!(id.rotation_angle_to(&RigidTransform::identity()) < 1e-6);
        prop_assert!(t.rotation_is_orthonormal());
    }
}
