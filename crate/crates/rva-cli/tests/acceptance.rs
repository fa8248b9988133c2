//! Acceptance suite: one test per criterion, each printing a PASS line.
//! Run with `cargo test -p rva-cli --test acceptance -- --nocapture`.

use std::fs;
use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rva_core::config::RunConfig;
use rva_core::kinematics::{forward_kinematics, inverse_kinematics, JointVector, KinematicChain};
use rva_core::phantom::{PhantomScenario, RatTailScenario, Scenario, ScenarioConfig};
use rva_core::procedure::{phase_trace_is_legal, run_attempt, short_axis_pose, Outcome};
use rva_core::safety::estimate_deformation;
use rva_core::trials::run_batch;
use rva_core::ultrasound::{detect_vessel, render_frame, UsConfig};

fn rva() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rva"))
}

fn repo_config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn noise_free(cfg: &mut RunConfig) {
    cfg.scenario.coarse_sigma_mm = 0.0;
    cfg.scenario.detection_noise_mm = 0.0;
    cfg.safety.calibration.sigma_translation_mm = 0.0;
    cfg.safety.calibration.sigma_rotation_deg = 0.0;
    cfg.safety.force.noise_sigma_n = 0.0;
}

#[test]
fn criterion_1_phantom_reproduction() {
    // Ten phantom punctures at three distinct seeds: first-attempt rate 1.0
    // exactly, each batch under 5 seconds.
    for seed in ["3", "5", "9"] {
        let start = Instant::now();
        let out = rva()
            .args(["run", "--scenario", "phantom", "--n", "10", "--seed", seed])
            .output()
            .expect("spawn rva");
        let elapsed = start.elapsed();
        assert!(out.status.success());
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert!(
            stdout.contains("first_attempt_rate=1.000"),
            "seed {seed}: {stdout}"
        );
        assert!(elapsed.as_secs_f64() < 5.0, "batch took {elapsed:?}");
    }
    println!("criterion 1 (phantom reproduction, 100% at 3 seeds, <5 s/batch): PASS");
}

#[test]
fn criterion_2_rat_tail_reproduction() {
    // The frozen calibrated config at the documented seed (2025): 36..=40
    // first-attempt successes out of 40; ten independent batches pool to a
    // rate within [0.88, 1.0].
    let cfg = rva_core::config::parse_config(&repo_config("rat_default.json")).unwrap();
    assert_eq!(cfg.trials.base_seed, 2025, "documented seed");
    assert_eq!(cfg.trials.n, 40);

    let (_, summary) = run_batch(&RatTailScenario, 40, 2025, &cfg).unwrap();
    assert!(
        (36..=40).contains(&summary.first_attempt_successes),
        "documented batch: {}/40",
        summary.first_attempt_successes
    );

    let mut pooled_successes = 0u64;
    for batch in 0..10u64 {
        let (_, s) = run_batch(&RatTailScenario, 40, 2025 + batch * 40, &cfg).unwrap();
        pooled_successes += s.first_attempt_successes;
    }
    let pooled_rate = pooled_successes as f64 / 400.0;
    assert!(
        (0.88..=1.0).contains(&pooled_rate),
        "pooled rate {pooled_rate}"
    );
    println!(
        "criterion 2 (rat-tail reproduction: {}/40 at documented seed, pooled {:.3}): PASS",
        summary.first_attempt_successes, pooled_rate
    );
}

#[test]
fn criterion_3_diameter_floor() {
    // Noise-free attempts succeed for every diameter >= 0.44 mm over 50
    // seeds; under default noise the success probability at 0.44 mm is
    // strictly lower than at 0.7 mm (500 trials each).
    let mut cfg = RunConfig::default();
    noise_free(&mut cfg);
    cfg.scenario.rat.diameter_min_mm = 0.44;
    for seed in 0..50 {
        let out = run_attempt(&RatTailScenario, seed, &cfg);
        assert_eq!(
            out.outcome,
            Outcome::Success,
            "noise-free seed {seed} (d = {:.3} mm) failed",
            out.vessel_diameter_mm
        );
        assert!(out.vessel_diameter_mm >= 0.44);
    }

    let success_rate_at = |diameter: f64| {
        let mut cfg = RunConfig::default();
        cfg.scenario.rat.diameter_mean_mm = diameter;
        cfg.scenario.rat.diameter_sd_mm = 1e-4;
        cfg.scenario.rat.diameter_min_mm = diameter - 0.01;
        cfg.scenario.rat.diameter_max_mm = diameter + 0.01;
        let (_, s) = run_batch(&RatTailScenario, 500, 42, &cfg).unwrap();
        s.first_attempt_rate
    };
    let rate_small = success_rate_at(0.44);
    let rate_medium = success_rate_at(0.7);
    assert!(
        rate_small < rate_medium,
        "monotonicity violated: {rate_small} at 0.44 mm vs {rate_medium} at 0.7 mm"
    );
    println!(
        "criterion 3 (diameter floor: noise-free 50/50 at >=0.44 mm; {rate_small:.3} < {rate_medium:.3}): PASS"
    );
}

#[test]
fn criterion_4_ik_accuracy() {
    // FK-of-random-in-limit-q targets, solved from home: round-trip error
    // within 0.01 mm on all 1000, in under 10 seconds.
    let start = Instant::now();
    let chain = KinematicChain::default_chain();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let q: Vec<f64> = chain
            .joints
            .iter()
            .map(|j| rng.random_range(j.limit_min..j.limit_max))
            .collect();
        let target = forward_kinematics(&chain, &JointVector(q)).unwrap();
        let solved = inverse_kinematics(&chain, &target, &chain.q_home)
            .unwrap_or_else(|e| panic!("IK failed: {e}"));
        let achieved = forward_kinematics(&chain, &solved).unwrap();
        let err = (achieved.translation - target.translation).norm();
        worst = worst.max(err);
        assert!(err <= 0.01, "round-trip error {err} mm");
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "suite took {elapsed:?}");
    println!(
        "criterion 4 (IK round-trip <=0.01 mm on 1000 targets, worst {worst:.2e} mm, {:.2} s): PASS",
        elapsed.as_secs_f64()
    );
}

#[test]
fn criterion_5_deformation_solver() {
    use nalgebra::{Matrix3, Vector3};
    // Identity and scaling exact to 1e-12.
    let u = estimate_deformation(&Matrix3::identity(), &Vector3::new(0.1, 0.0, 0.0)).unwrap();
    assert!((u - Vector3::new(0.1, 0.0, 0.0)).norm() <= 1e-12);
    let u = estimate_deformation(&(Matrix3::identity() * 2.0), &Vector3::new(1.0, 0.0, 0.0))
        .unwrap();
    assert!((u - Vector3::new(0.5, 0.0, 0.0)).norm() <= 1e-12);

    // 100 random SPD systems, residual <= 1e-10 relative.
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let m = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let q = m.qr().q();
        let d = Matrix3::from_diagonal(&Vector3::new(
            10f64.powf(rng.random_range(-3.0..3.0)),
            10f64.powf(rng.random_range(-3.0..3.0)),
            10f64.powf(rng.random_range(-3.0..3.0)),
        ));
        let k = {
            let k = q * d * q.transpose();
            (k + k.transpose()) * 0.5
        };
        let f = Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0));
        let u = estimate_deformation(&k, &f).unwrap();
        let rel = (k * u - f).norm() / f.norm().max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
        assert!(rel <= 1e-10, "residual {rel}");
    }
    println!(
        "criterion 5 (deformation solve residual <=1e-10, worst {worst:.2e}; exact identity/scaling): PASS"
    );
}

#[test]
fn criterion_6_render_detect_loop() {
    // Vessel-center detection within 1 px (0.1 mm) on at least 95% of 200
    // seeded frames for each diameter in {0.44, 0.7, 4.0} mm.
    let pose = short_axis_pose(400.0, 0.0);
    let cfg = UsConfig::default();
    let mut report = String::new();
    for diameter in [0.44, 0.7, 4.0] {
        let mut sc = ScenarioConfig::default();
        sc.phantom.diameter_mm = diameter;
        let block = PhantomScenario.generate(0, &sc);
        let truth = (6.4, 3.0 + diameter / 2.0);
        let n = 200;
        let mut good = 0;
        for seed in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frame = render_frame(&block, &pose, &cfg, &mut rng, None).unwrap();
            if let Ok(det) = detect_vessel(&frame) {
                if (det.center_mm[0] - truth.0).abs() <= 0.1
                    && (det.center_mm[1] - truth.1).abs() <= 0.1
                {
                    good += 1;
                }
            }
        }
        assert!(good * 100 >= n * 95, "diameter {diameter}: {good}/{n}");
        report.push_str(&format!("{diameter} mm: {good}/{n}; "));
    }
    println!("criterion 6 (render/detect <=1 px: {report}): PASS");
}

#[test]
fn criterion_7_state_machine_safety() {
    // 10,000 attempts across randomized scenarios and gate configurations:
    // every phase trace is a path in the legal transition graph, and no
    // force sample recorded after a force-gate trip exceeds the tripping
    // sample plus one tick of model slope and noise spread.
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE557);
    let scenarios: [&dyn Scenario; 2] = [&PhantomScenario, &RatTailScenario];
    let mut outcomes = std::collections::BTreeMap::<String, u64>::new();
    for trial in 0..10_000u64 {
        let mut cfg = RunConfig::default();
        let scenario = scenarios[(trial % 2) as usize];
        cfg.safety.f_threshold_n = *[1e-9, 0.5, 2.0, 2.0]
            .get(rng.random_range(0..4usize))
            .unwrap();
        cfg.safety.eps_deform_mm = *[0.05, 0.5, 0.5].get(rng.random_range(0..3usize)).unwrap();
        cfg.safety.q_threshold = *[1.5, 1.5, 8.0].get(rng.random_range(0..3usize)).unwrap();
        cfg.us.speckle_scale = *[1.0, 1.0, 3.16].get(rng.random_range(0..3usize)).unwrap();
        cfg.scenario.detection_noise_mm = *[0.0, 0.1, 0.6].get(rng.random_range(0..3usize)).unwrap();
        cfg.scenario.coarse_sigma_mm = *[0.0, 1.0, 2.5].get(rng.random_range(0..3usize)).unwrap();
        cfg.safety.calibration.sigma_translation_mm =
            *[0.02, 0.02, 0.6].get(rng.random_range(0..3usize)).unwrap();
        let seed = rng.random_range(0..1_000_000u64);

        let out = run_attempt(scenario, seed, &cfg);
        assert!(
            phase_trace_is_legal(&out.phase_trace),
            "trial {trial}: illegal trace {:?}",
            out.phase_trace
        );

        let norms: Vec<f64> = out.force_trace.iter().map(|f| f.force_n.norm()).collect();
        if let Some(trip) = norms.iter().position(|&n| n > cfg.safety.f_threshold_n) {
            let slack = 0.05 + 8.0 * cfg.safety.force.noise_sigma_n;
            let bound = norms[trip] + slack;
            for (i, &n) in norms.iter().enumerate().skip(trip + 1) {
                // Samples after the trip belong to the retry pass, which
                // starts from zero depth; none may exceed the trip level
                // plus one tick of motion.
                assert!(
                    n <= bound.max(cfg.safety.f_threshold_n + slack),
                    "trial {trial}: post-gate sample {i} = {n} after trip {}",
                    norms[trip]
                );
            }
        }
        *outcomes.entry(format!("{:?}", out.outcome)).or_default() += 1;
    }
    assert!(outcomes.len() >= 4, "want branch coverage, got {outcomes:?}");
    println!("criterion 7 (state machine, 10,000 randomized attempts, outcomes {outcomes:?}): PASS");
}

#[test]
fn criterion_8_cli_determinism() {
    // Identical invocations produce byte-identical logs, reports, frames,
    // and stdout.
    let dir = tempfile::tempdir().unwrap();
    let run_once = |tag: &str| {
        let out_dir = dir.path().join(tag);
        let out = rva()
            .args([
                "run",
                "--config",
                repo_config("rat_default.json").to_str().unwrap(),
                "--n",
                "4",
                "--seed",
                "2025",
                "--out",
                out_dir.to_str().unwrap(),
            ])
            .output()
            .expect("spawn rva");
        assert!(out.status.success());
        (out_dir, out.stdout)
    };
    let (dir_a, stdout_a) = run_once("a");
    let (dir_b, stdout_b) = run_once("b");
    assert_eq!(stdout_a, stdout_b);
    let mut compared = 0;
    for name in ["summary.txt", "mosaic.pgm"] {
        let a = fs::read(dir_a.join(name)).unwrap();
        let b = fs::read(dir_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs");
        compared += 1;
    }
    // Logs contain frame paths, which legitimately differ across output
    // directories; compare them with paths normalized.
    let norm = |d: &std::path::Path| {
        fs::read_to_string(d.join("trials.jsonl"))
            .unwrap()
            .replace(d.to_str().unwrap(), "OUT")
    };
    assert_eq!(norm(&dir_a), norm(&dir_b));
    compared += 1;
    for i in 0..4 {
        for side in ["pre", "post"] {
            let name = format!("frames/trial_{i:04}_{side}.pgm");
            let a = fs::read(dir_a.join(&name)).unwrap();
            let b = fs::read(dir_b.join(&name)).unwrap();
            assert_eq!(a, b, "{name} differs");
            compared += 1;
        }
    }

    // A literally identical invocation (same --out) also reproduces the
    // log byte-for-byte.
    let (_, stdout_a2) = run_once("a");
    assert_eq!(stdout_a, stdout_a2);

    // Single-frame render determinism.
    let f1 = dir.path().join("f1.pgm");
    let f2 = dir.path().join("f2.pgm");
    for f in [&f1, &f2] {
        let out = rva()
            .args(["render", "--scenario", "rat", "--seed", "9", "--out", f.to_str().unwrap()])
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    assert_eq!(fs::read(&f1).unwrap(), fs::read(&f2).unwrap());
    println!("criterion 8 (CLI determinism, {compared} artifacts byte-identical): PASS");
}
