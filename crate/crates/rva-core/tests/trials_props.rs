//! Batch-level statistical properties.

use rva_core::config::RunConfig;
use rva_core::phantom::RatTailScenario;
use rva_core::trials::run_batch;

#[test]
fn success_rate_never_increases_with_detection_noise() {
    // Three noise levels, 1000-trial batches each.
    let mut previous = f64::INFINITY;
    for sigma in [0.05, 0.2, 0.4] {
        let mut cfg = RunConfig::default();
        cfg.scenario.detection_noise_mm = sigma;
        let (_, summary) = run_batch(&RatTailScenario, 1000, 77, &cfg).unwrap();
        assert!(
            summary.first_attempt_rate <= previous,
            "rate rose from {previous:.3} to {:.3} at sigma {sigma}",
            summary.first_attempt_rate
        );
        eprintln!("sigma {sigma}: first-attempt rate {:.3}", summary.first_attempt_rate);
        previous = summary.first_attempt_rate;
    }
}

#[test]
fn success_rate_never_increases_as_diameter_shrinks() {
    let mut previous = 0.0;
    for mean_diameter in [0.4, 0.55, 0.8] {
        let mut cfg = RunConfig::default();
        cfg.scenario.rat.diameter_mean_mm = mean_diameter;
        cfg.scenario.rat.diameter_sd_mm = 0.02;
        cfg.scenario.rat.diameter_min_mm = mean_diameter - 0.1;
        cfg.scenario.rat.diameter_max_mm = mean_diameter + 0.1;
        let (_, summary) = run_batch(&RatTailScenario, 1000, 99, &cfg).unwrap();
        assert!(
            summary.first_attempt_rate >= previous,
            "rate fell from {previous:.3} to {:.3} at diameter {mean_diameter}",
            summary.first_attempt_rate
        );
        eprintln!(
            "diameter {mean_diameter}: first-attempt rate {:.3}",
            summary.first_attempt_rate
        );
        previous = summary.first_attempt_rate;
    }
}
