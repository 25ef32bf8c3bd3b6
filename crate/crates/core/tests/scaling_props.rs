//! Width-sweep signatures over the default widths, 8 seeds and 10 steps.

mod common;

use common::verdict;
use singlora_lab::scalinglab::{estimate_gamma, run_width_sweep, SweepConfig, SweepMethod};

fn f_slope(method: SweepMethod, c: f64, seed: u64) -> Result<f64, String> {
    let cfg = SweepConfig {
        method,
        c,
        ..SweepConfig::default()
    };
    let report = run_width_sweep(&cfg, seed).map_err(|e| e.to_string())?;
    estimate_gamma(&report, "mean_abs_f")
        .map(|g| g.slope)
        .map_err(|e| e.to_string())
}

/// Mean fitted slope over 20 independent master seeds; any failed fit fails the check.
fn check_mean_slope(label: &str, method: SweepMethod, c: f64, ok: impl Fn(f64) -> bool) {
    let fits: Vec<Result<f64, String>> = (0..20).map(|seed| f_slope(method, c, seed)).collect();
    let failed: Vec<&String> = fits.iter().filter_map(|r| r.as_ref().err()).collect();
    let slopes: Vec<f64> = fits
        .iter()
        .filter_map(|r| r.as_ref().ok().copied())
        .collect();
    let mean = slopes.iter().sum::<f64>() / slopes.len().max(1) as f64;
    let pass = failed.is_empty() && ok(mean);
    verdict(
        label,
        pass,
        &format!(
            "mean slope {mean:.4} over {} fits, {} sweeps without a fit",
            slopes.len(),
            failed.len()
        ),
    );
    assert!(
        pass,
        "{label} violated; first fit error: {:?}",
        failed.first()
    );
}

#[test]
fn lora_output_vanishes_with_width() {
    check_mean_slope(
        "LoRA c=-1 output slope <= -0.7",
        SweepMethod::Lora,
        -1.0,
        |g| g <= -0.7,
    );
}

#[test]
fn singlora_output_is_width_stable() {
    check_mean_slope(
        "SingLoRA c=-1/2 |output slope| <= 0.2",
        SweepMethod::Singlora,
        -0.5,
        |g| g.abs() <= 0.2,
    );
}

#[test]
fn lora_plus_output_is_width_stable() {
    check_mean_slope(
        "LoRA+ c=-1 |output slope| <= 0.2",
        SweepMethod::LoraPlus,
        -1.0,
        |g| g.abs() <= 0.2,
    );
}

#[test]
fn sweeps_are_bitwise_reproducible() {
    for method in [
        SweepMethod::Lora,
        SweepMethod::Singlora,
        SweepMethod::LoraPlus,
    ] {
        let cfg = SweepConfig {
            method,
            widths: vec![64, 256, 1024],
            ..SweepConfig::default()
        };
        assert_eq!(
            run_width_sweep(&cfg, 5).unwrap(),
            run_width_sweep(&cfg, 5).unwrap()
        );
    }
}
