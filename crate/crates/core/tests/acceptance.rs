//! Acceptance criteria, one test per criterion. Each prints a PASS/FAIL line.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::{fd_gradient, rel_err, verdict};
use singlora_lab::adapters::{param_count, AdapterKind, RampSchedule};
use singlora_lab::attnbench::{
    attn_grads, attn_score_loss, gen_instance, ramp_sweep, run_benchmark, AttnAdapters, BenchConfig,
};
use singlora_lab::invariance::{
    lora_scale_counterexample, nonsquare_invariance_check, run_invariance_batch, singlora_gradient,
    singlora_invariance_check, truncated_gradient,
};
use singlora_lab::matcore::{dot, gaussian_matrix, random_orthogonal, RngStream};
use singlora_lab::scalinglab::{estimate_gamma, run_width_sweep, SweepConfig, SweepMethod};
use singlora_lab::toydyn::{
    delta_f_decomposition, lora_toy_grads, singlora_toy_grads, ToyParams, ToyState,
};

const MASTER_SEED: u64 = 20_240_601;

#[test]
fn criterion_1_attention_separation() {
    let full = BenchConfig {
        seeds: 20,
        ..BenchConfig::default()
    };
    let started = Instant::now();
    let report = run_benchmark(&full, MASTER_SEED).expect("full benchmark");
    let per_seed_full = started.elapsed().as_secs_f64() / full.seeds as f64;
    let s = &report.summary;

    let reduced = BenchConfig {
        seeds: 20,
        ..BenchConfig::reduced()
    };
    let started = Instant::now();
    let small = run_benchmark(&reduced, MASTER_SEED).expect("reduced benchmark");
    let per_seed_reduced = started.elapsed().as_secs_f64() / reduced.seeds as f64;
    let r = &small.summary;

    // Both methods should improve on their starting loss by at least 10x.
    let worst_drop = report
        .curves
        .iter()
        .map(|c| c.losses[0].loss / c.final_loss)
        .fold(f64::INFINITY, f64::min);

    let separation = s.median_final_relative_singlora <= 1e-4 && s.separation_ratio >= 10.0;
    let ordering = r.median_final_relative_singlora < r.median_final_relative_lora;
    let runtime = per_seed_full < 15.0 * 60.0 && per_seed_reduced < 60.0;
    let pass = separation && ordering && worst_drop >= 10.0 && runtime;
    verdict(
        "criterion 1",
        pass,
        &format!(
            "median rel SingLoRA {:.3e}, LoRA {:.3e}, ratio {:.3e}; reduced SingLoRA {:.3e} vs LoRA {:.3e}; \
             min loss drop {:.1}x; {:.1}s/seed full, {:.1}s/seed reduced",
            s.median_final_relative_singlora,
            s.median_final_relative_lora,
            s.separation_ratio,
            r.median_final_relative_singlora,
            r.median_final_relative_lora,
            worst_drop,
            per_seed_full,
            per_seed_reduced
        ),
    );
    assert!(separation, "separation not reached: {s:?}");
    assert!(ordering, "reduced profile ordering violated: {r:?}");
    assert!(worst_drop >= 10.0, "a run improved by only {worst_drop}x");
    assert!(
        runtime,
        "runtime {per_seed_full}s / {per_seed_reduced}s per seed"
    );
}

fn slope(cfg: &SweepConfig, quantity: &str) -> Result<f64, String> {
    let report = run_width_sweep(cfg, MASTER_SEED).map_err(|e| e.to_string())?;
    estimate_gamma(&report, quantity)
        .map(|g| g.slope)
        .map_err(|e| format!("{e} ({} diverged cells)", report.diverged_cells().count()))
}

#[test]
fn criterion_2_width_scaling() {
    let started = Instant::now();
    let lora = SweepConfig {
        method: SweepMethod::Lora,
        c: -1.0,
        ..SweepConfig::default()
    };
    let sing = SweepConfig {
        method: SweepMethod::Singlora,
        c: -0.5,
        ..SweepConfig::default()
    };
    let checks = [
        ("LoRA mean_abs_b", &lora, "mean_abs_b", -1.0, 0.15),
        ("LoRA abs_a_dot_x", &lora, "abs_a_dot_x", 0.0, 0.15),
        ("LoRA mean_abs_f", &lora, "mean_abs_f", -1.0, 0.15),
        ("SingLoRA mean_abs_f", &sing, "mean_abs_f", 0.0, 0.2),
        ("SingLoRA mean_abs_a", &sing, "mean_abs_a", -0.5, 0.15),
    ];
    let mut all = true;
    for (label, cfg, q, target, tol) in checks {
        let (ok, detail) = match slope(cfg, q) {
            Ok(g) => (
                (g - target).abs() <= tol,
                format!("slope {g:.4}, target {target} ± {tol}"),
            ),
            Err(e) => (false, format!("no fit: {e}")),
        };
        verdict(&format!("criterion 2 [{label}]"), ok, &detail);
        all &= ok;
    }
    let secs = started.elapsed().as_secs_f64();
    let in_time = secs < 300.0;
    verdict("criterion 2", all && in_time, &format!("{secs:.1}s total"));
    assert!(all, "width-scaling exponents out of tolerance");
    assert!(in_time);
}

#[test]
fn criterion_3_transformation_invariance() {
    let records = run_invariance_batch(MASTER_SEED, 100).unwrap();
    let square = records.iter().filter(|r| r.kind == "square").count();
    let failed = records.iter().filter(|r| !r.passed).count();
    let worst = records
        .iter()
        .flat_map(|r| r.residuals)
        .fold(0.0f64, f64::max);

    // d_in = d_out: the truncated machinery must reduce to the square one.
    let mut worst_degenerate = 0.0f64;
    for seed in 0..20 {
        let mut rng = RngStream::new(MASTER_SEED, 1000 + seed);
        let n = [16, 32, 64][seed as usize % 3];
        let r = [2, 4, 8][seed as usize % 3];
        let a = gaussian_matrix(n, r, 1.0, &mut rng);
        let q = random_orthogonal(r, &mut rng).unwrap();
        let g = gaussian_matrix(n, n, 1.0, &mut rng);
        let grad_sq = singlora_gradient(&a, &g);
        let grad_tr = truncated_gradient(&a, &g);
        worst_degenerate = worst_degenerate.max(rel_err(grad_sq.as_slice(), grad_tr.as_slice()));
        let sq = singlora_invariance_check(&a, &q, &g, 0.01).unwrap();
        let tr = nonsquare_invariance_check(&a, &q, &g, 0.01).unwrap();
        for (x, y) in sq.residuals().iter().zip(tr.residuals()) {
            worst_degenerate = worst_degenerate.max((x - y).abs());
        }
    }

    let pass = square == 100
        && records.len() == 200
        && failed == 0
        && worst <= 1e-10
        && worst_degenerate <= 1e-12;
    verdict(
        "criterion 3",
        pass,
        &format!("{failed} of {} checks failed, worst residual {worst:.3e}, degenerate gap {worst_degenerate:.3e}", records.len()),
    );
    assert!(pass);
}

#[test]
fn criterion_4_lora_counterexample() {
    let mut worst = 0.0f64;
    for &s in &[2.0f64, 10.0, 0.5] {
        for draw in 0..20u64 {
            let mut rng = RngStream::derived(MASTER_SEED, &[s.to_bits(), draw]);
            let a = gaussian_matrix(24, 4, 1.0, &mut rng);
            let b = gaussian_matrix(4, 40, 1.0, &mut rng);
            let g = gaussian_matrix(24, 40, 1.0, &mut rng);
            let ce = lora_scale_counterexample(&a, &b, s, &g, 0.01).unwrap();
            worst = worst.max((ce.fitted_ratio - s * s).abs() / (s * s));
        }
    }
    let pass = worst <= 1e-10;
    verdict(
        "criterion 4",
        pass,
        &format!("worst relative deviation from s² {worst:.3e}"),
    );
    assert!(pass);
}

fn toy_fd_worst() -> f64 {
    let mut worst = 0.0f64;
    for i in 0..50u64 {
        let n = [8, 32, 128][i as usize % 3];
        let mut rng = RngStream::new(MASTER_SEED, 2000 + i);
        let x = rng.gaussian_vec(n, 1.0);
        let y = rng.gaussian_vec(n, 1.0);
        let a = rng.gaussian_vec(n, (n as f64).powf(-0.5));
        let b = rng.gaussian_vec(n, (n as f64).powf(-0.5));
        let u = 0.1 + 0.9 * rng.uniform();

        let lora_loss = |a: &[f64], b: &[f64]| {
            let ax = dot(a, &x);
            0.5 * b
                .iter()
                .zip(&y)
                .map(|(bi, yi)| (bi * ax - yi).powi(2))
                .sum::<f64>()
        };
        let (ga, gb) = lora_toy_grads(&a, &b, &x, &y).unwrap();
        worst = worst.max(rel_err(&ga, &fd_gradient(&a, 1e-6, |p| lora_loss(p, &b))));
        worst = worst.max(rel_err(&gb, &fd_gradient(&b, 1e-6, |p| lora_loss(&a, p))));

        let sing_loss = |a: &[f64]| {
            let ax = dot(a, &x);
            0.5 * a
                .iter()
                .zip(&y)
                .map(|(ai, yi)| (u * ai * ax - yi).powi(2))
                .sum::<f64>()
        };
        let gs = singlora_toy_grads(&a, &x, &y, u).unwrap();
        worst = worst.max(rel_err(&gs, &fd_gradient(&a, 1e-6, sing_loss)));
    }
    worst
}

fn attention_fd_worst() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..4u64 {
        let inst = gen_instance(MASTER_SEED + seed, 8, 8).unwrap();
        for kind in [AdapterKind::Lora, AdapterKind::Singlora] {
            let mut rng = RngStream::new(seed, 77);
            let mut ad = AttnAdapters::init(kind, 8, 2, RampSchedule::new(4), &mut rng).unwrap();
            for p in ad.params_mut() {
                *p = gaussian_matrix(p.rows(), p.cols(), 0.5, &mut rng);
            }
            let t = 2;
            let analytic = attn_grads(&inst, &ad, t).unwrap();
            for (k, g) in analytic.grads.iter().enumerate() {
                let base = ad.params()[k].as_slice().to_vec();
                let fd = fd_gradient(&base, 1e-5, |p| {
                    let mut probe = ad.clone();
                    probe.params_mut()[k].as_mut_slice().copy_from_slice(p);
                    let (wq, wk) = probe.projections(&inst, t);
                    attn_score_loss(&inst, &wq, &wk).unwrap().absolute
                });
                worst = worst.max(rel_err(g.as_slice(), &fd));
            }
        }
    }
    worst
}

fn probe_fd_worst() -> f64 {
    let mut worst = 0.0f64;
    let shapes = [(32, 32), (32, 48), (32, 96), (64, 96), (64, 128)];
    for (i, &(d_in, d_out)) in shapes.iter().enumerate() {
        for (j, &r) in [2usize, 4, 8].iter().enumerate() {
            let mut rng = RngStream::derived(MASTER_SEED, &[i as u64, j as u64]);
            let a = gaussian_matrix(d_out, r, 1.0, &mut rng);
            let g = gaussian_matrix(d_in, d_out, 1.0, &mut rng);
            // Probe loss ⟨G, A*·Aᵀ⟩ computed entrywise.
            let probe = |p: &[f64]| {
                let mut total = 0.0;
                for row in 0..d_in {
                    for col in 0..d_out {
                        let z: f64 = (0..r).map(|k| p[row * r + k] * p[col * r + k]).sum();
                        total += g[(row, col)] * z;
                    }
                }
                total
            };
            let fd = fd_gradient(a.as_slice(), 1e-5, probe);
            let analytic = if d_in == d_out {
                singlora_gradient(&a, &g)
            } else {
                truncated_gradient(&a, &g)
            };
            worst = worst.max(rel_err(analytic.as_slice(), &fd));
        }
    }
    worst
}

#[test]
fn criterion_5_gradient_oracles() {
    let toy = toy_fd_worst();
    let attn = attention_fd_worst();
    let probe = probe_fd_worst();
    let pass = toy <= 1e-5 && attn <= 1e-5 && probe <= 1e-5;
    verdict(
        "criterion 5",
        pass,
        &format!("worst relative error: toy {toy:.3e}, attention {attn:.3e}, non-square probe {probe:.3e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_6_delta_f_decomposition() {
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let mut rng = RngStream::new(MASTER_SEED, 3000 + i);
        let n = 4 + (rng.uniform() * 200.0) as usize;
        let state = ToyState {
            params: ToyParams::Lora {
                a: rng.gaussian_vec(n, (n as f64).powf(-0.5)),
                b: rng.gaussian_vec(n, (n as f64).powf(-0.5)),
            },
            x: rng.gaussian_vec(n, 1.0),
            y: rng.gaussian_vec(n, 1.0),
            eta: 1e-3 + rng.uniform() / n as f64,
            eta_b: 1e-3 + rng.uniform() / n as f64,
            t: 0,
            ramp: RampSchedule::disabled(),
        };
        worst = worst.max(delta_f_decomposition(&state).unwrap().residual);
    }
    let pass = worst <= 1e-12;
    verdict(
        "criterion 6",
        pass,
        &format!("worst residual {worst:.3e} over 100 states"),
    );
    assert!(pass);
}

#[test]
fn criterion_7_parameter_accounting() {
    let mut ok = true;
    for &(d_in, d_out) in &[(128, 128), (64, 96), (768, 768), (4096, 11008), (96, 64)] {
        for r in [1usize, 2, 4, 8, 16] {
            let lora = param_count(AdapterKind::Lora, d_in, d_out, r);
            let sing = param_count(AdapterKind::Singlora, d_in, d_out, r);
            ok &= lora == r * (d_in + d_out) && sing == r * d_in.max(d_out);
            if d_in == d_out {
                ok &= 2 * sing == lora;
                ok &= param_count(AdapterKind::Singlora, d_in, d_out, 2 * r) == lora;
            }
        }
    }
    ok &= param_count(AdapterKind::Singlora, 128, 128, 16) == 2048;
    ok &= param_count(AdapterKind::Lora, 128, 128, 8) == 2048;
    ok &= BenchConfig::default().check_parity().unwrap() == 2048;
    verdict(
        "criterion 7",
        ok,
        "closed-form counts, 1/2 ratio and r to 2r parity",
    );
    assert!(ok);
}

#[test]
fn criterion_8_ramp_robustness() {
    let cfg = BenchConfig {
        seeds: 10,
        ..BenchConfig::default()
    };
    let rows = ramp_sweep(&cfg, MASTER_SEED, &[0.005, 0.01, 0.02, 0.04, 0.08]).unwrap();
    let meds: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let hi = meds.iter().cloned().fold(f64::MIN, f64::max);
    let lo = meds.iter().cloned().fold(f64::MAX, f64::min);
    let spread = hi / lo;
    let pass = lo > 0.0 && spread < 10.0;
    let detail: Vec<String> = rows
        .iter()
        .map(|(_, t, m)| format!("T={t}: {m:.3e}"))
        .collect();
    verdict(
        "criterion 8",
        pass,
        &format!("{}; max/min {spread:.2}", detail.join(", ")),
    );
    assert!(pass);
}

fn run_bin(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_singlora-lab"))
        .args(args)
        .output()
        .expect("spawn binary")
        .status
        .code()
        .unwrap_or(-1)
}

fn files_in(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn criterion_9_provenance_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    let experiments: [(&str, &[&str], &str); 5] = [
        (
            "toy",
            &["--method", "singlora", "--n", "32", "--steps", "20"],
            "toy_summary.json",
        ),
        (
            "sweep",
            &["--widths", "64,128,256", "--seeds-per-width", "2"],
            "sweep_summary.json",
        ),
        ("invariance", &["--trials", "5"], "invariance_report.json"),
        (
            "attn",
            &[
                "--dim",
                "16",
                "--seq-len",
                "8",
                "--lora-rank",
                "2",
                "--singlora-rank",
                "4",
                "--iters",
                "200",
                "--seeds",
                "2",
                "--log-stride",
                "50",
            ],
            "attn_summary.json",
        ),
        (
            "params",
            &["--d-in", "64", "--d-out", "128", "--rank", "4"],
            "params.json",
        ),
    ];
    let mut all = true;
    for (cmd, flags, summary) in experiments {
        let first = tmp.path().join(format!("{cmd}-first"));
        let second = tmp.path().join(format!("{cmd}-second"));
        let mut args = vec![
            cmd,
            "--seed",
            "11",
            "--no-timestamp",
            "--out",
            first.to_str().unwrap(),
        ];
        args.extend_from_slice(flags);
        assert_eq!(run_bin(&args), 0, "{cmd} first run");
        let config = first.join(summary);
        let rerun = [
            cmd,
            "--config",
            config.to_str().unwrap(),
            "--no-timestamp",
            "--out",
            second.to_str().unwrap(),
        ];
        assert_eq!(run_bin(&rerun), 0, "{cmd} rerun");
        let same = files_in(&first) == files_in(&second);
        verdict(
            &format!("criterion 9 [{cmd}]"),
            same,
            "rerun from provenance block",
        );
        all &= same;
    }
    verdict("criterion 9", all, "all outputs byte-identical");
    assert!(all);
}
