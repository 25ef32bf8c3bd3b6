//! Width sweeps of the toy dynamics and fitted scaling exponents.
//!
//! For every width `n` and seed index, a toy model is initialized (Kaiming
//! `a`, zero `b`, Gaussian `x` and `y`) and trained for a fixed number of
//! gradient steps at `η = η₀·n^c`. The magnitudes at the final step are
//! aggregated over seeds by geometric mean, and the exponent `γ` of each
//! quantity is the slope of a least-squares line in log-log space.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::RampSchedule;
use crate::error::{invalid, LabError, Result};
use crate::matcore::{dot, fit_loglog_slope, RngStream};
use crate::toydyn::{run_toy, ToyMethod, ToyState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMethod {
    Lora,
    Singlora,
    /// LoRA with a larger learning rate on `b`: `η_b = lr_ratio·n^{lr_ratio_exponent}·η_a`.
    LoraPlus,
}

impl SweepMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepMethod::Lora => "lora",
            SweepMethod::Singlora => "singlora",
            SweepMethod::LoraPlus => "lora_plus",
        }
    }

    fn toy_method(&self) -> ToyMethod {
        match self {
            SweepMethod::Singlora => ToyMethod::Singlora,
            SweepMethod::Lora | SweepMethod::LoraPlus => ToyMethod::Lora,
        }
    }
}

/// Powers of two from 64 to 8192.
pub fn default_widths() -> Vec<usize> {
    (6..=13).map(|k| 1usize << k).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub method: SweepMethod,
    pub widths: Vec<usize>,
    /// Learning-rate exponent: `η = η₀·n^c`.
    pub c: f64,
    pub eta0: f64,
    pub steps: u64,
    pub seeds_per_width: usize,
    pub lr_ratio: f64,
    pub lr_ratio_exponent: f64,
    /// SingLoRA ramp threshold; `None` means 1% of `steps` (at least 1).
    pub ramp_threshold: Option<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            method: SweepMethod::Lora,
            widths: default_widths(),
            c: -1.0,
            eta0: 0.1,
            steps: 10,
            seeds_per_width: 8,
            lr_ratio: 1.0,
            lr_ratio_exponent: 1.0,
            ramp_threshold: None,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 3 {
            return invalid(format!(
                "widths needs at least 3 values, got {}",
                self.widths.len()
            ));
        }
        if self.widths[0] == 0 || self.widths.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("widths must be positive and strictly increasing");
        }
        if self.steps == 0 {
            return invalid("steps must be at least 1");
        }
        if self.seeds_per_width == 0 {
            return invalid("seeds_per_width must be at least 1");
        }
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return invalid(format!("eta0 must be positive, got {}", self.eta0));
        }
        if !self.c.is_finite() {
            return invalid("c must be finite");
        }
        if !(self.lr_ratio > 0.0 && self.lr_ratio.is_finite() && self.lr_ratio_exponent.is_finite())
        {
            return invalid("lr_ratio must be positive and lr_ratio_exponent finite");
        }
        Ok(())
    }

    pub fn ramp(&self) -> RampSchedule {
        match self.ramp_threshold {
            Some(t) => RampSchedule::new(t),
            None => RampSchedule::for_total_steps(self.steps),
        }
    }

    /// `(η_a, η_b)` at width `n`.
    pub fn learning_rates(&self, n: usize) -> (f64, f64) {
        let nf = n as f64;
        let eta = self.eta0 * nf.powf(self.c);
        let eta_b = match self.method {
            SweepMethod::LoraPlus => eta * self.lr_ratio * nf.powf(self.lr_ratio_exponent),
            _ => eta,
        };
        (eta, eta_b)
    }
}

/// One `(width, seed)` training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub width: usize,
    pub seed: usize,
    /// Final-step magnitudes by quantity name; empty if the run diverged.
    pub values: BTreeMap<String, f64>,
    pub diverged: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub config: SweepConfig,
    pub master_seed: u64,
    pub cells: Vec<SweepCell>,
}

/// Fitted exponent of one quantity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaEstimate {
    pub quantity: String,
    pub slope: f64,
    pub stderr: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// `(width, geometric mean over surviving seeds)`.
    pub per_width_values: Vec<(usize, f64)>,
}

fn run_cell(config: &SweepConfig, master_seed: u64, width: usize, seed: usize) -> SweepCell {
    let mut rng = RngStream::derived(master_seed, &[width as u64, seed as u64]);
    let (eta, eta_b) = config.learning_rates(width);
    let outcome = ToyState::init(
        config.method.toy_method(),
        width,
        eta,
        eta_b,
        config.ramp(),
        &mut rng,
    )
    .and_then(|state| {
        let a0x = dot(state.a(), &state.x).abs();
        run_toy(state, config.steps).map(|(_, recs)| (a0x, recs))
    });
    match outcome {
        Ok((a0x, records)) => {
            let last = records.last().expect("steps >= 1");
            let mut values: BTreeMap<String, f64> = last
                .quantities()
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect();
            values.insert("abs_a0_dot_x".into(), a0x);
            SweepCell {
                width,
                seed,
                values,
                diverged: None,
            }
        }
        Err(e) => SweepCell {
            width,
            seed,
            values: BTreeMap::new(),
            diverged: Some(e.to_string()),
        },
    }
}

/// Runs every `(width, seed)` cell. Cells are independent and seeded from
/// `(master_seed, width, seed)`, so the result does not depend on scheduling.
pub fn run_width_sweep(config: &SweepConfig, master_seed: u64) -> Result<ScalingReport> {
    config.validate()?;
    let jobs: Vec<(usize, usize)> = config
        .widths
        .iter()
        .flat_map(|&w| (0..config.seeds_per_width).map(move |s| (w, s)))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(w, s)| run_cell(config, master_seed, w, s))
        .collect();
    Ok(ScalingReport {
        config: config.clone(),
        master_seed,
        cells,
    })
}

impl ScalingReport {
    pub fn diverged_cells(&self) -> impl Iterator<Item = &SweepCell> {
        self.cells.iter().filter(|c| c.diverged.is_some())
    }

    /// Quantity names recorded by at least one cell.
    pub fn quantities(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .cells
            .iter()
            .flat_map(|c| c.values.keys().cloned())
            .collect();
        names.sort();
        names.dedup();
        names
    }

    /// Seed-aggregated (geometric mean) value per width, skipping diverged cells.
    /// Widths where every cell diverged are omitted.
    pub fn per_width(&self, quantity: &str) -> Vec<(usize, f64)> {
        let mut widths: Vec<usize> = self.cells.iter().map(|c| c.width).collect();
        widths.dedup();
        widths
            .into_iter()
            .filter_map(|w| {
                let vals: Vec<f64> = self
                    .cells
                    .iter()
                    .filter(|c| c.width == w)
                    .filter_map(|c| c.values.get(quantity).copied())
                    .collect();
                if vals.is_empty() {
                    return None;
                }
                let g = if vals.iter().any(|v| *v <= 0.0) {
                    0.0
                } else {
                    (vals.iter().map(|v| v.ln()).sum::<f64>() / vals.len() as f64).exp()
                };
                Some((w, g))
            })
            .collect()
    }
}

pub fn estimate_gamma(report: &ScalingReport, quantity: &str) -> Result<GammaEstimate> {
    if !report.cells.iter().any(|c| c.values.contains_key(quantity)) {
        return invalid(format!("quantity {quantity:?} not recorded in this sweep"));
    }
    let per_width = report.per_width(quantity);
    let bad: Vec<usize> = per_width
        .iter()
        .filter(|(_, v)| !(*v > 0.0))
        .map(|(w, _)| *w)
        .collect();
    if !bad.is_empty() {
        return Err(LabError::InvalidArgument(format!(
            "{quantity} has non-positive values at widths {bad:?}"
        )));
    }
    let points: Vec<(f64, f64)> = per_width.iter().map(|&(w, v)| (w as f64, v)).collect();
    let fit = fit_loglog_slope(&points).map_err(|e| {
        LabError::InvalidArgument(format!(
            "{quantity}: {e} ({} of {} widths survived)",
            per_width.len(),
            report.config.widths.len()
        ))
    })?;
    Ok(GammaEstimate {
        quantity: quantity.to_string(),
        slope: fit.slope,
        stderr: fit.slope_stderr,
        intercept: fit.intercept,
        r_squared: fit.r_squared,
        per_width_values: per_width,
    })
}
