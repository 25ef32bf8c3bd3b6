//! Rank-1 toy models trained on a single pair `(x, y)`.
//!
//! LoRA: `f(x) = b·(aᵀx)`. SingLoRA: `f(x) = u(t)·a·(aᵀx)`. The frozen weight
//! is taken to be zero (absorb it into the target), and the loss is
//! `L = ½‖f(x) − y‖²`.
//!
//! Gradients are the plain calculus gradients of that loss. With
//! `e = f(x) − y`:
//!
//! ```text
//! LoRA      ∇_a L = (bᵀe)·x          ∇_b L = (aᵀx)·e
//! SingLoRA  ∇_a L = u·[(aᵀx)·e + (aᵀe)·x]
//! ```
//!
//! One LoRA gradient step changes the output by exactly
//!
//! ```text
//! Δf = −η_a(bᵀe)‖x‖²·b − η_b(aᵀx)²·e + η_aη_b(aᵀx)(bᵀe)‖x‖²·e
//! ```
//!
//! which [`delta_f_decomposition`] evaluates term by term.

use serde::{Deserialize, Serialize};

use crate::adapters::RampSchedule;
use crate::error::{invalid, LabError, Result};
use crate::matcore::{dot, RngStream};

/// Recorded magnitudes above this abort a run as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyMethod {
    Lora,
    Singlora,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ToyParams {
    Lora { a: Vec<f64>, b: Vec<f64> },
    SingLora { a: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyState {
    pub params: ToyParams,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Learning rate for `a` (and for `b` unless `eta_b` differs).
    pub eta: f64,
    /// Learning rate for `b`; equal to `eta` for plain LoRA.
    pub eta_b: f64,
    pub t: u64,
    /// Only consulted by SingLoRA.
    pub ramp: RampSchedule,
}

impl ToyState {
    /// Standard initialization: `x, y ~ N(0, 1)`, `a` Kaiming (std `n^{-1/2}`),
    /// `b = 0`. Draws `x`, then `y`, then `a` from `rng`.
    pub fn init(
        method: ToyMethod,
        n: usize,
        eta: f64,
        eta_b: f64,
        ramp: RampSchedule,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if n == 0 {
            return invalid("toy width n must be at least 1");
        }
        if !(eta > 0.0 && eta_b > 0.0) {
            return invalid(format!(
                "learning rates must be positive, got {eta}, {eta_b}"
            ));
        }
        let x = rng.gaussian_vec(n, 1.0);
        let y = rng.gaussian_vec(n, 1.0);
        let a = rng.gaussian_vec(n, (n as f64).powf(-0.5));
        let params = match method {
            ToyMethod::Lora => ToyParams::Lora { a, b: vec![0.0; n] },
            ToyMethod::Singlora => ToyParams::SingLora { a },
        };
        Ok(Self {
            params,
            x,
            y,
            eta,
            eta_b,
            t: 0,
            ramp,
        })
    }

    pub fn method(&self) -> ToyMethod {
        match self.params {
            ToyParams::Lora { .. } => ToyMethod::Lora,
            ToyParams::SingLora { .. } => ToyMethod::Singlora,
        }
    }

    pub fn a(&self) -> &[f64] {
        match &self.params {
            ToyParams::Lora { a, .. } | ToyParams::SingLora { a } => a,
        }
    }

    pub fn b(&self) -> Option<&[f64]> {
        match &self.params {
            ToyParams::Lora { b, .. } => Some(b),
            ToyParams::SingLora { .. } => None,
        }
    }

    pub fn u(&self) -> f64 {
        self.ramp.u(self.t)
    }

    /// `f_t(x)`.
    pub fn output(&self) -> Vec<f64> {
        match &self.params {
            ToyParams::Lora { a, b } => {
                let ax = dot(a, &self.x);
                b.iter().map(|bi| bi * ax).collect()
            }
            ToyParams::SingLora { a } => {
                let s = self.u() * dot(a, &self.x);
                a.iter().map(|ai| ai * s).collect()
            }
        }
    }

    pub fn loss(&self) -> f64 {
        let f = self.output();
        0.5 * f
            .iter()
            .zip(&self.y)
            .map(|(fi, yi)| (fi - yi).powi(2))
            .sum::<f64>()
    }
}

fn check_lengths(parts: &[&[f64]]) -> Result<usize> {
    let n = parts[0].len();
    if let Some(p) = parts.iter().find(|p| p.len() != n) {
        return invalid(format!("vector lengths disagree: {n} vs {}", p.len()));
    }
    Ok(n)
}

/// `(∇_a L, ∇_b L)` for the LoRA toy.
pub fn lora_toy_grads(a: &[f64], b: &[f64], x: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_lengths(&[a, b, x, y])?;
    let ax = dot(a, x);
    let e: Vec<f64> = b.iter().zip(y).map(|(bi, yi)| bi * ax - yi).collect();
    let be = dot(b, &e);
    let grad_a = x.iter().map(|xi| be * xi).collect();
    let grad_b = e.iter().map(|ei| ax * ei).collect();
    Ok((grad_a, grad_b))
}

/// `∇_a L` for the SingLoRA toy at adaptation rate `u`.
pub fn singlora_toy_grads(a: &[f64], x: &[f64], y: &[f64], u: f64) -> Result<Vec<f64>> {
    check_lengths(&[a, x, y])?;
    let ax = dot(a, x);
    let e: Vec<f64> = a.iter().zip(y).map(|(ai, yi)| u * ai * ax - yi).collect();
    let ae = dot(a, &e);
    Ok(e.iter()
        .zip(x)
        .map(|(ei, xi)| u * (ax * ei + ae * xi))
        .collect())
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// One full-batch gradient-descent step.
pub fn toy_gd_step(state: &ToyState) -> Result<ToyState> {
    let mut next = state.clone();
    let step = state.t as usize + 1;
    match &mut next.params {
        ToyParams::Lora { a, b } => {
            let (ga, gb) = lora_toy_grads(a, b, &state.x, &state.y)?;
            if !(all_finite(&ga) && all_finite(&gb)) {
                return Err(LabError::Diverged {
                    step,
                    detail: "non-finite LoRA gradient".into(),
                });
            }
            a.iter_mut().zip(&ga).for_each(|(p, g)| *p -= state.eta * g);
            b.iter_mut()
                .zip(&gb)
                .for_each(|(p, g)| *p -= state.eta_b * g);
        }
        ToyParams::SingLora { a } => {
            let ga = singlora_toy_grads(a, &state.x, &state.y, state.u())?;
            if !all_finite(&ga) {
                return Err(LabError::Diverged {
                    step,
                    detail: "non-finite SingLoRA gradient".into(),
                });
            }
            a.iter_mut().zip(&ga).for_each(|(p, g)| *p -= state.eta * g);
        }
    }
    next.t += 1;
    Ok(next)
}

/// Term-by-term expansion of one LoRA step's output change.
#[derive(Clone, Debug)]
pub struct DeltaFDecomposition {
    pub term1: Vec<f64>,
    pub term2: Vec<f64>,
    pub term3: Vec<f64>,
    pub delta_f_exact: Vec<f64>,
    /// `‖Δf − Σ terms‖ / max(‖Δf‖, 1e-30)`.
    pub residual: f64,
}

pub fn delta_f_decomposition(state: &ToyState) -> Result<DeltaFDecomposition> {
    let ToyParams::Lora { a, b } = &state.params else {
        return invalid("Δf decomposition is defined for the LoRA toy only");
    };
    let x = &state.x;
    let f0 = state.output();
    let e: Vec<f64> = f0.iter().zip(&state.y).map(|(f, y)| f - y).collect();
    let ax = dot(a, x);
    let be = dot(b, &e);
    let xx = dot(x, x);
    let (ea, eb) = (state.eta, state.eta_b);

    let term1: Vec<f64> = b.iter().map(|bi| -ea * be * xx * bi).collect();
    let term2: Vec<f64> = e.iter().map(|ei| -eb * ax * ax * ei).collect();
    let term3: Vec<f64> = e.iter().map(|ei| ea * eb * ax * be * xx * ei).collect();

    let f1 = toy_gd_step(state)?.output();
    let delta_f_exact: Vec<f64> = f1.iter().zip(&f0).map(|(p, q)| p - q).collect();

    let diff: f64 = (0..delta_f_exact.len())
        .map(|i| (delta_f_exact[i] - (term1[i] + term2[i] + term3[i])).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = dot(&delta_f_exact, &delta_f_exact).sqrt();
    Ok(DeltaFDecomposition {
        term1,
        term2,
        term3,
        delta_f_exact,
        residual: diff / norm.max(1e-30),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub method: ToyMethod,
    pub n: usize,
    pub eta: f64,
    /// `η_b / η_a`; 1 for plain gradient descent.
    pub eta_b_ratio: f64,
    pub steps: u64,
    /// Ramp threshold for SingLoRA; `None` means 1% of `steps` (at least 1).
    pub ramp_threshold: Option<u64>,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            method: ToyMethod::Lora,
            n: 256,
            eta: 1.0 / 256.0,
            eta_b_ratio: 1.0,
            steps: 10,
            ramp_threshold: None,
        }
    }
}

impl ToyConfig {
    pub fn ramp(&self) -> RampSchedule {
        match self.ramp_threshold {
            Some(t) => RampSchedule::new(t),
            None => RampSchedule::for_total_steps(self.steps),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return invalid("n must be at least 1");
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return invalid(format!("eta must be positive, got {}", self.eta));
        }
        if !(self.eta_b_ratio > 0.0 && self.eta_b_ratio.is_finite()) {
            return invalid(format!(
                "eta_b_ratio must be positive, got {}",
                self.eta_b_ratio
            ));
        }
        Ok(())
    }
}

/// Magnitudes recorded after each step `t ≥ 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyRecord {
    pub step: u64,
    /// Absent for SingLoRA.
    pub mean_abs_b: Option<f64>,
    pub abs_a_dot_x: f64,
    pub mean_abs_a: f64,
    pub mean_abs_f: f64,
    pub mean_abs_delta_f: f64,
    pub loss: f64,
}

impl ToyRecord {
    /// `(name, value)` pairs in export order.
    pub fn quantities(&self) -> Vec<(&'static str, f64)> {
        let mut q = Vec::with_capacity(6);
        if let Some(b) = self.mean_abs_b {
            q.push(("mean_abs_b", b));
        }
        q.push(("abs_a_dot_x", self.abs_a_dot_x));
        q.push(("mean_abs_a", self.mean_abs_a));
        q.push(("mean_abs_f", self.mean_abs_f));
        q.push(("mean_abs_delta_f", self.mean_abs_delta_f));
        q.push(("loss", self.loss));
        q
    }
}

fn mean_abs(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64
}

/// Runs `steps` gradient steps from an initialized state.
pub fn run_toy(mut state: ToyState, steps: u64) -> Result<(ToyState, Vec<ToyRecord>)> {
    let mut records = Vec::with_capacity(steps as usize);
    let mut f_prev = state.output();
    for _ in 0..steps {
        state = toy_gd_step(&state)?;
        let f = state.output();
        let df: Vec<f64> = f.iter().zip(&f_prev).map(|(p, q)| p - q).collect();
        let rec = ToyRecord {
            step: state.t,
            mean_abs_b: state.b().map(mean_abs),
            abs_a_dot_x: dot(state.a(), &state.x).abs(),
            mean_abs_a: mean_abs(state.a()),
            mean_abs_f: mean_abs(&f),
            mean_abs_delta_f: mean_abs(&df),
            loss: state.loss(),
        };
        if let Some((name, v)) = rec
            .quantities()
            .into_iter()
            .find(|(_, v)| !(v.is_finite() && v.abs() <= DIVERGENCE_LIMIT))
        {
            return Err(LabError::Diverged {
                step: state.t as usize,
                detail: format!("{name} = {v:e}"),
            });
        }
        records.push(rec);
        f_prev = f;
    }
    Ok((state, records))
}

/// Initializes from `seed` (stream 0) and trains.
pub fn train_toy(config: &ToyConfig, seed: u64) -> Result<Vec<ToyRecord>> {
    config.validate()?;
    let mut rng = RngStream::new(seed, 0);
    let state = ToyState::init(
        config.method,
        config.n,
        config.eta,
        config.eta * config.eta_b_ratio,
        config.ramp(),
        &mut rng,
    )?;
    Ok(run_toy(state, config.steps)?.1)
}
