//! AdamW with bias correction and decoupled weight decay.
//!
//! ```text
//! θ ← θ·(1 − lr·λ)
//! m ← β₁m + (1 − β₁)g
//! v ← β₂v + (1 − β₂)g²
//! θ ← θ − lr · (m / (1 − β₁ᵗ)) / (√(v / (1 − β₂ᵗ)) + ε)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::matcore::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(unit(self.beta1) && unit(self.beta2)) {
            return invalid(format!(
                "betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            ));
        }
        if !(self.epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return invalid("epsilon must be positive and weight_decay non-negative");
        }
        Ok(())
    }
}

/// Moment accumulators for a fixed list of parameter matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, shapes: &[(usize, usize)]) -> Self {
        let zeros = || shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn first_moments(&self) -> &[Matrix] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Matrix] {
        &self.second
    }
}

/// One AdamW update of `params` in place.
pub fn adamw_step(
    params: &mut [&mut Matrix],
    grads: &[Matrix],
    state: &mut AdamWState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return invalid(format!(
            "AdamW got {} params, {} grads, {} accumulators",
            params.len(),
            grads.len(),
            state.first.len()
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first[i].shape() {
            return invalid(format!("AdamW shape mismatch on parameter {i}"));
        }
        if !g.is_finite() || !p.is_finite() {
            return Err(LabError::Diverged {
                step: state.step as usize + 1,
                detail: format!("non-finite value in parameter {i} or its gradient"),
            });
        }
    }

    state.step += 1;
    let AdamWConfig {
        beta1,
        beta2,
        epsilon,
        weight_decay,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let decay = 1.0 - lr * weight_decay;

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first.iter_mut().zip(state.second.iter_mut()))
    {
        let p = p.as_mut_slice();
        let m = m.as_mut_slice();
        let v = v.as_mut_slice();
        for (j, &gj) in g.as_slice().iter().enumerate() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] = p[j] * decay - lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}
