//! Numerical laboratory for single-matrix low-rank adapters.
//!
//! Modules, bottom-up:
//!
//! * [`matcore`]: dense matrices, seeded Gaussian streams, Householder QR,
//!   log-log slope fitting.
//! * [`adapters`]: LoRA and SingLoRA parameterizations, the ramp `u(t)`,
//!   forward application, parameter accounting and JSON persistence.
//! * [`toydyn`]: the rank-1, single-sample toy models with exact gradients.
//! * [`scalinglab`]: width sweeps and fitted scaling exponents.
//! * [`invariance`]: numerical checks of transformation invariance.
//! * [`attnbench`]: the synthetic query/key attention benchmark with AdamW.
//! * [`expcli`]: configuration, dispatch and artifact emission for the CLI.

pub mod adapters;
pub mod attnbench;
pub mod error;
pub mod expcli;
pub mod invariance;
pub mod matcore;
pub mod scalinglab;
pub mod toydyn;

pub use error::{LabError, Result};
