//! Synthetic attention-score approximation benchmark.
//!
//! Query and key projections `Wq = W0q + Δq`, `Wk = W0k + Δk` are adapted so
//! that the pre-softmax scores `X·Wq·Wkᵀ·Xᵀ` approach a random target `Z`.
//! Only the adapter factors are trained (full batch, AdamW). LoRA at rank `r`
//! is compared with SingLoRA at rank `2r`, which has the same parameter count
//! on a square weight.

pub mod adamw;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{param_count, AdapterKind, LoraAdapter, RampSchedule, SingLoraAdapter};
use crate::error::{invalid, LabError, Result};
use crate::matcore::{derive_stream_id, gaussian_matrix, Matrix, RngStream};

pub use adamw::{adamw_step, AdamWConfig, AdamWState};

/// Frozen problem data. `X` is `L × d`, the base weights `d × d`, `Z` is `L × L`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnInstance {
    pub x: Matrix,
    pub w0q: Matrix,
    pub w0k: Matrix,
    pub z: Matrix,
    pub seed: u64,
}

impl AttnInstance {
    pub fn seq_len(&self) -> usize {
        self.x.rows()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn target_energy(&self) -> f64 {
        self.z.sum_of_squares()
    }
}

const STREAM_X: u64 = 0;
const STREAM_W0Q: u64 = 1;
const STREAM_W0K: u64 = 2;
const STREAM_Z: u64 = 3;
const STREAM_ADAPTERS: u64 = 4;

/// Draws an instance: `X, Z ~ N(0, 1)`, base weights with standard deviation `d^{-1/2}`.
pub fn gen_instance(seed: u64, seq_len: usize, dim: usize) -> Result<AttnInstance> {
    if seq_len == 0 || dim == 0 {
        return invalid(format!(
            "instance needs L >= 1 and d >= 1, got L={seq_len}, d={dim}"
        ));
    }
    let w_std = (dim as f64).powf(-0.5);
    Ok(AttnInstance {
        x: gaussian_matrix(seq_len, dim, 1.0, &mut RngStream::new(seed, STREAM_X)),
        w0q: gaussian_matrix(dim, dim, w_std, &mut RngStream::new(seed, STREAM_W0Q)),
        w0k: gaussian_matrix(dim, dim, w_std, &mut RngStream::new(seed, STREAM_W0K)),
        z: gaussian_matrix(seq_len, seq_len, 1.0, &mut RngStream::new(seed, STREAM_Z)),
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreLoss {
    pub absolute: f64,
    /// `absolute / ‖Z‖²`.
    pub relative: f64,
}

impl ScoreLoss {
    fn new(absolute: f64, instance: &AttnInstance) -> Self {
        Self {
            absolute,
            relative: absolute / instance.target_energy().max(f64::MIN_POSITIVE),
        }
    }
}

/// `‖X·Wq·Wkᵀ·Xᵀ − Z‖²` for explicit projection matrices.
pub fn attn_score_loss(instance: &AttnInstance, wq: &Matrix, wk: &Matrix) -> Result<ScoreLoss> {
    let d = instance.dim();
    for (name, w) in [("Wq", wq), ("Wk", wk)] {
        if w.rows() != d {
            return invalid(format!(
                "{name} must have {d} rows, got {}x{}",
                w.rows(),
                w.cols()
            ));
        }
    }
    if wq.cols() != wk.cols() {
        return invalid(format!(
            "Wq and Wk disagree on width: {} vs {}",
            wq.cols(),
            wk.cols()
        ));
    }
    let q = instance.x.matmul(wq);
    let k = instance.x.matmul(wk);
    let e = q.matmul_nt(&k).sub(&instance.z);
    Ok(ScoreLoss::new(e.sum_of_squares(), instance))
}

/// Query and key adapters of one method on a square `d × d` projection.
#[derive(Clone, Debug, PartialEq)]
pub enum AttnAdapters {
    Lora {
        q: LoraAdapter,
        k: LoraAdapter,
    },
    SingLora {
        q: SingLoraAdapter,
        k: SingLoraAdapter,
    },
}

impl AttnAdapters {
    /// Fresh adapters with `α = r`, so the static scale `α/r` is one.
    pub fn init(
        kind: AdapterKind,
        dim: usize,
        rank: usize,
        ramp: RampSchedule,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let alpha = rank as f64;
        Ok(match kind {
            AdapterKind::Lora => AttnAdapters::Lora {
                q: LoraAdapter::new(dim, dim, rank, alpha, rng)?,
                k: LoraAdapter::new(dim, dim, rank, alpha, rng)?,
            },
            AdapterKind::Singlora => AttnAdapters::SingLora {
                q: SingLoraAdapter::new(dim, dim, rank, alpha, ramp, rng)?,
                k: SingLoraAdapter::new(dim, dim, rank, alpha, ramp, rng)?,
            },
        })
    }

    pub fn kind(&self) -> AdapterKind {
        match self {
            AttnAdapters::Lora { .. } => AdapterKind::Lora,
            AttnAdapters::SingLora { .. } => AdapterKind::Singlora,
        }
    }

    /// Trainable factors in a fixed order: `[Aq, Ak]` for SingLoRA,
    /// `[Bq, Aq, Bk, Ak]` for LoRA.
    pub fn params(&self) -> Vec<&Matrix> {
        match self {
            AttnAdapters::Lora { q, k } => vec![q.b(), q.a(), k.b(), k.a()],
            AttnAdapters::SingLora { q, k } => vec![q.factor(), k.factor()],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            AttnAdapters::Lora { q, k } => {
                let (bq, aq) = q.factors_mut();
                let (bk, ak) = k.factors_mut();
                vec![bq, aq, bk, ak]
            }
            AttnAdapters::SingLora { q, k } => vec![q.factor_mut(), k.factor_mut()],
        }
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            AttnAdapters::Lora { .. } => &["B_q", "A_q", "B_k", "A_k"],
            AttnAdapters::SingLora { .. } => &["A_q", "A_k"],
        }
    }

    /// Materialized `(Wq, Wk)` at step `t`.
    pub fn projections(&self, instance: &AttnInstance, t: u64) -> (Matrix, Matrix) {
        let (dq, dk) = match self {
            AttnAdapters::Lora { q, k } => (
                crate::adapters::lora_delta(q),
                crate::adapters::lora_delta(k),
            ),
            AttnAdapters::SingLora { q, k } => (
                crate::adapters::singlora_delta(q, t),
                crate::adapters::singlora_delta(k, t),
            ),
        };
        (instance.w0q.add(&dq), instance.w0k.add(&dk))
    }

    pub fn total_params(&self) -> usize {
        self.params().iter().map(|m| m.rows() * m.cols()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttnGrads {
    pub loss: ScoreLoss,
    /// Same order as [`AttnAdapters::params`].
    pub grads: Vec<Matrix>,
}

/// Loss and exact gradients with respect to every trainable factor at step `t`.
///
/// With `E = Q·Kᵀ − Z`, `∂L/∂Q = 2E·K` and `∂L/∂K = 2Eᵀ·Q`; the weight
/// gradients `Xᵀ·∂L/∂Q` are never formed explicitly.
pub fn attn_grads(instance: &AttnInstance, adapters: &AttnAdapters, t: u64) -> Result<AttnGrads> {
    let base = BaseProjections::new(instance);
    grads_with_base(instance, &base, adapters, t)
}

/// `X·W0q` and `X·W0k`, fixed for the whole run.
struct BaseProjections {
    xq0: Matrix,
    xk0: Matrix,
}

impl BaseProjections {
    fn new(instance: &AttnInstance) -> Self {
        Self {
            xq0: instance.x.matmul(&instance.w0q),
            xk0: instance.x.matmul(&instance.w0k),
        }
    }
}

fn grads_with_base(
    instance: &AttnInstance,
    base: &BaseProjections,
    adapters: &AttnAdapters,
    t: u64,
) -> Result<AttnGrads> {
    let d = instance.dim();
    let x = &instance.x;
    let check = |m: &Matrix| {
        if m.rows() != d {
            invalid(format!(
                "adapter factor with {} rows does not fit d={d}",
                m.rows()
            ))
        } else {
            Ok(())
        }
    };
    match adapters {
        AttnAdapters::Lora { q, k } => {
            check(q.b())?;
            check(k.b())?;
        }
        AttnAdapters::SingLora { q, k } => {
            check(q.factor())?;
            check(k.factor())?;
        }
    }

    let xq0 = base.xq0.clone();
    let xk0 = base.xk0.clone();
    match adapters {
        AttnAdapters::SingLora { q: aq_ad, k: ak_ad } => {
            let (aq, ak) = (aq_ad.factor(), ak_ad.factor());
            let sq = aq_ad.scale_at(t);
            let sk = ak_ad.scale_at(t);
            let xaq = x.matmul(aq);
            let xak = x.matmul(ak);
            let mut qm = xq0;
            qm.add_scaled_in_place(sq, &xaq.matmul_nt(aq));
            let mut km = xk0;
            km.add_scaled_in_place(sk, &xak.matmul_nt(ak));
            let e = qm.matmul_nt(&km).sub(&instance.z);
            let gq = e.matmul(&km).scale(2.0);
            let gk = e.matmul_tn(&qm).scale(2.0);
            // ∂L/∂A = s·(G + Gᵀ)·A with G = Xᵀ·(∂L/∂Q).
            let sym = |g: &Matrix, xa: &Matrix, a: &Matrix, s: f64| {
                x.matmul_tn(&g.matmul(a)).add(&g.matmul_tn(xa)).scale(s)
            };
            Ok(AttnGrads {
                loss: ScoreLoss::new(e.sum_of_squares(), instance),
                grads: vec![sym(&gq, &xaq, aq, sq), sym(&gk, &xak, ak, sk)],
            })
        }
        AttnAdapters::Lora { q: q_ad, k: k_ad } => {
            let (bq, aq) = (q_ad.b(), q_ad.a());
            let (bk, ak) = (k_ad.b(), k_ad.a());
            let sq = q_ad.scale();
            let sk = k_ad.scale();
            let xbq = x.matmul(bq);
            let xbk = x.matmul(bk);
            let mut qm = xq0;
            qm.add_scaled_in_place(sq, &xbq.matmul(aq));
            let mut km = xk0;
            km.add_scaled_in_place(sk, &xbk.matmul(ak));
            let e = qm.matmul_nt(&km).sub(&instance.z);
            let gq = e.matmul(&km).scale(2.0);
            let gk = e.matmul_tn(&qm).scale(2.0);
            // ∂L/∂B = s·G·Aᵀ and ∂L/∂A = s·Bᵀ·G.
            let grad_b = |g: &Matrix, a: &Matrix, s: f64| x.matmul_tn(&g.matmul_nt(a)).scale(s);
            let grad_a = |g: &Matrix, xb: &Matrix, s: f64| xb.matmul_tn(g).scale(s);
            Ok(AttnGrads {
                loss: ScoreLoss::new(e.sum_of_squares(), instance),
                grads: vec![
                    grad_b(&gq, aq, sq),
                    grad_a(&gq, &xbq, sq),
                    grad_b(&gk, ak, sk),
                    grad_a(&gk, &xbk, sk),
                ],
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rank: usize,
    pub lr: f64,
    pub iters: u64,
    pub ramp: RampSchedule,
    pub log_stride: u64,
    pub optimizer: AdamWConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return invalid("rank must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return invalid(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.log_stride == 0 {
            return invalid("log_stride must be at least 1");
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub loss: f64,
    pub relative_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub method: AdapterKind,
    pub seed: u64,
    pub losses: Vec<CurvePoint>,
    pub final_loss: f64,
    pub final_relative_loss: f64,
}

/// A run that stopped on a non-finite loss or gradient.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: LabError,
    pub partial: LossCurve,
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} run on seed {} failed after {} logged points: {}",
            self.partial.method,
            self.partial.seed,
            self.partial.losses.len(),
            self.error
        )
    }
}

impl std::error::Error for TrainFailure {}

impl From<TrainFailure> for LabError {
    fn from(f: TrainFailure) -> Self {
        match f.error {
            LabError::Diverged { step, detail } => LabError::Diverged {
                step,
                detail: format!("{} seed {}: {detail}", f.partial.method, f.partial.seed),
            },
            other => other,
        }
    }
}

/// Full-batch AdamW on the adapter factors. Losses are logged every
/// `log_stride` steps and always at the final step `iters`.
pub fn train_attn(
    kind: AdapterKind,
    instance: &AttnInstance,
    config: &TrainConfig,
) -> std::result::Result<LossCurve, TrainFailure> {
    let mut curve = LossCurve {
        method: kind,
        seed: instance.seed,
        losses: Vec::new(),
        final_loss: f64::NAN,
        final_relative_loss: f64::NAN,
    };
    let fail = |error: LabError, curve: LossCurve| TrainFailure {
        error,
        partial: curve,
    };
    if let Err(e) = config.validate() {
        return Err(fail(e, curve));
    }
    let mut rng = RngStream::new(instance.seed, STREAM_ADAPTERS + kind_tag(kind));
    let mut adapters =
        match AttnAdapters::init(kind, instance.dim(), config.rank, config.ramp, &mut rng) {
            Ok(a) => a,
            Err(e) => return Err(fail(e, curve)),
        };
    let shapes: Vec<_> = adapters.params().iter().map(|m| m.shape()).collect();
    let mut opt = AdamWState::new(config.optimizer, &shapes);
    let base = BaseProjections::new(instance);

    let mut t = 0;
    loop {
        let g = match grads_with_base(instance, &base, &adapters, t) {
            Ok(g) => g,
            Err(e) => return Err(fail(e, curve)),
        };
        if !g.loss.absolute.is_finite() {
            let e = LabError::Diverged {
                step: t as usize,
                detail: "loss became non-finite".into(),
            };
            return Err(fail(e, curve));
        }
        if t % config.log_stride == 0 || t == config.iters {
            curve.losses.push(CurvePoint {
                step: t,
                loss: g.loss.absolute,
                relative_loss: g.loss.relative,
            });
        }
        if t == config.iters {
            curve.final_loss = g.loss.absolute;
            curve.final_relative_loss = g.loss.relative;
            return Ok(curve);
        }
        let mut params = adapters.params_mut();
        if let Err(e) = adamw_step(&mut params, &g.grads, &mut opt, config.lr) {
            return Err(fail(e, curve));
        }
        t += 1;
    }
}

fn kind_tag(kind: AdapterKind) -> u64 {
    match kind {
        AdapterKind::Lora => 0,
        AdapterKind::Singlora => 1,
    }
}

/// `‖M − Mᵀ‖ / max(‖M‖, 1e-30)` for `M = (Aq·Aqᵀ)·(Ak·Akᵀ)`.
pub fn symmetric_product_asymmetry(aq: &Matrix, ak: &Matrix) -> Result<f64> {
    if aq.rows() != ak.rows() {
        return invalid(format!(
            "factors must share a row count, got {}x{} and {}x{}",
            aq.rows(),
            aq.cols(),
            ak.rows(),
            ak.cols()
        ));
    }
    // Aq·(Aqᵀ·Ak)·Akᵀ, never forming the d×d Gram matrices.
    let m = aq.matmul(&aq.matmul_tn(ak)).matmul_nt(ak);
    let skew = m.sub(&m.transpose()).frobenius_norm();
    Ok(skew / m.frobenius_norm().max(1e-30))
}

/// Settings for a multi-seed LoRA vs SingLoRA comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub seq_len: usize,
    pub dim: usize,
    pub lora_rank: usize,
    pub singlora_rank: usize,
    pub lr: f64,
    pub iters: u64,
    /// Ramp threshold `T`; `None` picks 1% of `iters`, `Some(0)` disables the ramp.
    pub ramp_threshold: Option<u64>,
    pub log_stride: u64,
    pub seeds: usize,
    pub optimizer: AdamWConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seq_len: 32,
            dim: 128,
            lora_rank: 8,
            singlora_rank: 16,
            lr: 1e-4,
            iters: 15_000,
            ramp_threshold: None,
            log_stride: 100,
            seeds: 20,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl BenchConfig {
    /// The smaller profile: `d = 64`, 5000 iterations.
    pub fn reduced() -> Self {
        Self {
            dim: 64,
            iters: 5_000,
            ..Self::default()
        }
    }

    pub fn ramp(&self) -> RampSchedule {
        match self.ramp_threshold {
            Some(t) => RampSchedule::new(t),
            None => RampSchedule::for_total_steps(self.iters),
        }
    }

    fn train_config(&self, rank: usize) -> TrainConfig {
        TrainConfig {
            rank,
            lr: self.lr,
            iters: self.iters,
            ramp: self.ramp(),
            log_stride: self.log_stride,
            optimizer: self.optimizer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.dim == 0 {
            return invalid("seq_len and dim must be positive");
        }
        if self.seeds == 0 {
            return invalid("at least one seed is required");
        }
        self.train_config(self.lora_rank).validate()?;
        self.train_config(self.singlora_rank).validate()
    }

    /// Errors unless both adapters have the same number of trainable entries.
    pub fn check_parity(&self) -> Result<usize> {
        let lora = param_count(AdapterKind::Lora, self.dim, self.dim, self.lora_rank);
        let sing = param_count(
            AdapterKind::Singlora,
            self.dim,
            self.dim,
            self.singlora_rank,
        );
        if lora != sing {
            return invalid(format!(
                "parameter counts differ: LoRA r={} has {lora}, SingLoRA r={} has {sing}",
                self.lora_rank, self.singlora_rank
            ));
        }
        Ok(lora)
    }
}

/// Seed of the `index`-th instance in a sweep.
pub fn instance_seed(master_seed: u64, index: usize) -> u64 {
    derive_stream_id(&[master_seed, index as u64])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub params_per_projection: usize,
    pub ramp_threshold: u64,
    pub median_final_relative_lora: f64,
    pub median_final_relative_singlora: f64,
    pub median_final_loss_lora: f64,
    pub median_final_loss_singlora: f64,
    /// `median(LoRA) / median(SingLoRA)` on the relative loss.
    pub separation_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub summary: BenchSummary,
    /// All curves, LoRA first, each group in seed order.
    pub curves: Vec<LossCurve>,
}

impl BenchReport {
    pub fn curves_of(&self, kind: AdapterKind) -> impl Iterator<Item = &LossCurve> {
        self.curves.iter().filter(move |c| c.method == kind)
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains both methods on `config.seeds` instances, seeds in parallel.
pub fn run_benchmark(config: &BenchConfig, master_seed: u64) -> Result<BenchReport> {
    config.validate()?;
    let params = config.check_parity()?;
    let runs: Vec<(LossCurve, LossCurve)> = (0..config.seeds)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let inst = gen_instance(instance_seed(master_seed, i), config.seq_len, config.dim)?;
            let lora = train_attn(
                AdapterKind::Lora,
                &inst,
                &config.train_config(config.lora_rank),
            )?;
            let sing = train_attn(
                AdapterKind::Singlora,
                &inst,
                &config.train_config(config.singlora_rank),
            )?;
            Ok((lora, sing))
        })
        .collect::<Result<_>>()?;

    let (lora, sing): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    let med =
        |cs: &[LossCurve], f: fn(&LossCurve) -> f64| median(&cs.iter().map(f).collect::<Vec<_>>());
    let rel_l = med(&lora, |c| c.final_relative_loss);
    let rel_s = med(&sing, |c| c.final_relative_loss);
    let summary = BenchSummary {
        params_per_projection: params,
        ramp_threshold: config.ramp().threshold(),
        median_final_relative_lora: rel_l,
        median_final_relative_singlora: rel_s,
        median_final_loss_lora: med(&lora, |c| c.final_loss),
        median_final_loss_singlora: med(&sing, |c| c.final_loss),
        separation_ratio: rel_l / rel_s,
    };
    let mut curves = lora;
    curves.extend(sing);
    Ok(BenchReport { summary, curves })
}

/// Median final SingLoRA relative loss for each ramp threshold fraction of `iters`.
pub fn ramp_sweep(
    config: &BenchConfig,
    master_seed: u64,
    fractions: &[f64],
) -> Result<Vec<(f64, u64, f64)>> {
    config.validate()?;
    let mut out = Vec::with_capacity(fractions.len());
    for &frac in fractions {
        if !(frac > 0.0 && frac.is_finite()) {
            return invalid(format!("ramp fraction must be positive, got {frac}"));
        }
        let ramp = RampSchedule::from_fraction(config.iters, frac);
        let tc = TrainConfig {
            ramp,
            ..config.train_config(config.singlora_rank)
        };
        let finals: Vec<f64> = (0..config.seeds)
            .into_par_iter()
            .map(|i| -> Result<f64> {
                let inst = gen_instance(instance_seed(master_seed, i), config.seq_len, config.dim)?;
                Ok(train_attn(AdapterKind::Singlora, &inst, &tc)?.final_relative_loss)
            })
            .collect::<Result<_>>()?;
        out.push((frac, ramp.threshold(), median(&finals)));
    }
    Ok(out)
}
