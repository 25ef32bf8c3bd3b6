//! LoRA and SingLoRA parameterizations.
//!
//! Shapes follow the adapter literature: an adapted weight `W₀` has
//! `d_in` rows and `d_out` columns, and the delta has the same shape.
//! The forward pass treats each row of an input batch as a vector that the
//! weight left-multiplies, so `adapted_forward` returns `X·(W₀ + Δ)ᵀ`.
//!
//! * LoRA: `Δ = (α/r)·B·A`, `B ∈ ℝ^{d_in×r}` zero-initialized,
//!   `A ∈ ℝ^{r×d_out}` Kaiming-initialized.
//! * SingLoRA: `Δ = (α/r)·u(t)·A*·Aᵀ` with a single `A` allocated on the
//!   larger side and `A*` its first `min(d_in, d_out)` rows. For square
//!   weights `A* = A` and the delta is a scaled Gram matrix. When
//!   `d_in > d_out` the roles swap and `Δ = (α/r)·u(t)·A·A*ᵀ`, so callers
//!   never have to pre-orient their shapes.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::matcore::{kaiming_init, Matrix, RngStream};

/// Adaptation-rate schedule `u(t) = min(t/T, 1)`.
///
/// A threshold of zero disables the ramp (`u ≡ 1`), which is the literal
/// adapter used in the attention benchmark without warm-up.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RampSchedule {
    threshold: u64,
}

impl RampSchedule {
    pub fn new(threshold: u64) -> Self {
        Self { threshold }
    }

    pub fn disabled() -> Self {
        Self { threshold: 0 }
    }

    /// Threshold at 1% of the planned number of training steps (at least 1).
    pub fn for_total_steps(total_steps: u64) -> Self {
        Self::from_fraction(total_steps, 0.01)
    }

    /// Threshold at `fraction` of `total_steps`, rounded, at least 1.
    pub fn from_fraction(total_steps: u64, fraction: f64) -> Self {
        let t = (total_steps as f64 * fraction).round().max(1.0);
        Self {
            threshold: t as u64,
        }
    }

    pub fn threshold(&self) -> u64 {
        self.threshold
    }

    pub fn is_disabled(&self) -> bool {
        self.threshold == 0
    }

    pub fn u(&self, t: u64) -> f64 {
        if self.threshold == 0 {
            1.0
        } else {
            (t as f64 / self.threshold as f64).min(1.0)
        }
    }
}

/// `min(t/T, 1)`; `T` must be at least 1.
pub fn ramp_u(t: u64, threshold: u64) -> Result<f64> {
    if threshold == 0 {
        return invalid("ramp threshold T must be at least 1");
    }
    Ok(RampSchedule::new(threshold).u(t))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Lora,
    Singlora,
}

impl std::fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AdapterKind::Lora => "lora",
            AdapterKind::Singlora => "singlora",
        })
    }
}

/// Number of trainable parameters: `r·(d_in + d_out)` for LoRA and
/// `max(d_in, d_out)·r` for SingLoRA.
pub fn param_count(kind: AdapterKind, d_in: usize, d_out: usize, rank: usize) -> usize {
    match kind {
        AdapterKind::Lora => rank * (d_in + d_out),
        AdapterKind::Singlora => d_in.max(d_out) * rank,
    }
}

/// Common surface of both adapter kinds.
pub trait Adapter {
    fn kind(&self) -> AdapterKind;
    fn d_in(&self) -> usize;
    fn d_out(&self) -> usize;
    fn rank(&self) -> usize;
    fn alpha(&self) -> f64;

    /// Materialized `d_in × d_out` delta at step `t`.
    fn delta(&self, t: u64) -> Matrix;

    /// `X·Δ(t)ᵀ` for a batch `X` with `d_out` columns, evaluated through the
    /// factors. Returns `None` when the delta is exactly zero.
    fn apply_delta(&self, x: &Matrix, t: u64) -> Option<Matrix>;

    fn param_count(&self) -> usize {
        param_count(self.kind(), self.d_in(), self.d_out(), self.rank())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SingLoraAdapter {
    a: Matrix,
    rank: usize,
    alpha: f64,
    d_in: usize,
    d_out: usize,
    ramp: RampSchedule,
}

impl SingLoraAdapter {
    /// Fresh adapter with `A` Kaiming-initialized (fan-in = the larger side).
    pub fn new(
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        ramp: RampSchedule,
        rng: &mut RngStream,
    ) -> Result<Self> {
        check_singlora_shape(d_in, d_out, rank, alpha)?;
        let large = d_in.max(d_out);
        let a = kaiming_init(large, rank, large, rng)?;
        Ok(Self {
            a,
            rank,
            alpha,
            d_in,
            d_out,
            ramp,
        })
    }

    /// Adapter around an explicit factor of shape `max(d_in, d_out) × r`.
    pub fn from_factor(
        a: Matrix,
        d_in: usize,
        d_out: usize,
        alpha: f64,
        ramp: RampSchedule,
    ) -> Result<Self> {
        let rank = a.cols();
        check_singlora_shape(d_in, d_out, rank, alpha)?;
        if a.rows() != d_in.max(d_out) {
            return invalid(format!(
                "SingLoRA factor must have {} rows, got {}",
                d_in.max(d_out),
                a.rows()
            ));
        }
        Ok(Self {
            a,
            rank,
            alpha,
            d_in,
            d_out,
            ramp,
        })
    }

    pub fn factor(&self) -> &Matrix {
        &self.a
    }

    pub fn factor_mut(&mut self) -> &mut Matrix {
        &mut self.a
    }

    pub fn ramp(&self) -> RampSchedule {
        self.ramp
    }

    /// The truncation `A*`: the first `min(d_in, d_out)` rows of `A`.
    pub fn truncated(&self) -> Matrix {
        self.a.top_rows(self.d_in.min(self.d_out))
    }

    /// Scalar multiplying the factored product at step `t`: `(α/r)·u(t)`.
    pub fn scale_at(&self, t: u64) -> f64 {
        self.alpha / self.rank as f64 * self.ramp.u(t)
    }
}

fn check_singlora_shape(d_in: usize, d_out: usize, rank: usize, alpha: f64) -> Result<()> {
    if rank == 0 {
        return invalid("rank must be at least 1");
    }
    if rank > d_in.min(d_out) {
        return invalid(format!(
            "SingLoRA rank {rank} exceeds the smaller side {} of a {d_in}x{d_out} weight",
            d_in.min(d_out)
        ));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return invalid(format!("alpha must be positive, got {alpha}"));
    }
    Ok(())
}

/// `(α/r)·u(t)·A*Aᵀ` as a `d_in × d_out` matrix.
pub fn singlora_delta(adapter: &SingLoraAdapter, t: u64) -> Matrix {
    let s = adapter.scale_at(t);
    let star = adapter.truncated();
    let gram = if adapter.d_in <= adapter.d_out {
        star.matmul_nt(&adapter.a)
    } else {
        adapter.a.matmul_nt(&star)
    };
    gram.scale(s)
}

impl Adapter for SingLoraAdapter {
    fn kind(&self) -> AdapterKind {
        AdapterKind::Singlora
    }
    fn d_in(&self) -> usize {
        self.d_in
    }
    fn d_out(&self) -> usize {
        self.d_out
    }
    fn rank(&self) -> usize {
        self.rank
    }
    fn alpha(&self) -> f64 {
        self.alpha
    }

    fn delta(&self, t: u64) -> Matrix {
        singlora_delta(self, t)
    }

    fn apply_delta(&self, x: &Matrix, t: u64) -> Option<Matrix> {
        let s = self.scale_at(t);
        if s == 0.0 {
            return None;
        }
        let star = self.truncated();
        // X·Δᵀ: Δᵀ = s·A·A*ᵀ (d_in ≤ d_out) or s·A*·Aᵀ (d_in > d_out).
        let out = if self.d_in <= self.d_out {
            x.matmul(&self.a).matmul_nt(&star)
        } else {
            x.matmul(&star).matmul_nt(&self.a)
        };
        Some(out.scale(s))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    b: Matrix,
    a: Matrix,
    rank: usize,
    alpha: f64,
}

impl LoraAdapter {
    /// Fresh adapter: `B = 0`, `A` Kaiming with fan-in `d_out`.
    pub fn new(
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        check_lora_shape(d_in, d_out, rank, alpha)?;
        let a = kaiming_init(rank, d_out, d_out, rng)?;
        Ok(Self {
            b: Matrix::zeros(d_in, rank),
            a,
            rank,
            alpha,
        })
    }

    pub fn from_factors(b: Matrix, a: Matrix, alpha: f64) -> Result<Self> {
        if b.cols() != a.rows() {
            return invalid(format!(
                "LoRA factors disagree on rank: B is {}x{}, A is {}x{}",
                b.rows(),
                b.cols(),
                a.rows(),
                a.cols()
            ));
        }
        let rank = b.cols();
        check_lora_shape(b.rows(), a.cols(), rank, alpha)?;
        Ok(Self { b, a, rank, alpha })
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    /// Mutable `(B, A)`.
    pub fn factors_mut(&mut self) -> (&mut Matrix, &mut Matrix) {
        (&mut self.b, &mut self.a)
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

fn check_lora_shape(d_in: usize, d_out: usize, rank: usize, alpha: f64) -> Result<()> {
    if rank == 0 {
        return invalid("rank must be at least 1");
    }
    if rank > d_in.min(d_out) {
        return invalid(format!("LoRA rank {rank} exceeds min({d_in}, {d_out})"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return invalid(format!("alpha must be positive, got {alpha}"));
    }
    Ok(())
}

/// `(α/r)·B·A`.
pub fn lora_delta(adapter: &LoraAdapter) -> Matrix {
    adapter.b.matmul(&adapter.a).scale(adapter.scale())
}

impl Adapter for LoraAdapter {
    fn kind(&self) -> AdapterKind {
        AdapterKind::Lora
    }
    fn d_in(&self) -> usize {
        self.b.rows()
    }
    fn d_out(&self) -> usize {
        self.a.cols()
    }
    fn rank(&self) -> usize {
        self.rank
    }
    fn alpha(&self) -> f64 {
        self.alpha
    }

    fn delta(&self, _t: u64) -> Matrix {
        lora_delta(self)
    }

    fn apply_delta(&self, x: &Matrix, _t: u64) -> Option<Matrix> {
        if self.b.as_slice().iter().all(|&v| v == 0.0) {
            return None;
        }
        // X·(BA)ᵀ = (X·Aᵀ)·Bᵀ
        Some(x.matmul_nt(&self.a).matmul_nt(&self.b).scale(self.scale()))
    }
}

/// `X·(W₀ + Δ(t))ᵀ`: each row of `X` is an input vector of length `W₀.cols()`.
pub fn adapted_forward(w0: &Matrix, adapter: &dyn Adapter, t: u64, x: &Matrix) -> Result<Matrix> {
    if w0.shape() != (adapter.d_in(), adapter.d_out()) {
        return invalid(format!(
            "W0 is {}x{} but the adapter is {}x{}",
            w0.rows(),
            w0.cols(),
            adapter.d_in(),
            adapter.d_out()
        ));
    }
    if x.cols() != w0.cols() {
        return invalid(format!(
            "input batch has {} columns, weight expects {}",
            x.cols(),
            w0.cols()
        ));
    }
    let base = x.matmul_nt(w0);
    Ok(match adapter.apply_delta(x, t) {
        Some(d) => base.add(&d),
        None => base,
    })
}

/// Lossless decimal rendering: 17 significant digits round-trip every `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(s: &str) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| LabError::InvalidArgument(format!("not a number: {s:?}")))?;
    if !v.is_finite() {
        return invalid(format!("non-finite value {s:?}"));
    }
    Ok(v)
}

/// On-disk adapter document. Factor entries are row-major decimal strings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterDocument {
    pub kind: AdapterKind,
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub alpha: String,
    #[serde(rename = "T")]
    pub ramp_threshold: Option<u64>,
    pub factors: Vec<FactorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<String>,
}

impl FactorEntry {
    fn from_matrix(name: &str, m: &Matrix) -> Self {
        Self {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
            entries: m.as_slice().iter().map(|&v| format_f64(v)).collect(),
        }
    }

    fn to_matrix(&self) -> Result<Matrix> {
        let data = self
            .entries
            .iter()
            .map(|s| parse_f64(s))
            .collect::<Result<Vec<_>>>()?;
        Matrix::new(self.rows, self.cols, data)
    }
}

/// Either adapter, as loaded from a document.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyAdapter {
    Lora(LoraAdapter),
    SingLora(SingLoraAdapter),
}

impl AnyAdapter {
    pub fn as_adapter(&self) -> &dyn Adapter {
        match self {
            AnyAdapter::Lora(a) => a,
            AnyAdapter::SingLora(a) => a,
        }
    }

    pub fn to_document(&self) -> AdapterDocument {
        match self {
            AnyAdapter::Lora(l) => AdapterDocument {
                kind: AdapterKind::Lora,
                d_in: l.d_in(),
                d_out: l.d_out(),
                rank: l.rank,
                alpha: format_f64(l.alpha),
                ramp_threshold: None,
                factors: vec![
                    FactorEntry::from_matrix("B", &l.b),
                    FactorEntry::from_matrix("A", &l.a),
                ],
            },
            AnyAdapter::SingLora(s) => AdapterDocument {
                kind: AdapterKind::Singlora,
                d_in: s.d_in,
                d_out: s.d_out,
                rank: s.rank,
                alpha: format_f64(s.alpha),
                ramp_threshold: Some(s.ramp.threshold()),
                factors: vec![FactorEntry::from_matrix("A", &s.a)],
            },
        }
    }

    pub fn from_document(doc: &AdapterDocument) -> Result<Self> {
        let alpha = parse_f64(&doc.alpha)?;
        let find = |name: &str| -> Result<Matrix> {
            doc.factors
                .iter()
                .find(|f| f.name == name)
                .ok_or_else(|| LabError::InvalidArgument(format!("missing factor {name}")))?
                .to_matrix()
        };
        let adapter = match doc.kind {
            AdapterKind::Lora => {
                if doc.factors.len() != 2 {
                    return invalid("LoRA document needs exactly factors B and A");
                }
                AnyAdapter::Lora(LoraAdapter::from_factors(find("B")?, find("A")?, alpha)?)
            }
            AdapterKind::Singlora => {
                if doc.factors.len() != 1 {
                    return invalid("SingLoRA document needs exactly factor A");
                }
                let ramp = RampSchedule::new(doc.ramp_threshold.unwrap_or(0));
                AnyAdapter::SingLora(SingLoraAdapter::from_factor(
                    find("A")?,
                    doc.d_in,
                    doc.d_out,
                    alpha,
                    ramp,
                )?)
            }
        };
        let a = adapter.as_adapter();
        if (a.d_in(), a.d_out(), a.rank()) != (doc.d_in, doc.d_out, doc.rank) {
            return invalid(format!(
                "document declares {}x{} rank {}, factors give {}x{} rank {}",
                doc.d_in,
                doc.d_out,
                doc.rank,
                a.d_in(),
                a.d_out(),
                a.rank()
            ));
        }
        Ok(adapter)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: AdapterDocument = serde_json::from_str(s)?;
        Self::from_document(&doc)
    }
}
