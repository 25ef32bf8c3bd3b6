//! Numerical checks of transformation invariance under gradient descent.
//!
//! Two factorizations of the same adapter are built from one another
//! (`A₂ = A₁·Q` for SingLoRA, `(s·A₁, B₁/s)` for LoRA), each receives one
//! gradient-descent step driven by the same upstream gradient `∇Z`, and the
//! products that decide whether the adapted weight moves identically are
//! compared:
//!
//! ```text
//! (i)   δA₁·B₁  = δA₂·B₂
//! (ii)  A₁·δB₁  = A₂·δB₂
//! (iii) δA₁·δB₁ = δA₂·δB₂
//! ```
//!
//! For SingLoRA `B = Aᵀ` (or `Aᵀ` paired with the truncation `A*` for
//! rectangular weights). Residuals are relative Frobenius distances.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::matcore::{gaussian_matrix, orthogonality_defect, random_orthogonal, Matrix, RngStream};

pub const DEFAULT_TOLERANCE: f64 = 1e-10;

/// `‖lhs − rhs‖_F / max(‖lhs‖_F, ‖rhs‖_F)`, zero when both vanish.
pub fn relative_residual(lhs: &Matrix, rhs: &Matrix) -> f64 {
    let scale = lhs.frobenius_norm().max(rhs.frobenius_norm());
    if scale == 0.0 {
        return 0.0;
    }
    lhs.sub(rhs).frobenius_norm() / scale
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub residual_i: f64,
    pub residual_ii: f64,
    pub residual_iii: f64,
    /// `(A₁+δA₁)*(A₁+δA₁)ᵀ` against the same product for `A₂`.
    pub residual_post_update: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl ConditionReport {
    fn new(residuals: [f64; 4], tolerance: f64) -> Self {
        Self {
            residual_i: residuals[0],
            residual_ii: residuals[1],
            residual_iii: residuals[2],
            residual_post_update: residuals[3],
            tolerance,
            passed: residuals.iter().all(|r| *r <= tolerance),
        }
    }

    pub fn residuals(&self) -> [f64; 4] {
        [
            self.residual_i,
            self.residual_ii,
            self.residual_iii,
            self.residual_post_update,
        ]
    }
}

fn check_orthogonal(q: &Matrix, r: usize) -> Result<()> {
    if q.shape() != (r, r) {
        return invalid(format!("Q must be {r}x{r}, got {}x{}", q.rows(), q.cols()));
    }
    let defect = orthogonality_defect(q);
    if defect > 1e-10 {
        return invalid(format!("Q is not orthogonal: ‖QᵀQ − I‖_F = {defect:e}"));
    }
    Ok(())
}

fn check_full_column_rank(a: &Matrix) -> Result<()> {
    let r = a.qr()?.r;
    let diag: Vec<f64> = (0..r.rows()).map(|i| r[(i, i)].abs()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > 1e-8 * max) {
        return invalid(format!(
            "A is numerically rank-deficient (min |R_ii| = {min:e})"
        ));
    }
    Ok(())
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta.is_finite()) {
        return invalid(format!("eta must be positive, got {eta}"));
    }
    Ok(())
}

/// `∂L/∂A` for `Z = A·Aᵀ` given `∇Z` of any symmetry: `(∇Z + ∇Zᵀ)·A`.
pub fn singlora_gradient(a: &Matrix, grad_z: &Matrix) -> Matrix {
    grad_z.add(&grad_z.transpose()).matmul(a)
}

/// `∂L/∂A` for `Z = A*·Aᵀ` (`A*` the first `d_in` rows of `A`) given
/// `∇Z ∈ ℝ^{d_in×d_out}`: `Pᵀ(∇Z·A) + ∇Zᵀ·A*`, where `Pᵀ` pads with zero rows.
pub fn truncated_gradient(a: &Matrix, grad_z: &Matrix) -> Matrix {
    let d_in = grad_z.rows();
    let star = a.top_rows(d_in);
    let mut g = grad_z.matmul_tn(&star);
    let top = grad_z.matmul(a);
    for i in 0..d_in {
        for j in 0..a.cols() {
            g[(i, j)] += top[(i, j)];
        }
    }
    g
}

/// Square SingLoRA: `A₂ = A·Q`, one GD step on each, conditions (i)–(iii)
/// with `B = Aᵀ`.
pub fn singlora_invariance_check(
    a: &Matrix,
    q: &Matrix,
    grad_z: &Matrix,
    eta: f64,
) -> Result<ConditionReport> {
    let (n, r) = a.shape();
    check_orthogonal(q, r)?;
    check_eta(eta)?;
    if grad_z.shape() != (n, n) {
        return invalid(format!(
            "∇Z must be {n}x{n}, got {}x{}",
            grad_z.rows(),
            grad_z.cols()
        ));
    }
    check_full_column_rank(a)?;

    let a1 = a.clone();
    let a2 = a.matmul(q);
    let d1 = singlora_gradient(&a1, grad_z).scale(-eta);
    let d2 = singlora_gradient(&a2, grad_z).scale(-eta);
    let p1 = a1.add(&d1);
    let p2 = a2.add(&d2);
    Ok(ConditionReport::new(
        [
            relative_residual(&d1.matmul_nt(&a1), &d2.matmul_nt(&a2)),
            relative_residual(&a1.matmul_nt(&d1), &a2.matmul_nt(&d2)),
            relative_residual(&d1.matmul_nt(&d1), &d2.matmul_nt(&d2)),
            relative_residual(&p1.matmul_nt(&p1), &p2.matmul_nt(&p2)),
        ],
        DEFAULT_TOLERANCE,
    ))
}

/// Rectangular SingLoRA with truncation. `a` is `d_out × r`, `grad_z` is
/// `d_in × d_out` with `d_in ≤ d_out`; `d_in = d_out` reduces to the square
/// check. Conditions use the truncated forms `δA*·Aᵀ`, `A*·δAᵀ`, `δA*·δAᵀ`.
pub fn nonsquare_invariance_check(
    a: &Matrix,
    q: &Matrix,
    grad_z: &Matrix,
    eta: f64,
) -> Result<ConditionReport> {
    let (d_out, r) = a.shape();
    let d_in = grad_z.rows();
    if grad_z.cols() != d_out {
        return invalid(format!(
            "∇Z must have {d_out} columns, got {}",
            grad_z.cols()
        ));
    }
    if d_in > d_out {
        return invalid(format!(
            "truncated check needs d_in <= d_out, got {d_in} > {d_out}; transpose the problem first"
        ));
    }
    if r > d_in {
        return invalid(format!("rank {r} exceeds d_in {d_in}"));
    }
    check_orthogonal(q, r)?;
    check_eta(eta)?;
    check_full_column_rank(&a.top_rows(d_in))?;

    let a1 = a.clone();
    let a2 = a.matmul(q);
    let d1 = truncated_gradient(&a1, grad_z).scale(-eta);
    let d2 = truncated_gradient(&a2, grad_z).scale(-eta);
    let p1 = a1.add(&d1);
    let p2 = a2.add(&d2);
    let star = |m: &Matrix| m.top_rows(d_in);
    Ok(ConditionReport::new(
        [
            relative_residual(&star(&d1).matmul_nt(&a1), &star(&d2).matmul_nt(&a2)),
            relative_residual(&star(&a1).matmul_nt(&d1), &star(&a2).matmul_nt(&d2)),
            relative_residual(&star(&d1).matmul_nt(&d1), &star(&d2).matmul_nt(&d2)),
            relative_residual(&star(&p1).matmul_nt(&p1), &star(&p2).matmul_nt(&p2)),
        ],
        DEFAULT_TOLERANCE,
    ))
}

#[derive(Clone, Debug)]
pub struct ScaleCounterexample {
    /// `δA₁·B₁`
    pub lhs: Matrix,
    /// `δA₂·B₂`
    pub rhs: Matrix,
    /// Least-squares scalar `k` minimizing `‖lhs − k·rhs‖_F`.
    pub fitted_ratio: f64,
    /// Relative residual of condition (i) between the two parameterizations.
    pub residual_i: f64,
}

/// LoRA `Z = A·B` reparameterized as `(s·A, B/s)`. With `∇A = ∇Z·Bᵀ` the
/// first condition is off by exactly `s²`.
pub fn lora_scale_counterexample(
    a: &Matrix,
    b: &Matrix,
    s: f64,
    grad_z: &Matrix,
    eta: f64,
) -> Result<ScaleCounterexample> {
    if s == 0.0 || !s.is_finite() {
        return invalid(format!("scale s must be finite and nonzero, got {s}"));
    }
    check_eta(eta)?;
    if a.cols() != b.rows() || grad_z.shape() != (a.rows(), b.cols()) {
        return invalid(format!(
            "shapes do not conform: A {}x{}, B {}x{}, ∇Z {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols(),
            grad_z.rows(),
            grad_z.cols()
        ));
    }
    // A₂ = s·A₁ does not enter ∇A₂ = ∇Z·B₂ᵀ, only B₂ = B₁/s does.
    let b2 = b.scale(1.0 / s);
    let da1 = grad_z.matmul_nt(b).scale(-eta);
    let da2 = grad_z.matmul_nt(&b2).scale(-eta);
    let lhs = da1.matmul(b);
    let rhs = da2.matmul(&b2);
    let denom = rhs.sum_of_squares();
    if denom == 0.0 {
        return invalid("degenerate draw: δA₂·B₂ vanishes");
    }
    let fitted_ratio = lhs.frobenius_dot(&rhs) / denom;
    let residual_i = relative_residual(&lhs, &rhs);
    Ok(ScaleCounterexample {
        lhs,
        rhs,
        fitted_ratio,
        residual_i,
    })
}

/// One line of a batch report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub kind: String,
    /// `[d_in, d_out, r]`
    pub shape: [usize; 3],
    pub seed: u64,
    /// `[(i), (ii), (iii), post-update]`
    pub residuals: [f64; 4],
    pub passed: bool,
}

const SQUARE_SIZES: [usize; 3] = [32, 64, 128];
const RANKS: [usize; 3] = [2, 4, 8];
const NONSQUARE_SHAPES: [(usize, usize); 4] = [(32, 48), (32, 96), (64, 96), (64, 128)];
const BATCH_ETA: f64 = 0.01;

fn pick<T: Copy>(rng: &mut RngStream, options: &[T]) -> T {
    let i = ((rng.uniform() * options.len() as f64) as usize).min(options.len() - 1);
    options[i]
}

/// Random square check number `trial`.
pub fn square_trial(master_seed: u64, trial: u64) -> Result<CheckRecord> {
    let mut rng = RngStream::derived(master_seed, &[0, trial]);
    let n = pick(&mut rng, &SQUARE_SIZES);
    let r = pick(&mut rng, &RANKS);
    let a = gaussian_matrix(n, r, (n as f64).powf(-0.5), &mut rng);
    let q = random_orthogonal(r, &mut rng)?;
    let g = gaussian_matrix(n, n, 1.0, &mut rng);
    let rep = singlora_invariance_check(&a, &q, &g, BATCH_ETA)?;
    Ok(CheckRecord {
        kind: "square".into(),
        shape: [n, n, r],
        seed: trial,
        residuals: rep.residuals(),
        passed: rep.passed,
    })
}

/// Random truncated (`d_in < d_out`) check number `trial`.
pub fn nonsquare_trial(master_seed: u64, trial: u64) -> Result<CheckRecord> {
    let mut rng = RngStream::derived(master_seed, &[1, trial]);
    let (d_in, d_out) = pick(&mut rng, &NONSQUARE_SHAPES);
    let r = pick(&mut rng, &RANKS);
    let a = gaussian_matrix(d_out, r, (d_out as f64).powf(-0.5), &mut rng);
    let q = random_orthogonal(r, &mut rng)?;
    let g = gaussian_matrix(d_in, d_out, 1.0, &mut rng);
    let rep = nonsquare_invariance_check(&a, &q, &g, BATCH_ETA)?;
    Ok(CheckRecord {
        kind: "nonsquare".into(),
        shape: [d_in, d_out, r],
        seed: trial,
        residuals: rep.residuals(),
        passed: rep.passed,
    })
}

/// `trials` square checks followed by `trials` truncated checks.
pub fn run_invariance_batch(master_seed: u64, trials: u64) -> Result<Vec<CheckRecord>> {
    let mut out = Vec::with_capacity(2 * trials as usize);
    for t in 0..trials {
        out.push(square_trial(master_seed, t)?);
    }
    for t in 0..trials {
        out.push(nonsquare_trial(master_seed, t)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draw(seed: u64, n: usize, r: usize) -> (Matrix, Matrix, Matrix) {
        let mut rng = RngStream::new(seed, 0);
        (
            gaussian_matrix(n, r, 1.0, &mut rng),
            random_orthogonal(r, &mut rng).unwrap(),
            gaussian_matrix(n, n, 1.0, &mut rng),
        )
    }

    #[test]
    fn identity_rotation_gives_zero_residuals() {
        let (a, _, g) = draw(1, 16, 3);
        let rep = singlora_invariance_check(&a, &Matrix::identity(3), &g, 0.1).unwrap();
        assert_eq!(rep.residuals(), [0.0; 4]);
        assert!(rep.passed);
        let rect = Matrix::from_fn(10, 16, |i, j| g[(i, j)]);
        let rep = nonsquare_invariance_check(&a, &Matrix::identity(3), &rect, 0.1).unwrap();
        assert_eq!(rep.residuals(), [0.0; 4]);
    }

    #[test]
    fn zero_gradient_gives_zero_residuals() {
        let (a, q, _) = draw(2, 16, 3);
        let rep = singlora_invariance_check(&a, &q, &Matrix::zeros(16, 16), 0.1).unwrap();
        assert_eq!(&rep.residuals()[..3], &[0.0; 3]);
        assert!(rep.passed);
    }

    #[test]
    fn random_square_passes() {
        let (a, q, g) = draw(3, 64, 4);
        let rep = singlora_invariance_check(&a, &q, &g, 0.05).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn random_nonsquare_passes() {
        let mut rng = RngStream::new(4, 0);
        let a = gaussian_matrix(96, 4, 1.0, &mut rng);
        let q = random_orthogonal(4, &mut rng).unwrap();
        let g = gaussian_matrix(64, 96, 1.0, &mut rng);
        let rep = nonsquare_invariance_check(&a, &q, &g, 0.05).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn symmetric_gradient_matches_doubled_form() {
        let (a, _, g) = draw(5, 12, 2);
        let sym = g.add(&g.transpose());
        let two = sym.matmul(&a).scale(2.0);
        assert!(singlora_gradient(&a, &sym).sub(&two).max_abs() < 1e-12);
    }

    #[test]
    fn degenerate_truncation_matches_square() {
        let (a, q, g) = draw(6, 24, 3);
        let sq = singlora_invariance_check(&a, &q, &g, 0.1).unwrap();
        let ns = nonsquare_invariance_check(&a, &q, &g, 0.1).unwrap();
        for (x, y) in sq.residuals().iter().zip(ns.residuals()) {
            assert!((x - y).abs() <= 1e-12);
        }
        let diff = truncated_gradient(&a, &g).sub(&singlora_gradient(&a, &g));
        assert!(diff.max_abs() <= 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (a, q, g) = draw(7, 8, 2);
        let skew = Matrix::new(2, 2, vec![1.0, 0.5, 0.0, 1.0]).unwrap();
        assert!(singlora_invariance_check(&a, &skew, &g, 0.1).is_err());
        assert!(singlora_invariance_check(&a, &q, &g, 0.0).is_err());
        // d_in = 8 > d_out = 4
        assert!(
            nonsquare_invariance_check(&Matrix::zeros(4, 2), &q, &Matrix::zeros(8, 4), 0.1)
                .is_err()
        );
        let rank1 = Matrix::from_fn(8, 2, |i, _| i as f64 + 1.0);
        assert!(singlora_invariance_check(&rank1, &q, &g, 0.1).is_err());
    }

    #[test]
    fn scale_counterexample_ratio() {
        let mut rng = RngStream::new(8, 0);
        let a = gaussian_matrix(10, 3, 1.0, &mut rng);
        let b = gaussian_matrix(3, 7, 1.0, &mut rng);
        let g = gaussian_matrix(10, 7, 1.0, &mut rng);
        let one = lora_scale_counterexample(&a, &b, 1.0, &g, 0.1).unwrap();
        assert_eq!(one.lhs, one.rhs);
        assert_eq!(one.fitted_ratio, 1.0);
        for s in [2.0, 10.0, 0.5, -3.0] {
            let ce = lora_scale_counterexample(&a, &b, s, &g, 0.1).unwrap();
            assert!((ce.fitted_ratio - s * s).abs() <= 1e-10 * s * s, "s={s}");
            let floor = (s * s - 1.0f64).abs() / (s * s + 1.0) - 1e-6;
            assert!(ce.residual_i >= floor);
        }
        assert!(lora_scale_counterexample(&a, &b, 0.0, &g, 0.1).is_err());
    }

    #[test]
    fn batch_is_deterministic_and_passes() {
        let a = run_invariance_batch(3, 5).unwrap();
        assert_eq!(a, run_invariance_batch(3, 5).unwrap());
        assert_eq!(a.len(), 10);
        assert!(a.iter().all(|r| r.passed));
    }
}
