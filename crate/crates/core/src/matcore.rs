//! Dense double-precision matrices and the seeded randomness they are
//! filled from.
//!
//! Everything here is deliberately small: a row-major [`Matrix`], the handful
//! of products the adapters and training loops need (`A·B`, `Aᵀ·B`, `A·Bᵀ`),
//! a Householder QR used to draw random orthogonal matrices, and an ordinary
//! least-squares fit in log-log space for width-scaling exponents.
//!
//! Shape mismatches in the product kernels panic, as they do in most dense
//! array libraries. Routines that take user-supplied dimensions validate them
//! and return [`LabError::InvalidArgument`].

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, LabError, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(i)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return invalid(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// A `len × 1` column vector.
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    /// A `1 × len` row vector.
    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul: {}x{} times {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            let lhs_row = &self.data[i * k..(i + 1) * k];
            for (p, &a) in lhs_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.rows, other.rows,
            "matmul_tn: ({}x{})ᵀ times {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(m, n);
        for p in 0..k {
            let lhs_row = &self.data[p * m..(p + 1) * m];
            let rhs_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in lhs_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.cols,
            "matmul_nt: {}x{} times ({}x{})ᵀ",
            self.rows, self.cols, other.rows, other.cols
        );
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            let lhs_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let rhs_row = &other.data[j * k..(j + 1) * k];
                out.data[i * n + j] = dot(lhs_row, rhs_row);
            }
        }
        out
    }

    /// Matrix-vector product `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(
            self.cols,
            x.len(),
            "matvec: {}x{} times {}",
            self.rows,
            self.cols,
            x.len()
        );
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|a| a * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| f(a)).collect(),
        }
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert_eq!(
            self.shape(),
            other.shape(),
            "elementwise op on mismatched shapes"
        );
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self += s · other`.
    pub fn add_scaled_in_place(&mut self, s: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "axpy on mismatched shapes");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.sum_of_squares().sqrt()
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum()
    }

    /// Frobenius inner product `⟨self, other⟩ = Σ self_ij · other_ij`.
    pub fn frobenius_dot(&self, other: &Matrix) -> f64 {
        assert_eq!(
            self.shape(),
            other.shape(),
            "inner product on mismatched shapes"
        );
        dot(&self.data, &other.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, a| m.max(a.abs()))
    }

    pub fn mean_abs(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|a| a.abs()).sum::<f64>() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }

    /// The first `k` rows, as a new `k × cols` matrix.
    pub fn top_rows(&self, k: usize) -> Matrix {
        assert!(k <= self.rows, "top_rows: {k} > {}", self.rows);
        Matrix {
            rows: k,
            cols: self.cols,
            data: self.data[..k * self.cols].to_vec(),
        }
    }

    /// Householder QR of a matrix with at least as many rows as columns.
    pub fn qr(&self) -> Result<Qr> {
        householder_qr(self)
    }

    /// Determinant of a square matrix via Householder QR.
    pub fn determinant(&self) -> Result<f64> {
        if self.rows != self.cols {
            return invalid(format!(
                "determinant of non-square {}x{}",
                self.rows, self.cols
            ));
        }
        let qr = self.qr()?;
        let diag: f64 = (0..self.cols).map(|i| qr.r[(i, i)]).product();
        let sign = if qr.reflections % 2 == 0 { 1.0 } else { -1.0 };
        Ok(sign * diag)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Thin QR factors: `q` is `m × n` with orthonormal columns, `r` is upper
/// triangular `n × n`.
#[derive(Clone, Debug)]
pub struct Qr {
    pub q: Matrix,
    pub r: Matrix,
    /// Number of non-trivial Householder reflections applied; each one
    /// contributes a factor −1 to `det(Q)` in the square case.
    pub reflections: usize,
}

fn householder_qr(a: &Matrix) -> Result<Qr> {
    let (m, n) = a.shape();
    if m < n {
        return invalid(format!("QR needs rows >= cols, got {m}x{n}"));
    }
    let mut work = a.clone();
    let mut vectors: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    let mut reflections = 0;

    for k in 0..n {
        let x: Vec<f64> = (k..m).map(|i| work[(i, k)]).collect();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            vectors.push(None);
            continue;
        }
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        let mut v = x;
        v[0] -= alpha;
        let vnorm = v.iter().map(|t| t * t).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            vectors.push(None);
            continue;
        }
        for t in v.iter_mut() {
            *t /= vnorm;
        }
        // work[k.., k..] -= 2 v (vᵀ work[k.., k..])
        for j in k..n {
            let proj: f64 = (k..m).map(|i| v[i - k] * work[(i, j)]).sum();
            for i in k..m {
                work[(i, j)] -= 2.0 * v[i - k] * proj;
            }
        }
        reflections += 1;
        vectors.push(Some(v));
    }

    let r = Matrix::from_fn(n, n, |i, j| if j >= i { work[(i, j)] } else { 0.0 });

    // Q = H_0 H_1 … H_{n-1} applied to the first n columns of the identity.
    let mut q = Matrix::from_fn(m, n, |i, j| if i == j { 1.0 } else { 0.0 });
    for k in (0..n).rev() {
        if let Some(v) = &vectors[k] {
            for j in 0..n {
                let proj: f64 = (k..m).map(|i| v[i - k] * q[(i, j)]).sum();
                for i in k..m {
                    q[(i, j)] -= 2.0 * v[i - k] * proj;
                }
            }
        }
    }
    Ok(Qr { q, r, reflections })
}

/// A reproducible Gaussian stream identified by `(master_seed, stream_id)`.
///
/// Backed by ChaCha8 with the stream id selecting an independent keystream,
/// so streams derived from one master seed do not overlap.
#[derive(Clone, Debug)]
pub struct RngStream {
    master_seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(stream_id);
        Self {
            master_seed,
            stream_id,
            rng,
        }
    }

    /// Stream whose id is a hash of `parts`, e.g. `(width, seed_index)`.
    pub fn derived(master_seed: u64, parts: &[u64]) -> Self {
        Self::new(master_seed, derive_stream_id(parts))
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn gaussian(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn gaussian_vec(&mut self, len: usize, std: f64) -> Vec<f64> {
        (0..len).map(|_| std * self.gaussian()).collect()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }
}

/// SplitMix64 fold over the parts; distinct tuples give well-spread ids.
pub fn derive_stream_id(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// `rows × cols` matrix of iid `N(0, std²)` entries.
pub fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> Matrix {
    Matrix {
        rows,
        cols,
        data: rng.gaussian_vec(rows * cols, std),
    }
}

/// Gaussian initialization with standard deviation `fan_in^{-1/2}` (unit gain).
pub fn kaiming_init(
    rows: usize,
    cols: usize,
    fan_in: usize,
    rng: &mut RngStream,
) -> Result<Matrix> {
    if fan_in == 0 {
        return invalid("kaiming_init: fan_in must be at least 1");
    }
    Ok(gaussian_matrix(rows, cols, (fan_in as f64).powf(-0.5), rng))
}

/// Haar-distributed random orthogonal `r × r` matrix: QR of a Gaussian draw
/// with the columns of `Q` sign-corrected so that `R` has a positive diagonal.
pub fn random_orthogonal(r: usize, rng: &mut RngStream) -> Result<Matrix> {
    if r == 0 {
        return invalid("random_orthogonal: r must be at least 1");
    }
    let g = gaussian_matrix(r, r, 1.0, rng);
    let Qr { mut q, r: rf, .. } = g.qr()?;
    for j in 0..r {
        if rf[(j, j)] < 0.0 {
            for i in 0..r {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    Ok(q)
}

/// `‖QᵀQ − I‖_F`.
pub fn orthogonality_defect(q: &Matrix) -> f64 {
    q.matmul_tn(q)
        .sub(&Matrix::identity(q.cols()))
        .frobenius_norm()
}

/// Least-squares line through `(log n, log v)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Standard error of the slope; zero for two-parameter-exact fits.
    pub slope_stderr: f64,
}

pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<LogLogFit> {
    if points.len() < 3 {
        return invalid(format!(
            "log-log fit needs at least 3 points, got {}",
            points.len()
        ));
    }
    if let Some(&(n, v)) = points.iter().find(|(n, v)| !(*n > 0.0 && *v > 0.0)) {
        return invalid(format!(
            "log-log fit needs positive values, got (n={n}, v={v})"
        ));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(LabError::InvalidArgument(
            "log-log fit needs at least two distinct n values".into(),
        ));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    let slope_stderr = (sse / (k - 2.0) / sxx).sqrt();
    Ok(LogLogFit {
        slope,
        intercept,
        r_squared,
        slope_stderr,
    })
}
