//! Dense double-precision linear algebra.
//!
//! Row-major [`DenseMatrix`] and [`DenseVector`] plus the handful of kernels the
//! adapters need: products, Householder thin QR with a positive-diagonal sign
//! convention, one-sided Jacobi SVD, a pivoted LU solve and the Cayley transform.
//!
//! Every kernel is a pure function with a fixed accumulation order, so identical
//! inputs produce bit-identical outputs.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Columns whose Householder pivot falls below this fraction of the largest
/// input column norm are treated as linearly dependent.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// Skew-symmetry tolerance for [`cayley`]: `‖X + Xᵀ‖_F` must not exceed it.
pub const SKEW_TOLERANCE: f64 = 1e-12;

/// Largest dimension accepted by [`svd_jacobi`].
pub const SVD_MAX_DIM: usize = 2048;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("{op}: dimension mismatch, left is {left:?}, right is {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length mismatch: expected {expected}, got {got}")]
    InvalidData { expected: usize, got: usize },
    #[error("matrix dimensions must be positive, got {rows}x{cols}")]
    EmptyDimension { rows: usize, cols: usize },
    #[error("non-finite entry at flat index {index}")]
    NonFinite { index: usize },
    #[error("{op}: matrix must be square, got {rows}x{cols}")]
    NotSquare {
        op: &'static str,
        rows: usize,
        cols: usize,
    },
    #[error("thin QR needs rows >= cols, got {rows}x{cols}")]
    WideMatrix { rows: usize, cols: usize },
    #[error("matrix is rank deficient at column {column}")]
    RankDeficient { column: usize },
    #[error("matrix is singular")]
    Singular,
    #[error("input is not skew-symmetric: |X + X^T|_F = {residual:e}")]
    InvalidSkew { residual: f64 },
    #[error("I + X is singular; Cayley transform undefined")]
    SingularCayley,
    #[error("matrix {rows}x{cols} exceeds the small-matrix limit of {max}")]
    TooLarge { rows: usize, cols: usize, max: usize },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(LinalgError::NonFinite { index }),
        None => Ok(()),
    }
}

/// A dense matrix stored in row-major order: `data[i * cols + j]` is entry `(i, j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for DenseMatrix {
    type Error = LinalgError;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        DenseMatrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl DenseMatrix {
    /// Builds a matrix from row-major data, rejecting bad lengths and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(LinalgError::EmptyDimension { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(LinalgError::InvalidData {
                expected: rows * cols,
                got: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from row slices.
    ///
    /// Panics on ragged or empty input; intended for literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        assert!(!rows.is_empty(), "need at least one row");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), cols, "row {i} has {} entries, expected {cols}", row.len());
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data).expect("invalid matrix literal")
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    /// Diagonal matrix with `diag` on the main diagonal.
    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        Self::from_fn(n, n, |i, j| if i == j { diag[i] } else { 0.0 })
    }

    /// Stacks equal-length vectors as columns.
    pub fn from_columns(columns: &[&[f64]]) -> Self {
        assert!(!columns.is_empty(), "need at least one column");
        let rows = columns[0].len();
        assert!(columns.iter().all(|c| c.len() == rows), "ragged columns");
        Self::from_fn(rows, columns.len(), |i, j| columns[j][i])
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

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
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

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        assert_eq!(values.len(), self.rows);
        for (i, v) in values.iter().enumerate() {
            self.data[i * self.cols + j] = *v;
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// `self += c * other`
    pub fn axpy(&mut self, c: f64, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LinalgError::DimensionMismatch {
                op: "axpy",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(LinalgError::DimensionMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    /// Multiplies column `j` by `factors[j]` for every column.
    pub fn scale_columns(&self, factors: &[f64]) -> Self {
        assert_eq!(factors.len(), self.cols);
        Self::from_fn(self.rows, self.cols, |i, j| self[(i, j)] * factors[j])
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul(self, other)
    }

    pub fn matvec(&self, x: &DenseVector) -> Result<DenseVector> {
        if x.len() != self.cols {
            return Err(LinalgError::DimensionMismatch {
                op: "matvec",
                left: self.shape(),
                right: (x.len(), 1),
            });
        }
        let data = (0..self.rows)
            .map(|i| dot(self.row(i), x.as_slice()))
            .collect();
        Ok(DenseVector { data })
    }

    /// `‖selfᵀ self − I‖_F`, the distance of the columns from orthonormality.
    pub fn orthonormality_residual(&self) -> f64 {
        let gram = matmul_tn(self, self).expect("gram shapes always agree");
        let mut acc = 0.0;
        for i in 0..gram.rows {
            for j in 0..gram.cols {
                let target = if i == j { 1.0 } else { 0.0 };
                let d = gram[(i, j)] - target;
                acc += d * d;
            }
        }
        acc.sqrt()
    }

    /// Largest absolute entry of the difference, for test diagnostics.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Display for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.rows {
            let row: Vec<String> = self.row(i).iter().map(|v| format!("{v:.6}")).collect();
            writeln!(f, "[{}]", row.join(", "))?;
        }
        Ok(())
    }
}

/// A dense vector of 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DenseVector {
    data: Vec<f64>,
}

impl TryFrom<Vec<f64>> for DenseVector {
    type Error = LinalgError;

    fn try_from(data: Vec<f64>) -> Result<Self> {
        DenseVector::new(data)
    }
}

impl From<DenseVector> for Vec<f64> {
    fn from(v: DenseVector) -> Self {
        v.data
    }
}

impl DenseVector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(LinalgError::EmptyDimension { rows: 0, cols: 1 });
        }
        check_finite(&data)?;
        Ok(Self { data })
    }

    /// Wraps data without validation. Used for internally computed values.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(len: usize) -> Self {
        Self { data: vec![0.0; len] }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn dot(&self, other: &Self) -> f64 {
        assert_eq!(self.len(), other.len());
        dot(&self.data, &other.data)
    }

    pub fn norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    /// Returns `self / ‖self‖`, or `None` for the zero vector.
    pub fn normalized(&self) -> Option<Self> {
        let n = self.norm();
        (n > 0.0).then(|| self.scale(1.0 / n))
    }
}

impl Index<usize> for DenseVector {
    type Output = f64;

    #[inline]
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl IndexMut<usize> for DenseVector {
    #[inline]
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `a · b`. Each output entry accumulates over the inner index in ascending order.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (m, n) = (a.rows, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (k, &aik) in a.row(i).iter().enumerate() {
            let b_row = b.row(k);
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(DenseMatrix { rows: m, cols: n, data: out })
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows != b.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (m, n) = (a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for k in 0..a.rows {
        let a_row = a.row(k);
        let b_row = b.row(k);
        for (i, &aki) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aki * bkj;
            }
        }
    }
    Ok(DenseMatrix { rows: m, cols: n, data: out })
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.cols {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(DenseMatrix::from_fn(a.rows, b.rows, |i, j| dot(a.row(i), b.row(j))))
}

/// Thin QR factorization `m = q · r_mat` with `diag(r_mat) > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct QrResult {
    pub q: DenseMatrix,
    pub r_mat: DenseMatrix,
}

/// Householder thin QR of a tall matrix.
///
/// After the reflections, rows of `R` and columns of `Q` are flipped so that
/// every diagonal entry of `R` is positive; that makes the factorization unique
/// and turns `m ↦ q` into a smooth map on full-rank inputs.
pub fn thin_qr(m: &DenseMatrix) -> Result<QrResult> {
    let (d, r) = m.shape();
    if d < r {
        return Err(LinalgError::WideMatrix { rows: d, cols: r });
    }
    // Column-major working copy: reflections act on columns.
    let mut cols: Vec<Vec<f64>> = (0..r).map(|j| m.column(j)).collect();
    let scale = cols
        .iter()
        .map(|c| dot(c, c).sqrt())
        .fold(0.0, f64::max);
    let tol = RANK_TOLERANCE * scale;

    let mut reflectors: Vec<(Vec<f64>, f64)> = Vec::with_capacity(r);
    let mut r_mat = DenseMatrix::zeros(r, r);
    for k in 0..r {
        let x = &cols[k][k..];
        let norm_x = dot(x, x).sqrt();
        if norm_x <= tol || norm_x == 0.0 {
            return Err(LinalgError::RankDeficient { column: k });
        }
        let alpha = if x[0] >= 0.0 { -norm_x } else { norm_x };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vtv = dot(&v, &v);
        let beta = 2.0 / vtv;
        for col in cols.iter_mut().skip(k) {
            let tail = &mut col[k..];
            let w = beta * dot(&v, tail);
            for (t, vi) in tail.iter_mut().zip(&v) {
                *t -= w * vi;
            }
        }
        for j in k..r {
            r_mat[(k, j)] = cols[j][k];
        }
        reflectors.push((v, beta));
    }

    // Q = H_0 H_1 ... H_{r-1} [I_r; 0], applied right to left.
    let mut q_cols: Vec<Vec<f64>> = (0..r)
        .map(|j| {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            e
        })
        .collect();
    for (k, (v, beta)) in reflectors.iter().enumerate().rev() {
        for col in q_cols.iter_mut() {
            let tail = &mut col[k..];
            let w = beta * dot(v, tail);
            if w != 0.0 {
                for (t, vi) in tail.iter_mut().zip(v) {
                    *t -= w * vi;
                }
            }
        }
    }

    for k in 0..r {
        if r_mat[(k, k)] < 0.0 {
            for j in k..r {
                r_mat[(k, j)] = -r_mat[(k, j)];
            }
            for v in q_cols[k].iter_mut() {
                *v = -*v;
            }
        }
    }

    let q = DenseMatrix::from_fn(d, r, |i, j| q_cols[j][i]);
    Ok(QrResult { q, r_mat })
}

/// Solves `x · rᵀ = y` for `x`, where `r` is upper triangular (so `rᵀ` is lower).
pub(crate) fn solve_right_upper_transpose(y: &DenseMatrix, r: &DenseMatrix) -> DenseMatrix {
    let n = r.rows;
    assert_eq!(y.cols, n);
    let mut x = DenseMatrix::zeros(y.rows, n);
    // Row i of x satisfies Σ_j x[i,j] r[k,j] = y[i,k] for j ≥ k. Solve k from n-1 down.
    for i in 0..y.rows {
        for k in (0..n).rev() {
            let mut acc = y[(i, k)];
            for j in k + 1..n {
                acc -= x[(i, j)] * r[(k, j)];
            }
            x[(i, k)] = acc / r[(k, k)];
        }
    }
    x
}

/// Singular value decomposition `m = u · diag(s) · vᵀ` with `k = min(rows, cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub u: DenseMatrix,
    pub s: DenseVector,
    pub v: DenseMatrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> DenseMatrix {
        let us = self.u.scale_columns(self.s.as_slice());
        matmul_nt(&us, &self.v).expect("svd factors are conformant")
    }

    /// Number of singular values strictly above `rel_tol · s_max`.
    pub fn numerical_rank(&self, rel_tol: f64) -> usize {
        let smax = self.s.as_slice().first().copied().unwrap_or(0.0);
        if smax <= 0.0 {
            return 0;
        }
        self.s.as_slice().iter().filter(|&&v| v > rel_tol * smax).count()
    }
}

/// One-sided (Hestenes) Jacobi SVD.
///
/// Columns are rotated pairwise until all are mutually orthogonal to working
/// precision; the column norms are then the singular values. Wide inputs are
/// handled through the transpose.
pub fn svd_jacobi(m: &DenseMatrix) -> Result<SvdResult> {
    let (rows, cols) = m.shape();
    if rows.max(cols) > SVD_MAX_DIM {
        return Err(LinalgError::TooLarge {
            rows,
            cols,
            max: SVD_MAX_DIM,
        });
    }
    if rows < cols {
        let t = svd_jacobi(&m.transpose())?;
        return Ok(SvdResult {
            u: t.v,
            s: t.s,
            v: t.u,
        });
    }

    let n = cols;
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    const MAX_SWEEPS: usize = 60;
    let eps = f64::EPSILON;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut a, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<(f64, usize)> = a.iter().enumerate().map(|(j, c)| (dot(c, c).sqrt(), j)).collect();
    // Stable sort keeps the column order for equal values, so the output is deterministic.
    order.sort_by(|x, y| y.0.total_cmp(&x.0));

    let smax = order.first().map(|o| o.0).unwrap_or(0.0);
    let null_tol = smax * eps * (rows as f64);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut needs_completion = Vec::new();
    let mut s = Vec::with_capacity(n);
    let mut v_cols = Vec::with_capacity(n);
    for (k, &(sv, j)) in order.iter().enumerate() {
        s.push(sv);
        v_cols.push(v[j].clone());
        if sv > null_tol && sv > 0.0 {
            u_cols.push(a[j].iter().map(|x| x / sv).collect());
        } else {
            u_cols.push(vec![0.0; rows]);
            needs_completion.push(k);
        }
    }
    complete_orthonormal(&mut u_cols, &needs_completion);

    let u = DenseMatrix::from_fn(rows, n, |i, j| u_cols[j][i]);
    let vm = DenseMatrix::from_fn(n, n, |i, j| v_cols[j][i]);
    Ok(SvdResult {
        u,
        s: DenseVector::from_vec(s),
        v: vm,
    })
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills the listed (zero) columns with unit vectors orthogonal to all others,
/// using Gram-Schmidt over the standard basis.
fn complete_orthonormal(cols: &mut [Vec<f64>], missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let dim = cols[0].len();
    let mut basis_idx = 0;
    for &k in missing {
        while basis_idx < dim {
            let mut cand = vec![0.0; dim];
            cand[basis_idx] = 1.0;
            basis_idx += 1;
            for _ in 0..2 {
                for (j, c) in cols.iter().enumerate() {
                    if j == k {
                        continue;
                    }
                    let proj = dot(c, &cand);
                    for (x, y) in cand.iter_mut().zip(c) {
                        *x -= proj * y;
                    }
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if norm > 1e-8 {
                cols[k] = cand.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

/// Solves `a · x = b` by LU with partial pivoting.
pub fn solve(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    let n = a.rows;
    if a.cols != n {
        return Err(LinalgError::NotSquare {
            op: "solve",
            rows: a.rows,
            cols: a.cols,
        });
    }
    if b.rows != n {
        return Err(LinalgError::DimensionMismatch {
            op: "solve",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut lu = a.clone();
    let mut x = b.clone();
    let scale = a.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tiny = scale * f64::EPSILON * n as f64;
    for k in 0..n {
        let pivot = (k..n)
            .max_by(|&i, &j| lu[(i, k)].abs().total_cmp(&lu[(j, k)].abs()))
            .expect("non-empty pivot range");
        if lu[(pivot, k)].abs() <= tiny {
            return Err(LinalgError::Singular);
        }
        if pivot != k {
            swap_rows(&mut lu, k, pivot);
            swap_rows(&mut x, k, pivot);
        }
        let pkk = lu[(k, k)];
        for i in k + 1..n {
            let f = lu[(i, k)] / pkk;
            if f == 0.0 {
                continue;
            }
            lu[(i, k)] = 0.0;
            for j in k + 1..n {
                lu[(i, j)] -= f * lu[(k, j)];
            }
            for j in 0..x.cols {
                x[(i, j)] -= f * x[(k, j)];
            }
        }
    }
    for k in (0..n).rev() {
        let pkk = lu[(k, k)];
        for j in 0..x.cols {
            let mut acc = x[(k, j)];
            for i in k + 1..n {
                acc -= lu[(k, i)] * x[(i, j)];
            }
            x[(k, j)] = acc / pkk;
        }
    }
    Ok(x)
}

fn swap_rows(m: &mut DenseMatrix, a: usize, b: usize) {
    let cols = m.cols;
    for j in 0..cols {
        m.data.swap(a * cols + j, b * cols + j);
    }
}

/// `‖x + xᵀ‖_F`
pub fn skew_residual(x: &DenseMatrix) -> f64 {
    let n = x.rows;
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            let s = x[(i, j)] + x[(j, i)];
            acc += s * s;
        }
    }
    acc.sqrt()
}

/// Cayley transform `Q = (I − X)(I + X)⁻¹` of a skew-symmetric `X`.
pub fn cayley(x: &DenseMatrix) -> Result<DenseMatrix> {
    let n = x.rows;
    if x.cols != n {
        return Err(LinalgError::NotSquare {
            op: "cayley",
            rows: x.rows,
            cols: x.cols,
        });
    }
    let residual = skew_residual(x);
    if residual > SKEW_TOLERANCE {
        return Err(LinalgError::InvalidSkew { residual });
    }
    let eye = DenseMatrix::identity(n);
    let i_plus = eye.add(x)?;
    let i_minus = eye.sub(x)?;
    // Q (I + X) = I − X  ⇔  (I + X)ᵀ Qᵀ = (I − X)ᵀ
    let qt = solve(&i_plus.transpose(), &i_minus.transpose()).map_err(|e| match e {
        LinalgError::Singular => LinalgError::SingularCayley,
        other => other,
    })?;
    Ok(qt.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    fn rel_fro(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm()
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(matches!(
            DenseMatrix::new(2, 2, vec![1.0; 3]),
            Err(LinalgError::InvalidData { expected: 4, got: 3 })
        ));
        assert!(matches!(
            DenseMatrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(LinalgError::NonFinite { index: 1 })
        ));
        assert!(DenseMatrix::new(0, 2, vec![]).is_err());
        assert!(DenseVector::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn matmul_examples() {
        let m = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&DenseMatrix::identity(2), &m).unwrap(), m);
        let col = DenseMatrix::from_rows(&[&[0.0], &[1.0]]);
        assert_eq!(
            matmul(&m, &col).unwrap(),
            DenseMatrix::from_rows(&[&[2.0], &[4.0]])
        );
        let g = gaussian(3, 3, 1);
        assert_eq!(matmul(&DenseMatrix::zeros(3, 3), &g).unwrap(), DenseMatrix::zeros(3, 3));
        assert!(matches!(
            matmul(&m, &DenseMatrix::zeros(3, 1)),
            Err(LinalgError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = gaussian(5, 3, 2);
        let b = gaussian(5, 4, 3);
        let c = gaussian(6, 3, 4);
        assert!(matmul_tn(&a, &b).unwrap().max_abs_diff(&matmul(&a.transpose(), &b).unwrap()) < 1e-14);
        assert!(matmul_nt(&a, &c).unwrap().max_abs_diff(&matmul(&a, &c.transpose()).unwrap()) < 1e-14);
    }

    #[test]
    fn matmul_is_associative_on_seeded_triples() {
        for seed in 0..10 {
            let a = gaussian(4, 5, seed);
            let b = gaussian(5, 3, seed + 100);
            let c = gaussian(3, 6, seed + 200);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            assert!(rel_fro(&left, &right) <= 1e-12);
        }
    }

    #[test]
    fn matmul_is_bit_deterministic() {
        let a = gaussian(7, 9, 5);
        let b = gaussian(9, 4, 6);
        let x = matmul(&a, &b).unwrap();
        let y = matmul(&a, &b).unwrap();
        assert!(x.as_slice().iter().zip(y.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn qr_single_column() {
        let m = DenseMatrix::from_rows(&[&[3.0], &[4.0]]);
        let qr = thin_qr(&m).unwrap();
        assert!((qr.q[(0, 0)] - 0.6).abs() < 1e-15);
        assert!((qr.q[(1, 0)] - 0.8).abs() < 1e-15);
        assert!((qr.r_mat[(0, 0)] - 5.0).abs() < 1e-15);
    }

    #[test]
    fn qr_fixed_point_on_orthonormal_columns() {
        let q0 = thin_qr(&gaussian(9, 4, 11)).unwrap().q;
        let qr = thin_qr(&q0).unwrap();
        assert!(qr.q.max_abs_diff(&q0) < 1e-14);
        assert!(qr.r_mat.max_abs_diff(&DenseMatrix::identity(4)) < 1e-14);
        let e = DenseMatrix::from_fn(5, 2, |i, j| if i == j { 1.0 } else { 0.0 });
        assert_eq!(thin_qr(&e).unwrap().q, e);
    }

    #[test]
    fn qr_seeded_properties() {
        for seed in 0..100 {
            let m = gaussian(10, 3, seed);
            let qr = thin_qr(&m).unwrap();
            assert!(qr.q.orthonormality_residual() <= 1e-12);
            for i in 0..3 {
                assert!(qr.r_mat[(i, i)] > 0.0);
                for j in 0..i {
                    assert_eq!(qr.r_mat[(i, j)], 0.0);
                }
            }
            let back = matmul(&qr.q, &qr.r_mat).unwrap();
            assert!(rel_fro(&back, &m) <= 1e-10);
        }
    }

    #[test]
    fn qr_reports_the_dependent_column() {
        let m = DenseMatrix::from_rows(&[&[1.0, 2.0, 0.0], &[1.0, 2.0, 1.0], &[0.0, 0.0, 1.0], &[2.0, 4.0, 0.0]]);
        assert_eq!(thin_qr(&m), Err(LinalgError::RankDeficient { column: 1 }));
        let zero_first = DenseMatrix::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]]);
        assert_eq!(thin_qr(&zero_first), Err(LinalgError::RankDeficient { column: 0 }));
        assert!(matches!(thin_qr(&DenseMatrix::zeros(2, 3)), Err(LinalgError::WideMatrix { .. })));
    }

    #[test]
    fn svd_diagonal_and_rank_one() {
        let svd = svd_jacobi(&DenseMatrix::from_diag(&[3.0, 1.0, 2.0])).unwrap();
        assert_eq!(svd.s.as_slice(), &[3.0, 2.0, 1.0]);

        let u = [2.0, 0.0, 0.0, 0.0];
        let v = [0.0, 3.0, 0.0];
        let m = DenseMatrix::from_fn(4, 3, |i, j| u[i] * v[j]);
        let svd = svd_jacobi(&m).unwrap();
        assert!((svd.s[0] - 6.0).abs() < 1e-12);
        assert!(svd.s[1].abs() < 1e-12 && svd.s[2].abs() < 1e-12);
        assert!(svd.u.orthonormality_residual() < 1e-12);
        assert!(rel_fro(&svd.reconstruct(), &m) < 1e-12);
    }

    #[test]
    fn svd_reconstructs_tall_and_wide() {
        for (r, c, seed) in [(20, 8, 1u64), (8, 20, 2), (13, 13, 3)] {
            let m = gaussian(r, c, seed);
            let svd = svd_jacobi(&m).unwrap();
            assert_eq!(svd.s.len(), r.min(c));
            assert!(rel_fro(&svd.reconstruct(), &m) <= 1e-8);
            assert!(svd.u.orthonormality_residual() < 1e-10);
            assert!(svd.v.orthonormality_residual() < 1e-10);
            assert!(svd.s.as_slice().windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn svd_size_guard() {
        let m = DenseMatrix::zeros(SVD_MAX_DIM + 1, 1);
        assert!(matches!(svd_jacobi(&m), Err(LinalgError::TooLarge { .. })));
    }

    #[test]
    fn cayley_examples() {
        assert_eq!(cayley(&DenseMatrix::zeros(3, 3)).unwrap(), DenseMatrix::identity(3));
        let x = DenseMatrix::from_rows(&[&[0.0, 1.0], &[-1.0, 0.0]]);
        let q = cayley(&x).unwrap();
        let expected = DenseMatrix::from_rows(&[&[0.0, -1.0], &[1.0, 0.0]]);
        assert!(q.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn cayley_seeded_orthogonality_and_inverse_pairing() {
        for seed in 0..20 {
            let g = gaussian(6, 6, seed);
            let x = g.sub(&g.transpose()).unwrap();
            let q = cayley(&x).unwrap();
            assert!(q.orthonormality_residual() <= 1e-10);
            let q_neg = cayley(&x.scale(-1.0)).unwrap();
            assert!(q_neg.max_abs_diff(&q.transpose()) <= 1e-10);
        }
    }

    #[test]
    fn cayley_rejects_non_skew() {
        let x = DenseMatrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert!(matches!(cayley(&x), Err(LinalgError::InvalidSkew { .. })));
        assert!(matches!(cayley(&DenseMatrix::zeros(2, 3)), Err(LinalgError::NotSquare { .. })));
    }

    #[test]
    fn solve_detects_singular_systems() {
        let a = DenseMatrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert_eq!(solve(&a, &DenseMatrix::identity(2)), Err(LinalgError::Singular));
        let a = gaussian(5, 5, 9);
        let b = gaussian(5, 2, 10);
        let x = solve(&a, &b).unwrap();
        assert!(matmul(&a, &x).unwrap().max_abs_diff(&b) < 1e-12);
    }
}
