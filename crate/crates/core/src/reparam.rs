//! Geometric reparameterization of the adapter factors.
//!
//! The optimizer only ever sees unconstrained Euclidean tensors
//! ([`EuclideanParams`]). Every forward pass maps them onto the manifold:
//! `A = orth(Θ_A)`, `B = orth(Θ_B)` with orthonormal columns, and
//! `σ = softplus(s) + ε` (or `σ = s` in [`SigmaMode::Direct`]). Gradients come
//! back through the vector-Jacobian products of those maps, so the constraint
//! never has to be enforced by the optimizer.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{
    self, matmul, matmul_nt, matmul_tn, thin_qr, DenseMatrix, DenseVector, LinalgError, QrResult,
};

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Initial `s` for softplus mode: `softplus(-6) ≈ 0.0025`, a near-zero start.
pub const SOFTPLUS_INIT_S: f64 = -6.0;

/// How the diagonal scale `σ` is derived from `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SigmaMode {
    /// `σ = softplus(s) + ε`, always positive.
    #[default]
    Softplus,
    /// `σ = s`, allowing an exact zero update at initialization.
    Direct,
}

impl SigmaMode {
    /// The `s` value that gives a (near-)zero initial update.
    pub fn default_init(self) -> f64 {
        match self {
            SigmaMode::Softplus => SOFTPLUS_INIT_S,
            SigmaMode::Direct => 0.0,
        }
    }
}

/// Distribution used for `Θ_A` and `Θ_B` at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThetaInit {
    /// Entries drawn from N(0, 1).
    #[default]
    Gaussian,
    /// Entries drawn from U(-1/√r, 1/√r), the default Kaiming-uniform bound for a `d × r` tensor.
    KaimingUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factor {
    A,
    B,
}

impl std::fmt::Display for Factor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Factor::A => "A",
            Factor::B => "B",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReparamError {
    #[error("factor {factor}: theta is rank deficient at column {column}")]
    RankDeficient { factor: Factor, column: usize },
    #[error("rank {rank} must satisfy 1 <= rank <= min(d_in, d_out) = {max}")]
    InvalidRank { rank: usize, max: usize },
    #[error("epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// The unconstrained trainables seen by the optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EuclideanParams {
    /// `d_in × r`
    pub theta_a: DenseMatrix,
    /// `d_out × r`
    pub theta_b: DenseMatrix,
    pub s: DenseVector,
    pub sigma_mode: SigmaMode,
    pub epsilon: f64,
}

impl EuclideanParams {
    pub fn new(
        theta_a: DenseMatrix,
        theta_b: DenseMatrix,
        s: DenseVector,
        sigma_mode: SigmaMode,
        epsilon: f64,
    ) -> Result<Self, ReparamError> {
        let p = Self {
            theta_a,
            theta_b,
            s,
            sigma_mode,
            epsilon,
        };
        p.validate()?;
        Ok(p)
    }

    /// Random Θ factors with `s` filled with `s_init`.
    pub fn init<R: Rng + ?Sized>(
        d_in: usize,
        d_out: usize,
        rank: usize,
        sigma_mode: SigmaMode,
        epsilon: f64,
        s_init: f64,
        theta_init: ThetaInit,
        rng: &mut R,
    ) -> Result<Self, ReparamError> {
        let max = d_in.min(d_out);
        if rank == 0 || rank > max {
            return Err(ReparamError::InvalidRank { rank, max });
        }
        let mut draw = |rows: usize| -> DenseMatrix {
            match theta_init {
                ThetaInit::Gaussian => DenseMatrix::from_fn(rows, rank, |_, _| StandardNormal.sample(rng)),
                ThetaInit::KaimingUniform => {
                    let bound = 1.0 / (rank as f64).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                    DenseMatrix::from_fn(rows, rank, |_, _| dist.sample(rng))
                }
            }
        };
        let theta_a = draw(d_in);
        let theta_b = draw(d_out);
        Self::new(
            theta_a,
            theta_b,
            DenseVector::from_vec(vec![s_init; rank]),
            sigma_mode,
            epsilon,
        )
    }

    pub fn validate(&self) -> Result<(), ReparamError> {
        let r = self.theta_a.cols();
        if self.theta_b.cols() != r || self.s.len() != r {
            return Err(ReparamError::Shape(format!(
                "theta_a has {} columns, theta_b {}, s length {}",
                r,
                self.theta_b.cols(),
                self.s.len()
            )));
        }
        let max = self.theta_a.rows().min(self.theta_b.rows());
        if r == 0 || r > max {
            return Err(ReparamError::InvalidRank { rank: r, max });
        }
        if self.sigma_mode == SigmaMode::Softplus && !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(ReparamError::InvalidEpsilon(self.epsilon));
        }
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn d_in(&self) -> usize {
        self.theta_a.rows()
    }

    pub fn d_out(&self) -> usize {
        self.theta_b.rows()
    }
}

/// On-manifold factors: `a ∈ St(d_in, r)`, `b ∈ St(d_out, r)`, `Σ = diag(sigma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldFactors {
    pub a: DenseMatrix,
    pub b: DenseMatrix,
    pub sigma: DenseVector,
}

impl ManifoldFactors {
    /// `B Σ Aᵀ`
    pub fn delta(&self) -> DenseMatrix {
        let b_sigma = self.b.scale_columns(self.sigma.as_slice());
        matmul_nt(&b_sigma, &self.a).expect("factor shapes agree")
    }

    /// Larger of the two Stiefel residuals `‖AᵀA − I‖_F`, `‖BᵀB − I‖_F`.
    pub fn stiefel_residual(&self) -> f64 {
        self.a
            .orthonormality_residual()
            .max(self.b.orthonormality_residual())
    }
}

/// Gradients with respect to the fields of [`EuclideanParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub g_theta_a: DenseMatrix,
    pub g_theta_b: DenseMatrix,
    pub g_s: DenseVector,
}

/// Column-orthonormal factor of `theta` (the `Q` of the sign-fixed thin QR).
pub fn orth_map(theta: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    Ok(thin_qr(theta)?.q)
}

/// Pulls a cotangent on `A = orth_map(theta)` back to `theta`.
pub fn orth_map_vjp(theta: &DenseMatrix, grad_a: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    if theta.shape() != grad_a.shape() {
        return Err(LinalgError::DimensionMismatch {
            op: "orth_map_vjp",
            left: theta.shape(),
            right: grad_a.shape(),
        });
    }
    let qr = thin_qr(theta)?;
    Ok(qr_backward(&qr, grad_a))
}

/// Reverse-mode rule for `Q` of `M = QR` (R positive diagonal, cotangent on R zero).
///
/// With `G = ∂L/∂Q` and `C = QᵀG`:
/// `∂L/∂M = [(I − QQᵀ)G + Q·tril₋(C − Cᵀ)] R⁻ᵀ`,
/// where `tril₋` keeps the strictly lower triangle.
pub(crate) fn qr_backward(qr: &QrResult, grad_q: &DenseMatrix) -> DenseMatrix {
    let q = &qr.q;
    let r = q.cols();
    let c = matmul_tn(q, grad_q).expect("shapes agree");
    let mut lower = DenseMatrix::zeros(r, r);
    for i in 0..r {
        for j in 0..i {
            lower[(i, j)] = c[(i, j)] - c[(j, i)];
        }
    }
    // (I − QQᵀ)G + Q·lower = G + Q·(lower − C)
    let mut inner = lower;
    inner.axpy(-1.0, &c).expect("same shape");
    let mut y = grad_q.clone();
    y.axpy(1.0, &matmul(q, &inner).expect("shapes agree"))
        .expect("same shape");
    linalg::solve_right_upper_transpose(&y, &qr.r_mat)
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigma_map(s: &DenseVector, mode: SigmaMode, epsilon: f64) -> DenseVector {
    match mode {
        SigmaMode::Softplus => DenseVector::from_vec(s.as_slice().iter().map(|&v| softplus(v) + epsilon).collect()),
        SigmaMode::Direct => s.clone(),
    }
}

pub fn sigma_map_vjp(s: &DenseVector, mode: SigmaMode, _epsilon: f64, grad_sigma: &DenseVector) -> DenseVector {
    assert_eq!(s.len(), grad_sigma.len(), "sigma_map_vjp: shape mismatch");
    match mode {
        SigmaMode::Softplus => DenseVector::from_vec(
            s.as_slice()
                .iter()
                .zip(grad_sigma.as_slice())
                .map(|(&si, &gi)| gi * sigmoid(si))
                .collect(),
        ),
        SigmaMode::Direct => grad_sigma.clone(),
    }
}

/// QR factorizations kept from a forward build so the backward pass need not redo them.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorTape {
    pub(crate) qr_a: QrResult,
    pub(crate) qr_b: QrResult,
}

/// Maps Euclidean parameters onto the manifold.
pub fn build_factors(p: &EuclideanParams) -> Result<ManifoldFactors, ReparamError> {
    build_factors_taped(p).map(|(f, _)| f)
}

pub(crate) fn build_factors_taped(p: &EuclideanParams) -> Result<(ManifoldFactors, FactorTape), ReparamError> {
    p.validate()?;
    let qr_a = thin_qr(&p.theta_a).map_err(|e| tag_factor(e, Factor::A))?;
    let qr_b = thin_qr(&p.theta_b).map_err(|e| tag_factor(e, Factor::B))?;
    let factors = ManifoldFactors {
        a: qr_a.q.clone(),
        b: qr_b.q.clone(),
        sigma: sigma_map(&p.s, p.sigma_mode, p.epsilon),
    };
    Ok((factors, FactorTape { qr_a, qr_b }))
}

fn tag_factor(e: LinalgError, factor: Factor) -> ReparamError {
    match e {
        LinalgError::RankDeficient { column } => ReparamError::RankDeficient { factor, column },
        other => ReparamError::Linalg(other),
    }
}

/// Chains cotangents on `(A, B, σ)` back to `(Θ_A, Θ_B, s)`.
pub fn factors_vjp(
    p: &EuclideanParams,
    grad_a: &DenseMatrix,
    grad_b: &DenseMatrix,
    grad_sigma: &DenseVector,
) -> Result<ParamGrads, ReparamError> {
    let (_, tape) = build_factors_taped(p)?;
    Ok(factors_vjp_taped(p, &tape, grad_a, grad_b, grad_sigma))
}

pub(crate) fn factors_vjp_taped(
    p: &EuclideanParams,
    tape: &FactorTape,
    grad_a: &DenseMatrix,
    grad_b: &DenseMatrix,
    grad_sigma: &DenseVector,
) -> ParamGrads {
    ParamGrads {
        g_theta_a: qr_backward(&tape.qr_a, grad_a),
        g_theta_b: qr_backward(&tape.qr_b, grad_b),
        g_s: sigma_map_vjp(&p.s, p.sigma_mode, p.epsilon, grad_sigma),
    }
}

/// Skew matrix `X = Θ Eᵀ − E Θᵀ` where `E` holds the first `r` columns of `I_d`.
fn stiefel_skew(theta: &DenseMatrix) -> DenseMatrix {
    let (d, r) = theta.shape();
    DenseMatrix::from_fn(d, d, |i, j| {
        let left = if j < r { theta[(i, j)] } else { 0.0 };
        let right = if i < r { theta[(j, i)] } else { 0.0 };
        left - right
    })
}

/// Alternate orthogonalization: first `r` columns of `cayley(Θ Eᵀ − E Θᵀ)`.
///
/// Costs a `d × d` solve, so it is meant for small `d`.
pub fn cayley_orth_map(theta: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    let (d, r) = theta.shape();
    if d < r {
        return Err(LinalgError::WideMatrix { rows: d, cols: r });
    }
    let q = linalg::cayley(&stiefel_skew(theta))?;
    Ok(DenseMatrix::from_fn(d, r, |i, j| q[(i, j)]))
}

/// VJP of [`cayley_orth_map`].
///
/// `dQ = −(I + Q) dX (I + X)⁻¹`, so `X̄ = −(I + Q)ᵀ Q̄ (I + X)⁻ᵀ` and
/// `Θ̄ = (X̄ − X̄ᵀ) E`.
pub fn cayley_orth_map_vjp(theta: &DenseMatrix, grad_a: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    let (d, r) = theta.shape();
    if grad_a.shape() != (d, r) {
        return Err(LinalgError::DimensionMismatch {
            op: "cayley_orth_map_vjp",
            left: theta.shape(),
            right: grad_a.shape(),
        });
    }
    let x = stiefel_skew(theta);
    let q = linalg::cayley(&x)?;
    let eye = DenseMatrix::identity(d);
    let grad_q = DenseMatrix::from_fn(d, d, |i, j| if j < r { grad_a[(i, j)] } else { 0.0 });
    let left = matmul_tn(&eye.add(&q)?, &grad_q)?;
    // Z = left · (I + X)⁻ᵀ  ⇔  (I + X) Zᵀ = leftᵀ
    let zt = linalg::solve(&eye.add(&x)?, &left.transpose()).map_err(|e| match e {
        LinalgError::Singular => LinalgError::SingularCayley,
        other => other,
    })?;
    let x_bar = zt.transpose().scale(-1.0);
    Ok(DenseMatrix::from_fn(d, r, |i, j| x_bar[(i, j)] - x_bar[(j, i)]))
}
