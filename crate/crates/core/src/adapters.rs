//! Adapted linear layers.
//!
//! Both adapters wrap a frozen base weight `W₀ (d_out × d_in)` and add a scaled
//! low-rank update `(α/r)·ΔW`:
//!
//! - [`OrthoGeoAdapter`]: `ΔW = B Σ Aᵀ`, with `A`, `B` column-orthonormal and
//!   `Σ` diagonal, all rebuilt from Euclidean parameters on every pass.
//! - [`LoraAdapter`]: the plain factorization `ΔW = B Aᵀ`.
//!
//! Forward passes take a batch as a `d_in × n` matrix whose columns are inputs
//! and compute the update in stages (`u = Aᵀx`, `ũ = Σu`, `Δy = Bũ`) so that the
//! cost stays `O((d_in + d_out)·r)` per input on top of the base product.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, matmul, matmul_nt, matmul_tn, svd_jacobi, DenseMatrix, DenseVector, LinalgError};
use crate::optim::ParamTensor;
use crate::reparam::{
    build_factors_taped, factors_vjp_taped, EuclideanParams, FactorTape, ManifoldFactors, ParamGrads,
    ReparamError, SigmaMode, ThetaInit,
};

pub const DEFAULT_ALPHA: f64 = 16.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdapterError {
    #[error("input has {got} rows, layer expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("gradient is {got:?}, forward output was {expected:?}")]
    GradShape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("cache does not belong to the current adapter parameters")]
    StaleCache,
    #[error("alpha must be positive and finite, got {0}")]
    InvalidAlpha(f64),
    #[error("invalid adapter shapes: {0}")]
    Shape(String),
    #[error(transparent)]
    Reparam(#[from] ReparamError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, AdapterError>;

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(AdapterError::InvalidAlpha(alpha))
    }
}

fn hash_matrix(h: &mut DefaultHasher, m: &DenseMatrix) {
    m.shape().hash(h);
    for v in m.as_slice() {
        v.to_bits().hash(h);
    }
}

/// `W₀ + (α/r)·ΔW`, ready for inference without the adapter path.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedWeight {
    pub w_eff: DenseMatrix,
}

impl FoldedWeight {
    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(matmul(&self.w_eff, x)?)
    }
}

/// Frozen `W₀` plus a Stiefel-constrained update `(α/r)·B Σ Aᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthoGeoAdapter {
    w0: DenseMatrix,
    pub params: EuclideanParams,
    alpha: f64,
}

/// Activations saved by [`OrthoGeoAdapter::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct OrthoGeoCache {
    fingerprint: u64,
    pub factors: ManifoldFactors,
    tape: FactorTape,
    x: DenseMatrix,
    /// `Aᵀx`, `r × n`
    pub u: DenseMatrix,
    /// `Σ Aᵀx`, `r × n`
    pub u_tilde: DenseMatrix,
}

impl OrthoGeoAdapter {
    pub fn new(w0: DenseMatrix, params: EuclideanParams, alpha: f64) -> Result<Self> {
        let adapter = Self { w0, params, alpha };
        adapter.validate()?;
        Ok(adapter)
    }

    /// Random subspaces with `s = s_init`; `s_init = sigma_mode.default_init()`
    /// gives the near-zero (softplus) or exactly zero (direct) warm start.
    pub fn init<R: Rng + ?Sized>(
        w0: DenseMatrix,
        rank: usize,
        alpha: f64,
        sigma_mode: SigmaMode,
        epsilon: f64,
        s_init: f64,
        theta_init: ThetaInit,
        rng: &mut R,
    ) -> Result<Self> {
        let params = EuclideanParams::init(
            w0.cols(),
            w0.rows(),
            rank,
            sigma_mode,
            epsilon,
            s_init,
            theta_init,
            rng,
        )?;
        Self::new(w0, params, alpha)
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        self.params.validate()?;
        if self.params.d_in() != self.w0.cols() || self.params.d_out() != self.w0.rows() {
            return Err(AdapterError::Shape(format!(
                "w0 is {:?} but factors imply d_out={} d_in={}",
                self.w0.shape(),
                self.params.d_out(),
                self.params.d_in()
            )));
        }
        Ok(())
    }

    pub fn w0(&self) -> &DenseMatrix {
        &self.w0
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn rank(&self) -> usize {
        self.params.rank()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn factors(&self) -> Result<ManifoldFactors> {
        Ok(build_factors_taped(&self.params)?.0)
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        hash_matrix(&mut h, &self.w0);
        hash_matrix(&mut h, &self.params.theta_a);
        hash_matrix(&mut h, &self.params.theta_b);
        for v in self.params.s.as_slice() {
            v.to_bits().hash(&mut h);
        }
        self.params.sigma_mode.hash(&mut h);
        self.params.epsilon.to_bits().hash(&mut h);
        self.alpha.to_bits().hash(&mut h);
        h.finish()
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<(DenseMatrix, OrthoGeoCache)> {
        if x.rows() != self.w0.cols() {
            return Err(AdapterError::InputDim {
                expected: self.w0.cols(),
                got: x.rows(),
            });
        }
        let (factors, tape) = build_factors_taped(&self.params)?;
        let u = matmul_tn(&factors.a, x)?;
        let sigma = factors.sigma.as_slice();
        let u_tilde = DenseMatrix::from_fn(u.rows(), u.cols(), |i, j| sigma[i] * u[(i, j)]);
        let delta_y = matmul(&factors.b, &u_tilde)?;
        let mut y = matmul(&self.w0, x)?;
        y.axpy(self.scaling(), &delta_y)?;
        let cache = OrthoGeoCache {
            fingerprint: self.fingerprint(),
            factors,
            tape,
            x: x.clone(),
            u,
            u_tilde,
        };
        Ok((y, cache))
    }

    pub fn forward_vec(&self, x: &DenseVector) -> Result<(DenseVector, OrthoGeoCache)> {
        let xm = DenseMatrix::from_columns(&[x.as_slice()]);
        let (y, cache) = self.forward(&xm)?;
        Ok((DenseVector::from_vec(y.into_vec()), cache))
    }

    /// Gradients with respect to `(Θ_A, Θ_B, s)` given `∂L/∂y` for the cached batch.
    pub fn backward(&self, cache: &OrthoGeoCache, grad_y: &DenseMatrix) -> Result<ParamGrads> {
        if cache.fingerprint != self.fingerprint() {
            return Err(AdapterError::StaleCache);
        }
        let expected = (self.w0.rows(), cache.x.cols());
        if grad_y.shape() != expected {
            return Err(AdapterError::GradShape {
                expected,
                got: grad_y.shape(),
            });
        }
        let c = self.scaling();
        let f = &cache.factors;
        // Δy = B ũ
        let grad_b = matmul_nt(grad_y, &cache.u_tilde)?.scale(c);
        let grad_u_tilde = matmul_tn(&f.b, grad_y)?.scale(c);
        // ũ = σ ⊙ u
        let r = self.rank();
        let mut grad_sigma = vec![0.0; r];
        for (i, g) in grad_sigma.iter_mut().enumerate() {
            *g = linalg::dot(grad_u_tilde.row(i), cache.u.row(i));
        }
        let sigma = f.sigma.as_slice();
        let grad_u = DenseMatrix::from_fn(r, grad_u_tilde.cols(), |i, j| sigma[i] * grad_u_tilde[(i, j)]);
        // u = Aᵀx
        let grad_a = matmul_nt(&cache.x, &grad_u)?;
        Ok(factors_vjp_taped(
            &self.params,
            &cache.tape,
            &grad_a,
            &grad_b,
            &DenseVector::from_vec(grad_sigma),
        ))
    }

    pub fn backward_vec(&self, cache: &OrthoGeoCache, grad_y: &DenseVector) -> Result<ParamGrads> {
        self.backward(cache, &DenseMatrix::from_columns(&[grad_y.as_slice()]))
    }

    /// The unscaled update `B Σ Aᵀ`.
    pub fn delta(&self) -> Result<DenseMatrix> {
        Ok(self.factors()?.delta())
    }

    /// Gradients of a loss on the scaled update `(α/r)·ΔW`, given `G = ∂L/∂((α/r)ΔW)`.
    pub fn delta_vjp(&self, grad_delta: &DenseMatrix) -> Result<ParamGrads> {
        if grad_delta.shape() != self.w0.shape() {
            return Err(AdapterError::GradShape {
                expected: self.w0.shape(),
                got: grad_delta.shape(),
            });
        }
        let (f, tape) = build_factors_taped(&self.params)?;
        let c = self.scaling();
        let sigma = f.sigma.as_slice();
        let ga = matmul(grad_delta, &f.a)?; // G A, d_out × r
        let gtb = matmul_tn(grad_delta, &f.b)?; // Gᵀ B, d_in × r
        let grad_b = ga.scale_columns(sigma).scale(c);
        let grad_a = gtb.scale_columns(sigma).scale(c);
        let grad_sigma: Vec<f64> = (0..self.rank())
            .map(|i| c * (0..f.b.rows()).map(|k| f.b[(k, i)] * ga[(k, i)]).sum::<f64>())
            .collect();
        Ok(factors_vjp_taped(
            &self.params,
            &tape,
            &grad_a,
            &grad_b,
            &DenseVector::from_vec(grad_sigma),
        ))
    }

    pub fn fold(&self) -> Result<FoldedWeight> {
        let mut w_eff = self.w0.clone();
        w_eff.axpy(self.scaling(), &self.delta()?)?;
        Ok(FoldedWeight { w_eff })
    }

    /// Singular values of `(α/r)·ΔW`, read off `Σ` (the factors are orthonormal).
    pub fn delta_spectrum(&self) -> Result<DenseVector> {
        let f = self.factors()?;
        let c = self.scaling();
        let mut s: Vec<f64> = f.sigma.as_slice().iter().map(|v| v.abs() * c).collect();
        s.sort_by(|a, b| b.total_cmp(a));
        Ok(DenseVector::from_vec(s))
    }

    pub fn param_tensors(&mut self) -> Vec<ParamTensor<'_>> {
        vec![
            ParamTensor::new("theta_a", self.params.theta_a.as_mut_slice(), true),
            ParamTensor::new("theta_b", self.params.theta_b.as_mut_slice(), true),
            ParamTensor::new("s", self.params.s.as_mut_slice(), false),
        ]
    }
}

impl ParamGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        vec![self.g_theta_a.as_slice(), self.g_theta_b.as_slice(), self.g_s.as_slice()]
    }
}

/// Frozen `W₀` plus the plain low-rank update `(α/r)·B Aᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    w0: DenseMatrix,
    /// `d_in × r`
    pub a: DenseMatrix,
    /// `d_out × r`
    pub b: DenseMatrix,
    alpha: f64,
}

#[derive(Debug, Clone)]
pub struct LoraCache {
    fingerprint: u64,
    x: DenseMatrix,
    u: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraGrads {
    pub g_a: DenseMatrix,
    pub g_b: DenseMatrix,
}

impl LoraGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        vec![self.g_a.as_slice(), self.g_b.as_slice()]
    }
}

impl LoraAdapter {
    pub fn new(w0: DenseMatrix, a: DenseMatrix, b: DenseMatrix, alpha: f64) -> Result<Self> {
        let adapter = Self { w0, a, b, alpha };
        adapter.validate()?;
        Ok(adapter)
    }

    /// Standard warm start: `A ~ N(0, 1/d_in)`, `B = 0`.
    pub fn init<R: Rng + ?Sized>(w0: DenseMatrix, rank: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        let (d_out, d_in) = w0.shape();
        let max = d_in.min(d_out);
        if rank == 0 || rank > max {
            return Err(ReparamError::InvalidRank { rank, max }.into());
        }
        let normal = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).expect("positive std");
        let a = DenseMatrix::from_fn(d_in, rank, |_, _| normal.sample(rng));
        let b = DenseMatrix::zeros(d_out, rank);
        Self::new(w0, a, b, alpha)
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        let r = self.a.cols();
        if self.b.cols() != r || self.a.rows() != self.w0.cols() || self.b.rows() != self.w0.rows() {
            return Err(AdapterError::Shape(format!(
                "w0 {:?}, a {:?}, b {:?}",
                self.w0.shape(),
                self.a.shape(),
                self.b.shape()
            )));
        }
        let max = self.w0.rows().min(self.w0.cols());
        if r > max {
            return Err(ReparamError::InvalidRank { rank: r, max }.into());
        }
        Ok(())
    }

    pub fn w0(&self) -> &DenseMatrix {
        &self.w0
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        hash_matrix(&mut h, &self.w0);
        hash_matrix(&mut h, &self.a);
        hash_matrix(&mut h, &self.b);
        self.alpha.to_bits().hash(&mut h);
        h.finish()
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<(DenseMatrix, LoraCache)> {
        if x.rows() != self.w0.cols() {
            return Err(AdapterError::InputDim {
                expected: self.w0.cols(),
                got: x.rows(),
            });
        }
        let u = matmul_tn(&self.a, x)?;
        let mut y = matmul(&self.w0, x)?;
        y.axpy(self.scaling(), &matmul(&self.b, &u)?)?;
        Ok((
            y,
            LoraCache {
                fingerprint: self.fingerprint(),
                x: x.clone(),
                u,
            },
        ))
    }

    pub fn forward_vec(&self, x: &DenseVector) -> Result<(DenseVector, LoraCache)> {
        let (y, cache) = self.forward(&DenseMatrix::from_columns(&[x.as_slice()]))?;
        Ok((DenseVector::from_vec(y.into_vec()), cache))
    }

    pub fn backward(&self, cache: &LoraCache, grad_y: &DenseMatrix) -> Result<LoraGrads> {
        if cache.fingerprint != self.fingerprint() {
            return Err(AdapterError::StaleCache);
        }
        let expected = (self.w0.rows(), cache.x.cols());
        if grad_y.shape() != expected {
            return Err(AdapterError::GradShape {
                expected,
                got: grad_y.shape(),
            });
        }
        let c = self.scaling();
        let g_b = matmul_nt(grad_y, &cache.u)?.scale(c);
        let grad_u = matmul_tn(&self.b, grad_y)?.scale(c);
        let g_a = matmul_nt(&cache.x, &grad_u)?;
        Ok(LoraGrads { g_a, g_b })
    }

    pub fn backward_vec(&self, cache: &LoraCache, grad_y: &DenseVector) -> Result<LoraGrads> {
        self.backward(cache, &DenseMatrix::from_columns(&[grad_y.as_slice()]))
    }

    /// The unscaled update `B Aᵀ`.
    pub fn delta(&self) -> DenseMatrix {
        matmul_nt(&self.b, &self.a).expect("factor shapes agree")
    }

    pub fn fold(&self) -> Result<FoldedWeight> {
        let mut w_eff = self.w0.clone();
        w_eff.axpy(self.scaling(), &self.delta())?;
        Ok(FoldedWeight { w_eff })
    }

    /// Singular values of `(α/r)·B Aᵀ`, descending.
    pub fn delta_spectrum(&self) -> Result<DenseVector> {
        let svd = svd_jacobi(&self.delta().scale(self.scaling()))?;
        let r = self.rank();
        Ok(DenseVector::from_vec(svd.s.as_slice()[..r].to_vec()))
    }

    /// The gauge-equivalent pair `(B M, A M⁻ᵀ)`, which leaves `B Aᵀ` unchanged.
    pub fn gauge_transform(&self, m: &DenseMatrix) -> Result<Self> {
        let r = self.rank();
        if m.shape() != (r, r) {
            return Err(AdapterError::Shape(format!("gauge matrix must be {r}x{r}, got {:?}", m.shape())));
        }
        let m_inv_t = linalg::solve(&m.transpose(), &DenseMatrix::identity(r))?;
        Self::new(
            self.w0.clone(),
            matmul(&self.a, &m_inv_t)?,
            matmul(&self.b, m)?,
            self.alpha,
        )
    }

    pub fn param_tensors(&mut self) -> Vec<ParamTensor<'_>> {
        vec![
            ParamTensor::new("a", self.a.as_mut_slice(), true),
            ParamTensor::new("b", self.b.as_mut_slice(), true),
        ]
    }
}

/// Which adapter a layer carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    OrthoGeo,
    Lora,
}

impl AdapterKind {
    pub fn label(self) -> &'static str {
        match self {
            AdapterKind::OrthoGeo => "OrthoGeoLoRA",
            AdapterKind::Lora => "LoRA",
        }
    }
}

/// Either adapter behind one interface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Adapter {
    OrthoGeo(OrthoGeoAdapter),
    Lora(LoraAdapter),
}

#[derive(Debug, Clone)]
pub enum AdapterCache {
    OrthoGeo(OrthoGeoCache),
    Lora(LoraCache),
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdapterGrads {
    OrthoGeo(ParamGrads),
    Lora(LoraGrads),
}

impl AdapterGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        match self {
            AdapterGrads::OrthoGeo(g) => g.slices(),
            AdapterGrads::Lora(g) => g.slices(),
        }
    }
}

impl Adapter {
    pub fn kind(&self) -> AdapterKind {
        match self {
            Adapter::OrthoGeo(_) => AdapterKind::OrthoGeo,
            Adapter::Lora(_) => AdapterKind::Lora,
        }
    }

    pub fn w0(&self) -> &DenseMatrix {
        match self {
            Adapter::OrthoGeo(a) => a.w0(),
            Adapter::Lora(a) => a.w0(),
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            Adapter::OrthoGeo(a) => a.rank(),
            Adapter::Lora(a) => a.rank(),
        }
    }

    pub fn alpha(&self) -> f64 {
        match self {
            Adapter::OrthoGeo(a) => a.alpha(),
            Adapter::Lora(a) => a.alpha(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Adapter::OrthoGeo(a) => a.validate(),
            Adapter::Lora(a) => a.validate(),
        }
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<(DenseMatrix, AdapterCache)> {
        match self {
            Adapter::OrthoGeo(a) => a.forward(x).map(|(y, c)| (y, AdapterCache::OrthoGeo(c))),
            Adapter::Lora(a) => a.forward(x).map(|(y, c)| (y, AdapterCache::Lora(c))),
        }
    }

    pub fn backward(&self, cache: &AdapterCache, grad_y: &DenseMatrix) -> Result<AdapterGrads> {
        match (self, cache) {
            (Adapter::OrthoGeo(a), AdapterCache::OrthoGeo(c)) => a.backward(c, grad_y).map(AdapterGrads::OrthoGeo),
            (Adapter::Lora(a), AdapterCache::Lora(c)) => a.backward(c, grad_y).map(AdapterGrads::Lora),
            _ => Err(AdapterError::StaleCache),
        }
    }

    pub fn fold(&self) -> Result<FoldedWeight> {
        match self {
            Adapter::OrthoGeo(a) => a.fold(),
            Adapter::Lora(a) => a.fold(),
        }
    }

    /// The scaled update `(α/r)·ΔW`.
    pub fn scaled_delta(&self) -> Result<DenseMatrix> {
        Ok(match self {
            Adapter::OrthoGeo(a) => a.delta()?.scale(a.scaling()),
            Adapter::Lora(a) => a.delta().scale(a.scaling()),
        })
    }

    pub fn delta_spectrum(&self) -> Result<DenseVector> {
        match self {
            Adapter::OrthoGeo(a) => a.delta_spectrum(),
            Adapter::Lora(a) => a.delta_spectrum(),
        }
    }

    pub fn param_tensors(&mut self) -> Vec<ParamTensor<'_>> {
        match self {
            Adapter::OrthoGeo(a) => a.param_tensors(),
            Adapter::Lora(a) => a.param_tensors(),
        }
    }

    pub fn trainable_count(&self) -> usize {
        let kind = match self.kind() {
            AdapterKind::OrthoGeo => ParamKind::OrthoGeo,
            AdapterKind::Lora => ParamKind::Lora,
        };
        let (d_out, d_in) = self.w0().shape();
        param_count(kind, d_in, d_out, self.rank())
    }
}

/// Fine-tuning scheme for [`param_count`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Full,
    Lora,
    OrthoGeo,
}

/// Trainable parameters of one `d_out × d_in` layer under each scheme.
pub fn param_count(kind: ParamKind, d_in: usize, d_out: usize, r: usize) -> usize {
    match kind {
        ParamKind::Full => d_out * d_in,
        ParamKind::Lora => d_in * r + d_out * r,
        ParamKind::OrthoGeo => d_in * r + d_out * r + r,
    }
}
