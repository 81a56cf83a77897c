//! AdamW in the Euclidean parameter space, plus a finite-difference gradient checker.
//!
//! Because the orthogonality constraints live inside the reparameterization,
//! the optimizer here is the stock decoupled-weight-decay Adam: it never needs
//! to know which tensors feed a manifold.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("non-finite gradient in tensor `{tensor}` at index {index}")]
    NonFiniteGradient { tensor: &'static str, index: usize },
    #[error("tensor `{tensor}`: expected {expected} values, got {got}")]
    ShapeMismatch {
        tensor: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("expected {expected} tensors, got {got}")]
    TensorCount { expected: usize, got: usize },
    #[error("invalid optimizer hyperparameter: {0}")]
    InvalidConfig(String),
}

/// A mutable view of one trainable tensor.
pub struct ParamTensor<'a> {
    pub name: &'static str,
    pub values: &'a mut [f64],
    /// Whether decoupled weight decay applies to this tensor.
    pub decay: bool,
}

impl<'a> ParamTensor<'a> {
    pub fn new(name: &'static str, values: &'a mut [f64], decay: bool) -> Self {
        Self { name, values, decay }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(OptimError::InvalidConfig(format!("lr = {}", self.lr)));
        }
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(OptimError::InvalidConfig(format!(
                "betas must lie in (0, 1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) {
            return Err(OptimError::InvalidConfig(format!("eps = {}", self.eps)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(OptimError::InvalidConfig(format!("weight_decay = {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Moment buffers and step counter. Serializes losslessly, so a restored
/// state continues a run bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    /// Zeroed buffers for tensors of the given lengths.
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Result<Self, OptimError> {
        config.validate()?;
        Ok(Self {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        })
    }

    pub fn for_tensors(config: AdamConfig, params: &[ParamTensor<'_>]) -> Result<Self, OptimError> {
        let sizes: Vec<usize> = params.iter().map(|p| p.values.len()).collect();
        Self::new(config, &sizes)
    }
}

/// One AdamW step: decoupled decay on tensors flagged `decay`, then the
/// bias-corrected Adam update. Gradients are validated before anything moves.
pub fn adamw_step(state: &mut AdamState, params: &mut [ParamTensor<'_>], grads: &[&[f64]]) -> Result<(), OptimError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(OptimError::TensorCount {
            expected: state.m.len(),
            got: params.len().min(grads.len()),
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        for (got, expected) in [(p.values.len(), m.len()), (g.len(), m.len())] {
            if got != expected {
                return Err(OptimError::ShapeMismatch {
                    tensor: p.name,
                    expected,
                    got,
                });
            }
        }
        if let Some(index) = g.iter().position(|v| !v.is_finite()) {
            return Err(OptimError::NonFiniteGradient { tensor: p.name, index });
        }
    }

    state.t += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let t = state.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);

    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        let decay = if p.decay { lr * weight_decay } else { 0.0 };
        for i in 0..g.len() {
            let gi = g[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let x = &mut p.values[i];
            *x -= decay * *x;
            *x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Outcome of a finite-difference check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst_index: usize,
    pub probes: usize,
}

pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Compares `analytic` with central differences of `loss` at `params` on up to
/// `probes` distinct coordinates drawn with `seed` (all coordinates when
/// `probes >= params.len()`).
///
/// The error on coordinate `i` is `|fd − g| / max(|fd|, |g|, 1e-3·‖g‖∞)`: entries
/// far below the gradient's own scale are judged against that scale rather
/// than against their own near-zero magnitude.
pub fn grad_check<F>(mut loss: F, params: &[f64], analytic: &[f64], probes: usize, h: f64, seed: u64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "grad_check: gradient length mismatch");
    let n = params.len();
    let coords: Vec<usize> = if probes >= n {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = index::sample(&mut rng, n, probes).into_vec();
        picked.sort_unstable();
        picked
    };
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(f64::MIN_POSITIVE);

    let mut work = params.to_vec();
    let mut worst = (0.0f64, coords.first().copied().unwrap_or(0));
    for &i in &coords {
        let orig = work[i];
        work[i] = orig + h;
        let plus = loss(&work);
        work[i] = orig - h;
        let minus = loss(&work);
        work[i] = orig;
        let fd = (plus - minus) / (2.0 * h);
        let g = analytic[i];
        let denom = fd.abs().max(g.abs()).max(floor);
        let err = (fd - g).abs() / denom;
        if err > worst.0 || err.is_nan() {
            worst = (if err.is_nan() { f64::INFINITY } else { err }, i);
        }
    }
    GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        probes: coords.len(),
    }
}
