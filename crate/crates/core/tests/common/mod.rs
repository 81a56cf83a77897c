//! Helpers shared by the integration tests.
#![allow(dead_code)]

use orthogeo::adapters::Adapter;
use orthogeo::linalg::DenseMatrix;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-5;
pub const PROBES: usize = 20;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

pub fn inner(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
}

/// Central differences of `f` on `probes` seeded coordinates of `x`,
/// compared with `grad`. Returns the largest relative error, measured as
/// `|fd − g| / max(|fd|, |g|, 1e-3·max|grad|)`.
pub fn fd_error(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], grad: &[f64], probes: usize, seed: u64) -> f64 {
    assert_eq!(x.len(), grad.len());
    let picks: Vec<usize> = if probes >= x.len() {
        (0..x.len()).collect()
    } else {
        index::sample(&mut rng(seed ^ 0x5eed), x.len(), probes).into_vec()
    };
    let floor = 1e-3 * grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut worst = 0.0f64;
    let mut y = x.to_vec();
    for i in picks {
        y[i] = x[i] + FD_STEP;
        let up = f(&y);
        y[i] = x[i] - FD_STEP;
        let down = f(&y);
        y[i] = x[i];
        let fd = (up - down) / (2.0 * FD_STEP);
        let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(floor).max(f64::MIN_POSITIVE);
        worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
    }
    worst
}

pub fn adapter_params(a: &Adapter) -> Vec<f64> {
    let mut a = a.clone();
    a.param_tensors().iter().flat_map(|t| t.values.to_vec()).collect()
}

pub fn set_adapter_params(a: &mut Adapter, flat: &[f64]) {
    let mut at = 0;
    for t in a.param_tensors() {
        let n = t.values.len();
        t.values.copy_from_slice(&flat[at..at + n]);
        at += n;
    }
}

/// For each query: 1-based rank of the gold under descending score, ties to
/// the lower id, found by counting every candidate that beats the gold.
pub fn brute_force_ranks(scores: &[Vec<f64>], golds: &[usize]) -> Vec<usize> {
    scores
        .iter()
        .zip(golds)
        .map(|(row, &g)| {
            1 + row
                .iter()
                .enumerate()
                .filter(|&(c, &s)| s > row[g] || (s == row[g] && c < g))
                .count()
        })
        .collect()
}

/// MRR, Recall@1, Recall@3, NDCG@1, NDCG@3 from 1-based gold ranks.
pub fn brute_force_metrics(ranks: &[usize]) -> [f64; 5] {
    let n = ranks.len() as f64;
    let mean = |f: &dyn Fn(usize) -> f64| ranks.iter().map(|&r| f(r)).sum::<f64>() / n;
    [
        mean(&|r| 1.0 / r as f64),
        mean(&|r| (r <= 1) as u8 as f64),
        mean(&|r| (r <= 3) as u8 as f64),
        mean(&|r| if r <= 1 { 1.0 } else { 0.0 }),
        mean(&|r| if r <= 3 { 1.0 / ((r + 1) as f64).log2() } else { 0.0 }),
    ]
}
