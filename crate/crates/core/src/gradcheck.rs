//! Finite-difference oracle suite over every differentiable map in the crate.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::adapters::{Adapter, LoraAdapter, OrthoGeoAdapter};
use crate::bench::{infonce_loss, stream_rng, BiEncoder, BenchError};
use crate::linalg::{DenseMatrix, DenseVector, LinalgError};
use crate::optim::{grad_check, GradCheckReport};
use crate::reparam::{
    cayley_orth_map, cayley_orth_map_vjp, orth_map, orth_map_vjp, sigma_map, sigma_map_vjp, EuclideanParams, SigmaMode,
    ThetaInit,
};

/// Relative-error budget each check must meet.
pub const ORACLE_TOLERANCE: f64 = 1e-5;

/// `(d_in, d_out, r)` cycled through by seed.
pub const ORACLE_SHAPES: [(usize, usize, usize); 4] = [(6, 5, 2), (8, 8, 3), (12, 10, 4), (5, 12, 1)];

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheck {
    pub name: &'static str,
    pub seed: u64,
    pub shape: (usize, usize, usize),
    pub report: GradCheckReport,
}

impl OracleCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.report.max_rel_error <= tol
    }
}

fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn inner(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
}

type OrthMap = fn(&DenseMatrix) -> Result<DenseMatrix, LinalgError>;

/// `⟨g, f(θ)⟩` with `θ` read from `flat` in the shape of `g`.
fn map_probe(f: OrthMap, g: &DenseMatrix, flat: &[f64]) -> f64 {
    let t = DenseMatrix::new(g.rows(), g.cols(), flat.to_vec()).expect("shape");
    inner(g, &f(&t).expect("full rank"))
}

fn flat_params(adapter: &Adapter) -> Vec<f64> {
    let mut a = adapter.clone();
    a.param_tensors().iter().flat_map(|t| t.values.to_vec()).collect()
}

fn load_params(adapter: &mut Adapter, flat: &[f64]) {
    let mut offset = 0;
    for t in adapter.param_tensors() {
        let n = t.values.len();
        t.values.copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
}

fn adapters_for(seed: u64, (d_in, d_out, r): (usize, usize, usize)) -> (Adapter, Adapter) {
    let mut rng = stream_rng(seed, 100);
    let w0 = gaussian(d_out, d_in, &mut rng);
    let mut params = EuclideanParams::init(d_in, d_out, r, SigmaMode::Softplus, 1e-6, 0.0, ThetaInit::Gaussian, &mut rng)
        .expect("valid shapes");
    for v in params.s.as_mut_slice() {
        *v = StandardNormal.sample(&mut rng);
    }
    let og = OrthoGeoAdapter::new(w0.clone(), params, 3.0).expect("valid adapter");
    let lora = LoraAdapter::new(w0, gaussian(d_in, r, &mut rng), gaussian(d_out, r, &mut rng), 3.0).expect("valid adapter");
    (Adapter::OrthoGeo(og), Adapter::Lora(lora))
}

/// Runs every check for `seeds` seeds (0..seeds) with `probes` probed
/// coordinates each, central step `h`.
pub fn gradient_suite(seeds: u64, probes: usize, h: f64) -> Result<Vec<OracleCheck>, BenchError> {
    let mut out = Vec::new();
    for seed in 0..seeds {
        let shape = ORACLE_SHAPES[(seed % ORACLE_SHAPES.len() as u64) as usize];
        let (d_in, d_out, r) = shape;
        let mut rng = stream_rng(seed, 101);
        let mut push = |name, report| {
            out.push(OracleCheck {
                name,
                seed,
                shape,
                report,
            })
        };

        let theta = gaussian(d_in, r, &mut rng);
        let g = gaussian(d_in, r, &mut rng);
        let analytic = orth_map_vjp(&theta, &g)?;
        push("orth_map", grad_check(|v| map_probe(orth_map, &g, v), theta.as_slice(), analytic.as_slice(), probes, h, seed));
        let small = theta.scale(0.3);
        let analytic = cayley_orth_map_vjp(&small, &g)?;
        push(
            "cayley_orth_map",
            grad_check(|v| map_probe(cayley_orth_map, &g, v), small.as_slice(), analytic.as_slice(), probes, h, seed),
        );

        let s = DenseVector::from_vec((0..r).map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                2.0 * z
            }).collect());
        let gs = DenseVector::from_vec((0..r).map(|_| StandardNormal.sample(&mut rng)).collect());
        let analytic = sigma_map_vjp(&s, SigmaMode::Softplus, 1e-6, &gs);
        push(
            "sigma_map",
            grad_check(
                |v| sigma_map(&DenseVector::from_vec(v.to_vec()), SigmaMode::Softplus, 1e-6).dot(&gs),
                s.as_slice(),
                analytic.as_slice(),
                probes,
                h,
                seed,
            ),
        );

        let (og, lora) = adapters_for(seed, shape);
        let n = 3;
        let x = gaussian(d_in, n, &mut rng);
        let gy = gaussian(d_out, n, &mut rng);
        for (name, adapter) in [("orthogeo_backward", &og), ("lora_backward", &lora)] {
            let (_, cache) = adapter.forward(&x)?;
            let grads = adapter.backward(&cache, &gy)?;
            let analytic: Vec<f64> = grads.slices().concat();
            let mut work = adapter.clone();
            let report = grad_check(
                |v| {
                    load_params(&mut work, v);
                    inner(&gy, &work.forward(&x).expect("forward").0)
                },
                &flat_params(adapter),
                &analytic,
                probes,
                h,
                seed,
            );
            push(name, report);
        }

        let m = 4;
        let q = gaussian(d_out, n, &mut rng);
        let c = gaussian(d_out, m, &mut rng);
        let gold: Vec<usize> = (0..n).map(|i| (i * 3 + seed as usize) % m).collect();
        let tau = 0.5;
        let res = infonce_loss(&q, &c, &gold, tau)?;
        let mut flat = q.as_slice().to_vec();
        flat.extend_from_slice(c.as_slice());
        let analytic: Vec<f64> = res.grad_queries.as_slice().iter().chain(res.grad_candidates.as_slice()).copied().collect();
        push(
            "infonce",
            grad_check(
                |v| {
                    let q = DenseMatrix::new(d_out, n, v[..d_out * n].to_vec()).expect("shape");
                    let c = DenseMatrix::new(d_out, m, v[d_out * n..].to_vec()).expect("shape");
                    infonce_loss(&q, &c, &gold, tau).expect("loss").loss
                },
                &flat,
                &analytic,
                probes,
                h,
                seed,
            ),
        );

        // InfoNCE through the normalized adapted encoder, queries and candidates sharing weights.
        let xc = gaussian(d_in, n + m, &mut rng);
        for (name, adapter) in [("encoder_orthogeo", &og), ("encoder_lora", &lora)] {
            let loss_of = |a: &Adapter| -> Result<(f64, Vec<f64>), BenchError> {
                let enc = BiEncoder::adapted(a.clone(), tau)?;
                let (emb, cache) = enc.forward(&xc)?;
                let qe = DenseMatrix::from_fn(d_out, n, |i, j| emb[(i, j)]);
                let ce = DenseMatrix::from_fn(d_out, m, |i, j| emb[(i, n + j)]);
                let res = infonce_loss(&qe, &ce, &gold, tau)?;
                let grad = DenseMatrix::from_fn(d_out, n + m, |i, j| {
                    if j < n {
                        res.grad_queries[(i, j)]
                    } else {
                        res.grad_candidates[(i, j - n)]
                    }
                });
                let grads = enc.backward(&cache, &grad)?.expect("adapted");
                Ok((res.loss, grads.slices().concat()))
            };
            let (_, analytic) = loss_of(adapter)?;
            let mut work = adapter.clone();
            let report = grad_check(
                |v| {
                    load_params(&mut work, v);
                    loss_of(&work).expect("loss").0
                },
                &flat_params(adapter),
                &analytic,
                probes,
                h,
                seed,
            );
            push(name, report);
        }
    }
    Ok(out)
}
