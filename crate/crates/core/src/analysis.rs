//! Spectrum summaries, rank ablation and convergence tables over trained runs.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{Adapter, AdapterError, OrthoGeoAdapter};
use crate::bench::{self, LogEntry, Split};
use crate::config::{Method, RunConfig};
use crate::linalg::{self, DenseVector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("spectrum has no positive entry")]
    ZeroSpectrum,
    #[error("spectrum entry {index} is negative or not finite")]
    BadSpectrum { index: usize },
    #[error("rank {rank} exceeds min(d_feat, d_emb) = {max}")]
    RankTooLarge { rank: usize, max: usize },
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

fn check_spectrum(s: &DenseVector) -> Result<(), AnalysisError> {
    if let Some(index) = s.as_slice().iter().position(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(AnalysisError::BadSpectrum { index });
    }
    if s.as_slice().iter().all(|v| *v == 0.0) {
        return Err(AnalysisError::ZeroSpectrum);
    }
    Ok(())
}

/// `exp(−Σ pᵢ ln pᵢ)` with `pᵢ = σᵢ / Σσ`.
pub fn effective_rank(spectrum: &DenseVector) -> Result<f64, AnalysisError> {
    check_spectrum(spectrum)?;
    let total: f64 = spectrum.as_slice().iter().sum();
    let entropy: f64 = spectrum
        .as_slice()
        .iter()
        .filter(|v| **v > 0.0)
        .map(|v| {
            let p = v / total;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp())
}

/// `Σσ² / σ²_max`.
pub fn stable_rank(spectrum: &DenseVector) -> Result<f64, AnalysisError> {
    check_spectrum(spectrum)?;
    let max = spectrum.as_slice().iter().copied().fold(0.0, f64::max);
    Ok(spectrum.as_slice().iter().map(|v| (v / max) * (v / max)).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRecord {
    pub method: String,
    pub rank: usize,
    /// Descending singular values of the scaled update.
    pub singular_values: DenseVector,
    pub effective_rank: f64,
    pub stable_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SpectrumReport {
    pub records: Vec<SpectrumRecord>,
    /// One message per adapter left out.
    pub warnings: Vec<String>,
}

pub const SPECTRUM_HEADER: &str = "method,r,idx,sigma";

impl SpectrumReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SPECTRUM_HEADER}\n");
        for rec in &self.records {
            for (i, s) in rec.singular_values.as_slice().iter().enumerate() {
                out.push_str(&format!("{},{},{},{}\n", rec.method, rec.rank, i, s));
            }
        }
        out
    }
}

/// Spectrum and rank summaries per labelled adapter. Adapters whose update
/// is exactly zero are skipped with a warning.
pub fn spectrum_report<'a>(adapters: impl IntoIterator<Item = (&'a str, &'a Adapter)>) -> Result<SpectrumReport, AnalysisError> {
    let mut report = SpectrumReport::default();
    for (label, adapter) in adapters {
        let sv = adapter.delta_spectrum()?;
        if sv.as_slice().iter().all(|v| *v == 0.0) {
            report
                .warnings
                .push(format!("{label} (r={}): update is zero, no spectrum", adapter.rank()));
            continue;
        }
        report.records.push(SpectrumRecord {
            method: label.to_string(),
            rank: adapter.rank(),
            effective_rank: effective_rank(&sv)?,
            stable_rank: stable_rank(&sv)?,
            singular_values: sv,
        });
    }
    Ok(report)
}

/// Largest gap between the adapter's sorted `|σ|·α/r` and the singular values
/// of its composed scaled update.
pub fn sigma_svd_gap(adapter: &OrthoGeoAdapter) -> Result<f64, AnalysisError> {
    let internal = adapter.delta_spectrum()?;
    let composed = adapter.delta()?.scale(adapter.scaling());
    let svd = linalg::svd_jacobi(&composed).map_err(AdapterError::from)?;
    Ok(internal
        .as_slice()
        .iter()
        .zip(svd.s.as_slice())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub method: Method,
    pub rank: usize,
    pub seed: u64,
    /// Final test MRR, or the error that stopped the run.
    pub outcome: Result<f64, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRecord {
    pub method: Method,
    pub rank: usize,
    /// Mean over the successful seeds; `None` if every seed failed.
    pub mean_mrr: Option<f64>,
    /// One entry per seed, in seed order.
    pub per_seed: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ablation {
    pub cells: Vec<AblationCell>,
    pub records: Vec<AblationRecord>,
}

pub const ABLATION_HEADER: &str = "method,r,seed,mrr";
pub const ABLATION_SUMMARY_HEADER: &str = "method,r,mean_mrr,seeds_ok";

/// Ranks used when none are given.
pub const DEFAULT_ABLATION_RANKS: [usize; 4] = [2, 4, 8, 16];

impl Ablation {
    /// One row per cell; failed cells leave `mrr` empty.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{ABLATION_HEADER}\n");
        for c in &self.cells {
            let mrr = c.outcome.as_ref().map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", c.method.label(), c.rank, c.seed, mrr));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = format!("{ABLATION_SUMMARY_HEADER}\n");
        for r in &self.records {
            let mean = r.mean_mrr.map(|v| v.to_string()).unwrap_or_default();
            let ok = r.per_seed.iter().filter(|v| v.is_some()).count();
            out.push_str(&format!("{},{},{},{}\n", r.method.label(), r.rank, mean, ok));
        }
        out
    }

    pub fn failures(&self) -> impl Iterator<Item = &AblationCell> {
        self.cells.iter().filter(|c| c.outcome.is_err())
    }
}

fn run_cell(base: &RunConfig, method: Method, rank: usize, seed: u64) -> Result<f64, String> {
    let cfg = RunConfig {
        method,
        rank,
        seed,
        ..base.clone()
    };
    let run = bench::train(&cfg).map_err(|e| e.to_string())?;
    run.evaluate(Split::Test).map(|m| m.mrr).map_err(|e| e.to_string())
}

/// Trains every (rank, method, seed) cell and aggregates final test MRR.
/// Cells run on up to `workers` threads; results are ordered by rank, then
/// method, then seed regardless of scheduling. A failing cell is recorded
/// and the rest continue.
pub fn rank_ablation(
    base: &RunConfig,
    ranks: &[usize],
    methods: &[Method],
    seeds: &[u64],
    workers: usize,
) -> Result<Ablation, AnalysisError> {
    let max = base.d_feat.min(base.d_emb);
    if let Some(&rank) = ranks.iter().find(|&&r| r > max) {
        return Err(AnalysisError::RankTooLarge { rank, max });
    }
    let jobs: Vec<(Method, usize, u64)> = ranks
        .iter()
        .flat_map(|&r| methods.iter().flat_map(move |&m| seeds.iter().map(move |&s| (m, r, s))))
        .collect();
    let results: Mutex<Vec<Option<Result<f64, String>>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(m, r, s)) = jobs.get(i) else { break };
                let out = run_cell(base, m, r, s);
                results.lock().expect("no worker panicked")[i] = Some(out);
            });
        }
    });
    let cells: Vec<AblationCell> = jobs
        .iter()
        .zip(results.into_inner().expect("no worker panicked"))
        .map(|(&(method, rank, seed), out)| AblationCell {
            method,
            rank,
            seed,
            outcome: out.expect("every job ran"),
        })
        .collect();
    let records = cells
        .chunks(seeds.len().max(1))
        .filter(|chunk| !chunk.is_empty() && !seeds.is_empty())
        .map(|chunk| {
            let per_seed: Vec<Option<f64>> = chunk.iter().map(|c| c.outcome.clone().ok()).collect();
            let ok: Vec<f64> = per_seed.iter().flatten().copied().collect();
            AblationRecord {
                method: chunk[0].method,
                rank: chunk[0].rank,
                mean_mrr: (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64),
                per_seed,
            }
        })
        .collect();
    Ok(Ablation { cells, records })
}

pub const CONVERGENCE_LONG_HEADER: &str = "method,seed,step,train_loss,val_mrr";

/// Long-format validation curves of several runs, one row per log entry.
pub fn convergence_long_csv<'a>(runs: impl IntoIterator<Item = (&'a str, u64, &'a [LogEntry])>) -> String {
    let mut out = format!("{CONVERGENCE_LONG_HEADER}\n");
    for (label, seed, log) in runs {
        for e in log {
            let loss = e.train_loss.map(|l| l.to_string()).unwrap_or_default();
            out.push_str(&format!("{label},{seed},{},{loss},{}\n", e.step, e.val_mrr));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DenseMatrix;
    use crate::adapters::LoraAdapter;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DenseVector {
        DenseVector::new(xs.to_vec()).unwrap()
    }

    #[test]
    fn effective_rank_examples() {
        assert!((effective_rank(&v(&[0.3; 8])).unwrap() - 8.0).abs() < 1e-12);
        assert_eq!(effective_rank(&v(&[1.0, 0.0, 0.0, 0.0])).unwrap(), 1.0);
        assert!((effective_rank(&v(&[2.0, 1.0, 1.0])).unwrap() - 2f64.powf(1.5)).abs() < 1e-12);
        assert!((effective_rank(&v(&[2.0, 1.0, 1.0])).unwrap() - 2.8284).abs() < 1e-4);
        assert_eq!(effective_rank(&v(&[0.0, 0.0])), Err(AnalysisError::ZeroSpectrum));
        assert_eq!(effective_rank(&v(&[1.0, -1.0])), Err(AnalysisError::BadSpectrum { index: 1 }));
    }

    #[test]
    fn stable_rank_examples() {
        assert!((stable_rank(&v(&[2.0, 1.0, 1.0])).unwrap() - 1.5).abs() < 1e-15);
        assert_eq!(stable_rank(&v(&[1.0; 4])).unwrap(), 4.0);
    }

    #[test]
    fn zero_update_adapter_is_skipped() {
        let mut rng = bench::stream_rng(0, 0);
        let lora = Adapter::Lora(LoraAdapter::init(DenseMatrix::identity(6), 2, 16.0, &mut rng).unwrap());
        let report = spectrum_report([("LoRA", &lora)]).unwrap();
        assert!(report.records.is_empty());
        assert_eq!(report.warnings.len(), 1);
        assert_eq!(report.to_csv(), format!("{SPECTRUM_HEADER}\n"));
    }

    #[test]
    fn ablation_bookkeeping() {
        let base = RunConfig {
            depth: 1,
            branching: 3,
            d_feat: 6,
            d_emb: 6,
            per_concept: 10,
            batch_size: 8,
            max_steps: 4,
            eval_interval: 2,
            ..RunConfig::default()
        };
        let abl = rank_ablation(&base, &[2], &[Method::OrthoGeo, Method::Lora], &[1], 2).unwrap();
        assert_eq!(abl.records.len(), 2);
        assert_eq!(abl.cells.len(), 2);
        assert_eq!(abl.to_csv().lines().count(), 3);
        assert!(abl.to_csv().starts_with("method,r,seed,mrr\nOrthoGeoLoRA,2,1,"));
        let serial = rank_ablation(&base, &[2], &[Method::OrthoGeo, Method::Lora], &[1], 1).unwrap();
        assert_eq!(serial.to_csv(), abl.to_csv());
        assert!(matches!(
            rank_ablation(&base, &[7], &[Method::Lora], &[1], 1),
            Err(AnalysisError::RankTooLarge { rank: 7, max: 6 })
        ));
    }

    #[test]
    fn failing_cell_is_recorded() {
        let base = RunConfig {
            depth: 1,
            branching: 3,
            d_feat: 6,
            d_emb: 6,
            per_concept: 10,
            batch_size: 8,
            max_steps: 2,
            temperature: -1.0,
            ..RunConfig::default()
        };
        let abl = rank_ablation(&base, &[1, 2], &[Method::Lora], &[1, 2], 1).unwrap();
        assert_eq!(abl.failures().count(), 4);
        assert!(abl.records.iter().all(|r| r.mean_mrr.is_none() && r.per_seed.len() == 2));
        assert!(abl.to_csv().lines().skip(1).all(|l| l.ends_with(',')));
    }

    #[test]
    fn convergence_long_format() {
        let log = [LogEntry { step: 0, train_loss: None, val_mrr: 0.5 }];
        let csv = convergence_long_csv([("LoRA", 3, &log[..])]);
        assert_eq!(csv, "method,seed,step,train_loss,val_mrr\nLoRA,3,0,,0.5\n");
    }

    proptest! {
        #[test]
        fn effective_rank_bounds_and_scale_invariance(
            xs in prop::collection::vec(0.0f64..10.0, 1..12),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(xs.iter().any(|x| *x > 1e-6));
            let s = v(&xs);
            let e = effective_rank(&s).unwrap();
            prop_assert!(e >= 1.0 - 1e-12 && e <= xs.len() as f64 + 1e-9);
            let scaled = v(&xs.iter().map(|x| x * c).collect::<Vec<_>>());
            prop_assert!((effective_rank(&scaled).unwrap() - e).abs() < 1e-9);
            let sr = stable_rank(&s).unwrap();
            prop_assert!(sr >= 1.0 - 1e-12 && sr <= xs.len() as f64 + 1e-9);
        }
    }
}
