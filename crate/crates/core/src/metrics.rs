//! Ranking metrics for single-gold retrieval: MRR, Recall@k and NDCG@k.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{BiEncoder, BenchError, RetrievalDataset, Split};
use crate::linalg::{self, DenseMatrix};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("run has no queries")]
    EmptyRun,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("query {query}: {reason}")]
    InvalidRanking { query: usize, reason: String },
    #[error(transparent)]
    Encode(#[from] Box<BenchError>),
}

/// Per-query candidate orderings (best first) and the gold id of each query.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedRun {
    rankings: Vec<Vec<usize>>,
    golds: Vec<usize>,
    gold_ranks: Vec<usize>,
}

impl RankedRun {
    /// Validates that every list is a permutation of the same candidate set
    /// and contains its gold id.
    pub fn new(rankings: Vec<Vec<usize>>, golds: Vec<usize>) -> Result<Self, MetricsError> {
        if rankings.len() != golds.len() {
            return Err(MetricsError::InvalidRanking {
                query: rankings.len().min(golds.len()),
                reason: format!("{} rankings but {} golds", rankings.len(), golds.len()),
            });
        }
        let mut reference: Option<Vec<usize>> = None;
        let mut gold_ranks = Vec::with_capacity(golds.len());
        for (q, (list, &gold)) in rankings.iter().zip(&golds).enumerate() {
            let mut sorted = list.clone();
            sorted.sort_unstable();
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                return Err(MetricsError::InvalidRanking {
                    query: q,
                    reason: "duplicate candidate".into(),
                });
            }
            match &reference {
                None => reference = Some(sorted),
                Some(r) if *r != sorted => {
                    return Err(MetricsError::InvalidRanking {
                        query: q,
                        reason: "not a permutation of the candidate set".into(),
                    })
                }
                Some(_) => {}
            }
            let pos = list.iter().position(|&c| c == gold).ok_or_else(|| MetricsError::InvalidRanking {
                query: q,
                reason: format!("gold {gold} missing from ranking"),
            })?;
            gold_ranks.push(pos + 1);
        }
        Ok(Self {
            rankings,
            golds,
            gold_ranks,
        })
    }

    /// Ranks candidates by descending score, ties broken by ascending id.
    /// `scores[q][j]` is the score of `candidate_ids[j]` for query `q`.
    pub fn from_scores(scores: &[Vec<f64>], candidate_ids: &[usize], golds: Vec<usize>) -> Result<Self, MetricsError> {
        let rankings = scores
            .iter()
            .map(|row| {
                assert_eq!(row.len(), candidate_ids.len(), "score row length");
                let mut order: Vec<usize> = (0..row.len()).collect();
                order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(candidate_ids[a].cmp(&candidate_ids[b])));
                order.into_iter().map(|j| candidate_ids[j]).collect()
            })
            .collect();
        Self::new(rankings, golds)
    }

    pub fn len(&self) -> usize {
        self.golds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.golds.is_empty()
    }

    pub fn rankings(&self) -> &[Vec<usize>] {
        &self.rankings
    }

    pub fn golds(&self) -> &[usize] {
        &self.golds
    }

    /// 1-based rank of the gold id for each query.
    pub fn gold_ranks(&self) -> &[usize] {
        &self.gold_ranks
    }

    fn mean_of(&self, f: impl Fn(usize) -> f64) -> Result<f64, MetricsError> {
        if self.is_empty() {
            return Err(MetricsError::EmptyRun);
        }
        Ok(self.gold_ranks.iter().map(|&r| f(r)).sum::<f64>() / self.len() as f64)
    }
}

pub fn mrr(run: &RankedRun) -> Result<f64, MetricsError> {
    run.mean_of(|rank| 1.0 / rank as f64)
}

pub fn recall_at_k(run: &RankedRun, k: usize) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    run.mean_of(|rank| if rank <= k { 1.0 } else { 0.0 })
}

/// Binary-relevance NDCG@k; with one gold item the ideal DCG is 1.
pub fn ndcg_at_k(run: &RankedRun, k: usize) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    run.mean_of(|rank| if rank <= k { 1.0 / (1.0 + rank as f64).log2() } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mrr: f64,
    pub recall_at: BTreeMap<usize, f64>,
    pub ndcg_at: BTreeMap<usize, f64>,
    pub n_queries: usize,
}

/// Cutoffs reported in the results table.
pub const TABLE_KS: [usize; 2] = [1, 3];

pub const TABLE_HEADER: &str = "Method,MRR,Recall@1,Recall@3,NDCG@1,NDCG@3";

impl MetricsReport {
    pub fn from_run(run: &RankedRun, ks: &[usize]) -> Result<Self, MetricsError> {
        let mut recall_at = BTreeMap::new();
        let mut ndcg_at = BTreeMap::new();
        for &k in ks {
            recall_at.insert(k, recall_at_k(run, k)?);
            ndcg_at.insert(k, ndcg_at_k(run, k)?);
        }
        Ok(Self {
            mrr: mrr(run)?,
            recall_at,
            ndcg_at,
            n_queries: run.len(),
        })
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k).copied()
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.ndcg_at.get(&k).copied()
    }

    /// One row in [`TABLE_HEADER`] order. Values use Rust's shortest round-trip
    /// formatting so the row parses back to the exact report values.
    pub fn table_row(&self, method: &str) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{method},{},{},{},{},{}",
            self.mrr,
            cell(self.recall(1)),
            cell(self.recall(3)),
            cell(self.ndcg(1)),
            cell(self.ndcg(3)),
        )
    }

    pub fn table_csv(&self, method: &str) -> String {
        format!("{TABLE_HEADER}\n{}\n", self.table_row(method))
    }
}

/// Encodes every description of `split` and every candidate concept, ranks
/// candidates by cosine score and reports the metrics.
pub fn evaluate(enc: &BiEncoder, dataset: &RetrievalDataset, split: Split, ks: &[usize]) -> Result<MetricsReport, MetricsError> {
    let run = ranked_run(enc, dataset, split)?;
    MetricsReport::from_run(&run, ks)
}

pub fn ranked_run(enc: &BiEncoder, dataset: &RetrievalDataset, split: Split) -> Result<RankedRun, MetricsError> {
    let examples: Vec<_> = dataset.split(split).collect();
    if examples.is_empty() {
        return Err(MetricsError::EmptyRun);
    }
    let columns: Vec<&[f64]> = examples.iter().map(|e| e.description.as_slice()).collect();
    let queries = enc
        .encode_batch(&DenseMatrix::from_columns(&columns))
        .map_err(Box::new)?;
    let candidates = enc
        .encode_batch(&dataset.candidate_matrix())
        .map_err(Box::new)?;
    let scores = score_matrix(&queries, &candidates);
    let golds = examples.iter().map(|e| e.gold).collect();
    RankedRun::from_scores(&scores, dataset.candidate_ids(), golds)
}

/// `scores[q][c] = ⟨query_q, candidate_c⟩` for column-stacked embeddings.
pub(crate) fn score_matrix(queries: &DenseMatrix, candidates: &DenseMatrix) -> Vec<Vec<f64>> {
    let s = linalg::matmul_tn(queries, candidates).expect("embedding dims agree");
    (0..s.rows()).map(|q| s.row(q).to_vec()).collect()
}
