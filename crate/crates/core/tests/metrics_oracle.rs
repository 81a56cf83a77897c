//! Ranking metrics against an exhaustive re-implementation on a 10-concept dataset.

mod common;

use common::{brute_force_metrics, brute_force_ranks};
use orthogeo::bench::{build_dataset, train, Split};
use orthogeo::config::{Method, RunConfig};
use orthogeo::metrics::{evaluate, mrr, ndcg_at_k, recall_at_k, RankedRun};

fn micro_config(method: Method) -> RunConfig {
    RunConfig {
        method,
        depth: 1,
        branching: 9,
        d_feat: 8,
        d_emb: 8,
        rank: 3,
        per_concept: 10,
        noise: 0.9,
        batch_size: 16,
        max_steps: 40,
        eval_interval: 10,
        lr: 1e-2,
        patience: 0,
        ..RunConfig::default()
    }
}

#[test]
fn evaluate_matches_brute_force_on_micro_dataset() {
    for method in [Method::Base, Method::OrthoGeo, Method::Lora] {
        let cfg = micro_config(method);
        let run = train(&cfg).unwrap();
        let ds = build_dataset(&run.checkpoint.config).unwrap();
        assert_eq!(ds.candidate_ids().len(), 10);
        let enc = run.encoder();
        let cands: Vec<Vec<f64>> = (0..10)
            .map(|c| {
                let col = ds.candidate_matrix().column(c);
                enc.encode(&orthogeo::linalg::DenseVector::new(col).unwrap()).unwrap().into_vec()
            })
            .collect();
        for split in [Split::Train, Split::Val, Split::Test] {
            let mut scores = Vec::new();
            let mut golds = Vec::new();
            for e in ds.split(split) {
                let q = enc.encode(&e.description).unwrap();
                scores.push(cands.iter().map(|c| c.iter().zip(q.as_slice()).map(|(a, b)| a * b).sum()).collect::<Vec<f64>>());
                golds.push(e.gold);
            }
            let expected = brute_force_metrics(&brute_force_ranks(&scores, &golds));
            let report = evaluate(enc, &ds, split, &[1, 3]).unwrap();
            let got = [report.mrr, report.recall_at[&1], report.recall_at[&3], report.ndcg_at[&1], report.ndcg_at[&3]];
            for (g, e) in got.iter().zip(&expected) {
                assert!((g - e).abs() <= 1e-12, "{method:?} {split:?}: {got:?} vs {expected:?}");
            }
            assert_eq!(report.n_queries, golds.len());
        }
    }
}

#[test]
fn hand_computed_three_query_run() {
    let ids: Vec<usize> = (0..5).collect();
    // Gold ranks 1, 2 and 4.
    let run = RankedRun::new(
        vec![ids.clone(), vec![1, 0, 2, 3, 4], vec![3, 2, 1, 0, 4]],
        vec![0, 0, 0],
    )
    .unwrap();
    assert!((mrr(&run).unwrap() - 0.583_333_333_333_333_3).abs() <= 1e-12);
    assert!((recall_at_k(&run, 1).unwrap() - 1.0 / 3.0).abs() <= 1e-12);
    assert!((recall_at_k(&run, 3).unwrap() - 2.0 / 3.0).abs() <= 1e-12);
    let ndcg3 = (1.0 + 1.0 / 3f64.log2()) / 3.0;
    assert!((ndcg_at_k(&run, 3).unwrap() - ndcg3).abs() <= 1e-12);
}

#[test]
fn noiseless_identity_retrieval_is_perfect() {
    let cfg = RunConfig {
        method: Method::Base,
        noise: 0.0,
        mix: 0.0,
        ..micro_config(Method::Base)
    };
    let run = train(&cfg).unwrap();
    let report = run.evaluate(Split::Test).unwrap();
    assert_eq!(report.mrr, 1.0);
    assert_eq!(report.recall_at[&1], 1.0);
    assert_eq!(report.ndcg_at[&3], 1.0);
}
