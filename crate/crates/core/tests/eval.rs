mod common;

use hybrid_encoder::ann::Hit;
use hybrid_encoder::corpus::{generate_synthetic, AdId};
use hybrid_encoder::eval::{
    benchmark, eval_subset, evaluate_hit_at_n, hit_rates, p95, parse_csv, rank_of, standalone_passes, sweep_degree,
    sweep_table, to_csv, EvalReport, EvalSettings, MethodReport, CSV_HEADER,
};
use hybrid_encoder::pipeline::model_config;
use hybrid_encoder::serving::{build_ad_store, Method};
use hybrid_encoder::HybridModel;
use proptest::prelude::*;

fn hits(ids_scores: &[(u64, f64)]) -> Vec<Hit> {
    ids_scores.iter().map(|&(a, s)| Hit { ad: AdId(a), score: s }).collect()
}

#[test]
fn rank_follows_scores_with_ties_by_id() {
    let cands = hits(&[(5, 0.0), (3, 0.0), (9, 0.0), (1, 0.0)]);
    let scores = [0.2, 0.9, 0.2, -1.0];
    assert_eq!(rank_of(&cands, &scores, AdId(3)), Some(0));
    assert_eq!(rank_of(&cands, &scores, AdId(5)), Some(1));
    assert_eq!(rank_of(&cands, &scores, AdId(9)), Some(2));
    assert_eq!(rank_of(&cands, &scores, AdId(1)), Some(3));
    assert_eq!(rank_of(&cands, &scores, AdId(42)), None);
}

#[test]
fn hit_rates_count_by_hand() {
    let ranks = [Some(0), Some(2), None, Some(4), Some(1)];
    let r = hit_rates(&ranks, &[1, 3, 5]);
    assert_eq!(r, vec![(1, 0.2), (3, 0.6), (5, 0.8)]);
}

#[test]
fn nearest_rank_percentile() {
    let v: Vec<f64> = (1..=20).map(f64::from).collect();
    assert_eq!(p95(&v), 19.0);
    assert_eq!(p95(&[3.0]), 3.0);
    assert_eq!(p95(&[]), 0.0);
    let v: Vec<f64> = (1..=100).rev().map(f64::from).collect();
    assert_eq!(p95(&v), 95.0);
}

#[test]
fn subset_is_seeded_sorted_and_bounded() {
    assert_eq!(eval_subset(10, 0, 1), (0..10).collect::<Vec<_>>());
    let a = eval_subset(1000, 50, 7);
    assert_eq!(a, eval_subset(1000, 50, 7));
    assert_ne!(a, eval_subset(1000, 50, 8));
    assert_eq!(a.len(), 50);
    assert!(a.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn standalone_cost_model() {
    for c in [25, 50, 100, 200] {
        assert_eq!(standalone_passes(Method::Siamese, c), 1);
        assert_eq!(standalone_passes(Method::Hybrid, c), 2);
        assert_eq!(standalone_passes(Method::Cross, c), 1 + c as u64);
    }
}

fn report_strategy() -> impl Strategy<Value = EvalReport> {
    let method = prop_oneof![Just(Method::Siamese), Just(Method::Hybrid), Just(Method::Cross)];
    let mr = (method, prop::array::uniform3(0.0..1.0f64), 1.0..300.0f64, 0.0..1e4f64, 0.0..1e4f64).prop_map(
        |(method, h, passes, mean_ms, p95_ms)| MethodReport {
            method,
            hits: vec![(1, h[0]), (3, h[1]), (5, h[2])],
            mean_passes: passes,
            mean_ms,
            p95_ms,
        },
    );
    (1usize..500, prop::collection::vec(mr, 1..4)).prop_map(|(c, methods)| EvalReport {
        candidates: c,
        interactions: 10,
        retrieval_recall: 0.5,
        methods,
    })
}

proptest! {
    #[test]
    fn csv_round_trips(reports in prop::collection::vec(report_strategy(), 1..4)) {
        let text = to_csv(&reports);
        prop_assert!(text.starts_with(CSV_HEADER));
        let rows = parse_csv(&text).unwrap();
        let flat: Vec<(&EvalReport, &MethodReport)> =
            reports.iter().flat_map(|r| r.methods.iter().map(move |m| (r, m))).collect();
        prop_assert_eq!(rows.len(), flat.len());
        for (row, (r, m)) in rows.iter().zip(flat) {
            prop_assert_eq!(row.method, m.method);
            prop_assert_eq!(row.candidates, r.candidates);
            prop_assert_eq!(row.hit1, m.hit(1).unwrap());
            prop_assert_eq!(row.hit3, m.hit(3).unwrap());
            prop_assert_eq!(row.hit5, m.hit(5).unwrap());
            prop_assert_eq!(row.passes, m.mean_passes);
            prop_assert_eq!(row.mean_ms, m.mean_ms);
            prop_assert_eq!(row.p95_ms, m.p95_ms);
        }
    }
}

#[test]
fn csv_rejects_malformed_input() {
    assert!(parse_csv("method,foo\n").is_err());
    assert!(parse_csv(&format!("{CSV_HEADER}\nhybrid,1,2\n")).is_err());
    assert!(parse_csv(&format!("{CSV_HEADER}\nbogus,1,0,0,0,1,1,1\n")).is_err());
    assert!(parse_csv(&format!("{CSV_HEADER}\n")).unwrap().is_empty());
}

#[test]
fn evaluation_and_benchmark_on_a_small_corpus() {
    let cfg = common::tiny_run(5);
    let corpus = generate_synthetic(&cfg.data).unwrap();
    let model = HybridModel::init(&model_config(&cfg, &corpus), 5).unwrap();
    let store = build_ad_store(&model, &corpus, &cfg.index, 5).unwrap();
    let settings = EvalSettings::from_run(&cfg, &Method::ALL);
    let r = evaluate_hit_at_n(&model, &store, &corpus, &settings).unwrap();
    assert_eq!(r.interactions, corpus.eval().len());
    assert_eq!(r.method(Method::Siamese).unwrap().mean_passes, 1.0);
    assert_eq!(r.method(Method::Hybrid).unwrap().mean_passes, 2.0);
    assert_eq!(r.method(Method::Cross).unwrap().mean_passes, 1.0 + cfg.candidates as f64);
    for m in Method::ALL {
        let h = r.method(m).unwrap();
        assert!(h.hits.windows(2).all(|w| w[0].1 <= w[1].1));
        assert!(h.hit(1).unwrap() <= r.retrieval_recall);
    }
    let again = evaluate_hit_at_n(&model, &store, &corpus, &settings).unwrap();
    assert_eq!(r.without_timing(), again.without_timing());

    let b = benchmark(&model, &store, &corpus, &settings, &[5, 10]).unwrap();
    assert_eq!(b.len(), 2);
    let rows = parse_csv(&to_csv(&b)).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().any(|r| r.method == Method::Cross && r.candidates == 10 && r.passes == 11.0));
}

#[test]
fn degree_sweep_keeps_retrieval_fixed() {
    let cfg = common::tiny_run(6);
    let corpus = generate_synthetic(&cfg.data).unwrap();
    let rows = sweep_degree(&corpus, &cfg, &[1, 2, 3]).unwrap();
    assert_eq!(rows.iter().map(|r| r.degree).collect::<Vec<_>>(), vec![1, 2, 3]);
    let first = rows[0].report.method(Method::Siamese).unwrap().hits.clone();
    for r in &rows {
        assert_eq!(r.report.method(Method::Siamese).unwrap().hits, first);
        assert_eq!(r.report.retrieval_recall, rows[0].report.retrieval_recall);
    }
    let table = sweep_table(&rows, &[1, 5]);
    assert!(table.starts_with("degree,method,hit1,hit5\n"));
    assert_eq!(table.lines().count(), 1 + 2 * 3);
}
