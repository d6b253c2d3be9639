mod common;

use std::collections::BTreeSet;

use common::metric_oracle::ap_at_5_bruteforce;
use genotrait::metrics::{ap_at_5, interval_coverage_rate, rmse_optimum, EvalInstance};
use genotrait::schema::{AnswerValue, FieldId};
use proptest::prelude::*;
use serde::Deserialize;

#[derive(Deserialize)]
struct GoldenCase {
    name: String,
    metric: String,
    field: String,
    pairs: Vec<(Option<[f64; 2]>, [f64; 2])>,
    expected: Option<f64>,
    n: Option<usize>,
    failures: Option<usize>,
}

fn instances(case: &GoldenCase) -> Vec<EvalInstance> {
    let field = FieldId::from_name(&case.field).expect("golden field exists");
    case.pairs
        .iter()
        .enumerate()
        .map(|(i, (pred, truth))| EvalInstance {
            strain_id: format!("{}-{i}", case.name),
            field,
            truth: AnswerValue::interval(truth[0], truth[1]),
            prediction: pred.map(|p| AnswerValue::interval(p[0], p[1])),
        })
        .collect()
}

#[test]
fn icr_and_rmse_golden() {
    let cases: Vec<GoldenCase> = serde_json::from_str(include_str!("data/icr_rmse_golden.json")).unwrap();
    assert_eq!(cases.len(), 20);
    for case in &cases {
        let insts = instances(case);
        match case.metric.as_str() {
            "icr" => {
                let got = interval_coverage_rate(&insts).unwrap();
                assert!((got - case.expected.unwrap()).abs() <= 1e-9, "{}: {got}", case.name);
            }
            "rmse" => {
                let got = rmse_optimum(&insts).unwrap();
                match (got.value, case.expected) {
                    (Some(v), Some(e)) => assert!((v - e).abs() <= 1e-9, "{}: {v}", case.name),
                    (None, None) => {}
                    other => panic!("{}: {other:?}", case.name),
                }
                assert_eq!(Some(got.n), case.n, "{}", case.name);
                assert_eq!(Some(got.failures), case.failures, "{}", case.name);
            }
            other => panic!("unknown metric {other}"),
        }
    }
}

fn label_pool() -> Vec<String> {
    (0..8).map(|i| format!("l{i}")).collect()
}

fn ranked_and_truth() -> impl Strategy<Value = (Vec<String>, BTreeSet<String>)> {
    let pool = label_pool();
    (Just(pool.clone()).prop_shuffle(), 0usize..=8, proptest::sample::subsequence(pool, 0..=8))
        .prop_map(|(shuffled, k, truth)| (shuffled[..k].to_vec(), truth.into_iter().collect()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn ap_matches_prefix_precision_oracle((ranked, truth) in ranked_and_truth()) {
        let got = ap_at_5(&ranked, &truth);
        prop_assert_eq!(got.value, ap_at_5_bruteforce(&ranked, &truth));
        prop_assert_eq!(got.empty_truth, truth.is_empty());
        prop_assert!((0.0..=1.0).contains(&got.value));
    }
}

#[test]
fn ap_known_values() {
    let r = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let t = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
    assert_eq!(ap_at_5(&r(&["a", "b"]), &t(&["a", "b"])).value, 1.0);
    assert_eq!(ap_at_5(&r(&["x", "a"]), &t(&["a"])).value, 0.5);
    assert_eq!(ap_at_5(&r(&["x", "y", "z", "w", "v", "a"]), &t(&["a"])).value, 0.0);
}
