mod common;

use common::fixtures::*;

use std::cmp::Ordering;

use genotrait::distill::{
    compare_scores, distill_all, distill_bundle, merge_repair, rank_candidates, retry_decision, score_trajectory,
    CandidateBundle, DistillError, TieBreak, TrajectoryScore,
};
use genotrait::env::tokenizer::Tokenizer;
use genotrait::env::{call_text, run_rollout, Prompt, RolloutConfig, ScriptedAgent, ToolEnv, GEM_TOOL, RAG_TOOL};
use genotrait::gem::{GemService, ModelSet};
use genotrait::rewards::CorrectnessConfig;
use genotrait::schema::{AnswerValue, FieldId, Schema};
use proptest::prelude::*;
use serde_json::json;

const BUNDLES: &str = "tests/data/distill_bundles.jsonl";
const DECISIONS: &str = "tests/data/distill_decisions.jsonl";

fn decision_lines(bundles: &[CandidateBundle]) -> String {
    distill_all(bundles, &CorrectnessConfig::default())
        .into_iter()
        .map(|r| serde_json::to_string(&r.unwrap().decision).unwrap() + "\n")
        .collect()
}

/// `GENOTRAIT_BLESS=1` rewrites the fixtures from the generator.
#[test]
fn golden_decisions_are_byte_stable() {
    let root = env!("CARGO_MANIFEST_DIR");
    if std::env::var("GENOTRAIT_BLESS").is_ok() {
        let bundles = generate_bundles(50);
        let text: String = bundles.iter().map(|b| serde_json::to_string(b).unwrap() + "\n").collect();
        std::fs::write(format!("{root}/{BUNDLES}"), text).unwrap();
        std::fs::write(format!("{root}/{DECISIONS}"), decision_lines(&bundles)).unwrap();
    }
    let bundles: Vec<CandidateBundle> = std::fs::read_to_string(format!("{root}/{BUNDLES}"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(bundles.len(), 50);
    assert_eq!(bundles, generate_bundles(50));
    let golden = std::fs::read_to_string(format!("{root}/{DECISIONS}")).unwrap();
    assert_eq!(decision_lines(&bundles), golden);
    assert_eq!(decision_lines(&bundles), decision_lines(&bundles));
}

#[test]
fn golden_set_exercises_the_chain() {
    let bundles = generate_bundles(50);
    let sel: Vec<_> = distill_all(&bundles, &CorrectnessConfig::default()).into_iter().map(Result::unwrap).collect();
    let levels: std::collections::BTreeSet<TieBreak> = sel.iter().map(|s| s.decision.decided_by).collect();
    assert!(levels.len() >= 4, "{levels:?}");
    assert!(sel.iter().any(|s| s.decision.retry.retry));
    assert!(sel.iter().any(|s| s.decision.repair.as_ref().is_some_and(|r| r.applied)));
    assert!(sel.iter().any(|s| s.decision.repair.as_ref().is_some_and(|r| !r.applied)));
}

#[test]
fn repair_preserves_tool_trace_bytes() {
    for bundle in generate_bundles(50) {
        let tf = Schema::builtin().field(bundle.field);
        let fixed = tf.serialize_answer(&bundle.truth);
        for traj in &bundle.candidates {
            let Some(span) = traj.answer_span else {
                assert!(matches!(merge_repair(traj, &fixed), Err(DistillError::NoAnswerSpan)));
                continue;
            };
            let out = merge_repair(traj, &fixed).unwrap();
            assert!(out.repaired);
            assert_eq!(out.final_answer_text.as_deref(), Some(fixed.as_str()));
            assert_eq!(
                serde_json::to_string(&out.tool_calls).unwrap(),
                serde_json::to_string(&traj.tool_calls).unwrap()
            );
            assert_eq!(out.turns.len(), traj.turns.len());
            for (i, (a, b)) in traj.turns.iter().zip(&out.turns).enumerate() {
                if i != span.turn {
                    assert_eq!(serde_json::to_string(a).unwrap(), serde_json::to_string(b).unwrap());
                }
            }
            let (old, new) = (&traj.turns[span.turn], &out.turns[span.turn]);
            assert_eq!(old.token_ids[..span.start], new.token_ids[..span.start]);
            let new_end = out.answer_span.unwrap().end;
            assert_eq!(old.token_ids[span.end..], new.token_ids[new_end..]);
            assert_eq!(out.strain_id, traj.strain_id);
            assert_eq!(out.gene, traj.gene);
        }
    }
}

#[test]
fn repair_of_correct_answer_only_sets_flag() {
    let bundles = generate_bundles(10);
    let b = &bundles[0];
    let traj = b.candidates.iter().find(|t| t.answer_span.is_some()).unwrap();
    let text = traj.final_answer_text.clone().unwrap();
    if Schema::builtin().field(b.field).parse_final_answer(&text).0.valid {
        let out = merge_repair(traj, &text).unwrap();
        let mut expected = traj.clone();
        expected.repaired = true;
        assert_eq!(out, expected);
    }
}

#[test]
fn repair_rejects_non_strict_text() {
    let bundles = generate_bundles(5);
    let traj = bundles[0].candidates.iter().find(|t| t.answer_span.is_some()).unwrap();
    let err = merge_repair(traj, r#"{"gram_stain":"negative","note":"x"}"#).unwrap_err();
    assert!(matches!(err, DistillError::RepairRejected(_)));
}

#[test]
fn fenced_correct_answer_scores_parse_ok_only() {
    let store = bundle_store();
    let gem = GemService::new(&ModelSet::builtin());
    let tools = ToolEnv::new(&store, &gem);
    let tf = Schema::builtin().field(FieldId::GramStain);
    let tok = Tokenizer::for_field(tf);
    let prompt = Prompt { strain_id: "G0".into(), field: FieldId::GramStain, gene: vec![0.1; 4] };
    let fenced = "```json\n{\"gram_stain\":\"negative\"}\n```";
    let agent = ScriptedAgent::new([call_text(GEM_TOOL, &json!({"config_id": 0})), fenced.to_string()]);
    let t = run_rollout(&agent, &prompt, &tools, &tok, &RolloutConfig::default(), 0);
    let s = score_trajectory(&t, &AnswerValue::label("negative"), tf, &CorrectnessConfig::default());
    assert!(!s.strict_json && s.parse_ok);
    assert_eq!(s.correctness, -1.0);
    assert_eq!(s.tool_errors, 1);
    assert_eq!(s.evidence_quality, 0.0);
}

#[test]
fn clean_tool_calls_score_full_evidence() {
    let store = bundle_store();
    let gem = GemService::new(&ModelSet::builtin());
    let tools = ToolEnv::new(&store, &gem);
    let tf = Schema::builtin().field(FieldId::PhRange);
    let tok = Tokenizer::for_field(tf);
    let prompt = Prompt { strain_id: "G1".into(), field: FieldId::PhRange, gene: vec![0.1; 4] };
    let truth = AnswerValue::interval(6.0, 8.0);
    let agent = ScriptedAgent::new([
        call_text(RAG_TOOL, &json!({"handle": "self"})),
        call_text(GEM_TOOL, &json!({"config_id": 7})),
        tf.serialize_answer(&truth),
    ]);
    let t = run_rollout(&agent, &prompt, &tools, &tok, &RolloutConfig::default(), 0);
    let s = score_trajectory(&t, &truth, tf, &CorrectnessConfig::default());
    assert_eq!((s.correctness, s.tool_errors, s.non_error_tool_calls), (1.0, 0, 2));
    assert_eq!(s.evidence_quality, 1.0);
    assert!(s.used_rag && s.used_gem && s.strict_json);
    assert!(!retry_decision(FieldId::PhRange, &s).retry);
}

#[test]
fn bundle_with_mismatched_field_is_reported() {
    let mut b = generate_bundles(2).remove(1);
    b.field = FieldId::GramStain;
    assert!(matches!(distill_bundle(&b, &CorrectnessConfig::default()), Err(DistillError::Bundle { .. })));
    b.candidates.clear();
    b.field = FieldId::PhRange;
    assert!(distill_bundle(&b, &CorrectnessConfig::default()).is_err());
}

fn arb_score() -> impl Strategy<Value = TrajectoryScore> {
    (
        prop::sample::select(vec![-1.0, 0.0, 0.5, 1.0]),
        any::<bool>(),
        any::<bool>(),
        prop::sample::select(vec![0.0, 0.5, 1.0]),
        0usize..3,
        0usize..3,
        0usize..3,
        any::<bool>(),
        any::<bool>(),
    )
        .prop_map(|(c, sj, po, eq, te, ne, len, rag, gem)| TrajectoryScore {
            correctness: c,
            strict_json: sj,
            parse_ok: po,
            evidence_quality: eq,
            tool_errors: te,
            non_error_tool_calls: ne,
            answer_length: len,
            used_rag: rag,
            used_gem: gem,
        })
}

proptest! {
    #[test]
    fn comparison_is_a_total_preorder(a in arb_score(), b in arb_score(), c in arb_score(), interval in any::<bool>()) {
        let field = if interval { FieldId::PhRange } else { FieldId::GramStain };
        let cmp = |x: &TrajectoryScore, y: &TrajectoryScore| compare_scores(x, y, field).0;
        prop_assert_eq!(cmp(&a, &b), cmp(&b, &a).reverse());
        prop_assert_eq!(cmp(&a, &a), Ordering::Equal);
        if cmp(&a, &b) != Ordering::Less && cmp(&b, &c) != Ordering::Less {
            prop_assert_ne!(cmp(&a, &c), Ordering::Less);
        }
    }

    #[test]
    fn winner_is_maximal_and_first(scores in prop::collection::vec(arb_score(), 1..8)) {
        let r = rank_candidates(&scores, FieldId::PhRange).unwrap();
        for (j, s) in scores.iter().enumerate() {
            let o = compare_scores(&scores[r.winner], s, FieldId::PhRange).0;
            prop_assert_ne!(o, Ordering::Less);
            if j < r.winner {
                prop_assert_eq!(o, Ordering::Greater);
            }
        }
    }

    #[test]
    fn perfect_interval_never_retries(s in arb_score()) {
        let perfect = TrajectoryScore { correctness: 1.0, ..s };
        prop_assert!(!retry_decision(FieldId::PhRange, &perfect).retry);
        prop_assert!(!retry_decision(FieldId::SalinityOpt, &perfect).retry);
    }
}
