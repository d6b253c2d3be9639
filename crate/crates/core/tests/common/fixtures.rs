//! Shared scripted agents and candidate-bundle generator.

use genotrait::distill::CandidateBundle;
use genotrait::embedstore::{GenomeRecord, Store};
use genotrait::env::tokenizer::Tokenizer;
use genotrait::env::{
    call_text, run_rollout, text_segment, Agent, Origin, Prompt, Role, RolloutConfig, ScriptedAgent, Segment, ToolEnv,
    Trajectory, GEM_TOOL, RAG_TOOL, SELF_HANDLE,
};
use genotrait::gem::{GemService, ModelSet};
use genotrait::grpo::{assemble_token_advantages, AdvantageConfig};
use genotrait::schema::{AnswerValue, FieldId, Schema};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

/// Emits a tool call in every segment, choosing tool, arguments, optional
/// leading prose and occasional malformed JSON from the rollout RNG.
pub struct RandomCaller;

impl Agent for RandomCaller {
    fn generate(
        &self,
        _stream: &[u32],
        _gene: &[f64],
        _segment_index: usize,
        tok: &Tokenizer,
        _cfg: &RolloutConfig,
        rng: &mut ChaCha8Rng,
    ) -> Segment {
        let prefix = match rng.gen_range(0..3) {
            0 => "",
            1 => "thinking ",
            _ => r#"{"gram_stain":"negative"}"#,
        };
        let call = match rng.gen_range(0..4) {
            0 => call_text(RAG_TOOL, &json!({"handle": SELF_HANDLE})),
            1 => call_text(GEM_TOOL, &json!({"config_id": rng.gen_range(0..22)})),
            2 => call_text(RAG_TOOL, &json!({"handle": format!("S{}", rng.gen_range(0..5))})),
            _ => "<tool_call>{\"name\": oops}</tool_call>".to_string(),
        };
        text_segment(format!("{prefix}{call}"), tok)
    }
}

pub fn rollout_fixture() -> (Store, GemService, Tokenizer) {
    let records = (0..4)
        .map(|i| GenomeRecord {
            strain_id: format!("S{i}"),
            embedding: vec![1.0, i as f64 * 0.3, -0.2],
            phenotypes: [(
                "gram_stain".to_string(),
                AnswerValue::label(if i % 2 == 0 { "negative" } else { "positive" }),
            )]
            .into_iter()
            .collect(),
        })
        .collect();
    let store = Store::load(records).unwrap();
    let tok = Tokenizer::for_field(Schema::builtin().field(FieldId::GramStain));
    (store, GemService::new(&ModelSet::builtin()), tok)
}

pub fn check_masks(t: &Trajectory, rng: &mut ChaCha8Rng) {
    let m = t.build_policy_mask();
    let mut offset = 0;
    for turn in &t.turns {
        let generated = turn.origin == Origin::ModelGenerated;
        assert_eq!(generated, turn.role == Role::Assistant);
        for i in offset..offset + turn.token_ids.len() {
            assert_eq!(m.policy[i], generated);
        }
        offset += turn.token_ids.len();
    }
    assert_eq!(offset, t.num_tokens());
    for i in 0..offset {
        assert!(!(m.answer[i] && m.tool_call[i]));
        assert!(!m.answer[i] || m.policy[i]);
        assert!(!m.tool_call[i] || m.policy[i]);
    }
    let gene_vals: Vec<f64> = (0..offset).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let adv = assemble_token_advantages(
        t,
        rng.gen_range(-3.0..3.0),
        rng.gen_range(-1.0..1.0),
        &gene_vals,
        &AdvantageConfig::default(),
    )
    .unwrap();
    for i in 0..offset {
        if !m.policy[i] {
            assert_eq!(adv.total[i], 0.0);
        }
    }
}

pub const FIELDS: [FieldId; 5] =
    [FieldId::GramStain, FieldId::PhRange, FieldId::GrowthTemperatureOpt, FieldId::CarbonSource, FieldId::Motility];

pub fn truth_for(field: FieldId, rng: &mut ChaCha8Rng) -> AnswerValue {
    let labels = Schema::builtin().field(field).labels().to_vec();
    match field {
        FieldId::PhRange => {
            let lo = rng.gen_range(4..8) as f64;
            AnswerValue::interval(lo, lo + rng.gen_range(1..4) as f64)
        }
        FieldId::GrowthTemperatureOpt => AnswerValue::point(rng.gen_range(20..45) as f64),
        FieldId::CarbonSource => AnswerValue::ranked(labels.choose_multiple(rng, 2).cloned()),
        FieldId::Motility => AnswerValue::Bool(rng.gen_bool(0.5)),
        _ => AnswerValue::label(labels.choose(rng).unwrap().clone()),
    }
}

pub fn wrong_for(field: FieldId, truth: &AnswerValue, rng: &mut ChaCha8Rng) -> AnswerValue {
    match (field, truth) {
        (FieldId::PhRange, AnswerValue::Interval { lower, upper }) => {
            AnswerValue::interval(lower + rng.gen_range(1..3) as f64 * 0.5, upper + 1.0)
        }
        (FieldId::GrowthTemperatureOpt, AnswerValue::Interval { lower, .. }) => {
            AnswerValue::point(lower + rng.gen_range(1..6) as f64)
        }
        (FieldId::Motility, AnswerValue::Bool(b)) => AnswerValue::Bool(!b),
        _ => loop {
            let t = truth_for(field, rng);
            if &t != truth {
                break t;
            }
        },
    }
}

pub fn bundle_store() -> Store {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let records = (0..6)
        .map(|i| GenomeRecord {
            strain_id: format!("G{i}"),
            embedding: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            phenotypes: FIELDS.iter().map(|&f| (f.name().to_string(), truth_for(f, &mut rng))).collect(),
        })
        .collect();
    Store::load(records).unwrap()
}

/// Deterministic candidate bundles mixing protocols, answer quality and
/// repair requests.
pub fn generate_bundles(n: usize) -> Vec<CandidateBundle> {
    let store = bundle_store();
    let gem = GemService::new(&ModelSet::builtin());
    let tools = ToolEnv::new(&store, &gem);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    (0..n)
        .map(|s| {
            let field = FIELDS[s % FIELDS.len()];
            let tf = Schema::builtin().field(field);
            let tok = Tokenizer::for_field(tf);
            let truth = truth_for(field, &mut rng);
            let prompt = Prompt {
                strain_id: format!("G{}", s % 6),
                field,
                gene: store.get(&format!("G{}", s % 6)).unwrap().embedding.clone(),
            };
            let n_cand = rng.gen_range(1..=4);
            let candidates = (0..n_cand)
                .map(|c| {
                    let rag = call_text(RAG_TOOL, &json!({"handle": "self"}));
                    let gem_ok = call_text(GEM_TOOL, &json!({"config_id": rng.gen_range(1..=18)}));
                    let gem_bad = call_text(GEM_TOOL, &json!({"config_id": 0}));
                    let mut segs: Vec<String> = match rng.gen_range(0..6) {
                        0 => vec![],
                        1 => vec![rag.clone()],
                        2 => vec![rag.clone(), gem_ok.clone()],
                        3 => vec![rag.clone(), gem_bad],
                        4 => vec![gem_ok.clone(), gem_ok],
                        _ => vec![rag.clone(), gem_ok.clone(), rag],
                    };
                    let value = if rng.gen_bool(0.5) { truth.clone() } else { wrong_for(field, &truth, &mut rng) };
                    let strict = tf.serialize_answer(&value);
                    segs.push(match rng.gen_range(0..5) {
                        0 => format!("```json\n{strict}\n```"),
                        1 => format!("Answer: {strict}"),
                        _ => strict,
                    });
                    run_rollout(&ScriptedAgent::new(segs), &prompt, &tools, &tok, &RolloutConfig::default(), c as u64)
                })
                .collect();
            let repair = match rng.gen_range(0..6) {
                0 => Some(tf.serialize_answer(&truth)),
                1 => Some(format!(r#"{{"{}":null}}"#, field.name())),
                _ => None,
            };
            CandidateBundle { sample_id: format!("sample-{s:03}"), field, truth, candidates, repair }
        })
        .collect()
}
