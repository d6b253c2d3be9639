//! Synthetic gene-dependent labeling task for the toy training loop.
//!
//! Each strain's gene vector is drawn around `±separation · u` for a hidden
//! unit direction `u`; the sign fixes the Gram stain label. Training strains
//! populate the retrieval store, but each stored phenotype is only correct
//! with probability `rag_reliability`, so copying neighbors caps accuracy.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::embedstore::{GenomeRecord, Store};
use crate::env::{call_text, Prompt, GEM_TOOL, RAG_TOOL, SELF_HANDLE};
use crate::schema::{AnswerValue, FieldId, Schema};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub n_train: usize,
    pub n_eval: usize,
    pub gene_dim: usize,
    pub separation: f64,
    pub noise: f64,
    pub rag_reliability: f64,
    /// Tool id used by the scripted demonstrations.
    pub demo_gem_config: u32,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            n_train: 256,
            n_eval: 200,
            gene_dim: 8,
            separation: 1.0,
            noise: 0.35,
            rag_reliability: 0.7,
            demo_gem_config: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskItem {
    pub prompt: Prompt,
    pub truth: AnswerValue,
}

#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub field: FieldId,
    pub labels: [String; 2],
    pub train: Vec<TaskItem>,
    pub eval: Vec<TaskItem>,
    pub store: Store,
    pub direction: Vec<f64>,
}

fn normal_vec(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn build_task(cfg: &TaskConfig, seed: u64) -> SyntheticTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = FieldId::GramStain;
    let all = Schema::builtin().field(field).labels();
    let labels = [all[0].clone(), all[1].clone()];

    let mut direction = normal_vec(&mut rng, cfg.gene_dim);
    let n = crate::scalar::norm(&direction);
    direction.iter_mut().for_each(|x| *x /= n);

    let make = |prefix: &str, count: usize, rng: &mut ChaCha8Rng| -> Vec<TaskItem> {
        let mut classes: Vec<usize> = (0..count).map(|i| i % 2).collect();
        classes.shuffle(rng);
        classes
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                let sign = if c == 0 { 1.0 } else { -1.0 };
                let noise = normal_vec(rng, cfg.gene_dim);
                let gene =
                    direction.iter().zip(&noise).map(|(u, z)| sign * cfg.separation * u + cfg.noise * z).collect();
                TaskItem {
                    prompt: Prompt { strain_id: format!("{prefix}{i:04}"), field, gene },
                    truth: AnswerValue::label(labels[c].clone()),
                }
            })
            .collect()
    };
    let train = make("T", cfg.n_train, &mut rng);
    let eval = make("E", cfg.n_eval, &mut rng);

    let records = train
        .iter()
        .map(|item| {
            let AnswerValue::Label(truth) = &item.truth else { unreachable!() };
            let stored = if rng.gen::<f64>() < cfg.rag_reliability {
                truth.clone()
            } else {
                labels.iter().find(|l| *l != truth).unwrap().clone()
            };
            GenomeRecord {
                strain_id: item.prompt.strain_id.clone(),
                embedding: item.prompt.gene.clone(),
                phenotypes: [(field.name().to_string(), AnswerValue::label(stored))].into_iter().collect(),
            }
        })
        .collect();
    let store = Store::load(records).expect("synthetic records are consistent");
    SyntheticTask { field, labels, train, eval, store, direction }
}

/// Scripted demonstration: retrieve, run one metabolic configuration, answer.
pub fn demo_segments(field: FieldId, label: &str, gem_config: u32) -> Vec<String> {
    let answer = Schema::builtin().field(field).serialize_answer(&AnswerValue::label(label));
    vec![
        call_text(RAG_TOOL, &json!({"handle": SELF_HANDLE})),
        call_text(GEM_TOOL, &json!({"config_id": gem_config})),
        answer,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_is_balanced_and_reproducible() {
        let cfg = TaskConfig::default();
        let a = build_task(&cfg, 5);
        let b = build_task(&cfg, 5);
        assert_eq!(a.train, b.train);
        let pos = a.train.iter().filter(|i| i.truth == AnswerValue::label("positive")).count();
        assert_eq!(pos, cfg.n_train / 2);
        assert_eq!(a.store.len(), cfg.n_train);
    }

    #[test]
    fn store_reliability_near_target() {
        let cfg = TaskConfig { n_train: 2000, ..Default::default() };
        let t = build_task(&cfg, 1);
        let agree = t
            .train
            .iter()
            .filter(|i| t.store.get(&i.prompt.strain_id).unwrap().phenotypes["gram_stain"] == i.truth)
            .count() as f64
            / 2000.0;
        assert!((agree - 0.7).abs() < 0.04, "{agree}");
    }

    #[test]
    fn gene_direction_separates_labels() {
        let t = build_task(&TaskConfig::default(), 2);
        let correct = t
            .eval
            .iter()
            .filter(|i| {
                let s: f64 = i.prompt.gene.iter().zip(&t.direction).map(|(a, b)| a * b).sum();
                (s > 0.0) == (i.truth == AnswerValue::label("positive"))
            })
            .count();
        assert!(correct as f64 / t.eval.len() as f64 > 0.97);
    }

    #[test]
    fn demo_text_is_canonical() {
        let d = demo_segments(FieldId::GramStain, "negative", 7);
        assert_eq!(d[1], r#"<tool_call>{"name":"gem_tool","arguments":{"config_id":7}}</tool_call>"#);
        assert_eq!(d[2], r#"{"gram_stain":"negative"}"#);
    }
}
