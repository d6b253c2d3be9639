//! Candidate-trajectory scoring, field-aware selection, retry planning and
//! answer-only repair.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::env::tokenizer::{Tokenizer, EOS};
use crate::env::{Trajectory, GEM_TOOL, RAG_TOOL};
use crate::rewards::{correctness_reward, CorrectnessConfig};
use crate::schema::{AnswerValue, Family, FieldId, Schema, TaskGroup, TraitField};

/// Name of the evidence-quality heuristic recorded in decision logs.
pub const EVIDENCE_HEURISTIC: &str = "clean_relevant_fraction_v1";

const PERFECT: f64 = 1.0 - 1e-9;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("no candidates to rank")]
    Empty,
    #[error("repair text fails the strict parse: {0:?}")]
    RepairRejected(crate::schema::FailureReason),
    #[error("trajectory has no final answer span to repair")]
    NoAnswerSpan,
    #[error("bundle `{sample_id}`: {message}")]
    Bundle { sample_id: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryScore {
    pub correctness: f64,
    pub strict_json: bool,
    pub parse_ok: bool,
    pub evidence_quality: f64,
    pub tool_errors: usize,
    pub non_error_tool_calls: usize,
    pub answer_length: usize,
    pub used_rag: bool,
    pub used_gem: bool,
}

/// Whether an observation carries usable content for `field`.
fn relevant_evidence(tool: &str, observation: &Value, field: &TraitField) -> bool {
    let obj = match observation.as_object() {
        Some(o) if o.get("error").is_none_or(Value::is_null) => o,
        _ => return false,
    };
    match tool {
        RAG_TOOL => obj
            .get("top_similar_records")
            .and_then(Value::as_array)
            .is_some_and(|recs| recs.iter().any(|r| r.get("phenotypes").and_then(|p| p.get(field.name())).is_some())),
        GEM_TOOL => {
            let non_empty = obj.get("minimal_substrate_dict").and_then(Value::as_object).is_some_and(|d| !d.is_empty());
            let gem_field = matches!(field.family(), Family::Interval | Family::Optimum)
                || field.id.group() == TaskGroup::SubstrateSource;
            non_empty && gem_field
        }
        _ => false,
    }
}

/// Scores one candidate. Correctness uses the strict parse only.
pub fn score_trajectory(
    traj: &Trajectory,
    truth: &AnswerValue,
    field: &TraitField,
    cfg: &CorrectnessConfig,
) -> TrajectoryScore {
    let text = traj.final_answer_text.as_deref();
    let (verdict, strict) = match text {
        Some(t) => field.parse_final_answer(t),
        None => (crate::schema::StrictVerdict::fail(crate::schema::FailureReason::NotJson), None),
    };
    let parse_ok = strict.is_some() || text.and_then(|t| field.best_effort_parse(t)).is_some();
    let calls = &traj.tool_calls;
    let relevant = calls.iter().filter(|c| !c.errored && relevant_evidence(&c.tool, &c.observation, field)).count();
    TrajectoryScore {
        correctness: correctness_reward(field, strict.as_ref(), truth, cfg),
        strict_json: verdict.valid,
        parse_ok,
        evidence_quality: if calls.is_empty() { 0.0 } else { relevant as f64 / calls.len() as f64 },
        tool_errors: calls.iter().filter(|c| c.errored).count(),
        non_error_tool_calls: calls.iter().filter(|c| !c.errored).count(),
        answer_length: text.map_or(0, |t| t.chars().count()),
        used_rag: traj.used_tool(RAG_TOOL),
        used_gem: traj.used_tool(GEM_TOOL),
    }
}

/// Comparison level in the selection chain, in order of precedence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    Correctness,
    ToolCoverage,
    StrictJson,
    ParseOk,
    EvidenceQuality,
    ToolErrors,
    NonErrorToolCalls,
    AnswerLength,
    /// Every level tied; the lower index wins.
    Index,
    /// Only one candidate.
    Single,
}

fn prefers_both_tools(field: FieldId) -> bool {
    matches!(field.family(), Family::Interval | Family::Optimum)
}

/// `Greater` when `a` outranks `b`, with the level that decided.
pub fn compare_scores(a: &TrajectoryScore, b: &TrajectoryScore, field: FieldId) -> (Ordering, TieBreak) {
    let both = |s: &TrajectoryScore| s.used_rag && s.used_gem;
    let levels = [
        (a.correctness.total_cmp(&b.correctness), TieBreak::Correctness),
        (if prefers_both_tools(field) { both(a).cmp(&both(b)) } else { Ordering::Equal }, TieBreak::ToolCoverage),
        (a.strict_json.cmp(&b.strict_json), TieBreak::StrictJson),
        (a.parse_ok.cmp(&b.parse_ok), TieBreak::ParseOk),
        (a.evidence_quality.total_cmp(&b.evidence_quality), TieBreak::EvidenceQuality),
        (b.tool_errors.cmp(&a.tool_errors), TieBreak::ToolErrors),
        (a.non_error_tool_calls.cmp(&b.non_error_tool_calls), TieBreak::NonErrorToolCalls),
        (b.answer_length.cmp(&a.answer_length), TieBreak::AnswerLength),
    ];
    levels.into_iter().find(|(o, _)| o.is_ne()).unwrap_or((Ordering::Equal, TieBreak::Index))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranking {
    pub winner: usize,
    /// Deepest level needed to separate the winner from any other candidate.
    pub decided_by: TieBreak,
}

pub fn rank_candidates(scores: &[TrajectoryScore], field: FieldId) -> Result<Ranking, DistillError> {
    if scores.is_empty() {
        return Err(DistillError::Empty);
    }
    let mut winner = 0;
    for i in 1..scores.len() {
        if compare_scores(&scores[i], &scores[winner], field).0 == Ordering::Greater {
            winner = i;
        }
    }
    let decided_by = (0..scores.len())
        .filter(|&j| j != winner)
        .map(|j| compare_scores(&scores[winner], &scores[j], field).1)
        .max()
        .unwrap_or(TieBreak::Single);
    Ok(Ranking { winner, decided_by })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForcedProtocol {
    pub rag_first: bool,
    pub min_gem_calls: usize,
}

impl ForcedProtocol {
    pub fn describe(&self) -> String {
        format!("call {RAG_TOOL} first, then {GEM_TOOL} at least {} time(s)", self.min_gem_calls)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPlan {
    pub retry: bool,
    pub forced_protocol: Option<ForcedProtocol>,
}

pub fn retry_decision(field: FieldId, best: &TrajectoryScore) -> RetryPlan {
    let imperfect = best.correctness < PERFECT;
    let retry = if prefers_both_tools(field) {
        imperfect
    } else if field.group() == TaskGroup::SubstrateSource {
        imperfect && !best.used_gem
    } else {
        imperfect && best.used_rag && !best.used_gem
    };
    let min_gem_calls = if prefers_both_tools(field) { 2 } else { 1 };
    RetryPlan { retry, forced_protocol: retry.then_some(ForcedProtocol { rag_first: true, min_gem_calls }) }
}

/// Copy of `traj` whose final answer is replaced by `corrected`; every other
/// turn, tool call and observation is left untouched.
pub fn merge_repair(traj: &Trajectory, corrected: &str) -> Result<Trajectory, DistillError> {
    let field = Schema::builtin().field(traj.field);
    let (verdict, _) = field.parse_final_answer(corrected);
    if let Some(reason) = verdict.failure_reason {
        return Err(DistillError::RepairRejected(reason));
    }
    let (Some(span), Some(old_text)) = (traj.answer_span, traj.final_answer_text.as_deref()) else {
        return Err(DistillError::NoAnswerSpan);
    };
    let tok = Tokenizer::for_field(field);
    let mut out = traj.clone();
    let turn = &mut out.turns[span.turn];
    let suffix = turn.text.strip_prefix(old_text).ok_or(DistillError::NoAnswerSpan)?.to_string();

    let mut ids = tok.encode(corrected);
    if span.end > span.start && turn.token_ids[span.end - 1] == EOS {
        ids.push(EOS);
    }
    let new_end = span.start + ids.len();
    let tail = turn.token_ids.split_off(span.end);
    turn.token_ids.truncate(span.start);
    turn.token_ids.extend(ids);
    turn.token_ids.extend(tail);
    if !turn.logprobs.is_empty() {
        let tail = turn.logprobs.split_off(span.end);
        turn.logprobs.truncate(span.start);
        turn.logprobs.resize(new_end, 0.0);
        turn.logprobs.extend(tail);
    }
    if let Some(cs) = turn.call_start.as_mut() {
        *cs = *cs + new_end - span.end;
    }
    turn.text = format!("{corrected}{suffix}");
    out.final_answer_text = Some(corrected.to_string());
    out.answer_span = Some(crate::env::AnswerSpan { end: new_end, ..span });
    out.repaired = true;
    Ok(out)
}

/// Candidates for one sample, as read from disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateBundle {
    pub sample_id: String,
    pub field: FieldId,
    pub truth: AnswerValue,
    pub candidates: Vec<Trajectory>,
    /// Corrected answer text to merge into the winner.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repair: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepairOutcome {
    pub applied: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub sample_id: String,
    pub field: FieldId,
    pub winner: usize,
    pub decided_by: TieBreak,
    pub scores: Vec<TrajectoryScore>,
    pub retry: RetryPlan,
    pub evidence_heuristic: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repair: Option<RepairOutcome>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub decision: Decision,
    /// Winner, repaired when a repair was supplied and accepted.
    pub trajectory: Trajectory,
}

pub fn distill_bundle(bundle: &CandidateBundle, cfg: &CorrectnessConfig) -> Result<Selection, DistillError> {
    let field = Schema::builtin().field(bundle.field);
    if let Some(c) = bundle.candidates.iter().find(|c| c.field != bundle.field) {
        return Err(DistillError::Bundle {
            sample_id: bundle.sample_id.clone(),
            message: format!("candidate for field `{}` in a `{}` bundle", c.field, bundle.field),
        });
    }
    let scores: Vec<TrajectoryScore> =
        bundle.candidates.iter().map(|c| score_trajectory(c, &bundle.truth, field, cfg)).collect();
    let ranking = rank_candidates(&scores, bundle.field)
        .map_err(|e| DistillError::Bundle { sample_id: bundle.sample_id.clone(), message: e.to_string() })?;
    let best = &bundle.candidates[ranking.winner];
    let (trajectory, repair) = match &bundle.repair {
        None => (best.clone(), None),
        Some(text) => match merge_repair(best, text) {
            Ok(t) => (t, Some(RepairOutcome { applied: true, error: None })),
            Err(e) => (best.clone(), Some(RepairOutcome { applied: false, error: Some(e.to_string()) })),
        },
    };
    Ok(Selection {
        decision: Decision {
            sample_id: bundle.sample_id.clone(),
            field: bundle.field,
            winner: ranking.winner,
            decided_by: ranking.decided_by,
            retry: retry_decision(bundle.field, &scores[ranking.winner]),
            scores,
            evidence_heuristic: EVIDENCE_HEURISTIC.to_string(),
            repair,
        },
        trajectory,
    })
}

/// Distills every bundle in parallel; results keep the input order.
pub fn distill_all(bundles: &[CandidateBundle], cfg: &CorrectnessConfig) -> Vec<Result<Selection, DistillError>> {
    bundles.par_iter().map(|b| distill_bundle(b, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(correctness: f64) -> TrajectoryScore {
        TrajectoryScore {
            correctness,
            strict_json: true,
            parse_ok: true,
            evidence_quality: 1.0,
            tool_errors: 0,
            non_error_tool_calls: 2,
            answer_length: 20,
            used_rag: true,
            used_gem: true,
        }
    }

    #[test]
    fn correctness_then_strict_json() {
        let mut c = score(1.0);
        c.strict_json = false;
        let r = rank_candidates(&[score(0.9), score(1.0), c], FieldId::GramStain).unwrap();
        assert_eq!(r, Ranking { winner: 1, decided_by: TieBreak::StrictJson });
    }

    #[test]
    fn interval_prefers_both_tools() {
        let mut rag_only = score(0.8);
        rag_only.used_gem = false;
        rag_only.answer_length = 5;
        let r = rank_candidates(&[rag_only.clone(), score(0.8)], FieldId::PhRange).unwrap();
        assert_eq!(r, Ranking { winner: 1, decided_by: TieBreak::ToolCoverage });
        let r = rank_candidates(&[rag_only, score(0.8)], FieldId::GramStain).unwrap();
        assert_eq!(r.winner, 0);
    }

    #[test]
    fn single_and_empty() {
        assert_eq!(rank_candidates(&[score(0.0)], FieldId::GramStain).unwrap().decided_by, TieBreak::Single);
        assert!(matches!(rank_candidates(&[], FieldId::GramStain), Err(DistillError::Empty)));
        let r = rank_candidates(&[score(0.5), score(0.5)], FieldId::GramStain).unwrap();
        assert_eq!(r, Ranking { winner: 0, decided_by: TieBreak::Index });
    }

    #[test]
    fn retry_rules() {
        let p = retry_decision(FieldId::PhRange, &score(0.7));
        assert!(p.retry);
        assert_eq!(p.forced_protocol.unwrap().min_gem_calls, 2);
        assert!(!retry_decision(FieldId::PhRange, &score(1.0)).retry);
        assert!(!retry_decision(FieldId::CarbonSource, &score(0.4)).retry);
        let mut no_gem = score(0.4);
        no_gem.used_gem = false;
        let p = retry_decision(FieldId::CarbonSource, &no_gem);
        assert_eq!(p.forced_protocol, Some(ForcedProtocol { rag_first: true, min_gem_calls: 1 }));
        assert!(retry_decision(FieldId::GramStain, &no_gem).retry);
        assert!(!retry_decision(FieldId::GramStain, &score(1.0)).retry);
        let mut no_tools = no_gem;
        no_tools.used_rag = false;
        assert!(!retry_decision(FieldId::GramStain, &no_tools).retry);
    }
}
