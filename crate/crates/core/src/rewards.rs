//! Sequence-level verifiable rewards: strict-format, correctness, annealed
//! tool use and the no-tool penalty, combined into the composite reward.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::label_matches;
use crate::scalar::{clip, Scalar};
use crate::schema::{AnswerValue, Family, Quantity, StrictVerdict, TraitField};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub w_json: f64,
    pub w_corr: f64,
    pub w_tool: f64,
    pub w_nt: f64,
    /// Attention-shaping slot; must stay 0.
    pub w_attn: f64,
    /// Constant external reward added to the composite.
    pub external: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights { w_json: 0.5, w_corr: 1.0, w_tool: 1.0, w_nt: 1.0, w_attn: 0.0, external: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolSchedule {
    pub t_init: f64,
    pub t_final: f64,
}

impl Default for ToolSchedule {
    fn default() -> Self {
        ToolSchedule { t_init: 4.0, t_final: 2.0 }
    }
}

impl ToolSchedule {
    /// Target call count at training progress `p` in [0, 1].
    pub fn target(&self, progress: f64) -> f64 {
        annealed_target(self.t_init, self.t_final, progress)
    }
}

/// Per-quantity scales.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantityScales {
    pub temperature: f64,
    pub ph: f64,
    pub salinity: f64,
}

impl QuantityScales {
    pub fn get(&self, q: Quantity) -> f64 {
        match q {
            Quantity::Temperature => self.temperature,
            Quantity::Ph => self.ph,
            Quantity::Salinity => self.salinity,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectnessConfig {
    /// Weight of the excess-width penalty for interval answers.
    pub compactness_lambda: f64,
    pub interval_scales: QuantityScales,
    pub optimum_scales: QuantityScales,
}

impl Default for CorrectnessConfig {
    fn default() -> Self {
        CorrectnessConfig {
            compactness_lambda: 0.25,
            interval_scales: QuantityScales { temperature: 40.0, ph: 7.0, salinity: 15.0 },
            optimum_scales: QuantityScales { temperature: 10.0, ph: 2.0, salinity: 5.0 },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub weights: RewardWeights,
    pub schedule: ToolSchedule,
    pub correctness: CorrectnessConfig,
}

#[derive(Debug, Error, PartialEq)]
pub enum RewardConfigError {
    #[error("attention reward weight must be 0, got {0}")]
    AttentionWeight(f64),
    #[error("reward weight `{0}` is not finite")]
    NonFinite(&'static str),
    #[error("tool schedule targets must be positive (t_init={0}, t_final={1})")]
    Schedule(f64, f64),
    #[error("scale `{0}` must be positive")]
    Scale(&'static str),
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardConfigError> {
        let w = &self.weights;
        for (name, v) in [
            ("w_json", w.w_json),
            ("w_corr", w.w_corr),
            ("w_tool", w.w_tool),
            ("w_nt", w.w_nt),
            ("external", w.external),
        ] {
            if !v.is_finite() {
                return Err(RewardConfigError::NonFinite(name));
            }
        }
        if w.w_attn != 0.0 {
            return Err(RewardConfigError::AttentionWeight(w.w_attn));
        }
        let s = &self.schedule;
        if !(s.t_init > 0.0 && s.t_final > 0.0) {
            return Err(RewardConfigError::Schedule(s.t_init, s.t_final));
        }
        let c = &self.correctness;
        for (name, v) in [
            ("interval.temperature", c.interval_scales.temperature),
            ("interval.ph", c.interval_scales.ph),
            ("interval.salinity", c.interval_scales.salinity),
            ("optimum.temperature", c.optimum_scales.temperature),
            ("optimum.ph", c.optimum_scales.ph),
            ("optimum.salinity", c.optimum_scales.salinity),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(RewardConfigError::Scale(name));
            }
        }
        if !(c.compactness_lambda >= 0.0 && c.compactness_lambda.is_finite()) {
            return Err(RewardConfigError::Scale("compactness_lambda"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_json: f64,
    pub r_corr: f64,
    pub r_tool: f64,
    pub r_nt: f64,
    pub external: f64,
    pub composite: f64,
    pub weights: RewardWeights,
}

/// +1 for a valid strict verdict, −1 otherwise.
pub fn json_format_reward(verdict: &StrictVerdict) -> f64 {
    if verdict.valid {
        1.0
    } else {
        -1.0
    }
}

pub fn annealed_target<T: Scalar>(t_init: T, t_final: T, progress: T) -> T {
    let p = clip(progress, T::zero(), T::one());
    t_init + p * (t_final - t_init)
}

/// Piecewise tool-use reward for `calls` calls against target `t`.
pub fn tool_use_reward_at<T: Scalar>(calls: usize, t: T) -> T {
    if calls == 0 {
        return -T::one();
    }
    let c = T::from_usize(calls).expect("call count fits");
    if c <= t {
        T::lit(0.25) + T::lit(0.75) * (c / t).sqrt()
    } else {
        T::lit(0.25).max(T::one() - T::lit(0.5) * (c - t) / t)
    }
}

pub fn tool_use_reward(calls: usize, progress: f64, sched: &ToolSchedule) -> f64 {
    tool_use_reward_at(calls, sched.target(progress))
}

/// −1 for a wrong or zero-credit answer given without any tool call.
pub fn no_tool_penalty(calls: usize, r_corr: f64) -> f64 {
    if calls == 0 && r_corr <= 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Coverage fraction mapped to [−1, 1], minus a width penalty.
pub fn interval_reward<T: Scalar>(pred: (T, T), truth: (T, T), scale: T, lambda: T) -> T {
    let (pl, pu) = pred;
    let (tl, tu) = truth;
    let truth_len = tu - tl;
    if truth_len <= T::zero() {
        return if pl <= tl && pu >= tu { T::one() } else { -T::one() };
    }
    let overlap = (pu.min(tu) - pl.max(tl)).max(T::zero());
    let excess = (pu - pl) - overlap;
    let two = T::lit(2.0);
    clip(two * overlap / truth_len - T::one() - lambda * excess / scale, -T::one(), T::one())
}

/// `1 − 2·min(|err| / scale, 1)`.
pub fn optimum_reward<T: Scalar>(pred_mid: T, truth_mid: T, scale: T) -> T {
    T::one() - T::lit(2.0) * ((pred_mid - truth_mid).abs() / scale).min(T::one())
}

/// Micro-F1 between the first five predictions (as a set) and the truth set.
pub fn micro_f1_at_5(field: &TraitField, pred: &[String], truth: &[String]) -> f64 {
    let top: HashSet<String> = field
        .dedupe_ranked(pred.iter().map(String::as_str))
        .into_iter()
        .take(5)
        .map(|l| field.canonicalize(&l).map(str::to_string).unwrap_or(l))
        .collect();
    let truth: HashSet<String> =
        truth.iter().map(|l| field.canonicalize(l).map(str::to_string).unwrap_or_else(|| l.clone())).collect();
    if top.is_empty() && truth.is_empty() {
        return 1.0;
    }
    let tp = top.intersection(&truth).count() as f64;
    2.0 * tp / (top.len() + truth.len()) as f64
}

/// Family-dispatched correctness in [−1, 1]; absent predictions get −1.
pub fn correctness_reward(
    field: &TraitField,
    pred: Option<&AnswerValue>,
    truth: &AnswerValue,
    cfg: &CorrectnessConfig,
) -> f64 {
    let Some(pred) = pred else { return -1.0 };
    if !field.validate(pred).valid {
        return -1.0;
    }
    match field.family() {
        Family::Interval => {
            let (AnswerValue::Interval { lower: pl, upper: pu }, AnswerValue::Interval { lower: tl, upper: tu }) =
                (pred, truth)
            else {
                return -1.0;
            };
            let scale = field.id.quantity().map_or(1.0, |q| cfg.interval_scales.get(q));
            interval_reward((*pl, *pu), (*tl, *tu), scale, cfg.compactness_lambda)
        }
        Family::Optimum => match (pred.midpoint(), truth.midpoint()) {
            (Some(p), Some(t)) => {
                let scale = field.id.quantity().map_or(1.0, |q| cfg.optimum_scales.get(q));
                optimum_reward(p, t, scale)
            }
            _ => -1.0,
        },
        Family::Categorical | Family::Boolean => {
            if label_matches(field, pred, truth) {
                1.0
            } else {
                -1.0
            }
        }
        Family::MultiLabel => match (pred, truth) {
            (AnswerValue::Ranked(p), AnswerValue::Ranked(t)) => 2.0 * micro_f1_at_5(field, p, t) - 1.0,
            _ => -1.0,
        },
    }
}

/// Component values before weighting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardParts {
    pub r_json: f64,
    pub r_corr: f64,
    pub r_tool: f64,
    pub r_nt: f64,
}

pub fn composite_reward(parts: RewardParts, weights: &RewardWeights) -> RewardBreakdown {
    let composite = weights.w_json * parts.r_json
        + weights.w_corr * parts.r_corr
        + weights.w_tool * parts.r_tool
        + weights.w_nt * parts.r_nt
        + weights.external;
    RewardBreakdown {
        r_json: parts.r_json,
        r_corr: parts.r_corr,
        r_tool: parts.r_tool,
        r_nt: parts.r_nt,
        external: weights.external,
        composite,
        weights: *weights,
    }
}

/// Scores a final answer text with `calls` tool calls at training progress
/// `progress`. Parse failures are in-band (`r_json = −1`).
pub fn score_answer(
    field: &TraitField,
    answer_text: Option<&str>,
    truth: &AnswerValue,
    calls: usize,
    progress: f64,
    cfg: &RewardConfig,
) -> RewardBreakdown {
    let (verdict, parsed) = match answer_text {
        Some(text) => field.parse_final_answer(text),
        None => (StrictVerdict::fail(crate::schema::FailureReason::NotJson), None),
    };
    let r_json = json_format_reward(&verdict);
    let r_corr = correctness_reward(field, parsed.as_ref(), truth, &cfg.correctness);
    let r_tool = tool_use_reward(calls, progress, &cfg.schedule);
    let r_nt = no_tool_penalty(calls, r_corr);
    composite_reward(RewardParts { r_json, r_corr, r_tool, r_nt }, &cfg.weights)
}
